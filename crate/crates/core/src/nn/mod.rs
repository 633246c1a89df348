//! Dense f64 tensors with reverse-mode gradients and the layers built on them.

pub mod attention;
pub mod checkpoint;
mod conv;
pub mod gradcheck;
pub mod graph;
pub mod layers;
mod ops;
pub mod params;

pub use attention::{attention_weights, AttentionLayout};
pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use layers::{AttentionConfig, DepthwiseConv, FeedForward, LayerNorm, Linear, Mlp, MultiHeadAttention, WindowPartition};
pub use params::{Bindings, Init, ParameterStore};

pub(crate) use ops::sigmoid;
