pub mod camera;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod generate;
pub mod gaussians;
pub mod gie;
pub mod imageio;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod ply;
pub mod prompt;
pub mod renderer;
pub mod ted;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
