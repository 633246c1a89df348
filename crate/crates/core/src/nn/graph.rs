//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with
//! a backward closure. Calling [`Graph::backward`] walks the tape in reverse
//! and returns the gradient of a scalar root with respect to every recorded
//! node. An inference graph ([`Graph::inference`]) records nothing, so
//! intermediate values are freed as soon as the last `Var` holding them is
//! dropped.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// Computes parent gradients from `(parent values, output value, output gradient)`.
pub type BackwardFn = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Option<Arc<Tensor>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    record: bool,
}

/// A value living on a [`Graph`].
#[derive(Clone)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
    requires_grad: bool,
    value: Arc<Tensor>,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.value.shape()).finish()
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A recording graph.
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), record: true }
    }

    /// A graph that evaluates forward passes only.
    pub fn inference() -> Self {
        Self { nodes: RefCell::new(Vec::new()), record: false }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.leaf_arc(Arc::new(value), true)
    }

    /// A constant: no gradient flows into it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf_arc(Arc::new(value), false)
    }

    pub(crate) fn leaf_arc(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        let requires_grad = requires_grad && self.record;
        let id = self.push_node(Node {
            value: self.record.then(|| value.clone()),
            parents: Vec::new(),
            backward: None,
        });
        Var { graph: self, id, requires_grad, value }
    }

    fn push_node(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Records a primitive. `backward` receives the parent values, the
    /// output value and the output gradient and returns one optional
    /// gradient per parent (same shapes as the parents).
    pub fn op<'g>(
        &'g self,
        value: Tensor,
        parents: &[&Var<'g>],
        backward: impl Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'g> {
        let value = Arc::new(value);
        let requires_grad = self.record && parents.iter().any(|p| p.requires_grad);
        let node = if requires_grad {
            Node {
                value: Some(value.clone()),
                parents: parents.iter().map(|p| p.id).collect(),
                backward: Some(Box::new(backward)),
            }
        } else {
            Node { value: self.record.then(|| value.clone()), parents: Vec::new(), backward: None }
        };
        let id = self.push_node(node);
        Var { graph: self, id, requires_grad, value }
    }

    /// Gradients of the scalar `root` with respect to every recorded node.
    pub fn backward(&self, root: &Var<'_>) -> Result<Gradients> {
        if root.value.numel() != 1 {
            return dim_err(format!("backward from non-scalar of shape {:?}", root.value.shape()));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.id] = Some(Tensor::new(root.value.shape().to_vec(), vec![1.0])?);
        for id in (0..=root.id).rev() {
            let Some(grad) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(backward) = &node.backward {
                let parent_values: Vec<&Tensor> = node
                    .parents
                    .iter()
                    .map(|&p| nodes[p].value.as_deref().expect("recorded parent value"))
                    .collect();
                let out = node.value.as_deref().expect("recorded value");
                let parent_grads = backward(&parent_values, out, &grad);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (i, (&p, g)) in node.parents.iter().zip(parent_grads).enumerate() {
                    let Some(g) = g else { continue };
                    debug_assert_eq!(g.shape(), parent_values[i].shape());
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            grads[id] = Some(grad);
        }
        Ok(Gradients { grads })
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros when no gradient reached it.
    pub fn get_or_zeros(&self, var: &Var<'_>) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape().to_vec()))
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// The value detached from the tape.
    pub fn detach(&self) -> Var<'g> {
        self.graph.leaf_arc(self.value.clone(), false)
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }
}
