use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Gradients, Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Named parameters and their gradients. Iteration is in name order.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    params: BTreeMap<String, Arc<Tensor>>,
    grads: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.params.insert(name, Arc::new(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|t| t.as_ref())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(Arc::make_mut)
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return dim_err(format!("parameter `{name}` has shape {:?}, got {:?}", slot.shape(), value.shape()));
        }
        *slot = Arc::new(value);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Places every parameter on `graph` as a differentiable leaf.
    pub fn bind<'g>(&self, graph: &'g Graph) -> Bindings<'g> {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), graph.leaf_arc(v.clone(), true)))
            .collect();
        Bindings { vars }
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn zero_grads(&mut self) {
        self.grads.clear();
    }

    /// Adds the gradients reached by `bindings` into the store.
    pub fn accumulate_grads(&mut self, bindings: &Bindings<'_>, grads: &Gradients) {
        for (name, var) in &bindings.vars {
            let g = grads.get_or_zeros(var);
            match self.grads.get_mut(name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.grads.insert(name.clone(), g);
                }
            }
        }
    }
}

/// Parameters placed on one graph.
pub struct Bindings<'g> {
    vars: BTreeMap<String, Var<'g>>,
}

impl<'g> Bindings<'g> {
    pub fn get(&self, name: &str) -> Result<&Var<'g>> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::Config(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var<'g>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// Seeded weight initializer: uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn uniform(&mut self, shape: impl Into<Vec<usize>>, fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        Tensor::from_fn(shape, |_| self.rng.random_range(-bound..=bound))
    }

    pub fn normal(&mut self, shape: impl Into<Vec<usize>>, std: f64) -> Tensor {
        use rand_distr::{Distribution, StandardNormal};
        Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            z * std
        })
    }
}
