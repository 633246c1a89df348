//! Central finite-difference validation of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{Bindings, ParameterStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step, within `[1e-6, 1e-4]`.
    pub h: f64,
    pub tol: f64,
    /// Probe at most this many entries per parameter (chosen by `seed`).
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: 1e-5, tol: 1e-4, max_entries: None, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub probed: usize,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over the probed entries.
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Norm-wise gradients whose magnitude is below this are treated as exactly zero.
const ZERO_FLOOR: f64 = 1e-10;

/// Multiple of the rounding noise a numeric gradient may reach while the
/// analytic one is zero.
const ZERO_NOISE_FACTOR: f64 = 100.0;

fn eval<F>(store: &ParameterStore, f: &F) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &Bindings<'g>) -> Result<Var<'g>>,
{
    let g = Graph::inference();
    let b = store.bind(&g);
    let y = f(&g, &b)?.item();
    if !y.is_finite() {
        return Err(Error::Probe(format!("objective evaluated to {y}")));
    }
    Ok(y)
}

/// Compares the reverse-mode gradient of the scalar `f` with central
/// differences for every parameter in `store`.
pub fn gradient_check<F>(store: &ParameterStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &Bindings<'g>) -> Result<Var<'g>>,
{
    if !(1e-6..=1e-4).contains(&opts.h) {
        return Err(Error::Probe(format!("step {} outside [1e-6, 1e-4]", opts.h)));
    }
    let (analytic, y0) = {
        let g = Graph::new();
        let b = store.bind(&g);
        let y = f(&g, &b)?;
        if !y.item().is_finite() {
            return Err(Error::Probe(format!("objective evaluated to {}", y.item())));
        }
        let grads = g.backward(&y)?;
        (b.iter().map(|(n, v)| (n.to_string(), grads.get_or_zeros(v))).collect::<Vec<_>>(), y.item())
    };
    // Rounding error of one central difference is about eps·|f|/h.
    let fd_noise = f64::EPSILON * y0.abs().max(1.0) / opts.h;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut params = Vec::new();
    for (name, grad) in analytic {
        let n = grad.numel();
        let entries: Vec<usize> = match opts.max_entries {
            Some(m) if m < n => {
                let mut e = sample(&mut rng, n, m).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..n).collect(),
        };
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for &i in &entries {
            let orig = work.get(&name).expect("bound parameter").data()[i];
            work.get_mut(&name).expect("bound parameter").data_mut()[i] = orig + opts.h;
            let plus = eval(&work, &f)?;
            work.get_mut(&name).expect("bound parameter").data_mut()[i] = orig - opts.h;
            let minus = eval(&work, &f)?;
            work.get_mut(&name).expect("bound parameter").data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = grad.data()[i];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let denom = a2.sqrt().max(n2.sqrt());
        let rel_error = if denom < ZERO_FLOOR {
            diff2.sqrt()
        } else if a2.sqrt() < ZERO_FLOOR {
            // A vanishing analytic gradient is confirmed when the differences
            // stay within the rounding noise.
            let floor = ZERO_NOISE_FACTOR * fd_noise * (entries.len() as f64).sqrt();
            if n2.sqrt() <= floor { 0.0 } else { 1.0 }
        } else {
            diff2.sqrt() / denom
        };
        params.push(ParamCheck { name, probed: entries.len(), rel_error });
    }
    let max_rel_error = params.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { params, max_rel_error, tol: opts.tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn sum_of_squares() {
        let mut s = ParameterStore::new();
        s.insert("p", Tensor::new([3], vec![0.5, -2.0, 3.0]).unwrap()).unwrap();
        let r = gradient_check(&s, |_, b| Ok(b.get("p")?.square().sum()), &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn non_finite_objective_is_a_probe_error() {
        let mut s = ParameterStore::new();
        s.insert("p", Tensor::new([1], vec![-1.0]).unwrap()).unwrap();
        let err = gradient_check(&s, |_, b| Ok(b.get("p")?.ln().sum()), &GradCheckOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Probe(_)));
    }
}
