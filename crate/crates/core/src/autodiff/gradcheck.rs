//! Central finite-difference gradient checking.
//!
//! The finite-difference side only ever evaluates forward passes, so it is
//! independent of the tape's backward rules.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::Result;

/// Gradient magnitude below which differences are measured absolutely.
///
/// Central differences with `h = 1e-5` carry roundoff of order
/// `eps·|f|/h ≈ 1e-10`, so structurally zero gradients need this headroom.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
    pub max_rel_err: f64,
    /// Number of scalar entries compared.
    pub checked: usize,
    /// `(analytic, numeric)` at the entry with the largest error.
    pub worst_pair: (f64, f64),
}

impl GradCheck {
    fn new() -> Self {
        GradCheck {
            max_rel_err: 0.0,
            checked: 0,
            worst_pair: (0.0, 0.0),
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        let err = (analytic - numeric).abs() / denom;
        if err > self.max_rel_err {
            self.max_rel_err = err;
            self.worst_pair = (analytic, numeric);
        }
        self.checked += 1;
    }
}

/// Compare tape gradients of `f` against central differences with step `h`.
///
/// `f` builds a scalar loss from one variable per input tensor.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            g.grad(*v)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut res = GradCheck::new();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for k in 0..t.numel() {
            let orig = t.data()[k];
            work[ti].data_mut()[k] = orig + h;
            let up = eval(&work)?;
            work[ti].data_mut()[k] = orig - h;
            let down = eval(&work)?;
            work[ti].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            res.record(analytic[ti][k], numeric);
        }
    }
    Ok(res)
}

/// Like [`check`], but differentiates with respect to the parameters of a
/// store. At most `per_param` evenly spaced entries of each parameter are
/// compared (all entries when `None`).
pub fn check_params<F>(
    store: &ParamStore,
    h: f64,
    per_param: Option<usize>,
    f: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut grads = store.clone();
    grads.zero_grads();
    {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        g.backward(loss)?;
        g.accumulate_param_grads(&mut grads);
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = f(&mut g, s)?;
        Ok(g.value(loss).item())
    };

    let mut work = store.clone();
    let mut res = GradCheck::new();
    for id in store.ids() {
        let n = store.value(id).numel();
        let step = match per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for k in (0..n).step_by(step) {
            let orig = store.value(id).data()[k];
            work.value_mut(id).data_mut()[k] = orig + h;
            let up = eval(&work)?;
            work.value_mut(id).data_mut()[k] = orig - h;
            let down = eval(&work)?;
            work.value_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            res.record(grads.grad(id)[k], numeric);
        }
    }
    Ok(res)
}
