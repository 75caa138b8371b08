//! Mixture of predictors and the task output head.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::nn::{Conv1d, FeedForward, LayerNorm, Linear, SelfAttention};
use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{PetsError, Result};
use crate::fpa::FpaDims;
use crate::tasks::Task;

const KERNEL: usize = 3;

#[derive(Clone, Debug)]
pub struct Predictor {
    pub norm_in: LayerNorm,
    pub conv_in: Conv1d,
    pub attn: SelfAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
    pub conv_next: Conv1d,
}

impl Predictor {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dims: &FpaDims) -> Self {
        let d = dims.dim;
        Predictor {
            norm_in: LayerNorm::new(store, &format!("{name}.norm_in"), d),
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), d),
            conv_in: Conv1d::new(store, rng, &format!("{name}.conv_in"), KERNEL, d, d),
            attn: SelfAttention::new(store, rng, &format!("{name}.attn"), d),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, dims.ffn_hidden, dims.dropout),
            conv_next: Conv1d::new(store, rng, &format!("{name}.conv_next"), KERNEL, d, d),
        }
    }

    pub fn param_count(dims: &FpaDims) -> usize {
        let (d, f) = (dims.dim, dims.ffn_hidden);
        let conv = KERNEL * d * d + d;
        4 * d + 2 * conv + 4 * (d * d + d) + (d * f + f) + (f * d + d)
    }

    /// Returns `(S updated, S for the next predictor)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, s: Var, hidden: Var) -> Result<(Var, Var)> {
        if g.shape(s) != g.shape(hidden) {
            return Err(PetsError::shape("predictor", g.shape(s), g.shape(hidden)));
        }
        let n = self.norm_in.forward(g, store, s)?;
        let c = self.conv_in.forward(g, store, n)?;
        let att = self.attn.forward(g, store, c)?;
        let s = g.add(s, att.output)?;
        let n = self.norm_ffn.forward(g, store, s)?;
        let f = self.ffn.forward(g, store, n)?;
        let s = g.add_n(&[s, hidden, f])?;
        let next = self.conv_next.forward(g, store, s)?;
        Ok((s, next))
    }
}

/// Mean of the final patterns, chained through every predictor.
///
/// Predictor `n` (1-based) reads `H^n`, or `H^{n-1}` when
/// `previous_hidden` is set, with `H^0 = hidden0`.
pub fn mop_forward(
    g: &mut Graph,
    store: &ParamStore,
    patterns: &[Var],
    hidden0: Var,
    hiddens: &[Var],
    predictors: &[Predictor],
    previous_hidden: bool,
) -> Result<Var> {
    if patterns.is_empty() {
        return Err(PetsError::InvalidInput("mixture of predictors needs patterns".into()));
    }
    if hiddens.len() != predictors.len() || predictors.is_empty() {
        return Err(PetsError::InvalidConfig(format!(
            "{} hidden states for {} predictors",
            hiddens.len(),
            predictors.len()
        )));
    }
    let sum = g.add_n(patterns)?;
    let mut s = g.scale(sum, 1.0 / patterns.len() as f64);
    for (n, p) in predictors.iter().enumerate() {
        let h = match (previous_hidden, n) {
            (false, _) => hiddens[n],
            (true, 0) => hidden0,
            (true, _) => hiddens[n - 1],
        };
        s = p.forward(g, store, s, h)?.1;
    }
    Ok(s)
}

/// Norm, flatten and project; the projection starts at zero so an untrained
/// model predicts its bias.
#[derive(Clone, Debug)]
pub struct OutputHead {
    pub norm: LayerNorm,
    pub linear: Linear,
    pub task: Task,
    channels: usize,
}

impl OutputHead {
    /// `len` is the input window length.
    pub fn new(
        store: &mut ParamStore,
        task: &Task,
        tokens: usize,
        dim: usize,
        len: usize,
        channels: usize,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(PetsError::InvalidConfig("zero channels".into()));
        }
        let width = task.output_width(len)?;
        Ok(OutputHead {
            norm: LayerNorm::new(store, "head.norm", dim),
            linear: Linear::zeros(store, "head", tokens * dim, width),
            task: task.clone(),
            channels,
        })
    }

    /// `[R, P_L, P_d] → [R, width]`, or `[R/channels, classes]` logits for
    /// classification.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, s: Var) -> Result<Var> {
        let s = self.norm.forward(g, store, s)?;
        let flat = g.flatten_rows(s)?;
        let flat = match self.task {
            Task::Classify { .. } => g.row_group_mean(flat, self.channels)?,
            _ => flat,
        };
        self.linear.forward(g, store, flat)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::autodiff::Tensor;

    fn dims() -> FpaDims {
        FpaDims {
            k: 3,
            tokens: 4,
            dim: 8,
            ffn_hidden: 16,
            dropout: 0.1,
        }
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zeroed_predictor_is_a_pure_residual() {
        let d = dims();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Predictor::new(&mut store, &mut rng, "p", &d);
        for id in [p.conv_in.weight, p.ffn.down.weight] {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let x = rand_tensor(&mut rng, &[2, 4, 8]);
        let mut g = Graph::new();
        let s = g.constant(x.clone());
        let h = g.constant(Tensor::zeros(&[2, 4, 8]));
        let (upd, next) = p.forward(&mut g, &store, s, h).unwrap();
        assert_eq!(g.value(upd), &x);
        assert_eq!(g.shape(next), &[2, 4, 8]);
    }

    #[test]
    fn predictor_gradient_reaches_hidden() {
        let d = dims();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Predictor::new(&mut store, &mut rng, "p", &d);
        let mut g = Graph::new();
        let s = g.constant(rand_tensor(&mut rng, &[2, 4, 8]));
        let h = g.variable(rand_tensor(&mut rng, &[2, 4, 8]));
        let (_, next) = p.forward(&mut g, &store, s, h).unwrap();
        let sq = g.mul(next, next).unwrap();
        let loss = g.mean(sq);
        g.backward(loss).unwrap();
        assert!(g.grad(h).unwrap().iter().any(|v| *v != 0.0));
    }

    fn predictors(store: &mut ParamStore, n: usize) -> Vec<Predictor> {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        (1..=n)
            .map(|i| Predictor::new(store, &mut rng, &format!("mop{i}"), &dims()))
            .collect()
    }

    #[test]
    fn single_predictor_chain() {
        let mut store = ParamStore::new();
        let ps = predictors(&mut store, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pat = rand_tensor(&mut rng, &[2, 4, 8]);
        let hid = rand_tensor(&mut rng, &[2, 4, 8]);
        let mut g = Graph::new();
        let e = g.constant(pat.clone());
        let h = g.constant(hid.clone());
        let out = mop_forward(&mut g, &store, &[e], h, &[h], &ps, false).unwrap();

        let mut m = Graph::new();
        let e = m.constant(pat);
        let h = m.constant(hid);
        let (_, want) = ps[0].forward(&mut m, &store, e, h).unwrap();
        assert_eq!(g.value(out), m.value(want));
    }

    #[test]
    fn identical_patterns_average_to_themselves() {
        let mut store = ParamStore::new();
        let ps = predictors(&mut store, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pat = rand_tensor(&mut rng, &[2, 4, 8]);
        let hid: Vec<Tensor> = (0..2).map(|_| rand_tensor(&mut rng, &[2, 4, 8])).collect();
        let run = |k: usize| {
            let mut g = Graph::new();
            let es: Vec<Var> = (0..k).map(|_| g.constant(pat.clone())).collect();
            let hs: Vec<Var> = hid.iter().map(|t| g.constant(t.clone())).collect();
            let out = mop_forward(&mut g, &store, &es, hs[0], &hs, &ps, false).unwrap();
            g.value(out).clone()
        };
        let one = run(1);
        let three = run(3);
        for (a, b) in one.data().iter().zip(three.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn previous_hidden_flag_shifts_inputs() {
        let mut store = ParamStore::new();
        let ps = predictors(&mut store, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pat = rand_tensor(&mut rng, &[2, 4, 8]);
        let h: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, &[2, 4, 8])).collect();
        let mut g = Graph::new();
        let e = g.constant(pat.clone());
        let hv: Vec<Var> = h.iter().map(|t| g.constant(t.clone())).collect();
        let shifted = mop_forward(&mut g, &store, &[e], hv[0], &hv[1..], &ps, true).unwrap();
        // feeding H^0, H^1 as the "current" list must agree
        let plain = mop_forward(&mut g, &store, &[e], hv[0], &hv[..2], &ps, false).unwrap();
        assert_eq!(g.value(shifted), g.value(plain));
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let mut store = ParamStore::new();
        let ps = predictors(&mut store, 2);
        let mut g = Graph::new();
        let e = g.constant(Tensor::zeros(&[1, 4, 8]));
        assert!(mop_forward(&mut g, &store, &[e], e, &[e], &ps, false).is_err());
    }

    #[test]
    fn forecast_head_dimensions_and_bias() {
        let mut store = ParamStore::new();
        let head = OutputHead::new(&mut store, &Task::Forecast { horizon: 96 }, 12, 32, 96, 1).unwrap();
        assert_eq!(store.value(head.linear.weight).shape(), &[384, 96]);
        store.value_mut(head.linear.bias).data_mut().fill(0.25);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::new();
        let s = g.constant(rand_tensor(&mut rng, &[3, 12, 32]));
        let y = head.forward(&mut g, &store, s).unwrap();
        assert_eq!(g.shape(y), &[3, 96]);
        assert!(g.value(y).data().iter().all(|v| *v == 0.25));
    }

    #[test]
    fn classification_head_folds_channels() {
        let mut store = ParamStore::new();
        let head = OutputHead::new(&mut store, &Task::Classify { classes: 2 }, 4, 8, 32, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for v in store.value_mut(head.linear.weight).data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let x = rand_tensor(&mut rng, &[6, 4, 8]);
        let mut g = Graph::new();
        let s = g.constant(x.clone());
        let y = head.forward(&mut g, &store, s).unwrap();
        assert_eq!(g.shape(y), &[2, 2]);
        // every token is normalised over its 8 features before flattening
        let mut x = x;
        for tok in x.data_mut().chunks_mut(8) {
            let m = tok.iter().sum::<f64>() / 8.0;
            let v = tok.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 8.0;
            for a in tok.iter_mut() {
                *a = (*a - m) / (v + 1e-5).sqrt();
            }
        }
        // sample b's logits are the head applied to its channel mean
        let w = store.value(head.linear.weight).data();
        for b in 0..2 {
            for c in 0..2 {
                let mut want = 0.0;
                for f in 0..32 {
                    let mean: f64 = (0..3).map(|ch| x.data()[(b * 3 + ch) * 32 + f]).sum::<f64>() / 3.0;
                    want += mean * w[f * 2 + c];
                }
                assert!((g.value(y).data()[b * 2 + c] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn reconstruction_heads_span_the_window() {
        for task in [Task::Impute { mask_ratio: 0.25 }, Task::Anomaly { quantile: 0.99 }] {
            let mut store = ParamStore::new();
            let head = OutputHead::new(&mut store, &task, 12, 32, 96, 1).unwrap();
            assert_eq!(store.value(head.linear.weight).shape(), &[384, 96]);
        }
    }

    #[test]
    fn predictor_count_formula() {
        let mut store = ParamStore::new();
        predictors(&mut store, 3);
        assert_eq!(store.numel(), 3 * Predictor::param_count(&dims()));
    }
}
