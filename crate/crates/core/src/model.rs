//! The full network: observation and pattern embeddings, the encoder stack,
//! the predictor chain and the task head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::embedding::{PatchConfig, PatchEmbedding};
use crate::error::{PetsError, Result};
use crate::fpa::{fpa_stack_forward, FpaDims, FpaLayer};
use crate::mop::{mop_forward, OutputHead, Predictor};
use crate::sdaq::{sdaq_decompose, SdaqConfig};
use crate::tasks::Task;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input window length L.
    pub seq_len: usize,
    pub channels: usize,
    pub patch: PatchConfig,
    /// Encoder depth N, also the number of predictors.
    pub layers: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    /// Predictor `n` reads `H^{n-1}` instead of `H^n`.
    pub previous_hidden: bool,
    pub task: Task,
    pub sdaq: SdaqConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            seq_len: 96,
            channels: 1,
            patch: PatchConfig::default(),
            layers: 4,
            ffn_hidden: 64,
            dropout: 0.1,
            previous_hidden: false,
            task: Task::Forecast { horizon: 96 },
            sdaq: SdaqConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn k(&self) -> usize {
        self.sdaq.k()
    }

    pub fn validate(&self) -> Result<()> {
        self.sdaq.validate()?;
        self.task.validate()?;
        self.patch.tokens(self.seq_len)?;
        if self.layers == 0 || self.channels == 0 || self.ffn_hidden == 0 {
            return Err(PetsError::InvalidConfig(
                "layers, channels and ffn_hidden must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(PetsError::InvalidConfig(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> Result<FpaDims> {
        Ok(FpaDims {
            k: self.k(),
            tokens: self.patch.tokens(self.seq_len)?,
            dim: self.patch.token_dim,
            ffn_hidden: self.ffn_hidden,
            dropout: self.dropout,
        })
    }
}

#[derive(Clone, Debug)]
pub struct PetsModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub observed: PatchEmbedding,
    /// One independent embedding per pattern.
    pub pattern_embeds: Vec<PatchEmbedding>,
    pub layers: Vec<FpaLayer>,
    pub predictors: Vec<Predictor>,
    pub head: OutputHead,
    dims: FpaDims,
}

/// Head output plus the per-layer pattern attention when requested.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `[R, width]` for regression tasks, `[R / channels, classes]` for
    /// classification.
    pub output: Var,
    pub attention: Vec<Var>,
}

impl PetsModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let dims = config.dims()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let observed = PatchEmbedding::new(&mut store, &mut rng, "embed.observed", &config.patch, config.seq_len)?;
        let pattern_embeds = (1..=dims.k)
            .map(|k| {
                PatchEmbedding::new(
                    &mut store,
                    &mut rng,
                    &format!("embed.pattern{k}"),
                    &config.patch,
                    config.seq_len,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let layers = (1..=config.layers)
            .map(|n| FpaLayer::new(&mut store, &mut rng, n, &dims))
            .collect();
        let predictors = (1..=config.layers)
            .map(|n| Predictor::new(&mut store, &mut rng, &format!("mop{n}"), &dims))
            .collect();
        let head = OutputHead::new(
            &mut store,
            &config.task,
            dims.tokens,
            dims.dim,
            config.seq_len,
            config.channels,
        )?;
        Ok(PetsModel {
            config,
            store,
            observed,
            pattern_embeds,
            layers,
            predictors,
            head,
            dims,
        })
    }

    pub fn dims(&self) -> FpaDims {
        self.dims
    }

    /// Closed-form parameter count.
    pub fn param_count(config: &ModelConfig) -> Result<usize> {
        let dims = config.dims()?;
        let embed = PatchEmbedding::param_count(&config.patch, config.seq_len)?;
        let width = config.task.output_width(config.seq_len)?;
        Ok((dims.k + 1) * embed
            + config.layers * (FpaLayer::param_count(&dims) + Predictor::param_count(&dims))
            + 2 * dims.dim
            + dims.tokens * dims.dim * width
            + width)
    }

    /// `x` and every pattern are `[R, L]` with `R = batch · channels`.
    pub fn forward_vars(
        &self,
        g: &mut Graph,
        x: Var,
        patterns: &[Var],
        record_attention: bool,
    ) -> Result<ModelOutput> {
        if patterns.len() != self.dims.k {
            return Err(PetsError::Shape(format!(
                "model expects {} patterns, got {}",
                self.dims.k,
                patterns.len()
            )));
        }
        for &p in patterns {
            if g.shape(p) != g.shape(x) {
                return Err(PetsError::shape("model patterns", g.shape(p), g.shape(x)));
            }
        }
        let rows = g.shape(x)[0];
        if rows % self.config.channels != 0 {
            return Err(PetsError::Shape(format!(
                "{rows} rows do not fold into {} channels",
                self.config.channels
            )));
        }
        let hidden0 = self.observed.forward(g, &self.store, x)?;
        let embedded = patterns
            .iter()
            .zip(&self.pattern_embeds)
            .map(|(p, e)| e.forward(g, &self.store, *p))
            .collect::<Result<Vec<_>>>()?;
        let stack = fpa_stack_forward(
            g,
            &self.store,
            hidden0,
            &embedded,
            &self.layers,
            &self.dims,
            record_attention,
        )?;
        let s = mop_forward(
            g,
            &self.store,
            &stack.patterns,
            hidden0,
            &stack.hiddens,
            &self.predictors,
            self.config.previous_hidden,
        )?;
        let output = self.head.forward(g, &self.store, s)?;
        Ok(ModelOutput {
            output,
            attention: stack.attention,
        })
    }

    /// Forward pass on constant inputs.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: &Tensor,
        patterns: &[Tensor],
        record_attention: bool,
    ) -> Result<ModelOutput> {
        let xv = g.constant(x.clone());
        let pv: Vec<Var> = patterns.iter().map(|p| g.constant(p.clone())).collect();
        self.forward_vars(g, xv, &pv, record_attention)
    }

    /// Forward pass in evaluation mode, returning the output values.
    pub fn predict(&self, x: &Tensor, patterns: &[Tensor]) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, x, patterns, false)?;
        Ok(g.value(out.output).clone())
    }
}

/// SDAQ patterns of `rows × len` inputs as K tensors of shape `[rows, len]`.
pub fn decompose_rows(x: &[f64], rows: usize, len: usize, cfg: &SdaqConfig) -> Result<Vec<Tensor>> {
    if x.len() != rows * len {
        return Err(PetsError::Shape(format!(
            "{} values do not form {rows} rows of {len}",
            x.len()
        )));
    }
    let d = sdaq_decompose(x, rows, cfg)?;
    (1..=d.k())
        .map(|k| Tensor::new(vec![rows, len], d.pattern_rows(k).to_vec()))
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::autodiff::gradcheck;
    use crate::sdaq::Backend;

    fn tiny(task: Task, channels: usize) -> ModelConfig {
        ModelConfig {
            seq_len: 6,
            channels,
            patch: PatchConfig {
                patch_len: 2,
                token_dim: 4,
                position: true,
            },
            layers: 2,
            ffn_hidden: 5,
            dropout: 0.0,
            previous_hidden: false,
            task,
            sdaq: SdaqConfig {
                lambda: 3,
                backend: Backend::Fft,
                ..SdaqConfig::default()
            },
        }
    }

    fn randomize(model: &mut PetsModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            for v in model.store.value_mut(id).data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }

    fn rand_rows(rng: &mut ChaCha8Rng, rows: usize, len: usize) -> Tensor {
        Tensor::from_fn(&[rows, len], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn parameter_count_matches_store() {
        for task in [
            Task::Forecast { horizon: 96 },
            Task::Classify { classes: 3 },
            Task::Impute { mask_ratio: 0.25 },
        ] {
            let cfg = ModelConfig {
                task,
                ..ModelConfig::default()
            };
            let m = PetsModel::new(cfg.clone(), 0).unwrap();
            assert_eq!(m.store.numel(), PetsModel::param_count(&cfg).unwrap());
        }
    }

    #[test]
    fn default_forecast_head_is_384_by_96() {
        let m = PetsModel::new(ModelConfig::default(), 0).unwrap();
        assert_eq!(m.store.value(m.head.linear.weight).shape(), &[384, 96]);
    }

    #[test]
    fn untrained_model_predicts_zero() {
        let m = PetsModel::new(ModelConfig::default(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_rows(&mut rng, 3, 96);
        let pats = decompose_rows(x.data(), 3, 96, &m.config.sdaq).unwrap();
        let y = m.predict(&x, &pats).unwrap();
        assert_eq!(y.shape(), &[3, 96]);
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn tiny_model_gradients_match_finite_differences() {
        let cfg = tiny(Task::Forecast { horizon: 3 }, 1);
        let mut model = PetsModel::new(cfg, 3).unwrap();
        randomize(&mut model, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_rows(&mut rng, 2, 6);
        let pats: Vec<Tensor> = (0..3).map(|_| rand_rows(&mut rng, 2, 6)).collect();
        let target = rand_rows(&mut rng, 2, 3);
        let mut inputs = vec![x];
        inputs.extend(pats);
        let r = gradcheck::check(&inputs, 1e-5, |g, vars| {
            let out = model.forward_vars(g, vars[0], &vars[1..], false)?;
            g.mse_loss(out.output, &target)
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");

        let r = gradcheck::check_params(&model.store, 1e-5, None, |g, store| {
            let mut m = model.clone();
            m.store = store.clone();
            let out = m.forward(g, &inputs[0], &inputs[1..], false)?;
            g.mse_loss(out.output, &target)
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }

    #[test]
    fn channels_do_not_interact() {
        let cfg = tiny(Task::Forecast { horizon: 3 }, 3);
        let mut model = PetsModel::new(cfg.clone(), 6).unwrap();
        randomize(&mut model, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_rows(&mut rng, 6, 6);
        let run = |x: &Tensor| {
            let p = decompose_rows(x.data(), 6, 6, &cfg.sdaq).unwrap();
            model.predict(x, &p).unwrap()
        };
        let base = run(&x);
        let mut moved = x.clone();
        for v in &mut moved.data_mut()[6..12] {
            *v += 0.7;
        }
        let out = run(&moved);
        for r in 0..6 {
            let same = base.data()[r * 3..r * 3 + 3] == out.data()[r * 3..r * 3 + 3];
            assert_eq!(same, r != 1, "row {r}");
        }
    }

    #[test]
    fn classification_folds_channels() {
        let cfg = tiny(Task::Classify { classes: 2 }, 3);
        let model = PetsModel::new(cfg.clone(), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_rows(&mut rng, 12, 6);
        let p = decompose_rows(x.data(), 12, 6, &cfg.sdaq).unwrap();
        assert_eq!(model.predict(&x, &p).unwrap().shape(), &[4, 2]);
    }

    #[test]
    fn wrong_pattern_count_is_a_shape_error() {
        let cfg = tiny(Task::Forecast { horizon: 3 }, 1);
        let model = PetsModel::new(cfg, 0).unwrap();
        let x = Tensor::zeros(&[1, 6]);
        let err = model.predict(&x, &[x.clone()]).unwrap_err();
        assert!(matches!(err, PetsError::Shape(_)));
    }
}
