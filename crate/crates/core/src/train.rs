//! Datasets of precomputed windows, the training loop and evaluation.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState, Graph, ParamFile, ParamStore, Tensor};
use crate::data::{LabeledSeries, NormStats, Windows};
use crate::error::{PetsError, Result};
use crate::model::{decompose_rows, PetsModel};
use crate::sdaq::SdaqConfig;
use crate::tasks::{self, MetricReport, Task};

/// What the model is trained to produce for each sample.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// `[N, channels, width]`, with optional per-position loss weights.
    Values {
        width: usize,
        data: Vec<f64>,
        weights: Option<Vec<f64>>,
    },
    Classes(Vec<usize>),
}

/// Normalised model inputs with their SDAQ patterns, ready for batching.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub len: usize,
    /// `[N, channels, len]`.
    pub inputs: Vec<f64>,
    /// K arrays shaped like `inputs`.
    pub patterns: Vec<Vec<f64>>,
    pub targets: Targets,
}

/// One batch with rows `sample · channels + channel`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Tensor,
    pub patterns: Vec<Tensor>,
    pub target: Option<Tensor>,
    pub weights: Option<Vec<f64>>,
    pub labels: Vec<usize>,
}

/// Random spikes added to training inputs, in normalised units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpikeAugment {
    pub rate: f64,
    pub min_magnitude: f64,
    pub max_magnitude: f64,
}

impl SpikeAugment {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate < 1.0)
            || !(self.min_magnitude >= 0.0 && self.min_magnitude <= self.max_magnitude)
            || !self.max_magnitude.is_finite()
        {
            return Err(PetsError::InvalidConfig(format!("bad spike augmentation {self:?}")));
        }
        Ok(())
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b);
    rng.gen()
}

impl Dataset {
    /// Windows for a regression task. Imputation hides a fixed random
    /// `mask_ratio` share of each window (seeded by `mask_seed` and the
    /// window index) and decomposes the masked input.
    pub fn from_windows(w: &Windows, task: &Task, sdaq: &SdaqConfig, mask_seed: u64) -> Result<Self> {
        let (d, l) = (w.channels, w.len);
        let n = w.count();
        let (inputs, targets) = match *task {
            Task::Forecast { horizon } => {
                if horizon != w.horizon {
                    return Err(PetsError::InvalidConfig(format!(
                        "windows have horizon {}, task wants {horizon}",
                        w.horizon
                    )));
                }
                (
                    w.inputs.clone(),
                    Targets::Values {
                        width: horizon,
                        data: w.targets.clone(),
                        weights: None,
                    },
                )
            }
            Task::Impute { mask_ratio } => {
                let mut inputs = w.inputs.clone();
                let mut weights = vec![0.0; inputs.len()];
                let hide = ((l as f64 * mask_ratio).round() as usize).clamp(1, l - 1);
                for i in 0..n {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix(mask_seed, 1, i as u64));
                    for c in 0..d {
                        let base = (i * d + c) * l;
                        let mut pos: Vec<usize> = (0..l).collect();
                        pos.shuffle(&mut rng);
                        for &p in &pos[..hide] {
                            inputs[base + p] = 0.0;
                            weights[base + p] = 1.0;
                        }
                    }
                }
                (
                    inputs,
                    Targets::Values {
                        width: l,
                        data: w.inputs.clone(),
                        weights: Some(weights),
                    },
                )
            }
            Task::Anomaly { .. } => (
                w.inputs.clone(),
                Targets::Values {
                    width: l,
                    data: w.inputs.clone(),
                    weights: None,
                },
            ),
            Task::Classify { .. } => {
                return Err(PetsError::InvalidConfig(
                    "classification data comes from labelled samples, not windows".into(),
                ))
            }
        };
        Self::build(d, l, inputs, targets, sdaq)
    }

    /// Labelled univariate samples of length `len` normalised with `stats`.
    /// The length is explicit so an empty split still has a shape.
    pub fn from_labeled(set: &LabeledSeries, len: usize, stats: &NormStats, sdaq: &SdaqConfig) -> Result<Self> {
        let l = len;
        let inputs: Vec<f64> = set
            .samples
            .iter()
            .flat_map(|s| s.iter().map(|v| stats.normalize(0, *v)))
            .collect();
        Self::build(1, l, inputs, Targets::Classes(set.labels.clone()), sdaq)
    }

    fn build(channels: usize, len: usize, inputs: Vec<f64>, targets: Targets, sdaq: &SdaqConfig) -> Result<Self> {
        let rows = inputs.len() / len;
        let patterns = if rows == 0 {
            vec![Vec::new(); sdaq.k()]
        } else {
            decompose_rows(&inputs, rows, len, sdaq)?
                .into_iter()
                .map(Tensor::into_data)
                .collect()
        };
        Ok(Dataset {
            channels,
            len,
            inputs,
            patterns,
            targets,
        })
    }

    /// Copy whose inputs carry random isolated spikes while the targets
    /// stay unchanged, so a reconstruction model learns to look past
    /// outliers. Each point is hit with probability `aug.rate`; spikes are
    /// fixed per sample (seeded by `seed` and the sample index).
    pub fn with_spikes(&self, aug: &SpikeAugment, seed: u64, sdaq: &SdaqConfig) -> Result<Self> {
        aug.validate()?;
        let mut inputs = self.inputs.clone();
        let n = self.channels * self.len;
        for (i, sample) in inputs.chunks_mut(n).enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 2, i as u64));
            for v in sample.iter_mut() {
                if rng.gen_bool(aug.rate) {
                    let m = rng.gen_range(aug.min_magnitude..=aug.max_magnitude);
                    *v += if rng.gen_bool(0.5) { m } else { -m };
                }
            }
        }
        Self::build(self.channels, self.len, inputs, self.targets.clone(), sdaq)
    }

    pub fn count(&self) -> usize {
        self.inputs.len() / (self.channels * self.len)
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    fn sample(&self, i: usize) -> std::ops::Range<usize> {
        let n = self.channels * self.len;
        i * n..(i + 1) * n
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        let rows = idx.len() * self.channels;
        let gather = |src: &[f64]| -> Vec<f64> {
            idx.iter().flat_map(|&i| src[self.sample(i)].iter().copied()).collect()
        };
        let inputs = Tensor::new(vec![rows, self.len], gather(&self.inputs))?;
        let patterns = self
            .patterns
            .iter()
            .map(|p| Tensor::new(vec![rows, self.len], gather(p)))
            .collect::<Result<Vec<_>>>()?;
        let mut batch = Batch {
            inputs,
            patterns,
            target: None,
            weights: None,
            labels: Vec::new(),
        };
        match &self.targets {
            Targets::Values { width, data, weights } => {
                let n = self.channels * width;
                let pick = |src: &[f64]| -> Vec<f64> {
                    idx.iter().flat_map(|&i| src[i * n..(i + 1) * n].iter().copied()).collect()
                };
                batch.target = Some(Tensor::new(vec![rows, *width], pick(data))?);
                batch.weights = weights.as_ref().map(|w| pick(w));
            }
            Targets::Classes(labels) => batch.labels = idx.iter().map(|&i| labels[i]).collect(),
        }
        Ok(batch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    /// Rescale gradients whose global L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
    /// Epoch `e` trains with `lr · lr_decay^(e-1)`.
    pub lr_decay: f64,
    /// Train on this many randomly drawn samples per epoch instead of all.
    pub samples_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            patience: None,
            clip_norm: Some(1.0),
            lr_decay: 1.0,
            samples_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(PetsError::InvalidConfig("clip_norm must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(PetsError::InvalidConfig(format!(
                "lr_decay {} outside (0, 1]",
                self.lr_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(PetsError::InvalidConfig("batch size must be positive".into()));
        }
        self.adam(1).validate()
    }

    pub fn adam(&self, epoch: usize) -> AdamConfig {
        AdamConfig {
            lr: self.lr * self.lr_decay.powi(epoch.saturating_sub(1) as i32),
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    pub params: ParamFile,
    pub best_params: ParamFile,
    pub adam: AdamState,
    pub best_val: f64,
    pub best_epoch: usize,
    pub stale: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn fresh(store: &ParamStore) -> Self {
        TrainState {
            epoch: 0,
            params: store.to_file(),
            best_params: store.to_file(),
            adam: AdamState::new(store),
            best_val: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
            history: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PetsError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string(self)?.as_bytes())
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| PetsError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| PetsError::io(path, e))
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_FILE: &str = "best.json";
pub const LAST_FILE: &str = "last.json";
pub const GRAD_DUMP_FILE: &str = "grad_norms.json";

/// Loss of one batch on a fresh graph; returns the graph and loss node.
fn batch_loss(model: &PetsModel, batch: &Batch, g: &mut Graph) -> Result<crate::autodiff::Var> {
    let out = model.forward(g, &batch.inputs, &batch.patterns, false)?;
    match (&batch.target, model.config.task.is_regression()) {
        (Some(t), true) => g.weighted_mse(out.output, t, batch.weights.as_deref()),
        (None, false) => g.cross_entropy(out.output, &batch.labels),
        _ => Err(PetsError::InvalidConfig(format!(
            "dataset targets do not match the {} task",
            model.config.task.name()
        ))),
    }
}

/// Gradient norms grouped by the first two components of parameter names.
pub fn grad_norms_by_block(store: &ParamStore) -> BTreeMap<String, f64> {
    let mut out: BTreeMap<String, f64> = BTreeMap::new();
    for id in store.ids() {
        let name = store.name(id);
        let key: String = name.split('.').take(2).collect::<Vec<_>>().join(".");
        *out.entry(key).or_default() += store.grad_norm(id).powi(2);
    }
    for v in out.values_mut() {
        *v = v.sqrt();
    }
    out
}

fn numerical_failure(store: &ParamStore, what: String, out: Option<&Path>) -> PetsError {
    let norms = grad_norms_by_block(store);
    let mut msg = what;
    for (k, v) in &norms {
        msg.push_str(&format!("\n  {k}: {v:.6e}"));
    }
    if let Some(dir) = out {
        if let Ok(text) = serde_json::to_string_pretty(&norms) {
            let _ = fs::write(dir.join(GRAD_DUMP_FILE), text);
        }
    }
    PetsError::Numerical(msg)
}

/// Scales all gradients down so their global L2 norm is at most `max`.
pub fn clip_grads(store: &mut ParamStore, max: f64) -> f64 {
    let ids: Vec<_> = store.ids().collect();
    let norm = ids.iter().map(|id| store.grad_norm(*id).powi(2)).sum::<f64>().sqrt();
    if norm > max {
        let f = max / norm;
        for id in ids {
            for g in store.grad_mut(id) {
                *g *= f;
            }
        }
    }
    norm
}

/// Mean loss over a dataset in evaluation mode.
pub fn dataset_loss(model: &PetsModel, ds: &Dataset, batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut weight = 0.0;
    let idx: Vec<usize> = (0..ds.count()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let b = ds.batch(chunk)?;
        let mut g = Graph::new();
        let loss = batch_loss(model, &b, &mut g)?;
        let w = match &b.weights {
            Some(w) => w.iter().sum::<f64>(),
            None => chunk.len() as f64,
        };
        total += g.value(loss).item() * w;
        weight += w;
    }
    if weight == 0.0 {
        return Err(PetsError::InvalidInput("loss over an empty dataset".into()));
    }
    Ok(total / weight)
}

/// Trains `model` in place, leaving the best-validation parameters loaded.
///
/// Epoch `e` shuffles with a stream derived from `(seed, e)`, so a run
/// resumed from a saved [`TrainState`] repeats the uninterrupted run.
pub fn train(
    model: &mut PetsModel,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    out: Option<&Path>,
    resume: Option<TrainState>,
) -> Result<TrainState> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(PetsError::InvalidInput("no training samples".into()));
    }
    let mut state = match resume {
        Some(s) => {
            model.store.load_file(&s.params)?;
            if s.adam.m.len() != model.store.len() {
                return Err(PetsError::StateError("optimizer state does not match the model".into()));
            }
            s
        }
        None => TrainState::fresh(&model.store),
    };
    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| PetsError::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            let mut f = File::create(&path).map_err(|e| PetsError::io(&path, e))?;
            for r in &state.history {
                writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| PetsError::io(&path, e))?;
            }
            Some((f, path))
        }
        None => None,
    };

    while state.epoch < cfg.epochs {
        if cfg.patience.is_some_and(|p| state.stale >= p) {
            break;
        }
        let epoch = state.epoch + 1;
        let adam = cfg.adam(epoch);
        let mut order: Vec<usize> = (0..train_set.count()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        if let Some(n) = cfg.samples_per_epoch {
            order.truncate(n.max(1));
        }
        let mut sum = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let b = train_set.batch(chunk)?;
            let mut g = Graph::training(mix(cfg.seed, epoch as u64, bi as u64));
            let loss = batch_loss(model, &b, &mut g)?;
            let value = g.value(loss).item();
            g.backward(loss)?;
            model.store.zero_grads();
            g.accumulate_param_grads(&mut model.store);
            if !value.is_finite() {
                return Err(numerical_failure(
                    &model.store,
                    format!("loss became {value} at epoch {epoch}, batch {bi}"),
                    out,
                ));
            }
            if model.store.ids().any(|id| model.store.grad(id).iter().any(|v| !v.is_finite())) {
                return Err(numerical_failure(
                    &model.store,
                    format!("non-finite gradient at epoch {epoch}, batch {bi}"),
                    out,
                ));
            }
            if let Some(c) = cfg.clip_norm {
                clip_grads(&mut model.store, c);
            }
            adam_step(&mut model.store, &mut state.adam, &adam)?;
            sum += value;
            batches += 1;
        }
        let train_loss = sum / batches as f64;
        let val_loss = if val_set.is_empty() {
            train_loss
        } else {
            dataset_loss(model, val_set, cfg.batch_size)?
        };
        if !val_loss.is_finite() {
            return Err(numerical_failure(
                &model.store,
                format!("validation loss became {val_loss} at epoch {epoch}"),
                out,
            ));
        }
        state.epoch = epoch;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
        };
        if val_loss < state.best_val {
            state.best_val = val_loss;
            state.best_epoch = epoch;
            state.stale = 0;
            state.best_params = model.store.to_file();
        } else {
            state.stale += 1;
        }
        state.params = model.store.to_file();
        if let Some((f, path)) = log.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&record)?).map_err(|e| PetsError::io(&*path, e))?;
        }
        state.history.push(record);
        if let Some(dir) = out {
            state.save(&dir.join(LAST_FILE))?;
            if state.best_epoch == epoch {
                write_atomic(&dir.join(BEST_FILE), serde_json::to_string(&state.best_params)?.as_bytes())?;
            }
        }
    }
    model.store.load_file(&state.best_params)?;
    Ok(state)
}

/// Model outputs for every sample, in dataset order: `[N·channels, width]`
/// rows for regression, `[N, classes]` logits for classification.
pub fn predict_all(model: &PetsModel, ds: &Dataset, batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    let idx: Vec<usize> = (0..ds.count()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let b = ds.batch(chunk)?;
        out.extend_from_slice(model.predict(&b.inputs, &b.patterns)?.data());
    }
    Ok(out)
}

/// Squared reconstruction error of every point of `range`, averaged over
/// channels and over every window that covers the point. `starts` holds
/// the frame offset of each window of `ds`.
pub fn pointwise_errors(
    model: &PetsModel,
    ds: &Dataset,
    starts: &[usize],
    range: std::ops::Range<usize>,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let (d, l) = (ds.channels, ds.len);
    let data = match &ds.targets {
        Targets::Values { width, data, .. } if *width == l => data,
        _ => {
            return Err(PetsError::InvalidConfig(
                "pointwise errors need reconstruction targets".into(),
            ))
        }
    };
    if starts.len() != ds.count() {
        return Err(PetsError::Shape(format!(
            "{} window offsets for {} windows",
            starts.len(),
            ds.count()
        )));
    }
    let pred = predict_all(model, ds, batch_size)?;
    let mut sum = vec![0.0; range.len()];
    let mut hits = vec![0usize; range.len()];
    for (i, &s) in starts.iter().enumerate() {
        if s < range.start || s + l > range.end {
            return Err(PetsError::InvalidInput(format!(
                "window at {s} leaves the span {range:?}"
            )));
        }
        for t in 0..l {
            let mut e = 0.0;
            for c in 0..d {
                let at = (i * d + c) * l + t;
                e += (pred[at] - data[at]).powi(2);
            }
            sum[s - range.start + t] += e / d as f64;
            hits[s - range.start + t] += 1;
        }
    }
    if let Some(p) = hits.iter().position(|h| *h == 0) {
        return Err(PetsError::InvalidInput(format!(
            "point {} is not covered by any window",
            range.start + p
        )));
    }
    Ok(sum.iter().zip(&hits).map(|(s, h)| s / *h as f64).collect())
}

fn denormalize_rows(values: &[f64], channels: usize, width: usize, stats: &NormStats) -> Vec<f64> {
    values
        .iter()
        .enumerate()
        .map(|(i, v)| stats.denormalize((i / width) % channels, *v))
        .collect()
}

/// Predictions plus the report computed from them.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricReport,
    /// Original-scale predictions, `[N, channels, width]` (or logits).
    pub predictions: Vec<f64>,
}

/// Metrics of a trained model on `ds`; regression values are reported on
/// the original scale and, with a `_norm` suffix, on the normalised scale.
pub fn evaluate(model: &PetsModel, ds: &Dataset, stats: &NormStats, batch_size: usize) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(PetsError::InvalidInput("evaluation over an empty dataset".into()));
    }
    let pred = predict_all(model, ds, batch_size)?;
    let mut report = MetricReport::default();
    let d = ds.channels;
    match (&ds.targets, &model.config.task) {
        (Targets::Classes(labels), Task::Classify { classes }) => {
            let guess: Vec<usize> = pred
                .chunks(*classes)
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |b, (i, v)| if *v > b.1 { (i, *v) } else { b })
                        .0
                })
                .collect();
            report.insert("accuracy", tasks::accuracy(&guess, labels)?)?;
            report.insert("cross_entropy", dataset_loss(model, ds, batch_size)?)?;
            Ok(Evaluation {
                report,
                predictions: pred,
            })
        }
        (Targets::Values { width, data, weights }, task) if task.is_regression() => {
            let raw_pred = denormalize_rows(&pred, d, *width, stats);
            let raw_true = denormalize_rows(data, d, *width, stats);
            let select = |v: &[f64]| -> Vec<f64> {
                match weights {
                    Some(w) => v.iter().zip(w).filter(|(_, w)| **w > 0.0).map(|(x, _)| *x).collect(),
                    None => v.to_vec(),
                }
            };
            let (yn, pn) = (select(data), select(&pred));
            let (yr, pr) = (select(&raw_true), select(&raw_pred));
            report.insert("mse", tasks::mse(&yr, &pr)?)?;
            report.insert("mae", tasks::mae(&yr, &pr)?)?;
            report.insert("rmse", tasks::rmse(&yr, &pr)?)?;
            report.insert("smape", tasks::smape(&yr, &pr)?)?;
            report.insert("mape", tasks::mape(&yr, &pr)?)?;
            report.insert("mse_norm", tasks::mse(&yn, &pn)?)?;
            report.insert("mae_norm", tasks::mae(&yn, &pn)?)?;
            if let Task::Forecast { horizon } = *task {
                forecast_extras(&mut report, ds, stats, horizon, &raw_true, &raw_pred)?;
            }
            Ok(Evaluation {
                report,
                predictions: raw_pred,
            })
        }
        _ => Err(PetsError::InvalidConfig(format!(
            "dataset targets do not match the {} task",
            model.config.task.name()
        ))),
    }
}

/// Baseline errors and the seasonal metrics (period 1) averaged over every
/// window and channel where they are defined.
fn forecast_extras(
    report: &mut MetricReport,
    ds: &Dataset,
    stats: &NormStats,
    horizon: usize,
    raw_true: &[f64],
    raw_pred: &[f64],
) -> Result<()> {
    let (d, l) = (ds.channels, ds.len);
    let raw_in = denormalize_rows(&ds.inputs, d, l, stats);
    let mut last = Vec::with_capacity(raw_true.len());
    let mut trend = Vec::with_capacity(raw_true.len());
    let (mut mase_sum, mut owa_sum, mut n_mase, mut n_owa) = (0.0, 0.0, 0usize, 0usize);
    for (r, window) in raw_in.chunks(l).enumerate() {
        last.extend(tasks::last_value_forecast(window, horizon));
        trend.extend(tasks::linear_trend_forecast(window, horizon));
        let y = &raw_true[r * horizon..(r + 1) * horizon];
        let yhat = &raw_pred[r * horizon..(r + 1) * horizon];
        if horizon > 1 {
            if let Ok(v) = tasks::mase(y, yhat, 1) {
                mase_sum += v;
                n_mase += 1;
            }
            if let Ok(v) = tasks::owa(y, yhat, window, 1) {
                owa_sum += v;
                n_owa += 1;
            }
        }
    }
    report.insert("baseline_last_mse", tasks::mse(raw_true, &last)?)?;
    report.insert("baseline_trend_mse", tasks::mse(raw_true, &trend)?)?;
    if n_mase > 0 {
        report.insert("mase", mase_sum / n_mase as f64)?;
    }
    if n_owa > 0 {
        report.insert("owa", owa_sum / n_owa as f64)?;
    }
    Ok(())
}
