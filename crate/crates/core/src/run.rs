//! End-to-end runs: configuration, data preparation and the four commands
//! (decompose, train, eval, export-attention).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamFile};
use crate::data::{
    load_csv, load_labeled_csv, make_windows, synth_classes, synth_generate, write_columns,
    write_labeled_csv, ChannelSpec, ClassSpec, LabeledSeries, NormStats, SeriesFrame, Sinusoid,
    SplitSpec, SynthSpec, WindowSet,
};
use crate::embedding::PatchConfig;
use crate::error::{PetsError, Result};
use crate::model::{ModelConfig, PetsModel};
use crate::sdaq::{sdaq_decompose, SdaqConfig};
use crate::tasks::{self, MetricReport, Task};
use crate::train::{self, Dataset, SpikeAugment, Targets, TrainConfig, TrainState, BEST_FILE};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const DECOMPOSITION_FILE: &str = "decomposition.json";
pub const ATTENTION_DIR: &str = "attention";

/// Where the series come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Headed CSV; `label_column`, if given, holds pointwise anomaly labels
    /// (non-zero means anomalous) and is not used as a model input.
    Csv {
        path: PathBuf,
        #[serde(default)]
        label_column: Option<String>,
    },
    Synth { spec: SynthSpec },
    /// Headerless `label,v1,…,vL` rows. The last `test` samples are held
    /// out, and the `val` samples before them are used for validation.
    LabeledCsv {
        path: PathBuf,
        test: usize,
        #[serde(default)]
        val: usize,
    },
    SynthClasses {
        spec: ClassSpec,
        test: usize,
        #[serde(default)]
        val: usize,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synth {
            spec: SynthSpec {
                name: "two-tone".into(),
                length: 4000,
                seed: 0,
                channels: vec![ChannelSpec {
                    components: vec![
                        Sinusoid { freq: 0.02, amp: 1.0, phase: 0.0 },
                        Sinusoid { freq: 0.15, amp: 0.5, phase: 0.0 },
                    ],
                    noise: 0.1,
                    ..Default::default()
                }],
                anomalies: None,
            },
        }
    }
}

impl DataConfig {
    fn is_labeled(&self) -> bool {
        matches!(self, DataConfig::LabeledCsv { .. } | DataConfig::SynthClasses { .. })
    }

    fn resolve(&mut self, base: &Path) {
        match self {
            DataConfig::Csv { path, .. } | DataConfig::LabeledCsv { path, .. } if path.is_relative() => {
                *path = base.join(&*path);
            }
            _ => {}
        }
    }
}

/// A complete, reproducible description of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub data: DataConfig,
    /// Window length, stride and split. The horizon follows the task.
    pub split: SplitSpec,
    pub sdaq: SdaqConfig,
    pub patch: PatchConfig,
    pub layers: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    pub previous_hidden: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: Option<usize>,
    pub clip_norm: Option<f64>,
    pub lr_decay: f64,
    pub samples_per_epoch: Option<usize>,
    /// Spikes added to the training inputs of reconstruction tasks.
    pub spike_augment: Option<SpikeAugment>,
    pub seed: u64,
    pub out: PathBuf,
    /// Parameters read by eval and export-attention; defaults to
    /// `<out>/best.json`.
    pub checkpoint: Option<PathBuf>,
    /// Training state to continue from.
    pub resume: Option<PathBuf>,
    pub write_predictions: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let m = ModelConfig::default();
        RunConfig {
            task: m.task,
            data: DataConfig::default(),
            split: SplitSpec::default(),
            sdaq: m.sdaq,
            patch: m.patch,
            layers: m.layers,
            ffn_hidden: m.ffn_hidden,
            dropout: m.dropout,
            previous_hidden: m.previous_hidden,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            patience: t.patience,
            clip_norm: t.clip_norm,
            lr_decay: t.lr_decay,
            samples_per_epoch: t.samples_per_epoch,
            spike_augment: None,
            seed: 0,
            out: PathBuf::from("run"),
            checkpoint: None,
            resume: None,
            write_predictions: false,
        }
    }
}

impl RunConfig {
    /// Reads a JSON config; relative data paths are taken relative to the
    /// config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PetsError::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| PetsError::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.data.resolve(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            patience: self.patience,
            clip_norm: self.clip_norm,
            lr_decay: self.lr_decay,
            samples_per_epoch: self.samples_per_epoch,
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join(BEST_FILE))
    }

    fn model_config(&self, seq_len: usize, channels: usize) -> ModelConfig {
        ModelConfig {
            seq_len,
            channels,
            patch: self.patch.clone(),
            layers: self.layers,
            ffn_hidden: self.ffn_hidden,
            dropout: self.dropout,
            previous_hidden: self.previous_hidden,
            task: self.task.clone(),
            sdaq: self.sdaq.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.sdaq.validate()?;
        self.train_config().validate()?;
        let classify = matches!(self.task, Task::Classify { .. });
        if let Some(a) = &self.spike_augment {
            a.validate()?;
            if matches!(self.task, Task::Forecast { .. } | Task::Classify { .. }) {
                return Err(PetsError::InvalidConfig(
                    "spike augmentation applies to reconstruction tasks only".into(),
                ));
            }
        }
        if classify != self.data.is_labeled() {
            return Err(PetsError::InvalidConfig(format!(
                "the {} task cannot use this data source",
                self.task.name()
            )));
        }
        Ok(())
    }
}

/// Raw data as loaded, before windowing.
#[derive(Clone, Debug)]
pub enum RawData {
    Series(SeriesFrame),
    Labeled(LabeledSeries),
}

pub fn load_data(cfg: &DataConfig) -> Result<RawData> {
    Ok(match cfg {
        DataConfig::Csv { path, label_column } => {
            let mut frame = load_csv(path)?;
            if let Some(name) = label_column {
                let c = frame.columns.iter().position(|h| h == name).ok_or_else(|| {
                    PetsError::InvalidInput(format!("{} has no column {name:?}", path.display()))
                })?;
                frame.columns.remove(c);
                let labels = frame.values.remove(c);
                frame.labels = Some(labels.iter().map(|v| *v != 0.0).collect());
                if frame.values.is_empty() {
                    return Err(PetsError::InvalidInput(format!(
                        "{} has no value columns besides the labels",
                        path.display()
                    )));
                }
            }
            frame.validate()?;
            RawData::Series(frame)
        }
        DataConfig::Synth { spec } => RawData::Series(synth_generate(spec)?),
        DataConfig::LabeledCsv { path, .. } => RawData::Labeled(load_labeled_csv(path)?),
        DataConfig::SynthClasses { spec, .. } => RawData::Labeled(synth_classes(spec)?),
    })
}

/// Everything a command needs after loading and windowing.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub model: ModelConfig,
    pub stats: NormStats,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// Present for series data.
    pub frame: Option<SeriesFrame>,
    pub windows: Option<WindowSet>,
}

fn split_labeled(set: LabeledSeries, val: usize, test: usize) -> Result<[LabeledSeries; 3]> {
    let (rest, test_set) = set.split_tail(test)?;
    let (train_set, val_set) = rest.split_tail(val)?;
    if train_set.is_empty() {
        return Err(PetsError::InvalidConfig("no samples left for training".into()));
    }
    Ok([train_set, val_set, test_set])
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    match load_data(&cfg.data)? {
        RawData::Series(frame) => {
            let split = SplitSpec {
                horizon: match cfg.task {
                    Task::Forecast { horizon } => horizon,
                    _ => 0,
                },
                ..cfg.split.clone()
            };
            let w = make_windows(&frame, &split)?;
            let model = cfg.model_config(split.window, frame.channels());
            model.validate()?;
            let ds = |wins, salt: u64| Dataset::from_windows(wins, &cfg.task, &cfg.sdaq, cfg.seed.wrapping_add(salt));
            let mut train = ds(&w.train, 0)?;
            if let Some(a) = &cfg.spike_augment {
                train = train.with_spikes(a, cfg.seed, &cfg.sdaq)?;
            }
            Ok(Prepared {
                model,
                stats: w.stats.clone(),
                train,
                val: ds(&w.val, 1)?,
                test: ds(&w.test, 2)?,
                frame: Some(frame),
                windows: Some(w),
            })
        }
        RawData::Labeled(set) => {
            let (val, test) = match cfg.data {
                DataConfig::LabeledCsv { val, test, .. } | DataConfig::SynthClasses { val, test, .. } => (val, test),
                _ => unreachable!("labelled data comes from labelled sources"),
            };
            if let Task::Classify { classes } = cfg.task {
                if set.classes() > classes {
                    return Err(PetsError::InvalidInput(format!(
                        "data has {} classes, the task declares {classes}",
                        set.classes()
                    )));
                }
            }
            let seq_len = set.series_len();
            let [tr, va, te] = split_labeled(set, val, test)?;
            let all: Vec<f64> = tr.samples.iter().flatten().copied().collect();
            let stats = NormStats::fit(&[all.clone()], 0..all.len())?;
            let model = cfg.model_config(seq_len, 1);
            model.validate()?;
            Ok(Prepared {
                train: Dataset::from_labeled(&tr, seq_len, &stats, &cfg.sdaq)?,
                val: Dataset::from_labeled(&va, seq_len, &stats, &cfg.sdaq)?,
                test: Dataset::from_labeled(&te, seq_len, &stats, &cfg.sdaq)?,
                model,
                stats,
                frame: None,
                windows: None,
            })
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| PetsError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| PetsError::io(path, e))
}

/// Band layout chosen for one decomposed row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowBands {
    pub name: String,
    /// First column of each band plus one past the last column (1-based).
    pub boundaries: Vec<usize>,
    pub energy_fractions: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecomposeReport {
    pub k: usize,
    pub rows: Vec<RowBands>,
    /// Largest relative L2 error of the summed patterns over all rows.
    pub reconstruction_error: f64,
    pub files: Vec<String>,
}

fn relative_error(x: &[f64], y: &[f64]) -> f64 {
    let num = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let den = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    if den > 0.0 {
        num / den
    } else {
        num
    }
}

/// Decomposes every channel (or labelled sample) over its full length and
/// writes one CSV per pattern plus `decomposition.json`.
pub fn cmd_decompose(cfg: &RunConfig) -> Result<DecomposeReport> {
    cfg.sdaq.validate()?;
    let raw = load_data(&cfg.data)?;
    let (x, rows, len, names) = match &raw {
        RawData::Series(f) => (
            f.values.concat(),
            f.channels(),
            f.len(),
            f.columns.clone(),
        ),
        RawData::Labeled(s) => (
            s.samples.concat(),
            s.len(),
            s.series_len(),
            (0..s.len()).map(|i| format!("sample{i}")).collect(),
        ),
    };
    let dec = sdaq_decompose(&x, rows, &cfg.sdaq)?;
    let sum = dec.sum();
    let reconstruction_error = (0..rows)
        .map(|r| relative_error(&x[r * len..(r + 1) * len], &sum[r * len..(r + 1) * len]))
        .fold(0.0, f64::max);
    create_dir(&cfg.out)?;
    let mut files = Vec::new();
    for k in 1..=dec.k() {
        let name = format!("pattern{k}.csv");
        let path = cfg.out.join(&name);
        match &raw {
            RawData::Series(f) => {
                let cols: Vec<Vec<f64>> = (0..rows).map(|r| dec.pattern(k, r).to_vec()).collect();
                write_columns(&path, &f.columns, &cols)?;
            }
            RawData::Labeled(s) => {
                let set = LabeledSeries {
                    samples: (0..rows).map(|r| dec.pattern(k, r).to_vec()).collect(),
                    labels: s.labels.clone(),
                };
                write_labeled_csv(&path, &set)?;
            }
        }
        files.push(name);
    }
    let report = DecomposeReport {
        k: dec.k(),
        rows: names
            .into_iter()
            .zip(dec.partitions.iter().zip(&dec.energy_fractions))
            .map(|(name, (p, e))| RowBands {
                name,
                boundaries: p.boundaries.clone(),
                energy_fractions: e.clone(),
            })
            .collect(),
        reconstruction_error,
        files,
    };
    write_json(&cfg.out.join(DECOMPOSITION_FILE), &report)?;
    Ok(report)
}

/// Trains from scratch (or from `cfg.resume`) and writes the checkpoints,
/// the training log and the resolved config into `cfg.out`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainState> {
    let data = prepare(cfg)?;
    create_dir(&cfg.out)?;
    write_json(&cfg.out.join(CONFIG_FILE), cfg)?;
    let mut model = PetsModel::new(data.model.clone(), cfg.seed)?;
    let resume = cfg.resume.as_deref().map(TrainState::load).transpose()?;
    train::train(
        &mut model,
        &data.train,
        &data.val,
        &cfg.train_config(),
        Some(&cfg.out),
        resume,
    )
}

/// Builds the model for `data` and loads the checkpoint into it.
pub fn load_model(cfg: &RunConfig, data: &Prepared) -> Result<PetsModel> {
    let path = cfg.checkpoint_path();
    let text = fs::read_to_string(&path).map_err(|e| PetsError::io(&path, e))?;
    let file: ParamFile = serde_json::from_str(&text)
        .map_err(|e| PetsError::InvalidInput(format!("{}: {e}", path.display())))?;
    let mut model = PetsModel::new(data.model.clone(), cfg.seed)?;
    model.store.load_file(&file).map_err(|e| match e {
        PetsError::Shape(msg) => PetsError::Shape(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    Ok(model)
}

/// Anomaly scores of the test span with the detection threshold taken
/// from the validation span.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyScores {
    pub threshold: f64,
    /// Frame index of the first scored point.
    pub offset: usize,
    pub scores: Vec<f64>,
    pub flagged: Vec<bool>,
    pub labels: Option<Vec<bool>>,
}

pub fn anomaly_scores(model: &PetsModel, data: &Prepared, quantile: f64, batch: usize) -> Result<AnomalyScores> {
    let (w, frame) = match (&data.windows, &data.frame) {
        (Some(w), Some(f)) => (w, f),
        _ => return Err(PetsError::InvalidConfig("anomaly detection needs series data".into())),
    };
    if data.val.is_empty() || data.test.is_empty() {
        return Err(PetsError::InvalidConfig(
            "anomaly detection needs validation and test windows".into(),
        ));
    }
    let [_, val_range, test_range] = w.ranges.clone();
    let val = train::pointwise_errors(model, &data.val, &w.val.starts, val_range, batch)?;
    let scores = train::pointwise_errors(model, &data.test, &w.test.starts, test_range.clone(), batch)?;
    let threshold = tasks::quantile(&val, quantile)?;
    let flagged = tasks::anomaly_detect(&scores, &val, quantile)?;
    Ok(AnomalyScores {
        threshold,
        offset: test_range.start,
        scores,
        flagged,
        labels: frame.labels.as_ref().map(|l| l[test_range].to_vec()),
    })
}

fn write_rows(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| PetsError::io(path, e.into()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| PetsError::io(path, e))
}

/// Evaluates the checkpoint on the test split and writes `metrics.json`
/// (and `predictions.csv` when requested).
pub fn cmd_eval(cfg: &RunConfig) -> Result<MetricReport> {
    let data = prepare(cfg)?;
    let model = load_model(cfg, &data)?;
    let ev = train::evaluate(&model, &data.test, &data.stats, cfg.batch_size)?;
    let mut report = ev.report;
    create_dir(&cfg.out)?;
    let pred_path = cfg.out.join(PREDICTIONS_FILE);
    match (&cfg.task, &data.test.targets) {
        (Task::Anomaly { quantile }, _) => {
            let a = anomaly_scores(&model, &data, *quantile, cfg.batch_size)?;
            report.insert("threshold", a.threshold)?;
            report.insert("flagged", a.flagged.iter().filter(|f| **f).count() as f64)?;
            if let Some(labels) = &a.labels {
                let (p, r, f1) = tasks::precision_recall_f1(&a.flagged, labels)?;
                report.insert("precision", p)?;
                report.insert("recall", r)?;
                report.insert("f1", f1)?;
            }
            if cfg.write_predictions {
                let rows = a.scores.iter().zip(&a.flagged).enumerate().map(|(i, (s, f))| {
                    let label = a.labels.as_ref().map_or(String::new(), |l| u8::from(l[i]).to_string());
                    vec![(a.offset + i).to_string(), format!("{s:?}"), u8::from(*f).to_string(), label]
                });
                write_rows(&pred_path, &["index", "score", "flagged", "label"], rows)?;
            }
        }
        (_, Targets::Classes(labels)) if cfg.write_predictions => {
            let classes = ev.predictions.len() / labels.len();
            let mut header = vec!["sample".to_string(), "label".to_string(), "predicted".to_string()];
            header.extend((0..classes).map(|c| format!("logit{c}")));
            let rows = ev.predictions.chunks(classes).zip(labels).enumerate().map(|(i, (row, l))| {
                let best = (0..classes).fold(0, |b, c| if row[c] > row[b] { c } else { b });
                let mut out = vec![i.to_string(), l.to_string(), best.to_string()];
                out.extend(row.iter().map(|v| format!("{v:?}")));
                out
            });
            let header: Vec<&str> = header.iter().map(String::as_str).collect();
            write_rows(&pred_path, &header, rows)?;
        }
        (_, Targets::Values { width, .. }) if cfg.write_predictions => {
            let (d, width) = (data.test.channels, *width);
            let truth = match &data.test.targets {
                Targets::Values { data: t, .. } => t,
                Targets::Classes(_) => unreachable!(),
            };
            let rows = ev.predictions.iter().enumerate().map(|(i, p)| {
                let (win, c, t) = (i / (d * width), (i / width) % d, i % width);
                let y = data.stats.denormalize(c, truth[i]);
                vec![win.to_string(), c.to_string(), t.to_string(), format!("{y:?}"), format!("{p:?}")]
            });
            write_rows(&pred_path, &["window", "channel", "step", "target", "prediction"], rows)?;
        }
        _ => {}
    }
    write_json(&cfg.out.join(METRICS_FILE), &report)?;
    Ok(report)
}

/// Which token range of the attention matrices belongs to which pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionBlock {
    pub pattern: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub sample: usize,
    pub channel: usize,
    pub tokens_per_pattern: usize,
    pub blocks: Vec<AttentionBlock>,
    pub files: Vec<String>,
}

/// Writes one `[K·P_L, K·P_L]` pattern-attention CSV per layer for a test
/// sample, plus `blocks.json` describing the token layout.
pub fn cmd_export_attention(cfg: &RunConfig, sample: usize, channel: usize) -> Result<AttentionExport> {
    let data = prepare(cfg)?;
    let model = load_model(cfg, &data)?;
    let n = data.test.count();
    if sample >= n {
        return Err(PetsError::InvalidInput(format!(
            "sample {sample} out of range: the test split has {n} samples"
        )));
    }
    if channel >= data.test.channels {
        return Err(PetsError::InvalidInput(format!(
            "channel {channel} out of range: the data has {} channels",
            data.test.channels
        )));
    }
    let b = data.test.batch(&[sample])?;
    let mut g = Graph::new();
    let out = model.forward(&mut g, &b.inputs, &b.patterns, true)?;
    let dims = model.dims();
    let side = dims.k * dims.tokens;
    let dir = cfg.out.join(ATTENTION_DIR);
    create_dir(&dir)?;
    let mut files = Vec::new();
    for (layer, a) in out.attention.iter().enumerate() {
        let values = g.value(*a).data();
        let m = &values[channel * side * side..(channel + 1) * side * side];
        let name = format!("layer{}.csv", layer + 1);
        let path = dir.join(&name);
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(&path)
            .map_err(|e| PetsError::io(&path, e.into()))?;
        for row in m.chunks(side) {
            w.write_record(row.iter().map(|v| format!("{v:?}")))?;
        }
        w.flush().map_err(|e| PetsError::io(&path, e))?;
        files.push(format!("{ATTENTION_DIR}/{name}"));
    }
    let export = AttentionExport {
        sample,
        channel,
        tokens_per_pattern: dims.tokens,
        blocks: (0..dims.k)
            .map(|k| AttentionBlock {
                pattern: k + 1,
                start: k * dims.tokens,
                end: (k + 1) * dims.tokens,
            })
            .collect(),
        files,
    };
    write_json(&dir.join("blocks.json"), &export)?;
    Ok(export)
}
