use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::SeriesFrame;
use crate::error::{PetsError, Result};

const STD_FLOOR: f64 = 1e-8;

/// How a series is cut into contiguous train / validation / test spans.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "by", rename_all = "lowercase")]
pub enum Partition {
    /// Fractions of the series; the test span takes the remainder when the
    /// fractions sum to one.
    Ratio { train: f64, val: f64, test: f64 },
    Length { train: usize, val: usize, test: usize },
}

impl Default for Partition {
    fn default() -> Self {
        Partition::Ratio {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl Partition {
    pub fn ranges(&self, total: usize) -> Result<[Range<usize>; 3]> {
        let (a, b, c) = match *self {
            Partition::Ratio { train, val, test } => {
                if [train, val, test].iter().any(|r| !(0.0..=1.0).contains(r))
                    || train + val + test > 1.0 + 1e-9
                {
                    return Err(PetsError::InvalidConfig(format!(
                        "split ratios {train}/{val}/{test} must be in [0, 1] and sum to at most 1"
                    )));
                }
                let a = (total as f64 * train).floor() as usize;
                let b = (total as f64 * val).floor() as usize;
                let c = if (train + val + test - 1.0).abs() <= 1e-9 {
                    total - a - b
                } else {
                    (total as f64 * test).floor() as usize
                };
                (a, b, c)
            }
            Partition::Length { train, val, test } => (train, val, test),
        };
        if a + b + c > total {
            return Err(PetsError::InvalidConfig(format!(
                "split lengths {a}+{b}+{c} exceed series length {total}"
            )));
        }
        Ok([0..a, a..a + b, a + b..a + b + c])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub partition: Partition,
    pub window: usize,
    /// Forecast length; zero for reconstruction tasks.
    pub horizon: usize,
    pub stride: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            partition: Partition::default(),
            window: 96,
            horizon: 96,
            stride: 1,
        }
    }
}

/// Per-channel z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population statistics of `values[c][range]`, std floored at `1e-8`.
    pub fn fit(values: &[Vec<f64>], range: Range<usize>) -> Result<Self> {
        if range.is_empty() {
            return Err(PetsError::InvalidConfig("empty training span".into()));
        }
        let n = range.len() as f64;
        let mut mean = Vec::with_capacity(values.len());
        let mut std = Vec::with_capacity(values.len());
        for ch in values {
            let s = &ch[range.clone()];
            let m = s.iter().sum::<f64>() / n;
            let v = s.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            mean.push(m);
            std.push(v.sqrt().max(STD_FLOOR));
        }
        Ok(NormStats { mean, std })
    }

    pub fn identity(channels: usize) -> Self {
        NormStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn normalize(&self, channel: usize, v: f64) -> f64 {
        (v - self.mean[channel]) / self.std[channel]
    }

    pub fn denormalize(&self, channel: usize, v: f64) -> f64 {
        v * self.std[channel] + self.mean[channel]
    }
}

/// Normalised windows of one split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Windows {
    pub channels: usize,
    pub len: usize,
    pub horizon: usize,
    /// Frame index of each window's first input point.
    pub starts: Vec<usize>,
    /// `[N, channels, len]`.
    pub inputs: Vec<f64>,
    /// `[N, channels, horizon]`.
    pub targets: Vec<f64>,
}

impl Windows {
    pub fn count(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        let n = self.channels * self.len;
        &self.inputs[i * n..(i + 1) * n]
    }

    pub fn target(&self, i: usize) -> &[f64] {
        let n = self.channels * self.horizon;
        &self.targets[i * n..(i + 1) * n]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    pub stats: NormStats,
    pub ranges: [Range<usize>; 3],
    pub train: Windows,
    pub val: Windows,
    pub test: Windows,
}

/// Start offsets of every span of length `span` inside `range` at the given
/// stride, plus the span ending exactly at the range end.
fn window_starts(range: &Range<usize>, span: usize, stride: usize) -> Vec<usize> {
    if range.len() < span {
        return Vec::new();
    }
    let last = range.end - span;
    let mut starts: Vec<usize> = (range.start..=last).step_by(stride).collect();
    if starts.last() != Some(&last) {
        starts.push(last);
    }
    starts
}

fn cut(frame: &SeriesFrame, stats: &NormStats, starts: Vec<usize>, spec: &SplitSpec) -> Windows {
    let (d, l, h) = (frame.channels(), spec.window, spec.horizon);
    let mut w = Windows {
        channels: d,
        len: l,
        horizon: h,
        inputs: Vec::with_capacity(starts.len() * d * l),
        targets: Vec::with_capacity(starts.len() * d * h),
        starts,
    };
    for &s in &w.starts {
        for (c, ch) in frame.values.iter().enumerate() {
            w.inputs.extend(ch[s..s + l].iter().map(|v| stats.normalize(c, *v)));
        }
        for (c, ch) in frame.values.iter().enumerate() {
            w.targets.extend(ch[s + l..s + l + h].iter().map(|v| stats.normalize(c, *v)));
        }
    }
    w
}

/// Cuts every split into normalised `(input, target)` windows using
/// statistics of the training span only. Windows never straddle a split
/// boundary; the final window of each split is always kept.
pub fn make_windows(frame: &SeriesFrame, spec: &SplitSpec) -> Result<WindowSet> {
    frame.validate()?;
    if spec.window == 0 || spec.stride == 0 {
        return Err(PetsError::InvalidConfig("window and stride must be positive".into()));
    }
    let span = spec.window + spec.horizon;
    let ranges = spec.partition.ranges(frame.len())?;
    for (name, r) in ["train", "validation", "test"].iter().zip(&ranges) {
        if (*name == "train" || !r.is_empty()) && r.len() < span {
            return Err(PetsError::InvalidConfig(format!(
                "{name} split has {} points, windows need {span}",
                r.len()
            )));
        }
    }
    let stats = NormStats::fit(&frame.values, ranges[0].clone())?;
    let [tr, va, te] = &ranges;
    Ok(WindowSet {
        train: cut(frame, &stats, window_starts(tr, span, spec.stride), spec),
        val: cut(frame, &stats, window_starts(va, span, spec.stride), spec),
        test: cut(frame, &stats, window_starts(te, span, spec.stride), spec),
        stats,
        ranges,
    })
}
