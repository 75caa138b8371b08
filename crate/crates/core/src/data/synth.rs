use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LabeledSeries, SeriesFrame};
use crate::error::{PetsError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sinusoid {
    /// Cycles per sample.
    pub freq: f64,
    pub amp: f64,
    #[serde(default)]
    pub phase: f64,
}

impl Sinusoid {
    pub fn at(&self, t: f64) -> f64 {
        self.amp * (2.0 * PI * self.freq * t + self.phase).sin()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelSpec {
    pub name: Option<String>,
    pub components: Vec<Sinusoid>,
    pub offset: f64,
    /// Added per sample.
    pub trend: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
}

/// Isolated spikes of `magnitude` channel standard deviations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalySpec {
    pub count: usize,
    pub magnitude: f64,
    /// Spikes land in `from..to`.
    pub from: usize,
    pub to: usize,
    /// Minimum distance between two spikes.
    #[serde(default = "default_gap")]
    pub min_gap: usize,
}

fn default_gap() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    #[serde(default)]
    pub name: String,
    pub length: usize,
    #[serde(default)]
    pub seed: u64,
    pub channels: Vec<ChannelSpec>,
    #[serde(default)]
    pub anomalies: Option<AnomalySpec>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normal(sigma: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, sigma)
        .map_err(|e| PetsError::InvalidConfig(format!("noise level {sigma}: {e}")))
}

fn std_of(x: &[f64]) -> f64 {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64).sqrt()
}

/// Deterministic multichannel series from a component description.
pub fn synth_generate(spec: &SynthSpec) -> Result<SeriesFrame> {
    if spec.length == 0 || spec.channels.is_empty() {
        return Err(PetsError::InvalidConfig("synthetic series needs length and channels".into()));
    }
    let mut values = Vec::with_capacity(spec.channels.len());
    for (c, ch) in spec.channels.iter().enumerate() {
        let mut rng = stream(spec.seed, c as u64);
        let noise = normal(ch.noise)?;
        values.push(
            (0..spec.length)
                .map(|t| {
                    let tf = t as f64;
                    let clean: f64 =
                        ch.offset + ch.trend * tf + ch.components.iter().map(|s| s.at(tf)).sum::<f64>();
                    if ch.noise > 0.0 {
                        clean + noise.sample(&mut rng)
                    } else {
                        clean
                    }
                })
                .collect::<Vec<f64>>(),
        );
    }
    let mut labels = None;
    if let Some(a) = &spec.anomalies {
        if a.from >= a.to || a.to > spec.length {
            return Err(PetsError::InvalidConfig(format!(
                "anomaly range {}..{} outside series of length {}",
                a.from, a.to, spec.length
            )));
        }
        let mut rng = stream(spec.seed, u64::MAX);
        let sigmas: Vec<f64> = values.iter().map(|v| std_of(v)).collect();
        let mut at: Vec<usize> = Vec::with_capacity(a.count);
        let mut tries = 0;
        while at.len() < a.count {
            tries += 1;
            if tries > 100_000 {
                return Err(PetsError::InvalidConfig(format!(
                    "cannot place {} spikes {} apart in {}..{}",
                    a.count, a.min_gap, a.from, a.to
                )));
            }
            let p = rng.gen_range(a.from..a.to);
            if at.iter().all(|q| q.abs_diff(p) >= a.min_gap) {
                at.push(p);
            }
        }
        let mut l = vec![false; spec.length];
        for p in at {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            for (ch, s) in values.iter_mut().zip(&sigmas) {
                ch[p] += sign * a.magnitude * s;
            }
            l[p] = true;
        }
        labels = Some(l);
    }
    Ok(SeriesFrame {
        name: spec.name.clone(),
        timestamps: None,
        columns: spec
            .channels
            .iter()
            .enumerate()
            .map(|(c, ch)| ch.name.clone().unwrap_or_else(|| format!("x{c}")))
            .collect(),
        values,
        labels,
        dropped_rows: 0,
    })
}

/// Hann-windowed sinusoid bursts placed at random positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Burst {
    pub freq: f64,
    pub amp: f64,
    pub width: usize,
    pub count: usize,
}

impl Burst {
    /// Lowest frequency inside the window's main lobe.
    pub fn lowest_freq(&self) -> f64 {
        self.freq - 2.0 / self.width as f64
    }
}

/// Classes sharing a random-phase low-frequency base and differing only in
/// burst content above `cutoff`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub samples_per_class: usize,
    pub length: usize,
    #[serde(default)]
    pub seed: u64,
    pub base: Vec<Sinusoid>,
    #[serde(default)]
    pub noise: f64,
    /// Bursts of each class; the class count is `classes.len()`.
    pub classes: Vec<Vec<Burst>>,
    pub cutoff: f64,
}

impl ClassSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 || self.samples_per_class == 0 || self.length == 0 {
            return Err(PetsError::InvalidConfig(
                "need at least two classes and non-empty samples".into(),
            ));
        }
        if let Some(s) = self.base.iter().find(|s| s.freq >= self.cutoff) {
            return Err(PetsError::InvalidConfig(format!(
                "base component at {} is not below the cutoff {}",
                s.freq, self.cutoff
            )));
        }
        for b in self.classes.iter().flatten() {
            if b.width == 0 || b.width > self.length || b.lowest_freq() < self.cutoff {
                return Err(PetsError::InvalidConfig(format!(
                    "burst at {} with width {} reaches below the cutoff {}",
                    b.freq, b.width, self.cutoff
                )));
            }
        }
        Ok(())
    }
}

/// Samples interleaved by class (`label = index mod classes`).
pub fn synth_classes(spec: &ClassSpec) -> Result<LabeledSeries> {
    spec.validate()?;
    let k = spec.classes.len();
    let noise = normal(spec.noise)?;
    let mut out = LabeledSeries::default();
    for i in 0..spec.samples_per_class * k {
        let label = i % k;
        let mut base_rng = stream(spec.seed, 2 * i as u64);
        let mut burst_rng = stream(spec.seed, 2 * i as u64 + 1);
        let phases: Vec<f64> = spec.base.iter().map(|_| base_rng.gen_range(0.0..2.0 * PI)).collect();
        let mut x: Vec<f64> = (0..spec.length)
            .map(|t| {
                let tf = t as f64;
                let v: f64 = spec
                    .base
                    .iter()
                    .zip(&phases)
                    .map(|(s, p)| s.amp * (2.0 * PI * s.freq * tf + s.phase + p).sin())
                    .sum();
                if spec.noise > 0.0 {
                    v + noise.sample(&mut base_rng)
                } else {
                    v
                }
            })
            .collect();
        for b in &spec.classes[label] {
            for _ in 0..b.count {
                let start = burst_rng.gen_range(0..=spec.length - b.width);
                let phase = burst_rng.gen_range(0.0..2.0 * PI);
                for n in 0..b.width {
                    let w = 0.5 - 0.5 * (2.0 * PI * (n as f64 + 0.5) / b.width as f64).cos();
                    x[start + n] += b.amp * w * (2.0 * PI * b.freq * n as f64 + phase).sin();
                }
            }
        }
        out.samples.push(x);
        out.labels.push(label);
    }
    Ok(out)
}
