//! Spectrum decomposition and amplitude quantisation.
//!
//! A series is projected onto a time–frequency image (wavelet or Fourier),
//! the frequency axis is cut into K bands holding fixed cumulative shares of
//! the spectral energy, and each band is inverted back to the time domain.
//! The K resulting series ("fluctuation patterns") are ordered from the
//! lowest-frequency band to the highest.

mod bands;
pub mod cwt;
pub mod fft;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

pub use bands::{ami, mask_subband, partition_bands, partition_from_energy, BandPartition};
pub use cwt::{calibrate_icwt, calibrate_icwt_with_len, cwt, icwt, probe_sinusoids};
pub use fft::fft_spectrogram;

use crate::error::{PetsError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Cwt,
    Fft,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Wavelet {
    Haar,
    Morlet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdaqConfig {
    /// Number of frequency columns in the spectrogram.
    pub lambda: usize,
    /// Cumulative energy shares separating the K = len + 1 bands.
    pub mus: Vec<f64>,
    pub backend: Backend,
    pub wavelet: Wavelet,
    /// Reconstruction scale; `None` calibrates on sinusoid probes.
    #[serde(default)]
    pub icwt_calibration: Option<f64>,
}

impl Default for SdaqConfig {
    fn default() -> Self {
        SdaqConfig {
            lambda: 50,
            mus: vec![0.7, 0.9],
            backend: Backend::Cwt,
            wavelet: Wavelet::Haar,
            icwt_calibration: None,
        }
    }
}

impl SdaqConfig {
    pub fn k(&self) -> usize {
        self.mus.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        bands::validate_mus(&self.mus)?;
        if self.lambda < self.k() {
            return Err(PetsError::InvalidConfig(format!(
                "lambda {} must be at least K = {}",
                self.lambda,
                self.k()
            )));
        }
        if let Some(c) = self.icwt_calibration {
            if !(c > 0.0 && c.is_finite()) {
                return Err(PetsError::InvalidConfig(format!(
                    "icwt calibration must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// Pseudo-frequencies `j · 0.5 / λ` for `j = 1..=λ`, in cycles per sample.
pub fn freq_axis(lambda: usize) -> Vec<f64> {
    (1..=lambda).map(|j| j as f64 * 0.5 / lambda as f64).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Coefficients {
    /// `[row, scale, time]` analysis coefficients before taking magnitudes.
    Wavelet {
        wavelet: Wavelet,
        data: Vec<Complex64>,
    },
    /// `[row, bin]` rFFT spectrum and the bucket of every bin.
    Fourier {
        data: Vec<Complex64>,
        bucket: Vec<usize>,
    },
}

/// Time–frequency amplitude image `[rows, len, lambda]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    rows: usize,
    len: usize,
    lambda: usize,
    values: Vec<f64>,
    freq_axis: Vec<f64>,
    mean_offsets: Vec<f64>,
    coefficients: Option<Coefficients>,
}

impl Spectrogram {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn lambda(&self) -> usize {
        self.lambda
    }

    /// Amplitudes laid out `[row, time, frequency]`.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, row: usize, t: usize, j: usize) -> f64 {
        self.values[(row * self.len + t) * self.lambda + j]
    }

    pub fn freq_axis(&self) -> &[f64] {
        &self.freq_axis
    }

    pub fn mean_offsets(&self) -> &[f64] {
        &self.mean_offsets
    }

    /// Pre-magnitude wavelet coefficient of `row` at scale `j`, time `t`.
    pub fn wavelet_coefficient(&self, row: usize, j: usize, t: usize) -> Option<Complex64> {
        match &self.coefficients {
            Some(Coefficients::Wavelet { data, .. }) => {
                Some(data[(row * self.lambda + j) * self.len + t])
            }
            _ => None,
        }
    }

    /// Drop the coefficients kept for inversion.
    pub fn without_coefficients(mut self) -> Self {
        self.coefficients = None;
        self
    }

    /// `Σ_row Σ_t A[row, t, j]` for every frequency column `j`.
    pub fn column_energy(&self) -> Vec<f64> {
        let mut e = vec![0.0; self.lambda];
        for chunk in self.values.chunks(self.lambda) {
            for (acc, v) in e.iter_mut().zip(chunk) {
                *acc += v;
            }
        }
        e
    }

    /// Single-row view (with its coefficients).
    pub fn row(&self, r: usize) -> Spectrogram {
        let (len, lambda) = (self.len, self.lambda);
        let coefficients = self.coefficients.as_ref().map(|c| match c {
            Coefficients::Wavelet { wavelet, data } => Coefficients::Wavelet {
                wavelet: *wavelet,
                data: data[r * lambda * len..(r + 1) * lambda * len].to_vec(),
            },
            Coefficients::Fourier { data, bucket } => {
                let bins = bucket.len();
                Coefficients::Fourier {
                    data: data[r * bins..(r + 1) * bins].to_vec(),
                    bucket: bucket.clone(),
                }
            }
        });
        Spectrogram {
            rows: 1,
            len,
            lambda,
            values: self.values[r * len * lambda..(r + 1) * len * lambda].to_vec(),
            freq_axis: self.freq_axis.clone(),
            mean_offsets: vec![self.mean_offsets[r]],
            coefficients,
        }
    }

    /// Copy with frequency columns where `keep[j]` is false set to zero, in
    /// both the amplitude image and the retained coefficients.
    pub(crate) fn masked(&self, keep: &[bool]) -> Spectrogram {
        let mut out = self.clone();
        for chunk in out.values.chunks_mut(self.lambda) {
            for (v, k) in chunk.iter_mut().zip(keep) {
                if !k {
                    *v = 0.0;
                }
            }
        }
        let zero = Complex64::new(0.0, 0.0);
        match &mut out.coefficients {
            Some(Coefficients::Wavelet { data, .. }) => {
                for (i, c) in data.iter_mut().enumerate() {
                    if !keep[(i / self.len) % self.lambda] {
                        *c = zero;
                    }
                }
            }
            Some(Coefficients::Fourier { data, bucket }) => {
                let bins = bucket.len();
                for (i, c) in data.iter_mut().enumerate() {
                    if !keep[bucket[i % bins]] {
                        *c = zero;
                    }
                }
            }
            None => {}
        }
        out
    }

    /// Elementwise `a·self + b·other` over amplitudes and coefficients.
    /// Mean offsets combine the same way.
    pub fn combine(&self, a: f64, other: &Spectrogram, b: f64) -> Result<Spectrogram> {
        if (self.rows, self.len, self.lambda) != (other.rows, other.len, other.lambda) {
            return Err(PetsError::Shape(format!(
                "spectrogram shapes differ: {:?} vs {:?}",
                (self.rows, self.len, self.lambda),
                (other.rows, other.len, other.lambda)
            )));
        }
        let mut out = self.clone();
        for (o, v) in out.values.iter_mut().zip(&other.values) {
            *o = a * *o + b * v;
        }
        for (o, v) in out.mean_offsets.iter_mut().zip(&other.mean_offsets) {
            *o = a * *o + b * v;
        }
        match (&mut out.coefficients, &other.coefficients) {
            (Some(Coefficients::Wavelet { data: x, .. }), Some(Coefficients::Wavelet { data: y, .. }))
            | (Some(Coefficients::Fourier { data: x, .. }), Some(Coefficients::Fourier { data: y, .. })) => {
                for (o, v) in x.iter_mut().zip(y) {
                    *o = *o * a + *v * b;
                }
            }
            _ => {
                return Err(PetsError::StateError(
                    "spectrograms carry incompatible coefficients".into(),
                ))
            }
        }
        Ok(out)
    }

    fn is_fourier(&self) -> bool {
        matches!(self.coefficients, Some(Coefficients::Fourier { .. }))
    }
}

/// Time–frequency image of every row of `x` with the configured backend.
pub fn spectrogram(x: &[f64], rows: usize, cfg: &SdaqConfig) -> Result<Spectrogram> {
    match cfg.backend {
        Backend::Cwt => cwt(x, rows, cfg),
        Backend::Fft => fft_spectrogram(x, rows, cfg),
    }
}

/// Inverse of [`spectrogram`], including mean offsets.
pub fn inverse(spec: &Spectrogram, cfg: &SdaqConfig) -> Result<Vec<f64>> {
    if spec.is_fourier() {
        fft::inverse_fft(spec)
    } else {
        icwt(spec, cfg)
    }
}

/// K band-limited series per input row, `[K, rows, len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoupledSeries {
    k: usize,
    rows: usize,
    len: usize,
    patterns: Vec<f64>,
    /// Band partition chosen for each row.
    pub partitions: Vec<BandPartition>,
    /// Per-row share of spectral energy in each band.
    pub energy_fractions: Vec<Vec<f64>>,
}

impl DecoupledSeries {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn source_length(&self) -> usize {
        self.len
    }

    /// Pattern `k` (1-based) of `row`.
    pub fn pattern(&self, k: usize, row: usize) -> &[f64] {
        let start = ((k - 1) * self.rows + row) * self.len;
        &self.patterns[start..start + self.len]
    }

    /// All rows of pattern `k` (1-based), row-major.
    pub fn pattern_rows(&self, k: usize) -> &[f64] {
        let n = self.rows * self.len;
        &self.patterns[(k - 1) * n..k * n]
    }

    /// `Σ_k pattern_k` for every row.
    pub fn sum(&self) -> Vec<f64> {
        let n = self.rows * self.len;
        let mut out = vec![0.0; n];
        for k in 0..self.k {
            for (o, v) in out.iter_mut().zip(&self.patterns[k * n..(k + 1) * n]) {
                *o += v;
            }
        }
        out
    }
}

/// Decompose every row of `x` (`rows × len`) into K fluctuation patterns.
///
/// Each row gets its own band partition. For the wavelet backend the row
/// mean, which zero-mean wavelets cannot represent, is added to pattern 1.
/// Rows with no spectral energy (constants) route everything to pattern 1.
pub fn sdaq_decompose(x: &[f64], rows: usize, cfg: &SdaqConfig) -> Result<DecoupledSeries> {
    cfg.validate()?;
    let spec = spectrogram(x, rows, cfg)?;
    let (len, k) = (spec.len, cfg.k());
    let calibration = match cfg.backend {
        Backend::Cwt => match cfg.icwt_calibration {
            Some(c) => c,
            None => calibrate_icwt(cfg)?,
        },
        Backend::Fft => 1.0,
    };
    let mut patterns = vec![0.0; k * rows * len];
    let mut partitions = Vec::with_capacity(rows);
    let mut fractions = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = spec.row(r);
        let energy = row.column_energy();
        let part = match partition_from_energy(&energy, &cfg.mus) {
            Ok(p) => p,
            Err(PetsError::DegenerateSpectrum) => {
                trivial_partition(cfg.lambda, &cfg.mus)
            }
            Err(e) => return Err(e),
        };
        for band in 1..=k {
            let keep: Vec<bool> = (1..=cfg.lambda).map(|j| part.band(band).contains(&j)).collect();
            let masked = row.masked(&keep);
            let y = match cfg.backend {
                Backend::Fft => fft::inverse_fft(&masked)?,
                Backend::Cwt => {
                    let mut y = cwt::raw_icwt(&masked, Some(&keep))?;
                    for v in &mut y {
                        *v *= calibration;
                    }
                    if band == 1 {
                        for v in &mut y {
                            *v += row.mean_offsets[0];
                        }
                    }
                    y
                }
            };
            let start = ((band - 1) * rows + r) * len;
            patterns[start..start + len].copy_from_slice(&y);
        }
        fractions.push(part.energy_fractions(&energy));
        partitions.push(part);
    }
    Ok(DecoupledSeries {
        k,
        rows,
        len,
        patterns,
        partitions,
        energy_fractions: fractions,
    })
}

/// Lowest-possible boundaries: one column for each of bands 1..K−1.
fn trivial_partition(lambda: usize, mus: &[f64]) -> BandPartition {
    let k = mus.len() + 1;
    let mut boundaries: Vec<usize> = (1..=k).collect();
    boundaries.push(lambda + 1);
    BandPartition {
        boundaries,
        mus: mus.to_vec(),
    }
}
