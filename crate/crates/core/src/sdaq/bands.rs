//! Energy-quantised band partitioning.

use serde::{Deserialize, Serialize};

use super::Spectrogram;
use crate::error::{PetsError, Result};

/// K contiguous sub-bands of the frequency axis, 1-based.
///
/// Band `k` (1-based) covers frequency indices
/// `boundaries[k-1] .. boundaries[k]` (end exclusive).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandPartition {
    pub boundaries: Vec<usize>,
    pub mus: Vec<f64>,
}

impl BandPartition {
    pub fn k(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn lambda(&self) -> usize {
        self.boundaries[self.k()] - 1
    }

    /// 1-based frequency indices of band `k` (1-based).
    pub fn band(&self, k: usize) -> std::ops::Range<usize> {
        self.boundaries[k - 1]..self.boundaries[k]
    }

    /// Band (1-based) that contains 1-based frequency index `j`.
    pub fn band_of(&self, j: usize) -> usize {
        (1..=self.k())
            .find(|&k| self.band(k).contains(&j))
            .expect("partition covers every frequency index")
    }

    /// Per-band share of `column_energy` (indexed from the low end).
    pub fn energy_fractions(&self, column_energy: &[f64]) -> Vec<f64> {
        let total: f64 = column_energy.iter().sum();
        (1..=self.k())
            .map(|k| {
                let e: f64 = self.band(k).map(|j| column_energy[j - 1]).sum();
                if total > 0.0 {
                    e / total
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Smallest 1-based index `b` whose cumulative energy from the low-frequency
/// end reaches `mu` of the total.
pub fn ami(column_energy: &[f64], mu: f64) -> Result<usize> {
    if !(mu > 0.0 && mu < 1.0) {
        return Err(PetsError::InvalidConfig(format!("mu {mu} outside (0, 1)")));
    }
    if column_energy.iter().any(|e| *e < 0.0 || !e.is_finite()) {
        return Err(PetsError::InvalidInput(
            "column energy must be finite and non-negative".into(),
        ));
    }
    let total: f64 = column_energy.iter().sum();
    if total <= 0.0 {
        return Err(PetsError::DegenerateSpectrum);
    }
    let target = mu * total;
    let mut cum = 0.0;
    for (j, e) in column_energy.iter().enumerate() {
        cum += e;
        if cum >= target {
            return Ok(j + 1);
        }
    }
    // only reachable through rounding in the running sum
    Ok(column_energy.len())
}

/// Band boundaries from per-frequency energy, forcing every band to hold at
/// least one frequency index.
pub fn partition_from_energy(column_energy: &[f64], mus: &[f64]) -> Result<BandPartition> {
    let lambda = column_energy.len();
    let k = mus.len() + 1;
    validate_mus(mus)?;
    if lambda < k {
        return Err(PetsError::InvalidConfig(format!(
            "spectral width {lambda} cannot hold {k} non-empty bands"
        )));
    }
    let mut boundaries = Vec::with_capacity(k + 1);
    boundaries.push(1);
    for (i, &mu) in mus.iter().enumerate() {
        let band = i + 1;
        let prev = boundaries[band - 1];
        let upper = lambda + 1 - (k - band);
        let b = (ami(column_energy, mu)? + 1).max(prev + 1).min(upper);
        boundaries.push(b);
    }
    boundaries.push(lambda + 1);
    Ok(BandPartition {
        boundaries,
        mus: mus.to_vec(),
    })
}

/// Partition computed from the column energy `Σ_i A[·, i, j]` summed over
/// every row of the spectrogram.
pub fn partition_bands(spec: &Spectrogram, mus: &[f64]) -> Result<BandPartition> {
    partition_from_energy(&spec.column_energy(), mus)
}

pub(crate) fn validate_mus(mus: &[f64]) -> Result<()> {
    if mus.is_empty() {
        return Err(PetsError::InvalidConfig("at least one mu is required".into()));
    }
    let mut prev = 0.0;
    for &m in mus {
        if !(m > prev && m < 1.0) {
            return Err(PetsError::InvalidConfig(format!(
                "mus must be strictly increasing inside (0, 1), got {mus:?}"
            )));
        }
        prev = m;
    }
    Ok(())
}

/// Zero every frequency column outside band `k` (1-based).
pub fn mask_subband(spec: &Spectrogram, part: &BandPartition, k: usize) -> Result<Spectrogram> {
    if k == 0 || k > part.k() {
        return Err(PetsError::InvalidInput(format!(
            "band {k} out of range 1..={}",
            part.k()
        )));
    }
    if part.lambda() != spec.lambda() {
        return Err(PetsError::InvalidInput(format!(
            "partition spans {} frequencies, spectrogram has {}",
            part.lambda(),
            spec.lambda()
        )));
    }
    let keep: Vec<bool> = (1..=spec.lambda()).map(|j| part.band(k).contains(&j)).collect();
    Ok(spec.masked(&keep))
}
