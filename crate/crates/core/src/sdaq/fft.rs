//! FFT backend: time-invariant bucketed magnitude image with an exact
//! masked inverse.

use num_complex::Complex64;
use rustfft::FftPlanner;

use super::cwt::row_len;
use super::{freq_axis, Backend, Coefficients, SdaqConfig, Spectrogram};
use crate::error::{PetsError, Result};

/// Number of non-negative frequency bins of a length-`len` real signal.
pub fn positive_bins(len: usize) -> usize {
    len / 2 + 1
}

/// Bucket (0-based) of every rFFT bin: bucket `j` spans bins
/// `⌊j·B/λ⌋ .. ⌊(j+1)·B/λ⌋`.
pub fn bin_buckets(bins: usize, lambda: usize) -> Vec<usize> {
    let mut out = vec![0; bins];
    for j in 0..lambda {
        let lo = j * bins / lambda;
        let hi = (j + 1) * bins / lambda;
        for b in &mut out[lo..hi] {
            *b = j;
        }
    }
    out
}

pub fn fft_spectrogram(x: &[f64], rows: usize, cfg: &SdaqConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if cfg.backend != Backend::Fft {
        return Err(PetsError::InvalidConfig(
            "fft_spectrogram called with the CWT backend".into(),
        ));
    }
    let len = row_len(x, rows)?;
    let lambda = cfg.lambda;
    let bins = positive_bins(len);
    let bucket = bin_buckets(bins, lambda);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(len);

    let mut spectrum = Vec::with_capacity(rows * bins);
    let mut values = vec![0.0; rows * len * lambda];
    let mut buf = vec![Complex64::new(0.0, 0.0); len];
    for r in 0..rows {
        for (b, v) in buf.iter_mut().zip(&x[r * len..(r + 1) * len]) {
            *b = Complex64::new(*v, 0.0);
        }
        fft.process(&mut buf);
        spectrum.extend_from_slice(&buf[..bins]);
        let mut energy = vec![0.0; lambda];
        for (k, c) in buf[..bins].iter().enumerate() {
            energy[bucket[k]] += c.norm_sqr();
        }
        for t in 0..len {
            for j in 0..lambda {
                values[(r * len + t) * lambda + j] = energy[j].sqrt();
            }
        }
    }
    Ok(Spectrogram {
        rows,
        len,
        lambda,
        values,
        freq_axis: freq_axis(lambda),
        mean_offsets: vec![0.0; rows],
        coefficients: Some(Coefficients::Fourier {
            data: spectrum,
            bucket,
        }),
    })
}

/// Inverse real FFT of the retained (possibly masked) spectrum.
pub fn inverse_fft(spec: &Spectrogram) -> Result<Vec<f64>> {
    let Some(Coefficients::Fourier { data, .. }) = &spec.coefficients else {
        return Err(PetsError::StateError(
            "spectrogram carries no Fourier coefficients to invert".into(),
        ));
    };
    let len = spec.len;
    let bins = positive_bins(len);
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(len);
    let mut out = Vec::with_capacity(spec.rows * len);
    let mut buf = vec![Complex64::new(0.0, 0.0); len];
    for r in 0..spec.rows {
        let half = &data[r * bins..(r + 1) * bins];
        for k in 0..len {
            buf[k] = if k < bins { half[k] } else { half[len - k].conj() };
        }
        ifft.process(&mut buf);
        out.extend(buf.iter().map(|c| c.re / len as f64));
    }
    Ok(out)
}
