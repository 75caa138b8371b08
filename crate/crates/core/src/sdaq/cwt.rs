//! Continuous wavelet transform on a linear pseudo-frequency grid and its
//! least-squares (canonical dual frame) inverse.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use num_complex::Complex64;

use super::{freq_axis, Coefficients, SdaqConfig, Spectrogram, Wavelet};
use crate::error::{PetsError, Result};

/// Morlet centre frequency in cycles per unit scale.
pub const MORLET_CENTER: f64 = 0.8125;
/// Haar centre frequency.
pub const HAAR_CENTER: f64 = 1.0;
/// Morlet kernels are truncated at this many scale units from the centre.
const MORLET_SUPPORT: f64 = 5.0;

impl Wavelet {
    pub fn center_frequency(self) -> f64 {
        match self {
            Wavelet::Haar => HAAR_CENTER,
            Wavelet::Morlet => MORLET_CENTER,
        }
    }
}

/// Sampled wavelet at one scale: `taps[i]` sits at sample offset
/// `start + i` relative to the analysed time index.
#[derive(Clone, Debug)]
struct Kernel {
    start: isize,
    taps: Vec<Complex64>,
}

impl Kernel {
    fn new(wavelet: Wavelet, scale: f64) -> Self {
        let norm = 1.0 / scale.sqrt();
        match wavelet {
            Wavelet::Haar => {
                // psi = +1 on [0, 1/2), -1 on [1/2, 1); each sample integrates
                // its unit cell so the discrete kernel sums to exactly zero.
                let primitive = |u: f64| {
                    let v = (u / scale).clamp(0.0, 1.0);
                    scale * if v < 0.5 { v } else { 1.0 - v }
                };
                let n = scale.ceil() as usize;
                let taps = (0..n)
                    .map(|o| {
                        let o = o as f64;
                        Complex64::new((primitive(o + 1.0) - primitive(o)) * norm, 0.0)
                    })
                    .collect();
                Kernel { start: 0, taps }
            }
            Wavelet::Morlet => {
                let w0 = 2.0 * PI * MORLET_CENTER;
                let half = (MORLET_SUPPORT * scale).ceil() as isize;
                let c = PI.powf(-0.25) * norm;
                let taps = (-half..=half)
                    .map(|o| {
                        let u = o as f64 / scale;
                        Complex64::from_polar(c * (-0.5 * u * u).exp(), w0 * u)
                    })
                    .collect();
                Kernel { start: -half, taps }
            }
        }
    }

    /// Taps overlapping `[0, len)` when centred at `t`: `(first sample, taps)`.
    fn window(&self, t: usize, len: usize) -> (usize, &[Complex64]) {
        let first = t as isize + self.start;
        let lo = (-first).max(0) as usize;
        let hi = ((len as isize - first).max(0) as usize).min(self.taps.len());
        if lo >= hi {
            return (0, &[]);
        }
        ((first + lo as isize) as usize, &self.taps[lo..hi])
    }
}

/// Precomputed kernels and Gram factorisation for one `(L, λ, wavelet)`.
pub(crate) struct CwtPlan {
    len: usize,
    kernels: Vec<Kernel>,
    gram: Cholesky<f64, Dyn>,
}

type PlanKey = (usize, usize, Wavelet);

fn plan_cache() -> &'static Mutex<HashMap<PlanKey, Arc<CwtPlan>>> {
    static CACHE: OnceLock<Mutex<HashMap<PlanKey, Arc<CwtPlan>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

impl CwtPlan {
    pub(crate) fn get(len: usize, lambda: usize, wavelet: Wavelet) -> Result<Arc<CwtPlan>> {
        let key = (len, lambda, wavelet);
        if let Some(p) = plan_cache().lock().expect("plan cache poisoned").get(&key) {
            return Ok(Arc::clone(p));
        }
        let plan = Arc::new(CwtPlan::build(len, lambda, wavelet)?);
        plan_cache()
            .lock()
            .expect("plan cache poisoned")
            .insert(key, Arc::clone(&plan));
        Ok(plan)
    }

    fn build(len: usize, lambda: usize, wavelet: Wavelet) -> Result<Self> {
        let fc = wavelet.center_frequency();
        let kernels: Vec<Kernel> = freq_axis(lambda)
            .iter()
            .map(|f| Kernel::new(wavelet, fc / f))
            .collect();
        // G = Re(Φᴴ Φ) with Φ stacking every (scale, time) analysis row
        let mut g = DMatrix::<f64>::zeros(len, len);
        for k in &kernels {
            for t in 0..len {
                let (s0, taps) = k.window(t, len);
                for (i, a) in taps.iter().enumerate() {
                    for (j, b) in taps.iter().enumerate().skip(i) {
                        let v = (a.conj() * b).re;
                        g[(s0 + i, s0 + j)] += v;
                    }
                }
            }
        }
        g.fill_lower_triangle_with_upper_triangle();
        let gram = Cholesky::new(g).ok_or_else(|| {
            PetsError::Numerical(format!(
                "wavelet frame Gram matrix is singular for L={len}, lambda={lambda}"
            ))
        })?;
        Ok(CwtPlan { len, kernels, gram })
    }

    /// Analysis: `W[j, t] = Σ_s conj(ψ_j(s − t)) x[s]`.
    fn analyse(&self, x: &[f64], out: &mut [Complex64]) {
        let len = self.len;
        for (j, k) in self.kernels.iter().enumerate() {
            for t in 0..len {
                let (s0, taps) = k.window(t, len);
                let mut acc = Complex64::new(0.0, 0.0);
                for (tap, xv) in taps.iter().zip(&x[s0..]) {
                    acc += tap.conj() * xv;
                }
                out[j * len + t] = acc;
            }
        }
    }

    /// Least-squares synthesis `G⁻¹ Re(Φᴴ W)`, restricted to `keep`ed scales.
    fn synthesise(&self, w: &[Complex64], keep: Option<&[bool]>) -> Vec<f64> {
        let len = self.len;
        let mut y = DVector::<f64>::zeros(len);
        for (j, k) in self.kernels.iter().enumerate() {
            if keep.is_some_and(|m| !m[j]) {
                continue;
            }
            for t in 0..len {
                let c = w[j * len + t];
                if c.re == 0.0 && c.im == 0.0 {
                    continue;
                }
                let (s0, taps) = k.window(t, len);
                for (i, tap) in taps.iter().enumerate() {
                    y[s0 + i] += (tap * c).re;
                }
            }
        }
        self.gram.solve_mut(&mut y);
        y.iter().copied().collect()
    }
}

/// Continuous wavelet transform of every row of `x` (`rows × len`).
pub fn cwt(x: &[f64], rows: usize, cfg: &SdaqConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if cfg.backend != super::Backend::Cwt {
        return Err(PetsError::InvalidConfig("cwt called with the FFT backend".into()));
    }
    let len = row_len(x, rows)?;
    if len < 4 {
        return Err(PetsError::InvalidInput(format!(
            "series length {len} is below the minimum of 4"
        )));
    }
    let lambda = cfg.lambda;
    let plan = CwtPlan::get(len, lambda, cfg.wavelet)?;
    let mut coeffs = vec![Complex64::new(0.0, 0.0); rows * lambda * len];
    let mut means = Vec::with_capacity(rows);
    let mut centred = vec![0.0; len];
    for r in 0..rows {
        let row = &x[r * len..(r + 1) * len];
        let mean = row.iter().sum::<f64>() / len as f64;
        means.push(mean);
        for (c, v) in centred.iter_mut().zip(row) {
            *c = v - mean;
        }
        plan.analyse(
            &centred,
            &mut coeffs[r * lambda * len..(r + 1) * lambda * len],
        );
    }
    // values are laid out [row, time, frequency]
    let mut values = vec![0.0; rows * len * lambda];
    for r in 0..rows {
        for j in 0..lambda {
            for t in 0..len {
                values[(r * len + t) * lambda + j] = coeffs[(r * lambda + j) * len + t].norm();
            }
        }
    }
    Ok(Spectrogram {
        rows,
        len,
        lambda,
        values,
        freq_axis: freq_axis(lambda),
        mean_offsets: means,
        coefficients: Some(Coefficients::Wavelet {
            wavelet: cfg.wavelet,
            data: coeffs,
        }),
    })
}

/// Inverse of [`cwt`]: `c · G⁻¹ Re(Φᴴ W) + mean` per row.
pub fn icwt(spec: &Spectrogram, cfg: &SdaqConfig) -> Result<Vec<f64>> {
    let calibration = match cfg.icwt_calibration {
        Some(c) => c,
        None => calibrate_icwt(cfg)?,
    };
    let mut out = raw_icwt(spec, None)?;
    for r in 0..spec.rows {
        for v in &mut out[r * spec.len..(r + 1) * spec.len] {
            *v = *v * calibration + spec.mean_offsets[r];
        }
    }
    Ok(out)
}

/// Uncalibrated reconstruction without the mean offsets; `keep` restricts
/// the synthesis to a subset of scales.
pub(crate) fn raw_icwt(spec: &Spectrogram, keep: Option<&[bool]>) -> Result<Vec<f64>> {
    let Some(Coefficients::Wavelet { wavelet, data }) = &spec.coefficients else {
        return Err(PetsError::StateError(
            "spectrogram carries no wavelet coefficients to invert".into(),
        ));
    };
    let (rows, len, lambda) = (spec.rows, spec.len, spec.lambda);
    let plan = CwtPlan::get(len, lambda, *wavelet)?;
    let mut out = Vec::with_capacity(rows * len);
    for r in 0..rows {
        out.extend(plan.synthesise(&data[r * lambda * len..(r + 1) * lambda * len], keep));
    }
    Ok(out)
}

/// Default probe length used by [`calibrate_icwt`].
pub const CALIBRATION_PROBE_LEN: usize = 96;

/// Least-squares scalar `c` minimising `‖c · raw_icwt(cwt(x)) − x‖` over
/// unit sinusoids at the midpoints of the frequency grid. The FFT backend
/// inverts exactly and returns 1.
pub fn calibrate_icwt(cfg: &SdaqConfig) -> Result<f64> {
    calibrate_icwt_with_len(cfg, CALIBRATION_PROBE_LEN)
}

pub fn calibrate_icwt_with_len(cfg: &SdaqConfig, len: usize) -> Result<f64> {
    if cfg.backend == super::Backend::Fft {
        return Ok(1.0);
    }
    let key = (len, cfg.lambda, cfg.wavelet);
    static CACHE: OnceLock<Mutex<HashMap<PlanKey, f64>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(c) = cache.lock().expect("calibration cache poisoned").get(&key) {
        return Ok(*c);
    }
    let probes = probe_sinusoids(cfg.lambda, len);
    let rows = probes.len() / len;
    let mut probe_cfg = cfg.clone();
    probe_cfg.icwt_calibration = Some(1.0);
    let spec = cwt(&probes, rows, &probe_cfg)?;
    let recon = raw_icwt(&spec, None)?;
    let (mut num, mut den) = (0.0, 0.0);
    for r in 0..rows {
        let m = spec.mean_offsets[r];
        for t in 0..len {
            let target = probes[r * len + t] - m;
            let y = recon[r * len + t];
            num += y * target;
            den += y * y;
        }
    }
    if den <= 0.0 {
        return Err(PetsError::Numerical("calibration probes reconstruct to zero".into()));
    }
    let c = num / den;
    cache.lock().expect("calibration cache poisoned").insert(key, c);
    Ok(c)
}

/// Unit-amplitude sinusoids at the midpoints between consecutive grid
/// frequencies, one per row.
pub fn probe_sinusoids(lambda: usize, len: usize) -> Vec<f64> {
    let f = freq_axis(lambda);
    let mut out = Vec::with_capacity((lambda - 1) * len);
    for w in f.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        out.extend((0..len).map(|t| (2.0 * PI * mid * t as f64).sin()));
    }
    out
}

pub(crate) fn row_len(x: &[f64], rows: usize) -> Result<usize> {
    if rows == 0 || x.is_empty() || x.len() % rows != 0 {
        return Err(PetsError::InvalidInput(format!(
            "{} values do not form {rows} equal rows",
            x.len()
        )));
    }
    Ok(x.len() / rows)
}
