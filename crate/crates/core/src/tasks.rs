//! Task definitions, metrics and evaluation helpers.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{PetsError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Task {
    Forecast { horizon: usize },
    /// Fraction of input positions hidden during training and evaluation.
    Impute { mask_ratio: f64 },
    Classify { classes: usize },
    /// Validation-error quantile used as the detection threshold.
    Anomaly { quantile: f64 },
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Forecast { .. } => "forecast",
            Task::Impute { .. } => "impute",
            Task::Classify { .. } => "classify",
            Task::Anomaly { .. } => "anomaly",
        }
    }

    /// Width of the head output for an input window of length `len`.
    pub fn output_width(&self, len: usize) -> Result<usize> {
        let w = match *self {
            Task::Forecast { horizon } => horizon,
            Task::Impute { .. } | Task::Anomaly { .. } => len,
            Task::Classify { classes } => classes,
        };
        if w == 0 {
            return Err(PetsError::InvalidConfig(format!("{} head of width 0", self.name())));
        }
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Task::Forecast { horizon } if horizon == 0 => {
                Err(PetsError::InvalidConfig("forecast horizon must be positive".into()))
            }
            Task::Impute { mask_ratio } if !(mask_ratio > 0.0 && mask_ratio < 1.0) => Err(
                PetsError::InvalidConfig(format!("mask ratio {mask_ratio} outside (0, 1)")),
            ),
            Task::Classify { classes } if classes < 2 => {
                Err(PetsError::InvalidConfig("classification needs at least 2 classes".into()))
            }
            Task::Anomaly { quantile } => check_quantile(quantile),
            _ => Ok(()),
        }
    }

    pub fn is_regression(&self) -> bool {
        !matches!(self, Task::Classify { .. })
    }
}

/// Parses a bare task name with default parameters.
impl FromStr for Task {
    type Err = PetsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forecast" => Ok(Task::Forecast { horizon: 96 }),
            "impute" => Ok(Task::Impute { mask_ratio: 0.25 }),
            "classify" => Ok(Task::Classify { classes: 2 }),
            "anomaly" => Ok(Task::Anomaly { quantile: 0.99 }),
            other => Err(PetsError::InvalidConfig(format!("unknown task {other:?}"))),
        }
    }
}

/// Named metric values, serialised as a JSON object with sorted keys.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MetricReport(pub BTreeMap<String, f64>);

impl MetricReport {
    pub fn insert(&mut self, name: impl Into<String>, value: f64) -> Result<()> {
        let name = name.into();
        if !value.is_finite() {
            return Err(PetsError::Numerical(format!("metric {name} is {value}")));
        }
        self.0.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.get(name).copied()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }
}

fn pair<'a>(y: &'a [f64], yhat: &'a [f64]) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    if y.is_empty() {
        return Err(PetsError::InvalidInput("metric over empty arrays".into()));
    }
    if y.len() != yhat.len() {
        return Err(PetsError::InvalidInput(format!(
            "metric over arrays of length {} and {}",
            y.len(),
            yhat.len()
        )));
    }
    Ok(y.iter().copied().zip(yhat.iter().copied()))
}

pub fn mse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    let f = y.len() as f64;
    Ok(pair(y, yhat)?.map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / f)
}

pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    Ok(mse(y, yhat)?.sqrt())
}

pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64> {
    let f = y.len() as f64;
    Ok(pair(y, yhat)?.map(|(a, b)| (a - b).abs()).sum::<f64>() / f)
}

/// Symmetric percentage error in `[0, 200]`; `0/0` terms count as 0.
pub fn smape(y: &[f64], yhat: &[f64]) -> Result<f64> {
    let f = y.len() as f64;
    let s: f64 = pair(y, yhat)?
        .map(|(a, b)| {
            let den = a.abs() + b.abs();
            if den == 0.0 {
                0.0
            } else {
                (a - b).abs() / den
            }
        })
        .sum();
    Ok(200.0 * s / f)
}

/// Percentage error; terms with a zero target count as 0.
pub fn mape(y: &[f64], yhat: &[f64]) -> Result<f64> {
    let f = y.len() as f64;
    let s: f64 = pair(y, yhat)?
        .map(|(a, b)| if a == 0.0 { 0.0 } else { (a - b).abs() / a.abs() })
        .sum();
    Ok(100.0 * s / f)
}

/// Mean absolute error scaled by the mean seasonal difference of the
/// target at period `s`.
pub fn mase(y: &[f64], yhat: &[f64], s: usize) -> Result<f64> {
    let f = y.len();
    if s == 0 || s >= f {
        return Err(PetsError::InvalidInput(format!(
            "seasonal period {s} must lie in 1..{f}"
        )));
    }
    let num = mae(y, yhat)?;
    let scale = (s..f).map(|j| (y[j] - y[j - s]).abs()).sum::<f64>() / (f - s) as f64;
    if scale == 0.0 {
        return Err(PetsError::DegenerateDenominator(format!(
            "target has no variation at period {s}"
        )));
    }
    Ok(num / scale)
}

/// Seasonal naive forecast: the last season of `history` repeated.
pub fn naive2_forecast(history: &[f64], s: usize, horizon: usize) -> Result<Vec<f64>> {
    if s == 0 {
        return Err(PetsError::InvalidInput("seasonal period must be positive".into()));
    }
    if history.len() < s {
        return Err(PetsError::InvalidInput(format!(
            "history of {} points is shorter than period {s}",
            history.len()
        )));
    }
    let season = &history[history.len() - s..];
    Ok((0..horizon).map(|h| season[h % s]).collect())
}

/// Overall weighted average against the seasonal naive forecast built from
/// `history`.
pub fn owa(y: &[f64], yhat: &[f64], history: &[f64], s: usize) -> Result<f64> {
    let naive = naive2_forecast(history, s, y.len())?;
    let (sm_n, ms_n) = (smape(y, &naive)?, mase(y, &naive, s)?);
    if sm_n == 0.0 || ms_n == 0.0 {
        return Err(PetsError::DegenerateDenominator(
            "naive forecast is exact; OWA undefined".into(),
        ));
    }
    Ok(0.5 * (smape(y, yhat)? / sm_n + mase(y, yhat, s)? / ms_n))
}

/// Precision, recall and F1 of binary labels, with 0 for undefined ratios.
pub fn precision_recall_f1(pred: &[bool], truth: &[bool]) -> Result<(f64, f64, f64)> {
    if pred.len() != truth.len() {
        return Err(PetsError::InvalidInput(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fal_neg = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fal_neg += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
    let p = ratio(tp, fp);
    let r = ratio(tp, fal_neg);
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    Ok((p, r, f1))
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(PetsError::InvalidInput(format!(
            "accuracy over {} predictions and {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

fn check_quantile(q: f64) -> Result<()> {
    if q > 0.0 && q < 1.0 {
        Ok(())
    } else {
        Err(PetsError::InvalidConfig(format!("quantile {q} outside (0, 1)")))
    }
}

/// Linear-interpolated empirical quantile.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    check_quantile(q)?;
    if values.is_empty() {
        return Err(PetsError::InvalidInput("quantile of no values".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Flags points whose reconstruction error exceeds the `q`-quantile of
/// the validation errors.
pub fn anomaly_detect(errors: &[f64], validation_errors: &[f64], q: f64) -> Result<Vec<bool>> {
    let threshold = quantile(validation_errors, q)?;
    Ok(errors.iter().map(|e| *e > threshold).collect())
}

/// MSE over the missing positions (`mask == 0`).
pub fn imputation_loss(recon: &[f64], original: &[f64], mask: &[f64]) -> Result<f64> {
    if recon.len() != original.len() || recon.len() != mask.len() {
        return Err(PetsError::InvalidInput("imputation arrays differ in length".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((r, o), m) in recon.iter().zip(original).zip(mask) {
        if *m == 0.0 {
            sum += (r - o) * (r - o);
            n += 1;
        }
    }
    if n == 0 {
        return Err(PetsError::InvalidInput("mask hides no position".into()));
    }
    Ok(sum / n as f64)
}

/// Repeat the last observed value over the horizon.
pub fn last_value_forecast(window: &[f64], horizon: usize) -> Vec<f64> {
    let last = window.last().copied().unwrap_or(0.0);
    vec![last; horizon]
}

/// Least-squares line through the window, extrapolated over the horizon.
pub fn linear_trend_forecast(window: &[f64], horizon: usize) -> Vec<f64> {
    let n = window.len() as f64;
    if window.len() < 2 {
        return last_value_forecast(window, horizon);
    }
    let tm = (n - 1.0) / 2.0;
    let ym = window.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (t, y) in window.iter().enumerate() {
        let dt = t as f64 - tm;
        sxy += dt * (y - ym);
        sxx += dt * dt;
    }
    let slope = sxy / sxx;
    (0..horizon)
        .map(|h| ym + slope * ((window.len() + h) as f64 - tm))
        .collect()
}
