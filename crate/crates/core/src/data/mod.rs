//! CSV ingestion, windowing and synthetic data.

mod synth;
mod windows;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PetsError, Result};

pub use synth::{
    synth_classes, synth_generate, AnomalySpec, Burst, ChannelSpec, ClassSpec, Sinusoid, SynthSpec,
};
pub use windows::{make_windows, NormStats, Partition, SplitSpec, WindowSet, Windows};

/// Multichannel series of equal-length named columns.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeriesFrame {
    pub name: String,
    pub timestamps: Option<Vec<String>>,
    pub columns: Vec<String>,
    /// One vector per channel.
    pub values: Vec<Vec<f64>>,
    /// Pointwise anomaly labels, when known.
    pub labels: Option<Vec<bool>>,
    /// Rows discarded during ingestion because of missing values.
    pub dropped_rows: usize,
}

impl SeriesFrame {
    pub fn len(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.len()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        if self.values.iter().any(|c| c.len() != t) || self.columns.len() != self.values.len() {
            return Err(PetsError::InvalidInput(format!(
                "frame {:?} has ragged channels",
                self.name
            )));
        }
        if self.values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(PetsError::InvalidInput(format!(
                "frame {:?} contains non-finite values",
                self.name
            )));
        }
        if self.labels.as_ref().is_some_and(|l| l.len() != t) {
            return Err(PetsError::InvalidInput("label count differs from length".into()));
        }
        Ok(())
    }
}

fn looks_like_time(header: &str) -> bool {
    matches!(
        header.trim().to_ascii_lowercase().as_str(),
        "date" | "time" | "timestamp" | "datetime"
    )
}

/// Parses a numeric cell; `None` marks a missing value.
fn parse_cell(cell: &str, row: usize, col: usize) -> Result<Option<f64>> {
    let c = cell.trim();
    if c.is_empty() {
        return Ok(None);
    }
    match c.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        Ok(_) => Ok(None),
        Err(_) => Err(PetsError::Parse {
            row,
            col,
            msg: format!("{c:?} is not a number"),
        }),
    }
}

/// Reads a headed CSV whose first column may be a timestamp.
///
/// Rows containing empty, NaN or infinite cells are dropped and counted.
/// Parse errors report 1-based file line and column numbers.
pub fn load_csv(path: impl AsRef<Path>) -> Result<SeriesFrame> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_io(path, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(PetsError::InvalidInput(format!("{} is empty", path.display())));
    }

    let mut records = Vec::new();
    for rec in rdr.records() {
        records.push(rec?);
    }
    if records.is_empty() {
        return Err(PetsError::InvalidInput(format!(
            "{} has no data rows",
            path.display()
        )));
    }
    let time_col = looks_like_time(&headers[0])
        || (headers.len() > 1 && records[0].get(0).is_some_and(|c| c.trim().parse::<f64>().is_err()));
    let first = usize::from(time_col);
    if headers.len() <= first {
        return Err(PetsError::InvalidInput(format!(
            "{} has no numeric columns",
            path.display()
        )));
    }

    let mut frame = SeriesFrame {
        name: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        timestamps: time_col.then(Vec::new),
        columns: headers[first..].to_vec(),
        values: vec![Vec::with_capacity(records.len()); headers.len() - first],
        labels: None,
        dropped_rows: 0,
    };
    let mut row_buf = Vec::with_capacity(headers.len());
    for (i, rec) in records.iter().enumerate() {
        let line = i + 2;
        if rec.len() != headers.len() {
            return Err(PetsError::Parse {
                row: line,
                col: rec.len().min(headers.len()) + 1,
                msg: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        row_buf.clear();
        let mut missing = false;
        for col in first..headers.len() {
            match parse_cell(&rec[col], line, col + 1)? {
                Some(v) => row_buf.push(v),
                None => missing = true,
            }
        }
        if missing {
            frame.dropped_rows += 1;
            continue;
        }
        for (c, v) in row_buf.iter().enumerate() {
            frame.values[c].push(*v);
        }
        if let Some(ts) = frame.timestamps.as_mut() {
            ts.push(rec[0].to_string());
        }
    }
    if frame.is_empty() {
        return Err(PetsError::InvalidInput(format!(
            "{}: every row has missing values",
            path.display()
        )));
    }
    Ok(frame)
}

fn csv_io(path: &Path, e: csv::Error) -> PetsError {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => PetsError::io(path, io),
            _ => unreachable!("checked by is_io_error"),
        }
    } else {
        PetsError::Csv(e)
    }
}

/// Writes named columns of equal length with a header row.
pub fn write_columns(path: impl AsRef<Path>, headers: &[String], columns: &[Vec<f64>]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(headers)?;
    let t = columns.first().map_or(0, Vec::len);
    for i in 0..t {
        w.write_record(columns.iter().map(|c| format!("{:?}", c[i])))?;
    }
    w.flush().map_err(|e| PetsError::io(path, e))
}

pub fn write_frame(path: impl AsRef<Path>, frame: &SeriesFrame) -> Result<()> {
    write_columns(path, &frame.columns, &frame.values)
}

/// Equal-length univariate samples with integer class labels.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabeledSeries {
    pub samples: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl LabeledSeries {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn series_len(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Splits off the last `n` samples.
    pub fn split_tail(mut self, n: usize) -> Result<(LabeledSeries, LabeledSeries)> {
        if n > self.len() {
            return Err(PetsError::InvalidConfig(format!(
                "cannot hold out {n} of {} samples",
                self.len()
            )));
        }
        let at = self.len() - n;
        let tail = LabeledSeries {
            samples: self.samples.split_off(at),
            labels: self.labels.split_off(at),
        };
        Ok((self, tail))
    }
}

/// Reads headerless rows of the form `label,v1,…,vL`.
pub fn load_labeled_csv(path: impl AsRef<Path>) -> Result<LabeledSeries> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let mut out = LabeledSeries::default();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 1;
        let label = rec
            .get(0)
            .and_then(|c| c.trim().parse::<usize>().ok())
            .ok_or_else(|| PetsError::Parse {
                row: line,
                col: 1,
                msg: "class label must be a non-negative integer".into(),
            })?;
        let mut values = Vec::with_capacity(rec.len() - 1);
        for (j, cell) in rec.iter().enumerate().skip(1) {
            values.push(parse_cell(cell, line, j + 1)?.ok_or_else(|| PetsError::Parse {
                row: line,
                col: j + 1,
                msg: "missing value".into(),
            })?);
        }
        if let Some(first) = out.samples.first() {
            if first.len() != values.len() {
                return Err(PetsError::Parse {
                    row: line,
                    col: values.len() + 1,
                    msg: format!("expected {} values, found {}", first.len(), values.len()),
                });
            }
        }
        out.samples.push(values);
        out.labels.push(label);
    }
    if out.is_empty() || out.series_len() == 0 {
        return Err(PetsError::InvalidInput(format!("{} has no samples", path.display())));
    }
    Ok(out)
}

pub fn write_labeled_csv(path: impl AsRef<Path>, set: &LabeledSeries) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    for (s, l) in set.samples.iter().zip(&set.labels) {
        let mut rec = vec![l.to_string()];
        rec.extend(s.iter().map(|v| format!("{v:?}")));
        w.write_record(rec)?;
    }
    w.flush().map_err(|e| PetsError::io(path, e))
}
