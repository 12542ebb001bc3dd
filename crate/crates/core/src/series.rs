//! Raw dataset ingestion, channel-independent expansion, chronological
//! splitting and train-split z-score normalization.

use std::fmt;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{IctpError, Result};

/// Floor applied to the fitted standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

/// Default 60:20:20 split fractions.
pub const SPLIT_FRACTIONS: (f64, f64, f64) = (0.6, 0.2, 0.2);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedChannel {
    pub name: String,
    pub values: Vec<f64>,
}

/// A multivariate series as read from disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDataset {
    pub name: String,
    pub timestamps: Vec<i64>,
    pub channels: Vec<NamedChannel>,
}

impl RawDataset {
    /// Checks equal channel lengths, at least one row and strictly increasing timestamps.
    pub fn validate(&self) -> Result<()> {
        let t = self.timestamps.len();
        if t == 0 {
            return Err(IctpError::InvalidSeries(format!("{}: no data rows", self.name)));
        }
        if self.channels.is_empty() {
            return Err(IctpError::InvalidSeries(format!("{}: no channels", self.name)));
        }
        for c in &self.channels {
            if c.values.len() != t {
                return Err(IctpError::InvalidSeries(format!(
                    "{}: channel `{}` has {} values, expected {t}",
                    self.name,
                    c.name,
                    c.values.len()
                )));
            }
            if let Some(i) = c.values.iter().position(|v| !v.is_finite()) {
                return Err(IctpError::InvalidSeries(format!(
                    "{}: channel `{}` has a non-finite value at row {i}",
                    self.name, c.name
                )));
            }
        }
        if let Some(i) = self.timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(IctpError::InvalidSeries(format!(
                "{}: timestamps not strictly increasing at row {}",
                self.name,
                i + 1
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// The whole channel before splitting.
    Full,
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Full => "full",
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

/// One univariate channel, possibly a chronological slice of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSeries {
    pub dataset: String,
    pub channel: String,
    pub split: Split,
    pub values: Vec<f64>,
    /// Index of `values[0]` in the parent dataset timeline.
    pub origin_offset: usize,
}

impl ChannelSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `dataset/channel`, the identity shared by all splits of a channel.
    pub fn key(&self) -> String {
        format!("{}/{}", self.dataset, self.channel)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

/// Which columns of a CSV file to read.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    /// Dataset name; defaults to the file stem.
    pub name: Option<String>,
    /// Channel subset by header name; all value columns when empty.
    pub channels: Vec<String>,
}

/// Reads a CSV with a header row, a timestamp (ISO-8601 or integer) first
/// column and real-valued channel columns.
pub fn load_csv(path: &Path, spec: &ColumnSpec) -> Result<RawDataset> {
    let shown = path.display().to_string();
    let ingest = |reason: String| IctpError::Ingest {
        path: shown.clone(),
        reason,
    };
    if !path.exists() {
        return Err(IctpError::MissingInput(format!("{shown}: no such file")));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if headers.len() < 2 {
        return Err(ingest("need a timestamp column and at least one channel".into()));
    }

    let selected: Vec<usize> = if spec.channels.is_empty() {
        (1..headers.len()).collect()
    } else {
        spec.channels
            .iter()
            .map(|name| {
                headers[1..]
                    .iter()
                    .position(|h| h == name)
                    .map(|i| i + 1)
                    .ok_or_else(|| ingest(format!("no column named `{name}`")))
            })
            .collect::<Result<_>>()?
    };

    let mut timestamps = Vec::new();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); selected.len()];
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| ingest(format!("row {}: {e}", row + 1)))?;
        if record.len() != headers.len() {
            return Err(ingest(format!(
                "row {}: ragged row with {} fields, expected {}",
                row + 1,
                record.len(),
                headers.len()
            )));
        }
        let ts = parse_timestamp(&record[0])
            .ok_or_else(|| ingest(format!("row {}: bad timestamp `{}`", row + 1, &record[0])))?;
        if let Some(&prev) = timestamps.last() {
            if ts <= prev {
                return Err(ingest(format!(
                    "row {}: timestamps not strictly increasing",
                    row + 1
                )));
            }
        }
        timestamps.push(ts);
        for (col, &idx) in columns.iter_mut().zip(&selected) {
            let cell = record[idx].trim();
            let v: f64 = cell.parse().map_err(|_| {
                ingest(format!(
                    "row {}, column `{}`: non-numeric cell `{cell}`",
                    row + 1,
                    headers[idx]
                ))
            })?;
            if !v.is_finite() {
                return Err(ingest(format!(
                    "row {}, column `{}`: missing or non-finite value",
                    row + 1,
                    headers[idx]
                )));
            }
            col.push(v);
        }
    }
    if timestamps.is_empty() {
        return Err(ingest("no data rows".into()));
    }

    let name = spec.name.clone().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    });
    let dataset = RawDataset {
        name,
        timestamps,
        channels: selected
            .iter()
            .zip(columns)
            .map(|(&idx, values)| NamedChannel {
                name: headers[idx].clone(),
                values,
            })
            .collect(),
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Writes a dataset in the format [`load_csv`] reads. Integer timestamps.
pub fn write_csv(path: &Path, d: &RawDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["timestamp".to_string()];
    header.extend(d.channels.iter().map(|c| c.name.clone()));
    w.write_record(&header)?;
    for (row, ts) in d.timestamps.iter().enumerate() {
        let mut rec = vec![ts.to_string()];
        rec.extend(d.channels.iter().map(|c| format!("{:?}", c.values[row])));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| IctpError::io(path.display().to_string(), e))?;
    Ok(())
}

fn parse_timestamp(cell: &str) -> Option<i64> {
    let cell = cell.trim();
    if let Ok(i) = cell.parse::<i64>() {
        return Some(i);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(cell) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(cell, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    NaiveDate::parse_from_str(cell, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|dt| dt.and_utc().timestamp())
}

/// One [`ChannelSeries`] per channel, in column order.
pub fn expand_channels(d: &RawDataset) -> Result<Vec<ChannelSeries>> {
    d.validate()?;
    Ok(d.channels
        .iter()
        .map(|c| ChannelSeries {
            dataset: d.name.clone(),
            channel: c.name.clone(),
            split: Split::Full,
            values: c.values.clone(),
            origin_offset: 0,
        })
        .collect())
}

/// Splits at `floor(f_train * T)` and `floor((f_train + f_valid) * T)`; the
/// remainder goes to test.
pub fn chronological_split(
    s: &ChannelSeries,
    fractions: (f64, f64, f64),
) -> Result<(ChannelSeries, ChannelSeries, ChannelSeries)> {
    let (ft, fv, fte) = fractions;
    if ft <= 0.0 || fv <= 0.0 || fte <= 0.0 || ((ft + fv + fte) - 1.0).abs() > 1e-9 {
        return Err(IctpError::Config(format!(
            "split fractions {fractions:?} must be positive and sum to 1"
        )));
    }
    let t = s.len();
    if t < 5 {
        return Err(IctpError::InvalidSeries(format!(
            "{}: length {t} too short to split (need at least 5)",
            s.key()
        )));
    }
    let b1 = (ft * t as f64).floor() as usize;
    let b2 = ((ft + fv) * t as f64).floor() as usize;
    if b1 == 0 || b2 <= b1 || b2 >= t {
        return Err(IctpError::InvalidSeries(format!(
            "{}: length {t} yields an empty split",
            s.key()
        )));
    }
    let part = |split, range: std::ops::Range<usize>| ChannelSeries {
        dataset: s.dataset.clone(),
        channel: s.channel.clone(),
        split,
        origin_offset: s.origin_offset + range.start,
        values: s.values[range].to_vec(),
    };
    Ok((
        part(Split::Train, 0..b1),
        part(Split::Valid, b1..b2),
        part(Split::Test, b2..t),
    ))
}

/// Mean and population standard deviation (Welford), std floored at [`STD_FLOOR`].
///
/// Only train-split series are accepted.
pub fn fit_norm(train: &ChannelSeries) -> Result<NormStats> {
    if train.split != Split::Train {
        return Err(IctpError::InvalidSeries(format!(
            "{}: normalization statistics must come from the train split, got {}",
            train.key(),
            train.split
        )));
    }
    if train.is_empty() {
        return Err(IctpError::InvalidSeries(format!("{}: empty train split", train.key())));
    }
    let (mut mean, mut m2) = (0.0, 0.0);
    for (i, &v) in train.values.iter().enumerate() {
        let delta = v - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (v - mean);
    }
    let var = m2 / train.len() as f64;
    Ok(NormStats {
        mean,
        std: var.sqrt().max(STD_FLOOR),
    })
}

pub fn normalize(s: &ChannelSeries, n: NormStats) -> ChannelSeries {
    ChannelSeries {
        values: s.values.iter().map(|v| (v - n.mean) / n.std).collect(),
        ..s.clone()
    }
}

pub fn denormalize(s: &ChannelSeries, n: NormStats) -> ChannelSeries {
    ChannelSeries {
        values: denormalize_values(&s.values, n),
        ..s.clone()
    }
}

pub fn denormalize_values(values: &[f64], n: NormStats) -> Vec<f64> {
    values.iter().map(|v| v * n.std + n.mean).collect()
}

/// The three normalized splits of one channel with the statistics used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSplits {
    pub train: ChannelSeries,
    pub valid: ChannelSeries,
    pub test: ChannelSeries,
    pub norm: NormStats,
}

impl ChannelSplits {
    /// Splits `s` 60:20:20 and normalizes all three parts with train statistics.
    pub fn from_series(s: &ChannelSeries) -> Result<Self> {
        let (train, valid, test) = chronological_split(s, SPLIT_FRACTIONS)?;
        let norm = fit_norm(&train)?;
        Ok(Self {
            train: normalize(&train, norm),
            valid: normalize(&valid, norm),
            test: normalize(&test, norm),
            norm,
        })
    }
}

/// Normalized split store written by the `ingest` stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesStore {
    pub config: serde_json::Value,
    pub channels: Vec<ChannelSplits>,
}

impl SeriesStore {
    pub fn from_datasets(datasets: &[RawDataset], config: serde_json::Value) -> Result<Self> {
        let mut channels = Vec::new();
        for d in datasets {
            for s in expand_channels(d)? {
                channels.push(ChannelSplits::from_series(&s)?);
            }
        }
        Ok(Self { config, channels })
    }

    pub fn split(&self, split: Split) -> Vec<ChannelSeries> {
        self.channels
            .iter()
            .map(|c| match split {
                Split::Train => c.train.clone(),
                Split::Valid => c.valid.clone(),
                Split::Test => c.test.clone(),
                Split::Full => {
                    let mut full = c.train.clone();
                    full.split = Split::Full;
                    full.values.extend(&c.valid.values);
                    full.values.extend(&c.test.values);
                    full
                }
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| IctpError::io(path.display().to_string(), e))?;
        serde_json::to_writer(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|_| IctpError::MissingInput(format!("{}: missing series store", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}
