//! Dataset ingestion, scaling, chronological splits, sliding windows and the
//! synthetic multi-energy generator.

use std::fmt;
use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

const DATETIME_FORMATS: [&str; 4] = [
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%dT%H:%M",
];

/// Row key of a table: an integer index or a calendar timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Timestamp {
    Index(i64),
    DateTime(NaiveDateTime),
}

impl Timestamp {
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        if let Ok(i) = s.parse::<i64>() {
            return Some(Timestamp::Index(i));
        }
        for f in DATETIME_FORMATS {
            if let Ok(dt) = NaiveDateTime::parse_from_str(s, f) {
                return Some(Timestamp::DateTime(dt));
            }
        }
        NaiveDate::parse_from_str(s, "%Y-%m-%d")
            .ok()
            .and_then(|d| d.and_hms_opt(0, 0, 0))
            .map(Timestamp::DateTime)
    }

    /// `self + steps * (self - prev)`; both must be the same kind.
    fn extrapolate(prev: Timestamp, last: Timestamp, steps: i64) -> Option<Timestamp> {
        match (prev, last) {
            (Timestamp::Index(a), Timestamp::Index(b)) => Some(Timestamp::Index(b + steps * (b - a))),
            (Timestamp::DateTime(a), Timestamp::DateTime(b)) => {
                let step = b - a;
                Some(Timestamp::DateTime(b + step * steps as i32))
            }
            _ => None,
        }
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Timestamp::Index(i) => write!(f, "{i}"),
            Timestamp::DateTime(dt) => write!(f, "{}", dt.format("%Y-%m-%d %H:%M:%S")),
        }
    }
}

/// `T × C` numeric table with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesTable {
    timestamps: Vec<Timestamp>,
    values: Vec<f64>,
    channel_names: Vec<String>,
}

impl TimeSeriesTable {
    pub fn new(timestamps: Vec<Timestamp>, values: Vec<f64>, channel_names: Vec<String>) -> Result<Self> {
        let c = channel_names.len();
        if c == 0 {
            return Err(Error::Data("table needs at least one channel".into()));
        }
        if values.len() != timestamps.len() * c {
            return Err(Error::Data(format!(
                "{} values do not fill {} rows x {} channels",
                values.len(),
                timestamps.len(),
                c
            )));
        }
        if let Some(i) = timestamps.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::Data(format!(
                "timestamps not strictly increasing at row {} ({} then {})",
                i + 2,
                timestamps[i],
                timestamps[i + 1]
            )));
        }
        Ok(Self {
            timestamps,
            values,
            channel_names,
        })
    }

    /// Table with integer timestamps `0..T`.
    pub fn from_rows(values: Vec<f64>, channel_names: Vec<String>) -> Result<Self> {
        let t = values.len() / channel_names.len().max(1);
        Self::new(
            (0..t as i64).map(Timestamp::Index).collect(),
            values,
            channel_names,
        )
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn timestamps(&self) -> &[Timestamp] {
        &self.timestamps
    }

    /// Row-major `T × C` values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let c = self.channels();
        &self.values[t * c..(t + 1) * c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        self.values
            .iter()
            .skip(c)
            .step_by(self.channels())
            .copied()
            .collect()
    }

    pub fn channel_index(&self, name: &str) -> Result<usize> {
        self.channel_names.iter().position(|n| n == name).ok_or_else(|| {
            Error::Config(format!(
                "channel '{name}' not found (available: {})",
                self.channel_names.join(", ")
            ))
        })
    }

    /// Rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        let c = self.channels();
        Self {
            timestamps: self.timestamps[start..end].to_vec(),
            values: self.values[start * c..end * c].to_vec(),
            channel_names: self.channel_names.clone(),
        }
    }

    /// Keeps the named channels, in the given order.
    pub fn select_channels<S: AsRef<str>>(&self, names: &[S]) -> Result<Self> {
        let idx = names
            .iter()
            .map(|n| self.channel_index(n.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        let mut values = Vec::with_capacity(self.len() * idx.len());
        for t in 0..self.len() {
            let row = self.row(t);
            values.extend(idx.iter().map(|&i| row[i]));
        }
        Ok(Self {
            timestamps: self.timestamps.clone(),
            values,
            channel_names: idx.iter().map(|&i| self.channel_names[i].clone()).collect(),
        })
    }

    /// Timestamps for `steps` rows after the last one, at the final sampling interval.
    pub fn future_timestamps(&self, steps: usize) -> Result<Vec<Timestamp>> {
        if self.len() < 2 {
            return Err(Error::Data("need two rows to infer the sampling interval".into()));
        }
        let (prev, last) = (self.timestamps[self.len() - 2], self.timestamps[self.len() - 1]);
        (1..=steps as i64)
            .map(|k| {
                Timestamp::extrapolate(prev, last, k)
                    .ok_or_else(|| Error::Data("mixed timestamp kinds".into()))
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
        let csv_err = |e: csv::Error| Error::Data(format!("writing {}: {e}", path.display()));
        let mut header = vec!["date".to_string()];
        header.extend(self.channel_names.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for t in 0..self.len() {
            let mut rec = vec![self.timestamps[t].to_string()];
            rec.extend(self.row(t).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Reads a UTF-8 CSV whose first column is `date` and whose remaining
/// columns are numeric features. Rows and columns in errors are 1-based
/// (row 1 is the first data row).
pub fn load_csv(path: &Path) -> Result<TimeSeriesTable> {
    if !path.exists() {
        return Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        });
    }
    let load_err = |row: usize, col: usize, msg: String| Error::Load {
        path: path.to_path_buf(),
        row,
        col,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| load_err(0, 0, e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| load_err(0, 0, e.to_string()))?
        .clone();
    if header.len() < 2 {
        return Err(load_err(
            0,
            0,
            "need a date column and at least one feature".into(),
        ));
    }
    if !header[0].trim().eq_ignore_ascii_case("date") {
        return Err(load_err(
            0,
            1,
            format!("first column must be 'date', found '{}'", &header[0]),
        ));
    }
    let names: Vec<String> = header.iter().skip(1).map(|h| h.trim().to_string()).collect();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| load_err(row, 0, e.to_string()))?;
        if rec.len() != header.len() {
            return Err(load_err(
                row,
                rec.len(),
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        let ts = Timestamp::parse(&rec[0])
            .ok_or_else(|| load_err(row, 1, format!("unparseable timestamp '{}'", &rec[0])))?;
        if let Some(prev) = timestamps.last() {
            if ts <= *prev {
                return Err(load_err(
                    row,
                    1,
                    format!("timestamp {ts} does not increase on previous {prev}"),
                ));
            }
        }
        timestamps.push(ts);
        for (j, cell) in rec.iter().enumerate().skip(1) {
            let cell = cell.trim();
            if cell.is_empty() {
                return Err(load_err(row, j + 1, "missing value".into()));
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| load_err(row, j + 1, format!("non-numeric cell '{cell}'")))?;
            if !v.is_finite() {
                return Err(load_err(row, j + 1, format!("non-finite cell '{cell}'")));
            }
            values.push(v);
        }
    }
    TimeSeriesTable::new(timestamps, values, names)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: TimeSeriesTable,
    pub val: TimeSeriesTable,
    pub test: TimeSeriesTable,
}

/// Contiguous train/validation/test partition with boundaries at
/// `⌊T·r_train⌋` and `⌊T·(r_train + r_val)⌋`. Every segment must hold at
/// least `min_len` rows (one full window).
pub fn chronological_split(
    table: &TimeSeriesTable,
    ratios: (f64, f64, f64),
    min_len: usize,
) -> Result<Splits> {
    let (a, b, c) = ratios;
    if a <= 0.0 || b <= 0.0 || c <= 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must be positive and sum to 1, got ({a}, {b}, {c})"
        )));
    }
    let t = table.len();
    // The guard keeps e.g. 0.7 · 30 from flooring to 20 through rounding.
    let boundary = |r: f64| ((t as f64 * r + 1e-9).floor() as usize).min(t);
    let first = boundary(a);
    let second = boundary(a + b).max(first);
    for (segment, len) in [("train", first), ("val", second - first), ("test", t - second)] {
        if len < min_len {
            return Err(Error::SplitTooSmall {
                segment,
                len,
                required: min_len,
            });
        }
    }
    Ok(Splits {
        train: table.slice_rows(0, first),
        val: table.slice_rows(first, second),
        test: table.slice_rows(second, t),
    })
}

/// Per-channel z-score parameters, fitted on the training split only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl Scaler {
    /// Population mean and standard deviation (floored at 1e-8) per channel.
    pub fn fit(train: &TimeSeriesTable) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data("cannot fit a scaler on an empty table".into()));
        }
        let n = train.len() as f64;
        let c = train.channels();
        let mut mean = vec![0.0; c];
        for t in 0..train.len() {
            for (m, v) in mean.iter_mut().zip(train.row(t)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; c];
        for t in 0..train.len() {
            for ((s, v), m) in var.iter_mut().zip(train.row(t)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, c: usize) -> Result<()> {
        if c != self.channels() {
            return Err(Error::Config(format!(
                "scaler fitted on {} channels, table has {c}",
                self.channels()
            )));
        }
        Ok(())
    }

    /// Scales a row-major `rows × C` buffer in place.
    pub fn apply_values(&self, values: &mut [f64]) {
        let c = self.channels();
        for (i, v) in values.iter_mut().enumerate() {
            *v = (*v - self.mean[i % c]) / self.std[i % c];
        }
    }

    pub fn invert_values(&self, values: &mut [f64]) {
        let c = self.channels();
        for (i, v) in values.iter_mut().enumerate() {
            *v = *v * self.std[i % c] + self.mean[i % c];
        }
    }

    pub fn apply(&self, table: &TimeSeriesTable) -> Result<TimeSeriesTable> {
        self.check(table.channels())?;
        let mut out = table.clone();
        self.apply_values(&mut out.values);
        Ok(out)
    }

    pub fn invert(&self, table: &TimeSeriesTable) -> Result<TimeSeriesTable> {
        self.check(table.channels())?;
        let mut out = table.clone();
        self.invert_values(&mut out.values);
        Ok(out)
    }

    /// Scaler restricted to the given channel indices.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            mean: idx.iter().map(|&i| self.mean[i]).collect(),
            std: idx.iter().map(|&i| self.std[i]).collect(),
        }
    }
}

/// One encoder input / known decoder part / target triple, each row-major
/// over `C` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// `I × C`
    pub enc_input: Vec<f64>,
    /// `label_len × C`, the last `label_len` rows of `enc_input`.
    pub dec_known: Vec<f64>,
    /// `O × C`, the rows right after `enc_input`.
    pub target: Vec<f64>,
    /// Row of the table where `enc_input` starts.
    pub origin: usize,
    pub channels: usize,
}

impl WindowSample {
    pub fn enc_tensor(&self) -> Tensor {
        let rows = self.enc_input.len() / self.channels;
        Tensor::new(&[rows, self.channels], self.enc_input.clone()).expect("window shape")
    }

    pub fn target_tensor(&self) -> Tensor {
        let rows = self.target.len() / self.channels;
        Tensor::new(&[rows, self.channels], self.target.clone()).expect("window shape")
    }
}

/// Lazy view of every stride-1 window of a table.
#[derive(Debug, Clone, Copy)]
pub struct Windows<'a> {
    table: &'a TimeSeriesTable,
    seq_len: usize,
    pred_len: usize,
}

/// Windows starting at `t = 0..=T-I-O`; there are `T - I - O + 1` of them.
pub fn make_windows(table: &TimeSeriesTable, seq_len: usize, pred_len: usize) -> Result<Windows<'_>> {
    if seq_len == 0 {
        return Err(Error::Config("lookback must be >= 1".into()));
    }
    if table.len() < seq_len + pred_len {
        return Err(Error::InputTooShort {
            len: table.len(),
            required: seq_len + pred_len,
        });
    }
    Ok(Windows {
        table,
        seq_len,
        pred_len,
    })
}

impl<'a> Windows<'a> {
    pub fn len(&self) -> usize {
        self.table.len() - self.seq_len - self.pred_len + 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn pred_len(&self) -> usize {
        self.pred_len
    }

    pub fn channels(&self) -> usize {
        self.table.channels()
    }

    pub fn table(&self) -> &'a TimeSeriesTable {
        self.table
    }

    /// Row-major `I × C` encoder input of window `i`.
    pub fn enc_slice(&self, i: usize) -> &'a [f64] {
        let c = self.table.channels();
        &self.table.values()[i * c..(i + self.seq_len) * c]
    }

    /// Row-major `O × C` target of window `i`.
    pub fn target_slice(&self, i: usize) -> &'a [f64] {
        let c = self.table.channels();
        let start = i + self.seq_len;
        &self.table.values()[start * c..(start + self.pred_len) * c]
    }

    pub fn get(&self, i: usize) -> WindowSample {
        assert!(i < self.len(), "window {i} out of range ({} windows)", self.len());
        let c = self.table.channels();
        let enc_input = self.enc_slice(i).to_vec();
        let label = self.seq_len / 2;
        let dec_known = enc_input[(self.seq_len - label) * c..].to_vec();
        WindowSample {
            enc_input,
            dec_known,
            target: self.target_slice(i).to_vec(),
            origin: i,
            channels: c,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = WindowSample> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }
}

/// Known half of the lookback followed by `pred_len` zero rows:
/// `(label_len + O) × C`, row-major.
pub fn build_decoder_input(sample: &WindowSample, pred_len: usize) -> Vec<f64> {
    let mut out = sample.dec_known.clone();
    out.resize(sample.dec_known.len() + pred_len * sample.channels, 0.0);
    out
}

/// Composition of one generated channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelComposition {
    pub level: f64,
    pub daily_amplitude: f64,
    pub daily_phase: f64,
    pub weekly_amplitude: f64,
    pub weekly_phase: f64,
    /// Per-step linear drift.
    pub trend: f64,
    pub noise_std: f64,
}

impl ChannelComposition {
    pub fn value(&self, t: usize) -> f64 {
        use std::f64::consts::TAU;
        let t = t as f64;
        self.level
            + self.daily_amplitude * (TAU * t / 24.0 + self.daily_phase).sin()
            + self.weekly_amplitude * (TAU * t / 168.0 + self.weekly_phase).sin()
            + self.trend * t
    }
}

/// Generator settings for an hourly synthetic multi-energy table.
///
/// Channel compositions are drawn from `seed` around the base amplitudes,
/// scaled by `jitter`; with `jitter = 0` every channel is exactly the base
/// composition. When at least five channels exist, channel 4 (`ghg`) is
/// `ghg_from_electricity · electricity + ghg_from_gas · gas` plus noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub channels: usize,
    pub length: usize,
    pub seed: u64,
    pub level: f64,
    pub daily_amplitude: f64,
    pub weekly_amplitude: f64,
    pub trend: f64,
    pub noise_std: f64,
    pub jitter: f64,
    pub ghg_from_electricity: f64,
    pub ghg_from_gas: f64,
    pub start: String,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            channels: 19,
            length: 49415,
            seed: 0,
            level: 0.0,
            daily_amplitude: 1.0,
            weekly_amplitude: 0.4,
            trend: 0.0,
            noise_std: 0.1,
            jitter: 0.3,
            ghg_from_electricity: 0.6,
            ghg_from_gas: 0.4,
            start: "2015-07-24 00:00:00".into(),
        }
    }
}

pub const GHG_CHANNEL: usize = 4;

const BASE_NAMES: [&str; 5] = ["electricity", "gas", "heat", "renewables", "ghg"];

impl SyntheticSpec {
    pub fn channel_names(&self) -> Vec<String> {
        (0..self.channels)
            .map(|c| match BASE_NAMES.get(c) {
                Some(n) => n.to_string(),
                None => format!("load_{}", c - BASE_NAMES.len() + 1),
            })
            .collect()
    }

    pub fn compositions(&self) -> Vec<ChannelComposition> {
        let mut rng = Rng::new(self.seed);
        let j = self.jitter;
        (0..self.channels)
            .map(|_| {
                let mut u = || rng.uniform(-1.0, 1.0);
                ChannelComposition {
                    level: self.level + j * u(),
                    daily_amplitude: self.daily_amplitude * (1.0 + j * u()),
                    daily_phase: j * std::f64::consts::PI * u(),
                    weekly_amplitude: self.weekly_amplitude * (1.0 + j * u()),
                    weekly_phase: j * std::f64::consts::PI * u(),
                    trend: self.trend * (1.0 + j * u()),
                    noise_std: self.noise_std,
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.length < 2 {
            return Err(Error::Config(
                "synthetic spec needs channels >= 1 and length >= 2".into(),
            ));
        }
        if self.noise_std < 0.0 || self.jitter < 0.0 {
            return Err(Error::Config("noise_std and jitter must be non-negative".into()));
        }
        Ok(())
    }
}

/// Deterministic synthetic table: same spec and seed give a bitwise-identical table.
pub fn generate_synthetic_multienergy(spec: &SyntheticSpec) -> Result<TimeSeriesTable> {
    spec.validate()?;
    let start = match Timestamp::parse(&spec.start) {
        Some(Timestamp::DateTime(dt)) => dt,
        _ => return Err(Error::Config(format!("bad start timestamp '{}'", spec.start))),
    };
    let comps = spec.compositions();
    let mut noise = Rng::new(spec.seed).fork(1);
    let c = spec.channels;
    let mut values = Vec::with_capacity(spec.length * c);
    for t in 0..spec.length {
        let base = values.len();
        for comp in &comps {
            let eps = if comp.noise_std > 0.0 {
                comp.noise_std * noise.normal()
            } else {
                0.0
            };
            values.push(comp.value(t) + eps);
        }
        if c > GHG_CHANNEL {
            let eps = if spec.noise_std > 0.0 {
                spec.noise_std * noise.normal()
            } else {
                0.0
            };
            values[base + GHG_CHANNEL] =
                spec.ghg_from_electricity * values[base] + spec.ghg_from_gas * values[base + 1] + eps;
        }
    }
    let timestamps = (0..spec.length)
        .map(|t| Timestamp::DateTime(start + Duration::hours(t as i64)))
        .collect();
    TimeSeriesTable::new(timestamps, values, spec.channel_names())
}

/// Noise-free sinusoids, channel `c` shifted in phase by `c` radians:
/// `sin(2π t / period + c)` at integer timestamps.
pub fn sine_wave_table(len: usize, channels: usize, period: f64) -> Result<TimeSeriesTable> {
    let values = (0..len)
        .flat_map(|t| {
            (0..channels).map(move |c| (std::f64::consts::TAU * t as f64 / period + c as f64).sin())
        })
        .collect();
    TimeSeriesTable::from_rows(values, (0..channels).map(|c| format!("sine_{c}")).collect())
}
