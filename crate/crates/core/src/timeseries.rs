//! Irregularly sampled, partially observed multivariate time series.
//!
//! A [`TimeSeries`] stores one observation row per timestamp; each channel
//! of a row is either a real value or missing (`None`). Missing values are
//! never encoded as sentinel numbers.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One sample: strictly increasing timestamps with optionally missing
/// per-channel observations.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    times: Vec<f64>,
    values: Vec<Vec<Option<f64>>>,
    label: Option<usize>,
}

impl TimeSeries {
    /// Validates and builds a series. `values[i][c]` is channel `c` at `times[i]`.
    pub fn new(
        times: Vec<f64>,
        values: Vec<Vec<Option<f64>>>,
        label: Option<usize>,
    ) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::MalformedSeries(format!(
                "{} timestamps but {} observation rows",
                times.len(),
                values.len()
            )));
        }
        if times.len() < 2 {
            return Err(Error::InsufficientObservations(format!(
                "series has {} time points, need at least 2",
                times.len()
            )));
        }
        if let Some(t) = times.iter().find(|t| !t.is_finite()) {
            return Err(Error::MalformedSeries(format!("non-finite timestamp {t}")));
        }
        if let Some(i) = times.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::MalformedSeries(format!(
                "timestamps not strictly increasing at row {}: {} then {}",
                i + 1,
                times[i],
                times[i + 1]
            )));
        }
        let channels = values[0].len();
        if channels == 0 {
            return Err(Error::MalformedSeries("series has no channels".into()));
        }
        if let Some(i) = values.iter().position(|row| row.len() != channels) {
            return Err(Error::MalformedSeries(format!(
                "row {i} has {} channels, expected {channels}",
                values[i].len()
            )));
        }
        if values.iter().flatten().flatten().any(|x| !x.is_finite()) {
            return Err(Error::MalformedSeries("non-finite observation".into()));
        }
        let series = TimeSeries {
            times,
            values,
            label,
        };
        for c in 0..channels {
            let count = series.observation_count(c);
            if count < 2 {
                return Err(Error::InsufficientObservations(format!(
                    "channel {c} has {count} observations, need at least 2"
                )));
            }
        }
        Ok(series)
    }

    /// Builds a fully observed series from dense rows.
    pub fn from_dense(
        times: Vec<f64>,
        values: Vec<Vec<f64>>,
        label: Option<usize>,
    ) -> Result<Self> {
        let values = values
            .into_iter()
            .map(|row| row.into_iter().map(Some).collect())
            .collect();
        Self::new(times, values, label)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[Vec<Option<f64>>] {
        &self.values
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }

    pub fn with_label(mut self, label: Option<usize>) -> Self {
        self.label = label;
        self
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn channel_count(&self) -> usize {
        self.values[0].len()
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    pub fn observation_count(&self, channel: usize) -> usize {
        self.values
            .iter()
            .filter(|row| row[channel].is_some())
            .count()
    }

    /// The observed `(t, x)` pairs of one channel, in time order.
    pub fn channel_observations(&self, channel: usize) -> (Vec<f64>, Vec<f64>) {
        self.times
            .iter()
            .zip(&self.values)
            .filter_map(|(&t, row)| row[channel].map(|x| (t, x)))
            .unzip()
    }

    /// Smallest gap between adjacent timestamps.
    pub fn min_gap(&self) -> f64 {
        self.times
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    }

    /// Largest absolute observed value over all channels.
    pub fn max_abs(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .flatten()
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// A collection of series sharing one channel layout.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesSet {
    samples: Vec<TimeSeries>,
    channel_count: usize,
    class_count: usize,
}

impl TimeSeriesSet {
    pub fn new(samples: Vec<TimeSeries>, class_count: usize) -> Result<Self> {
        let channel_count = samples.first().map_or(0, TimeSeries::channel_count);
        if let Some(i) = samples
            .iter()
            .position(|s| s.channel_count() != channel_count)
        {
            return Err(Error::SchemaMismatch(format!(
                "sample {i} has {} channels, expected {channel_count}",
                samples[i].channel_count()
            )));
        }
        if let Some(label) = samples
            .iter()
            .filter_map(TimeSeries::label)
            .find(|&l| l >= class_count)
        {
            return Err(Error::SchemaMismatch(format!(
                "label {label} out of range for {class_count} classes"
            )));
        }
        Ok(TimeSeriesSet {
            samples,
            channel_count,
            class_count,
        })
    }

    pub fn samples(&self) -> &[TimeSeries] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<TimeSeries> {
        self.samples
    }

    pub fn channel_count(&self) -> usize {
        self.channel_count
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Applies `f` to every sample, keeping the class count.
    pub fn try_map(&self, f: impl FnMut(&TimeSeries) -> Result<TimeSeries>) -> Result<Self> {
        let samples = self.samples.iter().map(f).collect::<Result<Vec<_>>>()?;
        TimeSeriesSet::new(samples, self.class_count)
    }

    /// Smallest adjacent-timestamp gap across every sample.
    pub fn min_gap(&self) -> f64 {
        self.samples
            .iter()
            .map(TimeSeries::min_gap)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Per-channel normalization moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Channels whose variance was zero; their `std` was forced to 1.
    pub degenerate: Vec<bool>,
}

impl ChannelStats {
    /// Population moments over non-missing values.
    pub fn compute(set: &TimeSeriesSet) -> Result<Self> {
        let channels = set.channel_count();
        let mut mean = Vec::with_capacity(channels);
        let mut std = Vec::with_capacity(channels);
        let mut degenerate = Vec::with_capacity(channels);
        for c in 0..channels {
            let observed: Vec<f64> = set
                .samples()
                .iter()
                .flat_map(|s| s.values().iter().filter_map(move |row| row[c]))
                .collect();
            if observed.is_empty() {
                return Err(Error::InsufficientObservations(format!(
                    "channel {c} has no observations in the set"
                )));
            }
            let n = observed.len() as f64;
            let m = observed.iter().sum::<f64>() / n;
            let var = observed.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            let sd = var.sqrt();
            mean.push(m);
            if sd > 0.0 && sd.is_finite() {
                std.push(sd);
                degenerate.push(false);
            } else {
                std.push(1.0);
                degenerate.push(true);
            }
        }
        Ok(ChannelStats {
            mean,
            std,
            degenerate,
        })
    }
}

/// Standardizes every observed value per channel. When `stats` is `None`
/// the moments are computed from `set` itself.
pub fn normalize(
    set: &TimeSeriesSet,
    stats: Option<&ChannelStats>,
) -> Result<(TimeSeriesSet, ChannelStats)> {
    let stats = match stats {
        Some(s) => {
            if s.mean.len() != set.channel_count() || s.std.len() != set.channel_count() {
                return Err(Error::SchemaMismatch(format!(
                    "stats cover {} channels, set has {}",
                    s.mean.len(),
                    set.channel_count()
                )));
            }
            s.clone()
        }
        None => ChannelStats::compute(set)?,
    };
    let out = set.try_map(|series| {
        let values = series
            .values()
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(c, x)| x.map(|x| (x - stats.mean[c]) / stats.std[c]))
                    .collect()
            })
            .collect();
        TimeSeries::new(series.times().to_vec(), values, series.label())
    })?;
    Ok((out, stats))
}

/// Removes `⌊fraction·(n−2)⌋` interior time points of an `n`-point series,
/// chosen uniformly without replacement. The endpoints are always kept and
/// every channel of a removed row goes with it.
pub fn drop_observations<R: Rng + ?Sized>(
    series: &TimeSeries,
    fraction: f64,
    rng: &mut R,
) -> Result<TimeSeries> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!(
            "drop fraction {fraction} outside [0, 1)"
        )));
    }
    let n = series.len();
    let nominal_kept = n - floor_count(fraction, n);
    if nominal_kept < 2 {
        return Err(Error::InsufficientObservations(format!(
            "dropping {fraction} of {n} points leaves {nominal_kept}"
        )));
    }
    let interior = n - 2;
    let remove = floor_count(fraction, interior);
    let mut keep = vec![true; n];
    for i in index::sample(rng, interior, remove) {
        keep[i + 1] = false;
    }
    let (times, values) = series
        .times()
        .iter()
        .zip(series.values())
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|((&t, row), _)| (t, row.clone()))
        .unzip();
    TimeSeries::new(times, values, series.label())
}

fn floor_count(fraction: f64, n: usize) -> usize {
    // Absorbs representation error such as 0.3 * 10 = 3.0000000000000004.
    ((fraction * n as f64) + 1e-9).floor() as usize
}

/// Appends cumulative observation-count channels.
///
/// With `per_channel = false` a single channel holding the row index `i` at
/// `t_i` is added. With `per_channel = true` one channel per original channel
/// is added, counting that channel's non-missing observations at times `≤ t`.
pub fn append_intensity(series: &TimeSeries, per_channel: bool) -> Result<TimeSeries> {
    let channels = series.channel_count();
    let mut counts = vec![0usize; channels];
    let values = series
        .values()
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut out = row.clone();
            if per_channel {
                for (c, x) in row.iter().enumerate() {
                    if x.is_some() {
                        counts[c] += 1;
                    }
                }
                out.extend(counts.iter().map(|&k| Some(k as f64)));
            } else {
                out.push(Some(i as f64));
            }
            out
        })
        .collect();
    TimeSeries::new(series.times().to_vec(), values, series.label())
}

/// Parameters of the synthetic curve generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyCurveParams {
    /// Channel-0/1 frequency (cycles per unit time) of class 0.
    pub base_frequency: f64,
    /// Frequency increment between consecutive classes.
    pub class_gap: f64,
    /// Standard deviation of per-sample frequency jitter.
    pub frequency_jitter: f64,
    /// Standard deviation of additive observation noise.
    pub noise: f64,
    /// Maximum timestamp jitter, as a fraction of the nominal spacing.
    pub time_jitter: f64,
}

impl Default for ToyCurveParams {
    fn default() -> Self {
        ToyCurveParams {
            base_frequency: 1.0,
            class_gap: 0.5,
            frequency_jitter: 0.05,
            noise: 0.05,
            time_jitter: 0.35,
        }
    }
}

/// Class-balanced synthetic 3-channel curves on `[0, 1]`.
///
/// For a sample of class `k` with frequency `f = base + k·gap + jitter`,
/// phase `φ` and envelope `e(t) = 1 + α_k·t` (α running linearly from −0.5
/// to +0.5 across classes):
///
/// * channel 0 = `e(t)·sin(2πft + φ)`
/// * channel 1 = `e(t)·cos(2πft + φ)`
/// * channel 2 = `e(t)`
///
/// each with additive Gaussian noise. Timestamps are a jittered regular grid
/// with fixed endpoints, so adjacent gaps never fall below
/// `(1 − 2·time_jitter)/(length − 1)`.
pub fn gen_toy_curves<R: Rng + ?Sized>(
    n_samples: usize,
    class_count: usize,
    length: usize,
    rng: &mut R,
) -> Result<TimeSeriesSet> {
    gen_toy_curves_with(
        n_samples,
        class_count,
        length,
        ToyCurveParams::default(),
        rng,
    )
}

pub fn gen_toy_curves_with<R: Rng + ?Sized>(
    n_samples: usize,
    class_count: usize,
    length: usize,
    params: ToyCurveParams,
    rng: &mut R,
) -> Result<TimeSeriesSet> {
    if class_count < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, got {class_count}"
        )));
    }
    if length < 2 {
        return Err(Error::Config(format!(
            "need at least 2 points per curve, got {length}"
        )));
    }
    if !(0.0..0.5).contains(&params.time_jitter) {
        return Err(Error::Config("time_jitter must lie in [0, 0.5)".into()));
    }
    let spacing = 1.0 / (length - 1) as f64;
    let samples = (0..n_samples)
        .map(|i| {
            let class = i % class_count;
            let times: Vec<f64> = (0..length)
                .map(|j| {
                    if j == 0 || j == length - 1 {
                        j as f64 * spacing
                    } else {
                        let jitter = rng.random_range(-params.time_jitter..=params.time_jitter);
                        (j as f64 + jitter) * spacing
                    }
                })
                .collect();
            let frequency = params.base_frequency
                + params.class_gap * class as f64
                + params.frequency_jitter * standard_normal(rng);
            let phase = std::f64::consts::PI * class as f64 / class_count as f64
                + 0.2 * standard_normal(rng);
            let slope = -0.5 + class as f64 / (class_count - 1) as f64;
            let values = times
                .iter()
                .map(|&t| {
                    let envelope = 1.0 + slope * t;
                    let angle = std::f64::consts::TAU * frequency * t + phase;
                    vec![
                        envelope * angle.sin() + params.noise * standard_normal(rng),
                        envelope * angle.cos() + params.noise * standard_normal(rng),
                        envelope + params.noise * standard_normal(rng),
                    ]
                })
                .collect();
            TimeSeries::from_dense(times, values, Some(class))
        })
        .collect::<Result<Vec<_>>>()?;
    TimeSeriesSet::new(samples, class_count)
}

/// Box–Muller draw from N(0, 1).
pub(crate) fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Parses one data file: header `t,ch0,ch1,…`, one row per time, empty cell
/// for a missing value.
pub fn read_series_csv(path: &Path, label: Option<usize>) -> Result<TimeSeries> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        msg,
    };
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| parse_err("empty file".into()))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    if columns.first() != Some(&"t") || columns.len() < 2 {
        return Err(parse_err(format!(
            "header must be `t,ch0,…`, found `{header}`"
        )));
    }
    let channels = columns.len() - 1;
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (row_no, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != channels + 1 {
            return Err(Error::SchemaMismatch(format!(
                "{}: row {} has {} channels, header declares {channels}",
                path.display(),
                row_no + 1,
                cells.len().saturating_sub(1)
            )));
        }
        let t: f64 = cells[0]
            .parse()
            .map_err(|_| parse_err(format!("bad timestamp `{}`", cells[0])))?;
        let row = cells[1..]
            .iter()
            .map(|cell| {
                if cell.is_empty() {
                    Ok(None)
                } else {
                    cell.parse::<f64>()
                        .map(Some)
                        .map_err(|_| parse_err(format!("bad value `{cell}`")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        times.push(t);
        values.push(row);
    }
    TimeSeries::new(times, values, label).map_err(|e| match e {
        Error::MalformedSeries(m) => Error::MalformedSeries(format!("{}: {m}", path.display())),
        Error::InsufficientObservations(m) => {
            Error::InsufficientObservations(format!("{}: {m}", path.display()))
        }
        other => other,
    })
}

/// Loads every file listed in `manifest` (lines `filename,label`, filenames
/// relative to `dir`).
pub fn load_csv(dir: &Path, manifest: &Path) -> Result<TimeSeriesSet> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut samples = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (file, label) = line.split_once(',').ok_or_else(|| Error::Parse {
            path: manifest.to_path_buf(),
            msg: format!("expected `filename,label`, found `{line}`"),
        })?;
        let label: usize = label.trim().parse().map_err(|_| Error::Parse {
            path: manifest.to_path_buf(),
            msg: format!("bad label `{label}`"),
        })?;
        samples.push(read_series_csv(&dir.join(file.trim()), Some(label))?);
    }
    let class_count = samples
        .iter()
        .filter_map(TimeSeries::label)
        .max()
        .map_or(0, |m| m + 1);
    TimeSeriesSet::new(samples, class_count)
}

/// Loads a directory written by [`write_set`] (`manifest.csv` plus data files).
pub fn load_dir(dir: &Path) -> Result<TimeSeriesSet> {
    load_csv(dir, &dir.join(MANIFEST_NAME))
}

pub const MANIFEST_NAME: &str = "manifest.csv";

pub fn series_to_csv(series: &TimeSeries) -> String {
    let mut out = String::from("t");
    for c in 0..series.channel_count() {
        let _ = write!(out, ",ch{c}");
    }
    out.push('\n');
    for (t, row) in series.times().iter().zip(series.values()) {
        let _ = write!(out, "{t}");
        for x in row {
            out.push(',');
            if let Some(x) = x {
                let _ = write!(out, "{x}");
            }
        }
        out.push('\n');
    }
    out
}

/// Writes `sample_NNNNN.csv` files and a manifest into `dir`.
pub fn write_set(set: &TimeSeriesSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (i, series) in set.samples().iter().enumerate() {
        let name = format!("sample_{i:05}.csv");
        let path = dir.join(&name);
        fs::write(&path, series_to_csv(series)).map_err(|e| Error::io(&path, e))?;
        let label = series
            .label()
            .ok_or_else(|| Error::SchemaMismatch(format!("sample {i} has no label to write")))?;
        let _ = writeln!(manifest, "{name},{label}");
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}
