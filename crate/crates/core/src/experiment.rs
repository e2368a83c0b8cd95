//! Dataset splits and the drop-fraction sweep.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModelKind, ModelSpec};
use crate::seeded_rng;
use crate::timeseries::{drop_observations, gen_toy_curves, load_dir, write_set, TimeSeriesSet};
use crate::train::{train, TrainConfig};

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

/// Train, validation and test sets sharing one class count.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: TimeSeriesSet,
    pub val: TimeSeriesSet,
    pub test: TimeSeriesSet,
}

impl Splits {
    /// Cuts `set` in order into pieces of `round(0.8n)`, `round(0.1n)` and
    /// the remainder.
    pub fn from_set(set: TimeSeriesSet) -> Result<Self> {
        let n = set.len();
        let n_train = (0.8 * n as f64).round() as usize;
        let n_val = (0.1 * n as f64).round() as usize;
        Self::cut(set, n_train, n_val)
    }

    /// Cuts `set` in order into `n_train`, `n_val` and the remainder.
    pub fn cut(set: TimeSeriesSet, n_train: usize, n_val: usize) -> Result<Self> {
        let classes = set.class_count();
        let mut samples = set.into_samples();
        if n_train == 0 || n_val == 0 || n_train + n_val >= samples.len() {
            return Err(Error::Config(format!(
                "cannot split {} samples into {n_train} train, {n_val} validation and a nonempty test set",
                samples.len()
            )));
        }
        let test = samples.split_off(n_train + n_val);
        let val = samples.split_off(n_train);
        Ok(Splits {
            train: TimeSeriesSet::new(samples, classes)?,
            val: TimeSeriesSet::new(val, classes)?,
            test: TimeSeriesSet::new(test, classes)?,
        })
    }

    /// Class-balanced toy curves (see [`gen_toy_curves`]) split 80/10/10.
    pub fn toy(samples: usize, classes: usize, length: usize, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed);
        Self::from_set(gen_toy_curves(samples, classes, length, &mut rng)?)
    }

    /// Writes `train/`, `val/` and `test/` subdirectories, each holding
    /// data files and a manifest.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, set) in SPLIT_NAMES.iter().zip(self.sets()) {
            write_set(set, &dir.join(name))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let [train, val, test] = SPLIT_NAMES.map(|name| load_dir(&dir.join(name)));
        let (train, val, test) = (train?, val?, test?);
        let classes = train
            .class_count()
            .max(val.class_count())
            .max(test.class_count());
        let widen = |s: TimeSeriesSet| TimeSeriesSet::new(s.into_samples(), classes);
        Ok(Splits {
            train: widen(train)?,
            val: widen(val)?,
            test: widen(test)?,
        })
    }

    pub fn sets(&self) -> [&TimeSeriesSet; 3] {
        [&self.train, &self.val, &self.test]
    }

    /// Removes the fraction `fraction` of interior points from every series
    /// of every split, with one random stream shared across the splits.
    pub fn dropped(&self, fraction: f64, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed);
        rng.set_stream(fraction.to_bits());
        let mut drop =
            |set: &TimeSeriesSet| set.try_map(|s| drop_observations(s, fraction, &mut rng));
        Ok(Splits {
            train: drop(&self.train)?,
            val: drop(&self.val)?,
            test: drop(&self.test)?,
        })
    }
}

/// What a drop sweep runs. The base config's model sets the reference
/// parameter count; other kinds get the hidden size that matches it most
/// closely.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub base: TrainConfig,
    pub kinds: Vec<ModelKind>,
    pub fractions: Vec<f64>,
    pub repeats: usize,
    /// Seed of the observation-dropping streams. Repeat `r` uses `seed + r`
    /// for dropping and `base.seed + r` for training.
    pub seed: u64,
}

/// One trained and tested model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub kind: ModelKind,
    pub fraction: f64,
    pub repeat: usize,
    pub hidden: usize,
    pub params: usize,
    pub test_accuracy: f64,
}

/// Summary of the repeats of one `(kind, fraction)` pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub kind: ModelKind,
    pub fraction: f64,
    pub params: usize,
    pub mean: f64,
    /// Sample standard deviation (divisor `n − 1`); zero for one repeat.
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub fractions: Vec<f64>,
    pub runs: Vec<SweepRun>,
    pub cells: Vec<SweepCell>,
}

/// Trains every kind on every dropped copy of `data` and records test
/// accuracy. Within a repeat all kinds see the same dropped data.
pub fn drop_sweep(config: &SweepConfig, data: &Splits) -> Result<SweepResult> {
    config.base.validate()?;
    if config.repeats == 0 || config.kinds.is_empty() || config.fractions.is_empty() {
        return Err(Error::Config(
            "a sweep needs repeats, kinds and fractions".into(),
        ));
    }
    if let Some(f) = config.fractions.iter().find(|f| !(0.0..1.0).contains(*f)) {
        return Err(Error::Config(format!("drop fraction {f} outside [0, 1)")));
    }
    let channels = data.train.channel_count();
    let input_dim = channels + config.base.intensity.extra_channels(channels) + 1;
    let classes = data.train.class_count();
    let target = config.base.model.param_count(input_dim, classes)?;
    let specs = config
        .kinds
        .iter()
        .map(|&k| match k == config.base.model.kind {
            true => Ok(config.base.model.clone()),
            false => config.base.model.balanced(k, input_dim, classes, target),
        })
        .collect::<Result<Vec<ModelSpec>>>()?;

    let mut runs = Vec::new();
    for &fraction in &config.fractions {
        for repeat in 0..config.repeats {
            let dropped = data.dropped(fraction, config.seed.wrapping_add(repeat as u64))?;
            for spec in &specs {
                let cfg = TrainConfig {
                    model: spec.clone(),
                    seed: config.base.seed.wrapping_add(repeat as u64),
                    ..config.base.clone()
                };
                let outcome = train(&cfg, &dropped.train, &dropped.val)?;
                runs.push(SweepRun {
                    kind: spec.kind,
                    fraction,
                    repeat,
                    hidden: spec.hidden,
                    params: outcome.trained.model.param_count(),
                    test_accuracy: outcome.trained.evaluate(&dropped.test)?,
                });
            }
        }
    }

    let mut cells = Vec::new();
    for spec in &specs {
        for &fraction in &config.fractions {
            let accs: Vec<f64> = runs
                .iter()
                .filter(|r| r.kind == spec.kind && r.fraction == fraction)
                .map(|r| r.test_accuracy)
                .collect();
            let (mean, std) = mean_std(&accs);
            cells.push(SweepCell {
                kind: spec.kind,
                fraction,
                params: spec.param_count(input_dim, classes)?,
                mean,
                std,
            });
        }
    }
    Ok(SweepResult {
        fractions: config.fractions.clone(),
        runs,
        cells,
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl SweepResult {
    fn cell(&self, kind: ModelKind, fraction: f64) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.kind == kind && c.fraction == fraction)
    }

    fn kinds(&self) -> Vec<ModelKind> {
        let mut kinds: Vec<ModelKind> = Vec::new();
        for c in &self.cells {
            if !kinds.contains(&c.kind) {
                kinds.push(c.kind);
            }
        }
        kinds
    }

    /// `model,fraction,params,mean,std`, one row per cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,fraction,params,mean,std\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                c.kind, c.fraction, c.params, c.mean, c.std
            );
        }
        out
    }

    /// One row per model and one column per drop fraction, with test
    /// accuracy as `mean ± std` in percent.
    pub fn to_table(&self) -> String {
        let header: Vec<String> = std::iter::once("Model".to_string())
            .chain(
                self.fractions
                    .iter()
                    .map(|f| format!("{:.0}% dropped", f * 100.0)),
            )
            .chain(std::iter::once("Params".to_string()))
            .collect();
        let mut rows = vec![header];
        for kind in self.kinds() {
            let mut row = vec![kind.display_name().to_string()];
            for &f in &self.fractions {
                row.push(match self.cell(kind, f) {
                    Some(c) => format!("{:.1} ± {:.1}", 100.0 * c.mean, 100.0 * c.std),
                    None => "-".into(),
                });
            }
            let params = self.cell(kind, self.fractions[0]).map_or(0, |c| c.params);
            row.push(params.to_string());
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in rows.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(j, (cell, &w))| match j {
                    0 => format!("{cell:<w$}"),
                    _ => format!("{cell:>w$}"),
                })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                let rule = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                out.push_str(&"-".repeat(rule));
                out.push('\n');
            }
        }
        out
    }

    /// Largest minus smallest mean accuracy of `kind` across fractions.
    pub fn spread(&self, kind: ModelKind) -> Option<f64> {
        let means: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.kind == kind)
            .map(|c| c.mean)
            .collect();
        let max = means.iter().copied().reduce(f64::max)?;
        let min = means.iter().copied().reduce(f64::min)?;
        Some(max - min)
    }

    pub fn means(&self, kind: ModelKind) -> Vec<f64> {
        self.fractions
            .iter()
            .filter_map(|&f| self.cell(kind, f).map(|c| c.mean))
            .collect()
    }
}
