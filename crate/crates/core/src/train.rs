//! Losses, Adam with per-group learning rates, plateau scheduling and the
//! training and evaluation loops.
//!
//! Every sample is interpolated once before training. Per-sample gradients
//! may be computed in parallel but are always summed in ascending sample-id
//! order, so a seeded run is reproducible bit for bit whatever the thread
//! count.

use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{GradMode, Model, ModelSpec, ParamRole, PreparedSample, SampleGrad};
use crate::nn::ParamGrads;
use crate::timeseries::{append_intensity, normalize, ChannelStats, TimeSeriesSet};
use crate::{seeded_rng, SeededRng};

/// Softmax cross entropy `−log softmax(logits)[label]` and its gradient.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    // The largest term is exactly 1; summing the rest separately keeps
    // small losses accurate through ln_1p.
    let top = argmax(logits);
    let rest: f64 = exps
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, e)| e)
        .sum();
    let total = 1.0 + rest;
    let loss = rest.ln_1p() - (logits[label] - max);
    let grad = exps
        .iter()
        .enumerate()
        .map(|(i, e)| match i == label {
            // 1/(1+r) − 1 cancels badly; −r/(1+r) does not.
            true if i == top => -rest / total,
            true => e / total - 1.0,
            false => e / total,
        })
        .collect();
    (loss, grad)
}

/// Index of the largest logit; ties go to the lower index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate().skip(1) {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// A contiguous parameter range sharing a learning rate and L2 coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub range: Range<usize>,
    pub lr: f64,
    pub weight_decay: f64,
}

/// One Adam step with bias correction. The L2 term `weight_decay·θ` is added
/// to each group's gradient before the moment updates.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    groups: &[ParamGroup],
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::shape(format!(
            "Adam: {n} parameters but {} gradients and {} moments",
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(g) = groups.iter().find(|g| g.range.end > n) {
        return Err(Error::shape(format!(
            "parameter group {:?} exceeds {n}",
            g.range
        )));
    }
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powf(state.t as f64);
    let c2 = 1.0 - ADAM_BETA2.powf(state.t as f64);
    for group in groups {
        for i in group.range.clone() {
            let g = grads[i] + group.weight_decay * params[i];
            state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
            state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = state.m[i] / c1;
            let v_hat = state.v[i] / c2;
            params[i] -= group.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Which per-epoch quantity drives the scheduler.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlateauMetric {
    #[default]
    TrainLoss,
    ValLoss,
    ValAcc,
}

impl PlateauMetric {
    fn lower_is_better(self) -> bool {
        !matches!(self, PlateauMetric::ValAcc)
    }
}

/// What the scheduler decided after an epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlateauAction {
    Continue,
    /// The learning rate was just multiplied by the plateau factor.
    Reduced,
    Terminate,
}

/// Reduce-on-plateau with early termination.
///
/// An epoch improves when its metric is strictly better than the best so
/// far. After `patience` consecutive non-improving epochs the learning rate
/// is multiplied by `factor` and the count restarts; after
/// `terminate_patience` non-improving epochs (not reset by reductions)
/// training stops.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub patience: usize,
    pub factor: f64,
    pub terminate_patience: usize,
    lower_is_better: bool,
    best: Option<f64>,
    since_reduce: usize,
    since_best: usize,
    pub reductions: usize,
}

impl PlateauScheduler {
    pub fn new(
        lr: f64,
        patience: usize,
        factor: f64,
        terminate_patience: usize,
        lower_is_better: bool,
    ) -> Self {
        PlateauScheduler {
            lr,
            patience,
            factor,
            terminate_patience,
            lower_is_better,
            best: None,
            since_reduce: 0,
            since_best: 0,
            reductions: 0,
        }
    }

    pub fn observe(&mut self, metric: f64) -> PlateauAction {
        let improved = match self.best {
            None => true,
            Some(b) if self.lower_is_better => metric < b,
            Some(b) => metric > b,
        };
        if improved {
            self.best = Some(metric);
            self.since_reduce = 0;
            self.since_best = 0;
            return PlateauAction::Continue;
        }
        self.since_reduce += 1;
        self.since_best += 1;
        if self.since_best >= self.terminate_patience {
            return PlateauAction::Terminate;
        }
        if self.since_reduce >= self.patience {
            self.since_reduce = 0;
            self.lr *= self.factor;
            self.reductions += 1;
            return PlateauAction::Reduced;
        }
        PlateauAction::Continue
    }
}

/// Observational-intensity channels appended before interpolation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intensity {
    #[default]
    None,
    /// One cumulative-count channel.
    Global,
    /// One cumulative-count channel per data channel.
    PerChannel,
}

impl Intensity {
    /// Channels added to a series with `channels` data channels.
    pub fn extra_channels(self, channels: usize) -> usize {
        match self {
            Intensity::None => 0,
            Intensity::Global => 1,
            Intensity::PerChannel => channels,
        }
    }
}

/// Training configuration; the JSON config file mirrors these fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub lr: f64,
    /// Learning-rate multiplier for the final linear layer.
    pub readout_lr_multiplier: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub terminate_patience: usize,
    pub plateau_metric: PlateauMetric,
    /// L2 coefficient on vector-field and cell parameters.
    pub weight_decay: f64,
    pub seed: u64,
    pub grad_mode: GradMode,
    pub intensity: Intensity,
    /// Solver step; `None` means the smallest observation gap of the
    /// training split.
    pub step: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelSpec::new(crate::models::ModelKind::Ncde, 16),
            lr: 1e-3,
            readout_lr_multiplier: 100.0,
            batch_size: 32,
            max_epochs: 100,
            plateau_patience: 10,
            plateau_factor: 0.1,
            terminate_patience: 50,
            plateau_metric: PlateauMetric::TrainLoss,
            weight_decay: 0.0,
            seed: 0,
            grad_mode: GradMode::Adjoint,
            intensity: Intensity::None,
            step: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("lr", self.lr), ("plateau_factor", self.plateau_factor)];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("{name} must be positive, got {v}")));
        }
        if !(self.readout_lr_multiplier >= 1.0) {
            return Err(Error::Config(
                "readout_lr_multiplier must be at least 1".into(),
            ));
        }
        if self.batch_size == 0 || self.plateau_patience == 0 || self.terminate_patience == 0 {
            return Err(Error::Config(
                "batch_size and patience values must be positive".into(),
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if let Some(s) = self.step {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("step must be positive, got {s}")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Parse {
                path: path.to_path_buf(),
                msg: j.to_string(),
            },
            other => other,
        })
    }

    fn groups(&self, model: &Model, lr: f64) -> Vec<ParamGroup> {
        model
            .groups()
            .into_iter()
            .map(|(role, range)| ParamGroup {
                range,
                lr: if role == ParamRole::Readout {
                    lr * self.readout_lr_multiplier
                } else {
                    lr
                },
                weight_decay: if role == ParamRole::Field {
                    self.weight_decay
                } else {
                    0.0
                },
            })
            .collect()
    }
}

/// Normalizes with `stats`, appends intensity channels and interpolates.
pub fn prepare(
    set: &TimeSeriesSet,
    stats: &ChannelStats,
    intensity: Intensity,
) -> Result<Vec<PreparedSample>> {
    let (normed, _) = normalize(set, Some(stats))?;
    normed
        .samples()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let s = match intensity {
                Intensity::None => s.clone(),
                Intensity::Global => append_intensity(s, false)?,
                Intensity::PerChannel => append_intensity(s, true)?,
            };
            PreparedSample::new(&s).map_err(|e| e.in_sample(i))
        })
        .collect()
}

/// A model together with everything needed to apply it to raw series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub model: Model,
    pub stats: ChannelStats,
    pub intensity: Intensity,
    pub step: f64,
    pub classes: usize,
}

const TRAINED_FORMAT: &str = "cdeflow-trained";
const TRAINED_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TrainedCheckpoint {
    format: String,
    version: u32,
    param_count: usize,
    #[serde(flatten)]
    trained: TrainedModel,
}

impl TrainedModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&TrainedCheckpoint {
            format: TRAINED_FORMAT.into(),
            version: TRAINED_VERSION,
            param_count: self.model.param_count(),
            trained: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: TrainedCheckpoint = serde_json::from_str(text)?;
        if ck.format != TRAINED_FORMAT || ck.version != TRAINED_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let t = ck.trained;
        // Round-trip through the model checkpoint validation.
        let (model, _) = Model::from_checkpoint(&t.model.to_checkpoint(&t.spec)?)?;
        if model.param_count() != ck.param_count || model.classes() != t.classes {
            return Err(Error::shape("checkpoint manifest does not match the model"));
        }
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn prepare(&self, set: &TimeSeriesSet) -> Result<Vec<PreparedSample>> {
        prepare(set, &self.stats, self.intensity)
    }

    pub fn evaluate(&self, set: &TimeSeriesSet) -> Result<f64> {
        Ok(evaluate(&self.model, &self.prepare(set)?, self.step)?.accuracy)
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters rolled back to the epoch with the best validation accuracy.
    pub trained: TrainedModel,
    pub log: Vec<EpochMetrics>,
    /// Wall-clock milliseconds per epoch, kept apart from the log so the
    /// log stays reproducible.
    pub wall_ms: Vec<u64>,
    pub best_epoch: Option<usize>,
}

impl TrainOutcome {
    /// The metrics log as JSON lines.
    pub fn log_jsonl(&self) -> Result<String> {
        jsonl(&self.log)
    }

    pub fn timings_jsonl(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Timing {
            epoch: usize,
            wall_ms: u64,
        }
        let rows: Vec<Timing> = self
            .wall_ms
            .iter()
            .enumerate()
            .map(|(i, &wall_ms)| Timing {
                epoch: i + 1,
                wall_ms,
            })
            .collect();
        jsonl(&rows)
    }
}

fn jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Accuracy (argmax, ties to the lower class) and mean cross entropy.
pub fn evaluate(model: &Model, samples: &[PreparedSample], step: f64) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty set".into()));
    }
    let logits = par_map(samples.len(), |i| {
        model.logits(&samples[i], step).map_err(|e| e.in_sample(i))
    })?;
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (l, s) in logits.iter().zip(samples) {
        let label = s
            .label
            .ok_or_else(|| Error::Config("evaluation needs labelled samples".into()))?;
        if argmax(l) == label {
            correct += 1;
        }
        loss += cross_entropy(l, label).0;
    }
    let n = samples.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        mean_loss: loss / n,
    })
}

/// Worker count: `CDEFLOW_THREADS` if set to a positive integer, otherwise
/// the number of available cores.
pub fn worker_threads() -> usize {
    std::env::var("CDEFLOW_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// `f(0..n)` in index order, in parallel when the feature is enabled.
fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        use std::sync::OnceLock;
        static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();
        let threads = worker_threads();
        if threads > 1 {
            let pool = POOL.get_or_init(|| {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .ok()
            });
            if let Some(pool) = pool {
                return pool.install(|| (0..n).into_par_iter().map(&f).collect());
            }
        }
    }
    (0..n).map(f).collect()
}

/// Sums per-sample gradients for `ids`, always in ascending id order.
pub fn batch_gradient(
    model: &Model,
    samples: &[PreparedSample],
    ids: &[usize],
    step: f64,
    mode: GradMode,
) -> Result<(f64, ParamGrads)> {
    let mut ids = ids.to_vec();
    ids.sort_unstable();
    let results: Vec<SampleGrad> = par_map(ids.len(), |k| {
        let id = ids[k];
        let s = &samples[id];
        let label = s
            .label
            .ok_or_else(|| Error::Config(format!("training sample {id} has no label")))?;
        model
            .value_and_grad(s, step, mode, &|l: &[f64]| cross_entropy(l, label))
            .map_err(|e| e.in_sample(id))
    })?;
    let mut total = ParamGrads::zeros(model.param_count());
    let mut loss = 0.0;
    for r in &results {
        total += &r.grads;
        loss += r.loss;
    }
    Ok((loss, total))
}

/// Trains on `train`, tracking accuracy on `val`.
///
/// Normalization statistics come from `train` only. Returns the parameters
/// from the epoch with the best validation accuracy (the first such epoch on
/// ties), or the initial parameters when `max_epochs` is 0.
pub fn train(
    config: &TrainConfig,
    train: &TimeSeriesSet,
    val: &TimeSeriesSet,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(
            "training and validation sets must be nonempty".into(),
        ));
    }
    if train.channel_count() != val.channel_count() {
        return Err(Error::SchemaMismatch(
            "train and validation channel counts differ".into(),
        ));
    }
    let classes = train.class_count().max(val.class_count());
    let stats = ChannelStats::compute(train)?;
    let train_s = prepare(train, &stats, config.intensity)?;
    let val_s = prepare(val, &stats, config.intensity)?;
    let step = config.step.unwrap_or_else(|| train.min_gap());

    let mut init_rng = seeded_rng(config.seed);
    let mut model = Model::init(
        &config.model,
        train_s[0].input_dim(),
        classes,
        &mut init_rng,
    )?;
    let mut shuffle_rng: SeededRng = seeded_rng(config.seed);
    shuffle_rng.set_stream(1);

    let mut params = model.params();
    let mut adam = AdamState::new(params.len());
    let mut sched = PlateauScheduler::new(
        config.lr,
        config.plateau_patience,
        config.plateau_factor,
        config.terminate_patience,
        config.plateau_metric.lower_is_better(),
    );
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut log = Vec::new();
    let mut wall_ms = Vec::new();
    let mut order: Vec<usize> = (0..train_s.len()).collect();

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let lr = sched.lr;
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (loss, mut grads) =
                batch_gradient(&model, &train_s, batch, step, config.grad_mode)?;
            if !loss.is_finite() {
                return Err(Error::NumericalFailure(format!(
                    "training loss became {loss} in epoch {epoch}"
                )));
            }
            epoch_loss += loss;
            grads.scale(1.0 / batch.len() as f64);
            adam_step(&mut params, &grads.0, &mut adam, &config.groups(&model, lr))?;
            model.set_params(&params)?;
        }
        let train_loss = epoch_loss / train_s.len() as f64;
        let val_eval = evaluate(&model, &val_s, step)?;
        if best
            .as_ref()
            .is_none_or(|(acc, _, _)| val_eval.accuracy > *acc)
        {
            best = Some((val_eval.accuracy, epoch, params.clone()));
        }
        log.push(EpochMetrics {
            epoch,
            train_loss,
            val_acc: val_eval.accuracy,
            lr,
        });
        wall_ms.push(started.elapsed().as_millis() as u64);
        let metric = match config.plateau_metric {
            PlateauMetric::TrainLoss => train_loss,
            PlateauMetric::ValLoss => val_eval.mean_loss,
            PlateauMetric::ValAcc => val_eval.accuracy,
        };
        if sched.observe(metric) == PlateauAction::Terminate {
            break;
        }
    }
    let best_epoch = best.as_ref().map(|b| b.1);
    if let Some((_, _, p)) = best {
        model.set_params(&p)?;
    }
    Ok(TrainOutcome {
        trained: TrainedModel {
            spec: config.model.clone(),
            model,
            stats,
            intensity: config.intensity,
            step,
            classes,
        },
        log,
        wall_ms,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelKind;
    use crate::nn::Activation;
    use crate::oracle::central_difference;
    use crate::timeseries::{gen_toy_curves, TimeSeries};

    #[test]
    fn cross_entropy_examples() {
        let (l, g) = cross_entropy(&[0.0, 0.0], 0);
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g, vec![-0.5, 0.5]);
        let (l, g) = cross_entropy(&[10.0, -10.0], 0);
        let p = (-20f64).exp();
        // ln(1 + p) = p − p²/2 + O(p³) and p/(1 + p) = p − p² + O(p³).
        assert!((l - (p - p * p / 2.0)).abs() <= 1e-14 * p, "{l}");
        let q = p - p * p;
        assert!(
            (g[0] + q).abs() <= 1e-14 * p && (g[1] - q).abs() <= 1e-14 * p,
            "{g:?}"
        );
        let (l, _) = cross_entropy(&[700.0, -700.0], 1);
        assert!((l - 1400.0).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = [0.3, -1.2, 2.0, 0.1];
        let (_, g) = cross_entropy(&logits, 2);
        for i in 0..4 {
            let fd = central_difference(|x| cross_entropy(x, 2).0, &logits, i, 1e-5);
            assert!((g[i] - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 1.0]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
    }

    fn one_group(n: usize, lr: f64) -> Vec<ParamGroup> {
        vec![ParamGroup {
            range: 0..n,
            lr,
            weight_decay: 0.0,
        }]
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = vec![0.5, -1.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut st, &one_group(2, 0.1)).unwrap();
        assert_eq!(p, vec![0.5, -1.0]);
    }

    #[test]
    fn adam_matches_hand_trace() {
        // g = 1 each step: m_hat = v_hat = 1, so each step moves by lr/(1+eps).
        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        let lr = 0.01;
        let mut want = 0.0;
        for t in 1..=3 {
            adam_step(&mut p, &[1.0], &mut st, &one_group(1, lr)).unwrap();
            want -= lr / (1.0 + 1e-8);
            assert!((p[0] - want).abs() < 1e-15, "step {t}");
        }
        // Varying gradients 1, -2, 0.5, written out by hand.
        let mut p = vec![1.0];
        let mut st = AdamState::new(1);
        let (b1, b2) = (0.9f64, 0.999f64);
        let (mut m, mut v, mut x) = (0.0, 0.0, 1.0);
        for (t, g) in [1.0, -2.0, 0.5].into_iter().enumerate() {
            adam_step(&mut p, &[g], &mut st, &one_group(1, lr)).unwrap();
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let k = (t + 1) as i32;
            x -= lr * (m / (1.0 - b1.powi(k))) / ((v / (1.0 - b2.powi(k))).sqrt() + 1e-8);
            assert!((p[0] - x).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_groups_and_decay() {
        let mut p = vec![1.0, 1.0];
        let mut st = AdamState::new(2);
        let groups = vec![
            ParamGroup {
                range: 0..1,
                lr: 0.1,
                weight_decay: 0.5,
            },
            ParamGroup {
                range: 1..2,
                lr: 10.0,
                weight_decay: 0.0,
            },
        ];
        adam_step(&mut p, &[0.0, 1.0], &mut st, &groups).unwrap();
        // Decay alone produces a unit-ratio first step.
        assert!((p[0] - 0.9).abs() < 1e-7);
        assert!((p[1] + 9.0).abs() < 1e-6);
        assert!(adam_step(&mut p, &[0.0], &mut st, &groups).is_err());
    }

    #[test]
    fn plateau_never_reduces_on_improvement() {
        let mut s = PlateauScheduler::new(1.0, 2, 0.1, 5, true);
        for i in 0..20 {
            assert_eq!(s.observe(10.0 - i as f64), PlateauAction::Continue);
        }
        assert_eq!(s.lr, 1.0);
    }

    #[test]
    fn plateau_reduces_once_after_patience_flat_epochs() {
        let mut s = PlateauScheduler::new(1.0, 3, 0.1, 100, true);
        assert_eq!(s.observe(1.0), PlateauAction::Continue);
        assert_eq!(s.observe(1.0), PlateauAction::Continue);
        assert_eq!(s.observe(1.0), PlateauAction::Continue);
        assert_eq!(s.observe(1.0), PlateauAction::Reduced);
        assert!((s.lr - 0.1).abs() < 1e-15);
    }

    #[test]
    fn plateau_scripted_sequence() {
        // Hand simulation, patience 2, terminate after 5, higher is better:
        // epoch: 1    2    3    4    5    6    7    8    9
        // acc:   .5   .6   .6   .6   .7   .7   .7   .7   .7
        // since: 0    0    1    2R   0    1    2R   3    4 -> 5 at epoch 10: T
        let mut s = PlateauScheduler::new(1.0, 2, 0.1, 5, false);
        let seq = [0.5, 0.6, 0.6, 0.6, 0.7, 0.7, 0.7, 0.7, 0.7, 0.7];
        let actions: Vec<_> = seq.iter().map(|&m| s.observe(m)).collect();
        use PlateauAction::*;
        assert_eq!(
            actions,
            vec![
                Continue, Continue, Continue, Reduced, Continue, Continue, Reduced, Continue,
                Reduced, Terminate
            ]
        );
        assert_eq!(s.reductions, 3);
        assert!(s.reductions <= seq.len() / 2);
    }

    #[test]
    fn config_defaults_and_unknown_fields() {
        let cfg = TrainConfig::from_json(r#"{"model": {"kind": "grudt", "hidden": 4}}"#).unwrap();
        assert_eq!(cfg.readout_lr_multiplier, 100.0);
        assert_eq!(cfg.plateau_factor, 0.1);
        assert_eq!(cfg.model.kind, ModelKind::Grudt);
        assert!(TrainConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"lr": -1}"#).is_err());
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(TrainConfig::from_json(&text).unwrap(), cfg);
    }

    fn tiny_sets(seed: u64) -> (TimeSeriesSet, TimeSeriesSet) {
        let mut rng = seeded_rng(seed);
        let train = gen_toy_curves(40, 2, 8, &mut rng).unwrap();
        let val = gen_toy_curves(10, 2, 8, &mut rng).unwrap();
        (train, val)
    }

    fn tiny_config(kind: ModelKind) -> TrainConfig {
        TrainConfig {
            model: ModelSpec {
                kind,
                hidden: 4,
                field_hidden: 8,
                field_layers: 1,
                field_activation: Activation::Relu,
            },
            lr: 0.01,
            batch_size: 8,
            max_epochs: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let (tr, va) = tiny_sets(1);
        let cfg = TrainConfig {
            max_epochs: 0,
            ..tiny_config(ModelKind::Ncde)
        };
        let out = train(&cfg, &tr, &va).unwrap();
        assert!(out.log.is_empty());
        let fresh = Model::init(&cfg.model, 4, 2, &mut seeded_rng(cfg.seed)).unwrap();
        assert_eq!(out.trained.model, fresh);
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let (tr, va) = tiny_sets(2);
        for kind in ModelKind::ALL {
            let cfg = tiny_config(kind);
            let a = train(&cfg, &tr, &va).unwrap();
            let b = train(&cfg, &tr, &va).unwrap();
            assert_eq!(a.log_jsonl().unwrap(), b.log_jsonl().unwrap());
            assert_eq!(a.trained, b.trained);
            assert_eq!(a.log.len(), 3);
        }
    }

    #[test]
    fn batch_gradient_is_order_invariant() {
        let (tr, _) = tiny_sets(3);
        let stats = ChannelStats::compute(&tr).unwrap();
        let samples = prepare(&tr, &stats, Intensity::None).unwrap();
        let model = Model::init(
            &tiny_config(ModelKind::Ncde).model,
            4,
            2,
            &mut seeded_rng(3),
        )
        .unwrap();
        let ids: Vec<usize> = (0..10).collect();
        let rev: Vec<usize> = ids.iter().rev().copied().collect();
        let (la, ga) = batch_gradient(&model, &samples, &ids, 0.05, GradMode::Adjoint).unwrap();
        let (lb, gb) = batch_gradient(&model, &samples, &rev, 0.05, GradMode::Adjoint).unwrap();
        assert_eq!(la, lb);
        assert_eq!(ga, gb);
    }

    #[test]
    fn evaluate_counts() {
        let mut rng = seeded_rng(4);
        let spec = ModelSpec::new(ModelKind::Grudt, 2);
        let mut model = Model::init(&spec, 2, 2, &mut rng).unwrap();
        // Zero everything: logits are the readout bias, here favouring class 0.
        let mut p = vec![0.0; model.param_count()];
        let n = p.len();
        p[n - 2] = 1.0;
        model.set_params(&p).unwrap();
        let samples: Vec<PreparedSample> = (0..10)
            .map(|i| {
                let s = TimeSeries::from_dense(
                    vec![0.0, 1.0],
                    vec![vec![i as f64], vec![1.0]],
                    Some(usize::from(i >= 3)),
                )
                .unwrap();
                PreparedSample::new(&s).unwrap()
            })
            .collect();
        // Labels: three 0s, seven 1s; constant class-0 predictor gets 3/10.
        let e = evaluate(&model, &samples, 0.5).unwrap();
        assert!((e.accuracy - 0.3).abs() < 1e-15);
        // Balanced subset gives one half.
        let e = evaluate(&model, &samples[..6], 0.5).unwrap();
        assert!((e.accuracy - 0.5).abs() < 1e-15);
    }

    #[test]
    fn trained_model_round_trips() {
        let (tr, va) = tiny_sets(5);
        let out = train(&tiny_config(ModelKind::Odernn), &tr, &va).unwrap();
        let text = out.trained.to_json().unwrap();
        let back = TrainedModel::from_json(&text).unwrap();
        assert_eq!(back, out.trained);
        assert_eq!(
            back.evaluate(&va).unwrap(),
            out.trained.evaluate(&va).unwrap()
        );
    }

    #[test]
    fn separable_in_mean_reaches_high_train_accuracy() {
        // Class c sits at level ±1 with small wiggles, so the initial value
        // alone separates the classes.
        let mut rng = seeded_rng(11);
        use rand::Rng;
        let mut make = |n: usize| {
            let samples = (0..n)
                .map(|i| {
                    let c = i % 2;
                    let level = if c == 0 { -1.0 } else { 1.0 };
                    let times: Vec<f64> = (0..6).map(|k| k as f64).collect();
                    let vals = times
                        .iter()
                        .map(|_| vec![level + rng.random_range(-0.2..0.2)])
                        .collect();
                    TimeSeries::from_dense(times, vals, Some(c)).unwrap()
                })
                .collect();
            TimeSeriesSet::new(samples, 2).unwrap()
        };
        let (tr, va) = (make(40), make(10));
        let cfg = TrainConfig {
            model: ModelSpec {
                kind: ModelKind::Ncde,
                hidden: 2,
                field_hidden: 4,
                field_layers: 1,
                field_activation: Activation::Relu,
            },
            lr: 0.01,
            batch_size: 8,
            max_epochs: 50,
            ..TrainConfig::default()
        };
        let out = train(&cfg, &tr, &va).unwrap();
        let acc = out.trained.evaluate(&tr).unwrap();
        assert!(acc >= 0.95, "train accuracy {acc}");
    }
}
