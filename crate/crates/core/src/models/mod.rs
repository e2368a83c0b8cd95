//! Sequence classifiers: the Neural CDE and three baselines behind one
//! interface, plus the construction embedding a direct ODE into a CDE.
//!
//! Every model exposes a flat parameter vector split into role groups
//! ([`ParamRole`]) so the optimizer can give the readout its own learning
//! rate and apply weight decay to vector fields and cells only.

mod direct;
mod gru;
mod ncde;
mod rnn;

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cdeint::{adjoint_backward, direct_backward, rk4_solve, RecordMode, VectorField};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, ParamGrads};
use crate::path::ControlPath;
use crate::spline::{fit_natural_cubic, SplinePath};
use crate::timeseries::TimeSeries;

pub use direct::{
    embed_direct_ode, embedded_initial, DirectField, DirectOdeModel, EmbeddedField, HCache, HNet,
};
pub use gru::{GruCache, GruCell};
pub use ncde::NeuralCde;
pub use rnn::{GruDt, OdeRnn};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ncde,
    Gruode,
    Grudt,
    Odernn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::Ncde,
        ModelKind::Gruode,
        ModelKind::Grudt,
        ModelKind::Odernn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Ncde => "ncde",
            ModelKind::Gruode => "gruode",
            ModelKind::Grudt => "grudt",
            ModelKind::Odernn => "odernn",
        }
    }

    /// Row label used in result tables.
    pub fn display_name(self) -> &'static str {
        match self {
            ModelKind::Ncde => "Neural CDE",
            ModelKind::Gruode => "GRU-ODE",
            ModelKind::Grudt => "GRU-dt",
            ModelKind::Odernn => "ODE-RNN",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model kind {s:?}")))
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How the continuous parts of a model are differentiated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradMode {
    #[default]
    Adjoint,
    Direct,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Hidden state size `w`.
    pub hidden: usize,
    /// Width of the hidden layers of vector-field networks.
    #[serde(default = "default_field_hidden")]
    pub field_hidden: usize,
    /// Number of hidden layers of vector-field networks.
    #[serde(default = "default_field_layers")]
    pub field_layers: usize,
    /// Hidden-layer nonlinearity of vector-field networks. The final layer
    /// is always tanh.
    #[serde(default = "default_field_activation")]
    pub field_activation: Activation,
}

fn default_field_activation() -> Activation {
    Activation::Relu
}

fn default_field_hidden() -> usize {
    16
}

fn default_field_layers() -> usize {
    1
}

impl ModelSpec {
    pub fn new(kind: ModelKind, hidden: usize) -> Self {
        ModelSpec {
            kind,
            hidden,
            field_hidden: default_field_hidden(),
            field_layers: default_field_layers(),
            field_activation: default_field_activation(),
        }
    }

    /// Widths `[input, field_hidden × field_layers, output]`.
    pub(crate) fn field_dims(&self, input: usize, output: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend(std::iter::repeat_n(self.field_hidden, self.field_layers));
        dims.push(output);
        dims
    }

    /// Number of trainable parameters for the given input and output sizes.
    pub fn param_count(&self, input_dim: usize, classes: usize) -> Result<usize> {
        let mut rng = crate::seeded_rng(0);
        Ok(Model::init(self, input_dim, classes, &mut rng)?.param_count())
    }

    /// This architecture with kind `kind` and the hidden size (at most 256)
    /// whose parameter count is closest to `target`, preferring the smaller
    /// size on ties.
    pub fn balanced(
        &self,
        kind: ModelKind,
        input_dim: usize,
        classes: usize,
        target: usize,
    ) -> Result<ModelSpec> {
        let mut best: Option<(usize, ModelSpec)> = None;
        for hidden in 1..=256 {
            let spec = ModelSpec {
                kind,
                hidden,
                ..self.clone()
            };
            let distance = spec.param_count(input_dim, classes)?.abs_diff(target);
            if best.as_ref().is_none_or(|(d, _)| distance < *d) {
                best = Some((distance, spec));
            }
        }
        Ok(best.expect("range is nonempty").1)
    }

    fn validate(&self) -> Result<()> {
        if self.hidden == 0 || (self.field_layers > 0 && self.field_hidden == 0) {
            return Err(Error::Config(format!(
                "degenerate model dimensions {self:?}"
            )));
        }
        Ok(())
    }
}

/// Which part of a model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamRole {
    /// The initial-state network `ζ`.
    Initial,
    /// Vector fields and recurrent cells.
    Field,
    /// The final linear map.
    Readout,
}

/// A series ready for any model: its spline path (time appended as the last
/// channel) and, for the discrete models, the per-observation inputs
/// `[spline-filled values at t_i, t_i − t_{i−1}]`.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub path: SplinePath,
    pub times: Vec<f64>,
    pub inputs: Vec<Vec<f64>>,
    pub label: Option<usize>,
}

impl PreparedSample {
    pub fn new(series: &TimeSeries) -> Result<Self> {
        let path = fit_natural_cubic(series)?;
        let v = series.channel_count();
        let times = series.times().to_vec();
        let inputs = times
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let mut x = path.evaluate(t)?;
                x.truncate(v);
                x.push(if i == 0 { 0.0 } else { t - times[i - 1] });
                Ok(x)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedSample {
            path,
            times,
            inputs,
            label: series.label(),
        })
    }

    /// Path dimension `v + 1`, which is also the discrete models' input size.
    pub fn input_dim(&self) -> usize {
        self.path.dim()
    }

    pub fn span(&self) -> (f64, f64) {
        self.path.domain()
    }
}

/// Loss value, logits and full parameter gradient for one sample.
#[derive(Clone, Debug)]
pub struct SampleGrad {
    pub loss: f64,
    pub logits: Vec<f64>,
    pub grads: ParamGrads,
}

/// A scalar loss on the logits returning `(loss, ∂loss/∂logits)`.
pub type LossFn<'a> = dyn Fn(&[f64]) -> (f64, Vec<f64>) + Sync + 'a;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Model {
    Ncde(NeuralCde),
    Gruode(DirectOdeModel),
    Grudt(GruDt),
    Odernn(OdeRnn),
}

const MODEL_FORMAT: &str = "cdeflow-model";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelCheckpoint {
    format: String,
    version: u32,
    spec: ModelSpec,
    input_dim: usize,
    classes: usize,
    param_count: usize,
    model: Model,
}

macro_rules! each {
    ($self:expr, $m:ident => $e:expr) => {
        match $self {
            Model::Ncde($m) => $e,
            Model::Gruode($m) => $e,
            Model::Grudt($m) => $e,
            Model::Odernn($m) => $e,
        }
    };
}

impl Model {
    /// A freshly initialized model for inputs of path dimension `input_dim`
    /// (data channels plus time) and `classes` outputs.
    pub fn init<R: Rng + ?Sized>(
        spec: &ModelSpec,
        input_dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        if input_dim < 1 || classes < 1 {
            return Err(Error::Config(
                "model needs at least one input and one class".into(),
            ));
        }
        Ok(match spec.kind {
            ModelKind::Ncde => Model::Ncde(NeuralCde::init(spec, input_dim, classes, rng)?),
            ModelKind::Gruode => {
                Model::Gruode(DirectOdeModel::init_gru(spec, input_dim, classes, rng)?)
            }
            ModelKind::Grudt => Model::Grudt(GruDt::init(spec, input_dim, classes, rng)?),
            ModelKind::Odernn => Model::Odernn(OdeRnn::init(spec, input_dim, classes, rng)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Ncde(_) => ModelKind::Ncde,
            Model::Gruode(_) => ModelKind::Gruode,
            Model::Grudt(_) => ModelKind::Grudt,
            Model::Odernn(_) => ModelKind::Odernn,
        }
    }

    pub fn input_dim(&self) -> usize {
        each!(self, m => m.input_dim())
    }

    pub fn classes(&self) -> usize {
        each!(self, m => m.classes())
    }

    pub fn param_count(&self) -> usize {
        self.groups().last().map_or(0, |(_, r)| r.end)
    }

    /// Contiguous parameter ranges in flat order.
    pub fn groups(&self) -> Vec<(ParamRole, Range<usize>)> {
        let sizes = each!(self, m => m.group_sizes());
        let mut start = 0;
        sizes
            .into_iter()
            .map(|(role, n)| {
                let r = start..start + n;
                start += n;
                (role, r)
            })
            .collect()
    }

    pub fn params(&self) -> Vec<f64> {
        each!(self, m => m.params())
    }

    pub fn set_params(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.param_count() {
            return Err(Error::shape(format!(
                "model has {} parameters, got {}",
                self.param_count(),
                src.len()
            )));
        }
        each!(self, m => m.set_params(src))
    }

    fn check_sample(&self, sample: &PreparedSample) -> Result<()> {
        if sample.input_dim() != self.input_dim() {
            return Err(Error::shape(format!(
                "model expects {} input channels (with time), sample has {}",
                self.input_dim(),
                sample.input_dim()
            )));
        }
        Ok(())
    }

    pub fn logits(&self, sample: &PreparedSample, step: f64) -> Result<Vec<f64>> {
        self.check_sample(sample)?;
        each!(self, m => m.logits(sample, step))
    }

    pub fn value_and_grad(
        &self,
        sample: &PreparedSample,
        step: f64,
        mode: GradMode,
        loss: &LossFn<'_>,
    ) -> Result<SampleGrad> {
        self.check_sample(sample)?;
        each!(self, m => m.value_and_grad(sample, step, mode, loss))
    }

    pub fn to_checkpoint(&self, spec: &ModelSpec) -> Result<String> {
        Ok(serde_json::to_string(&ModelCheckpoint {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            spec: spec.clone(),
            input_dim: self.input_dim(),
            classes: self.classes(),
            param_count: self.param_count(),
            model: self.clone(),
        })?)
    }

    pub fn from_checkpoint(text: &str) -> Result<(Self, ModelSpec)> {
        let ck: ModelCheckpoint = serde_json::from_str(text)?;
        if ck.format != MODEL_FORMAT || ck.version != MODEL_VERSION {
            return Err(Error::Config(format!(
                "unsupported model checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let m = ck.model;
        m.validate()?;
        if m.kind() != ck.spec.kind
            || m.input_dim() != ck.input_dim
            || m.classes() != ck.classes
            || m.param_count() != ck.param_count
        {
            return Err(Error::shape(
                "model checkpoint manifest does not match its contents",
            ));
        }
        Ok((m, ck.spec))
    }

    fn validate(&self) -> Result<()> {
        each!(self, m => m.validate())
    }
}

/// Single linear layer `ℝⁱⁿ → ℝᵒᵘᵗ`, Glorot-initialized.
pub(crate) fn linear_map<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Result<Mlp> {
    Mlp::init(
        &[input, output],
        Activation::Identity,
        Activation::Identity,
        rng,
    )
}

pub(crate) fn check_linear(m: &Mlp, input: usize, output: usize, what: &str) -> Result<()> {
    if m.layers.len() != 1 || m.in_dim() != input || m.out_dim() != output {
        return Err(Error::shape(format!(
            "{what} should be a single {input} -> {output} linear layer, got dims {:?}",
            m.dims()
        )));
    }
    Ok(())
}

/// Splits `grads` into consecutive mutable slices of the given lengths.
pub(crate) fn split_groups<'a>(mut grads: &'a mut [f64], sizes: &[usize]) -> Vec<&'a mut [f64]> {
    let mut out = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let (head, tail) = std::mem::take(&mut grads).split_at_mut(n);
        out.push(head);
        grads = tail;
    }
    out
}

/// Solves `field` from `z0` over `span`, applies `readout` and `loss` to the
/// terminal state and differentiates back to the initial state.
///
/// Field gradients go to `g_field`, readout gradients to `g_readout`.
/// Returns `(loss, logits, z0_bar)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn terminal_value_and_grad<F: VectorField>(
    field: &F,
    z0: &[f64],
    span: (f64, f64),
    step: f64,
    mode: GradMode,
    readout: &Mlp,
    loss: &LossFn<'_>,
    g_field: &mut [f64],
    g_readout: &mut [f64],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (t0, t1) = span;
    let record_mode = match mode {
        GradMode::Adjoint => RecordMode::Terminal,
        GradMode::Direct => RecordMode::Direct,
    };
    let rec = rk4_solve(field, z0, t0, t1, step, record_mode)?;
    let (logits, rcache) = readout.forward_cached(&rec.z_terminal)?;
    let (value, logits_bar) = loss(&logits);
    let zt_bar = readout.vjp_into(&rcache, &logits_bar, g_readout)?;
    let back = match mode {
        GradMode::Adjoint => {
            adjoint_backward(field, &rec.z_terminal, &zt_bar, t0, t1, step, false)?
        }
        GradMode::Direct => direct_backward(field, &rec, &zt_bar)?,
    };
    g_field
        .iter_mut()
        .zip(&back.theta_bar.0)
        .for_each(|(g, v)| *g += v);
    Ok((value, logits, back.z0_bar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    fn toy_sample() -> PreparedSample {
        let s = TimeSeries::new(
            vec![0.0, 0.5, 1.2],
            vec![
                vec![Some(0.3), None],
                vec![Some(-0.2), Some(1.0)],
                vec![Some(0.4), Some(0.1)],
            ],
            Some(1),
        )
        .unwrap();
        PreparedSample::new(&s).unwrap()
    }

    #[test]
    fn prepared_inputs_fill_gaps_and_append_dt() {
        let p = toy_sample();
        assert_eq!(p.input_dim(), 3);
        assert_eq!(p.inputs.len(), 3);
        assert_eq!(p.inputs[0][0], 0.3);
        assert_eq!(p.inputs[0][2], 0.0);
        // Channel 1 is linearly extended to t = 0 from its own two knots.
        assert!((p.inputs[0][1] - (1.0 + 0.5 * 0.9 / 0.7)).abs() < 1e-12);
        assert!((p.inputs[2][2] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn kinds_parse_and_print() {
        for k in ModelKind::ALL {
            assert_eq!(k.name().parse::<ModelKind>().unwrap(), k);
        }
        assert!("gru".parse::<ModelKind>().is_err());
    }

    #[test]
    fn balanced_hidden_sizes_track_a_target() {
        let base = ModelSpec::new(ModelKind::Ncde, 8);
        let target = base.param_count(4, 2).unwrap();
        for kind in ModelKind::ALL {
            let spec = base.balanced(kind, 4, 2, target).unwrap();
            let count = spec.param_count(4, 2).unwrap();
            // Neighbouring hidden sizes are no closer.
            for h in [spec.hidden - 1, spec.hidden + 1] {
                let other = ModelSpec {
                    hidden: h,
                    ..spec.clone()
                };
                assert!(
                    other.param_count(4, 2).unwrap().abs_diff(target) >= count.abs_diff(target)
                );
            }
        }
        assert_eq!(base.balanced(ModelKind::Ncde, 4, 2, target).unwrap(), base);
    }

    #[test]
    fn groups_cover_parameters_in_order() {
        let mut rng = seeded_rng(1);
        for kind in ModelKind::ALL {
            let m = Model::init(&ModelSpec::new(kind, 4), 3, 2, &mut rng).unwrap();
            let groups = m.groups();
            assert_eq!(groups[0].1.start, 0);
            for w in groups.windows(2) {
                assert_eq!(w[0].1.end, w[1].1.start);
            }
            assert_eq!(groups.last().unwrap().0, ParamRole::Readout);
            assert_eq!(m.params().len(), m.param_count());
        }
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly() {
        let mut rng = seeded_rng(2);
        let sample = toy_sample();
        for kind in ModelKind::ALL {
            let spec = ModelSpec::new(kind, 3);
            let m = Model::init(&spec, 3, 2, &mut rng).unwrap();
            let text = m.to_checkpoint(&spec).unwrap();
            let (back, spec_back) = Model::from_checkpoint(&text).unwrap();
            assert_eq!(back, m);
            assert_eq!(spec_back, spec);
            assert_eq!(
                back.logits(&sample, 0.1).unwrap(),
                m.logits(&sample, 0.1).unwrap()
            );
        }
        assert!(Model::from_checkpoint("{}").is_err());
    }

    #[test]
    fn zero_loss_gradient_gives_zero_gradients() {
        let mut rng = seeded_rng(3);
        let sample = toy_sample();
        let zero = |l: &[f64]| (0.0, vec![0.0; l.len()]);
        for kind in ModelKind::ALL {
            let m = Model::init(&ModelSpec::new(kind, 3), 3, 2, &mut rng).unwrap();
            for mode in [GradMode::Adjoint, GradMode::Direct] {
                let g = m.value_and_grad(&sample, 0.1, mode, &zero).unwrap();
                assert_eq!(g.grads.max_abs(), 0.0, "{kind} {mode:?}");
            }
        }
    }

    #[test]
    fn sample_shape_is_checked() {
        let m = Model::init(
            &ModelSpec::new(ModelKind::Ncde, 3),
            4,
            2,
            &mut seeded_rng(4),
        )
        .unwrap();
        assert!(matches!(m.logits(&toy_sample(), 0.1), Err(Error::Shape(_))));
    }
}
