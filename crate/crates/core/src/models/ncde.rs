use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    check_linear, linear_map, split_groups, terminal_value_and_grad, GradMode, LossFn, ModelSpec,
    ParamRole, PreparedSample, SampleGrad,
};
use crate::cdeint::{make_field, rk4_solve, RecordMode};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, ParamGrads};
use crate::path::ControlPath;

/// `z_{t0} = ζ(X_{t0})`, `z_t = z_{t0} + ∫ f(z_s) dX_s`, logits `= ℓ(z_{tn})`.
///
/// `ζ` and `ℓ` are linear; `f` is a network (ReLU hidden layers by default)
/// with a final tanh whose
/// `w·(v+1)` outputs are read as a row-major `w × (v+1)` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuralCde {
    pub zeta: Mlp,
    pub field: Mlp,
    pub readout: Mlp,
}

impl NeuralCde {
    pub fn init<R: Rng + ?Sized>(
        spec: &ModelSpec,
        input_dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = spec.hidden;
        let zeta = linear_map(input_dim, w, rng)?;
        let field = Mlp::init(
            &spec.field_dims(w, w * input_dim),
            spec.field_activation,
            Activation::Tanh,
            rng,
        )?;
        let readout = linear_map(w, classes, rng)?;
        let m = NeuralCde {
            zeta,
            field,
            readout,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn from_parts(zeta: Mlp, field: Mlp, readout: Mlp) -> Result<Self> {
        let m = NeuralCde {
            zeta,
            field,
            readout,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn hidden(&self) -> usize {
        self.zeta.out_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.zeta.in_dim()
    }

    pub fn classes(&self) -> usize {
        self.readout.out_dim()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let (d, w) = (self.input_dim(), self.hidden());
        check_linear(&self.readout, w, self.classes(), "readout")?;
        if self.field.in_dim() != w || self.field.out_dim() != w * d {
            return Err(Error::shape(format!(
                "vector field must map {w} -> {}, got {:?}",
                w * d,
                self.field.dims()
            )));
        }
        if self.field.output != Activation::Tanh {
            return Err(Error::Config(
                "the CDE vector field must end in tanh".into(),
            ));
        }
        Ok(())
    }

    pub(crate) fn group_sizes(&self) -> Vec<(ParamRole, usize)> {
        vec![
            (ParamRole::Initial, self.zeta.param_count()),
            (ParamRole::Field, self.field.param_count()),
            (ParamRole::Readout, self.readout.param_count()),
        ]
    }

    pub(crate) fn params(&self) -> Vec<f64> {
        let mut p = self.zeta.params();
        p.extend(self.field.params());
        p.extend(self.readout.params());
        p
    }

    pub(crate) fn set_params(&mut self, src: &[f64]) -> Result<()> {
        let (a, rest) = src.split_at(self.zeta.param_count());
        let (b, c) = rest.split_at(self.field.param_count());
        self.zeta.set_params(a)?;
        self.field.set_params(b)?;
        self.readout.set_params(c)
    }

    /// Initial hidden state `ζ(X_{t0})`.
    pub fn initial_state(&self, sample: &PreparedSample) -> Result<Vec<f64>> {
        self.zeta.forward(&sample.path.evaluate(sample.span().0)?)
    }

    /// Terminal hidden state `z_{tn}`.
    pub fn terminal_state(&self, sample: &PreparedSample, step: f64) -> Result<Vec<f64>> {
        let (t0, t1) = sample.span();
        let field = make_field(&self.field, &sample.path)?;
        let z0 = self.initial_state(sample)?;
        Ok(rk4_solve(&field, &z0, t0, t1, step, RecordMode::Terminal)?.z_terminal)
    }

    pub fn logits(&self, sample: &PreparedSample, step: f64) -> Result<Vec<f64>> {
        self.readout.forward(&self.terminal_state(sample, step)?)
    }

    pub fn value_and_grad(
        &self,
        sample: &PreparedSample,
        step: f64,
        mode: GradMode,
        loss: &LossFn<'_>,
    ) -> Result<SampleGrad> {
        let sizes: Vec<usize> = self.group_sizes().into_iter().map(|(_, n)| n).collect();
        let mut grads = ParamGrads::zeros(sizes.iter().sum());
        let mut parts = split_groups(&mut grads.0, &sizes);
        let [g_zeta, g_field, g_read] = &mut parts[..] else {
            unreachable!("three groups")
        };
        let x0 = sample.path.evaluate(sample.span().0)?;
        let (z0, zcache) = self.zeta.forward_cached(&x0)?;
        let field = make_field(&self.field, &sample.path)?;
        let (value, logits, z0_bar) = terminal_value_and_grad(
            &field,
            &z0,
            sample.span(),
            step,
            mode,
            &self.readout,
            loss,
            g_field,
            g_read,
        )?;
        self.zeta.vjp_into(&zcache, &z0_bar, g_zeta)?;
        Ok(SampleGrad {
            loss: value,
            logits,
            grads,
        })
    }
}
