//! Discrete recurrent baselines, updated only at observation times.
//!
//! Both read the input `[x_i, Δt_i]` at each observation (values filled from
//! the spline where missing) starting from a zero hidden state. ODE-RNN also
//! evolves the hidden state between observations with an autonomous Neural
//! ODE; with a zero ODE field it reduces exactly to GRU-Δt.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    check_linear, linear_map, split_groups, GradMode, GruCache, GruCell, LossFn, ModelSpec,
    ParamRole, PreparedSample, SampleGrad,
};
use crate::cdeint::{
    adjoint_backward, direct_backward, rk4_solve, AutonomousField, RecordMode, SolveRecord,
};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, MlpCache, ParamGrads};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruDt {
    pub cell: GruCell,
    pub readout: Mlp,
}

impl GruDt {
    pub fn init<R: Rng + ?Sized>(
        spec: &ModelSpec,
        input_dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let m = GruDt {
            cell: GruCell::init(input_dim, spec.hidden, rng),
            readout: linear_map(spec.hidden, classes, rng)?,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn input_dim(&self) -> usize {
        self.cell.input_dim()
    }

    pub fn classes(&self) -> usize {
        self.readout.out_dim()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        check_linear(
            &self.readout,
            self.cell.hidden_dim(),
            self.classes(),
            "readout",
        )
    }

    pub(crate) fn group_sizes(&self) -> Vec<(ParamRole, usize)> {
        vec![
            (ParamRole::Field, self.cell.param_count()),
            (ParamRole::Readout, self.readout.param_count()),
        ]
    }

    pub(crate) fn params(&self) -> Vec<f64> {
        let mut p = self.cell.params();
        p.extend(self.readout.params());
        p
    }

    pub(crate) fn set_params(&mut self, src: &[f64]) -> Result<()> {
        let (a, b) = src.split_at(self.cell.param_count());
        self.cell.set_params(a)?;
        self.readout.set_params(b)
    }

    pub fn final_hidden(&self, sample: &PreparedSample) -> Result<Vec<f64>> {
        let mut h = vec![0.0; self.cell.hidden_dim()];
        for x in &sample.inputs {
            h = self.cell.forward(x, &h)?;
        }
        Ok(h)
    }

    pub fn logits(&self, sample: &PreparedSample, _step: f64) -> Result<Vec<f64>> {
        self.readout.forward(&self.final_hidden(sample)?)
    }

    pub fn value_and_grad(
        &self,
        sample: &PreparedSample,
        _step: f64,
        _mode: GradMode,
        loss: &LossFn<'_>,
    ) -> Result<SampleGrad> {
        let sizes = [self.cell.param_count(), self.readout.param_count()];
        let mut grads = ParamGrads::zeros(sizes.iter().sum());
        let mut parts = split_groups(&mut grads.0, &sizes);
        let [g_cell, g_read] = &mut parts[..] else {
            unreachable!("two groups")
        };
        let mut h = vec![0.0; self.cell.hidden_dim()];
        let mut caches = Vec::with_capacity(sample.inputs.len());
        for x in &sample.inputs {
            let (next, c) = self.cell.forward_cached(x, &h)?;
            caches.push(c);
            h = next;
        }
        let (logits, rc) = self.readout.forward_cached(&h)?;
        let (value, logits_bar) = loss(&logits);
        let mut h_bar = self.readout.vjp_into(&rc, &logits_bar, g_read)?;
        for c in caches.iter().rev() {
            h_bar = self.cell.vjp_into(c, &h_bar, g_cell)?.1;
        }
        Ok(SampleGrad {
            loss: value,
            logits,
            grads,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdeRnn {
    pub cell: GruCell,
    /// Autonomous hidden-state field `ℝʷ → ℝʷ` with a final tanh.
    pub ode: Mlp,
    pub readout: Mlp,
}

/// What one observation step of ODE-RNN keeps for the backward pass.
struct OdeRnnStep {
    /// Hidden state after the ODE flow, before the cell update.
    evolved: Vec<f64>,
    flow: Option<SolveRecord<MlpCache>>,
    cell: GruCache,
}

impl OdeRnn {
    pub fn init<R: Rng + ?Sized>(
        spec: &ModelSpec,
        input_dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = spec.hidden;
        let m = OdeRnn {
            cell: GruCell::init(input_dim, w, rng),
            ode: Mlp::init(
                &spec.field_dims(w, w),
                spec.field_activation,
                Activation::Tanh,
                rng,
            )?,
            readout: linear_map(w, classes, rng)?,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn input_dim(&self) -> usize {
        self.cell.input_dim()
    }

    pub fn classes(&self) -> usize {
        self.readout.out_dim()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let w = self.cell.hidden_dim();
        if self.ode.in_dim() != w || self.ode.out_dim() != w {
            return Err(Error::shape(format!(
                "ODE-RNN field must map {w} -> {w}, got {:?}",
                self.ode.dims()
            )));
        }
        check_linear(&self.readout, w, self.classes(), "readout")
    }

    pub(crate) fn group_sizes(&self) -> Vec<(ParamRole, usize)> {
        vec![
            (
                ParamRole::Field,
                self.cell.param_count() + self.ode.param_count(),
            ),
            (ParamRole::Readout, self.readout.param_count()),
        ]
    }

    pub(crate) fn params(&self) -> Vec<f64> {
        let mut p = self.cell.params();
        p.extend(self.ode.params());
        p.extend(self.readout.params());
        p
    }

    pub(crate) fn set_params(&mut self, src: &[f64]) -> Result<()> {
        let (a, rest) = src.split_at(self.cell.param_count());
        let (b, c) = rest.split_at(self.ode.param_count());
        self.cell.set_params(a)?;
        self.ode.set_params(b)?;
        self.readout.set_params(c)
    }

    fn flow(
        &self,
        h: &[f64],
        t0: f64,
        t1: f64,
        step: f64,
        mode: RecordMode,
    ) -> Result<SolveRecord<MlpCache>> {
        let field = AutonomousField::new(&self.ode)?;
        rk4_solve(&field, h, t0, t1, step, mode)
    }

    pub fn final_hidden(&self, sample: &PreparedSample, step: f64) -> Result<Vec<f64>> {
        let mut h = vec![0.0; self.cell.hidden_dim()];
        for (i, x) in sample.inputs.iter().enumerate() {
            if i > 0 {
                h = self
                    .flow(
                        &h,
                        sample.times[i - 1],
                        sample.times[i],
                        step,
                        RecordMode::Terminal,
                    )?
                    .z_terminal;
            }
            h = self.cell.forward(x, &h)?;
        }
        Ok(h)
    }

    pub fn logits(&self, sample: &PreparedSample, step: f64) -> Result<Vec<f64>> {
        self.readout.forward(&self.final_hidden(sample, step)?)
    }

    pub fn value_and_grad(
        &self,
        sample: &PreparedSample,
        step: f64,
        mode: GradMode,
        loss: &LossFn<'_>,
    ) -> Result<SampleGrad> {
        let sizes = [
            self.cell.param_count(),
            self.ode.param_count(),
            self.readout.param_count(),
        ];
        let mut grads = ParamGrads::zeros(sizes.iter().sum());
        let mut parts = split_groups(&mut grads.0, &sizes);
        let [g_cell, g_ode, g_read] = &mut parts[..] else {
            unreachable!("three groups")
        };
        let record_mode = match mode {
            GradMode::Adjoint => RecordMode::Terminal,
            GradMode::Direct => RecordMode::Direct,
        };
        let mut h = vec![0.0; self.cell.hidden_dim()];
        let mut steps = Vec::with_capacity(sample.inputs.len());
        for (i, x) in sample.inputs.iter().enumerate() {
            let flow = if i > 0 {
                let rec = self.flow(&h, sample.times[i - 1], sample.times[i], step, record_mode)?;
                h = rec.z_terminal.clone();
                Some(rec)
            } else {
                None
            };
            let (next, cell) = self.cell.forward_cached(x, &h)?;
            steps.push(OdeRnnStep {
                evolved: std::mem::replace(&mut h, next),
                // The adjoint only needs the end state, which `evolved` holds.
                flow: flow.filter(|_| mode == GradMode::Direct),
                cell,
            });
        }
        let (logits, rc) = self.readout.forward_cached(&h)?;
        let (value, logits_bar) = loss(&logits);
        let mut h_bar = self.readout.vjp_into(&rc, &logits_bar, g_read)?;
        let field = AutonomousField::new(&self.ode)?;
        for (i, st) in steps.iter().enumerate().rev() {
            h_bar = self.cell.vjp_into(&st.cell, &h_bar, g_cell)?.1;
            if i == 0 {
                break;
            }
            let back = match mode {
                GradMode::Adjoint => adjoint_backward(
                    &field,
                    &st.evolved,
                    &h_bar,
                    sample.times[i - 1],
                    sample.times[i],
                    step,
                    false,
                )?,
                GradMode::Direct => {
                    let rec = st.flow.as_ref().expect("direct mode keeps flow records");
                    direct_backward(&field, rec, &h_bar)?
                }
            };
            g_ode
                .iter_mut()
                .zip(&back.theta_bar.0)
                .for_each(|(g, v)| *g += v);
            h_bar = back.z0_bar;
        }
        Ok(SampleGrad {
            loss: value,
            logits,
            grads,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Model, ModelKind};
    use crate::oracle::{central_difference, max_relative_error, relative_error};
    use crate::seeded_rng;
    use crate::timeseries::TimeSeries;

    fn sample(seed: u64, n: usize) -> PreparedSample {
        let mut rng = seeded_rng(seed);
        let times: Vec<f64> = (0..n)
            .map(|i| i as f64 * 0.4 + rng.random_range(0.0..0.1))
            .collect();
        let rows = (0..n)
            .map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        PreparedSample::new(&TimeSeries::from_dense(times, rows, Some(1)).unwrap()).unwrap()
    }

    fn spec(kind: ModelKind) -> ModelSpec {
        ModelSpec::new(kind, 3)
    }

    #[test]
    fn zero_gru_stays_at_zero_and_reads_bias() {
        let mut m = GruDt::init(&spec(ModelKind::Grudt), 3, 2, &mut seeded_rng(1)).unwrap();
        m.cell = GruCell::zeros(3, 3);
        let s = sample(2, 2);
        assert_eq!(m.final_hidden(&s).unwrap(), vec![0.0; 3]);
        assert_eq!(m.logits(&s, 0.1).unwrap(), m.readout.layers[0].bias);
    }

    #[test]
    fn zero_ode_field_reduces_to_grudt() {
        let mut rng = seeded_rng(3);
        let mut ode_rnn = OdeRnn::init(&spec(ModelKind::Odernn), 3, 2, &mut rng).unwrap();
        let zeros = vec![0.0; ode_rnn.ode.param_count()];
        ode_rnn.ode.set_params(&zeros).unwrap();
        let grudt = GruDt {
            cell: ode_rnn.cell.clone(),
            readout: ode_rnn.readout.clone(),
        };
        let s = sample(4, 6);
        assert_eq!(
            ode_rnn.logits(&s, 0.05).unwrap(),
            grudt.logits(&s, 0.05).unwrap()
        );
    }

    #[test]
    fn grudt_matches_hand_unrolled_recursion() {
        let m = GruDt::init(&spec(ModelKind::Grudt), 3, 2, &mut seeded_rng(5)).unwrap();
        let s = sample(6, 3);
        let (wi, wh) = (&m.cell.input, &m.cell.hidden);
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let row = |l: &crate::nn::Linear, r: usize, v: &[f64]| -> f64 {
            l.bias[r]
                + (0..l.in_dim)
                    .map(|j| l.weight[r * l.in_dim + j] * v[j])
                    .sum::<f64>()
        };
        let mut h = vec![0.0; 3];
        for x in &s.inputs {
            let next: Vec<f64> = (0..3)
                .map(|i| {
                    let r = sig(row(wi, i, x) + row(wh, i, &h));
                    let u = sig(row(wi, 3 + i, x) + row(wh, 3 + i, &h));
                    let n = (row(wi, 6 + i, x) + r * row(wh, 6 + i, &h)).tanh();
                    (1.0 - u) * n + u * h[i]
                })
                .collect();
            h = next;
        }
        let got = m.final_hidden(&s).unwrap();
        assert!(max_relative_error(&got, &h) < 1e-14);
    }

    fn check_gradients(model: &Model, s: &PreparedSample, step: f64, mode: GradMode) {
        let loss = |l: &[f64]| (l[0] * l[0] + l[1], vec![2.0 * l[0], 1.0]);
        let p = model.params();
        let g = model.value_and_grad(s, step, mode, &loss).unwrap();
        let scale = g.grads.max_abs();
        for k in 0..p.len() {
            let fd = central_difference(
                |q| {
                    let mut m = model.clone();
                    m.set_params(q).unwrap();
                    loss(&m.logits(s, step).unwrap()).0
                },
                &p,
                k,
                1e-6,
            );
            assert!(
                relative_error(g.grads.0[k], fd, 1e-2 * scale) < 1e-4,
                "{mode:?} param {k}: {} vs {fd}",
                g.grads.0[k]
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = seeded_rng(7);
        let s = sample(8, 4);
        let grudt = Model::init(&spec(ModelKind::Grudt), 3, 2, &mut rng).unwrap();
        check_gradients(&grudt, &s, 0.05, GradMode::Direct);
        let odernn = Model::init(&spec(ModelKind::Odernn), 3, 2, &mut rng).unwrap();
        check_gradients(&odernn, &s, 0.05, GradMode::Direct);
        check_gradients(&odernn, &s, 0.02, GradMode::Adjoint);
    }
}
