//! ODEs whose field sees the path value directly, `dy/ds = h(y, X_s)`, and
//! their exact embedding into a CDE.
//!
//! Given `h: ℝᵘ × ℝᵈ → ℝᵘ` (with the path's last channel being time), the
//! CDE on `z = (y, x) ∈ ℝᵘ⁺ᵈ` with
//!
//! ```text
//!        ⎡ 0 … 0  h(y, x) ⎤   u rows
//! f(z) = ⎣      I_d       ⎦   d rows
//! ```
//!
//! started from `(Ξ(X_{t0}), X_{t0})` keeps `x_s = X_s` and so solves the
//! same equation for `y`: the time column turns `h` into `h·ds`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    check_linear, linear_map, split_groups, terminal_value_and_grad, GradMode, GruCache, GruCell,
    LossFn, ModelSpec, ParamRole, PreparedSample, SampleGrad,
};
use crate::cdeint::{rk4_solve, MatrixField, RecordMode, VectorField};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, MlpCache, ParamGrads};
use crate::path::ControlPath;

/// The direct field `h(y, x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HNet {
    /// An MLP on the concatenation `(y, x)`.
    Mlp { net: Mlp, state_dim: usize },
    /// GRU-ODE: `h(y, x) = GRU(x, y) − y`.
    Gru(GruCell),
}

#[derive(Clone, Debug)]
pub enum HCache {
    Mlp(MlpCache),
    Gru(GruCache),
}

impl HNet {
    pub fn mlp(net: Mlp, state_dim: usize) -> Result<Self> {
        if net.in_dim() <= state_dim || net.out_dim() != state_dim {
            return Err(Error::shape(format!(
                "h must map R^{state_dim} x R^d -> R^{state_dim}, got dims {:?}",
                net.dims()
            )));
        }
        Ok(HNet::Mlp { net, state_dim })
    }

    pub fn state_dim(&self) -> usize {
        match self {
            HNet::Mlp { state_dim, .. } => *state_dim,
            HNet::Gru(c) => c.hidden_dim(),
        }
    }

    /// Dimension of the path value `x`.
    pub fn input_dim(&self) -> usize {
        match self {
            HNet::Mlp { net, state_dim } => net.in_dim() - state_dim,
            HNet::Gru(c) => c.input_dim(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            HNet::Mlp { net, .. } => net.param_count(),
            HNet::Gru(c) => c.param_count(),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            HNet::Mlp { net, .. } => net.params(),
            HNet::Gru(c) => c.params(),
        }
    }

    pub fn set_params(&mut self, src: &[f64]) -> Result<()> {
        match self {
            HNet::Mlp { net, .. } => net.set_params(src),
            HNet::Gru(c) => c.set_params(src),
        }
    }

    fn check(&self, y: &[f64], x: &[f64]) -> Result<()> {
        if y.len() != self.state_dim() || x.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "h expects state {} and input {}, got {} and {}",
                self.state_dim(),
                self.input_dim(),
                y.len(),
                x.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, y: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(y, x)?.0)
    }

    pub fn forward_cached(&self, y: &[f64], x: &[f64]) -> Result<(Vec<f64>, HCache)> {
        self.check(y, x)?;
        match self {
            HNet::Mlp { net, .. } => {
                let input: Vec<f64> = y.iter().chain(x).copied().collect();
                let (out, c) = net.forward_cached(&input)?;
                Ok((out, HCache::Mlp(c)))
            }
            HNet::Gru(cell) => {
                let (next, c) = cell.forward_cached(x, y)?;
                let out = next.iter().zip(y).map(|(a, b)| a - b).collect();
                Ok((out, HCache::Gru(c)))
            }
        }
    }

    /// Accumulates parameter gradients and returns `(y_bar, x_bar)`.
    pub fn vjp_into(
        &self,
        cache: &HCache,
        out_bar: &[f64],
        grads: &mut [f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        match (self, cache) {
            (HNet::Mlp { net, state_dim }, HCache::Mlp(c)) => {
                let mut bar = net.vjp_into(c, out_bar, grads)?;
                let x_bar = bar.split_off(*state_dim);
                Ok((bar, x_bar))
            }
            (HNet::Gru(cell), HCache::Gru(c)) => {
                let (x_bar, mut y_bar) = cell.vjp_into(c, out_bar, grads)?;
                y_bar.iter_mut().zip(out_bar).for_each(|(a, b)| *a -= b);
                Ok((y_bar, x_bar))
            }
            _ => Err(Error::Mode(
                "cache does not belong to this h network".into(),
            )),
        }
    }
}

/// `dy/ds = h(y, X_s)`.
pub struct DirectField<'a, P: ?Sized> {
    h: &'a HNet,
    path: &'a P,
}

impl<'a, P: ControlPath + ?Sized> DirectField<'a, P> {
    pub fn new(h: &'a HNet, path: &'a P) -> Result<Self> {
        if h.input_dim() != path.dim() {
            return Err(Error::shape(format!(
                "h reads {} path channels, path has {}",
                h.input_dim(),
                path.dim()
            )));
        }
        Ok(DirectField { h, path })
    }
}

impl<P: ControlPath + ?Sized> VectorField for DirectField<'_, P> {
    type Cache = HCache;

    fn state_dim(&self) -> usize {
        self.h.state_dim()
    }

    fn param_count(&self) -> usize {
        self.h.param_count()
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.path.breakpoints()
    }

    fn eval(&self, z: &[f64], s: f64, window: (f64, f64)) -> Result<Vec<f64>> {
        self.h.forward(z, &self.path.evaluate_in(s, window)?)
    }

    fn eval_cached(&self, z: &[f64], s: f64, window: (f64, f64)) -> Result<(Vec<f64>, HCache)> {
        self.h.forward_cached(z, &self.path.evaluate_in(s, window)?)
    }

    fn vjp(&self, cache: &HCache, a: &[f64], theta_bar: &mut [f64]) -> Result<Vec<f64>> {
        Ok(self.h.vjp_into(cache, a, theta_bar)?.0)
    }
}

/// The CDE matrix field built from `h` (see the module docs).
#[derive(Clone, Copy, Debug)]
pub struct EmbeddedField<'a> {
    h: &'a HNet,
    y_dim: usize,
    d: usize,
}

/// Builds the embedded CDE field for `h`. The CDE state has `u + d` entries
/// and the driving path must have `d` channels with time last.
pub fn embed_direct_ode(h: &HNet) -> Result<EmbeddedField<'_>> {
    let (y_dim, d) = (h.state_dim(), h.input_dim());
    if y_dim == 0 || d == 0 {
        return Err(Error::shape(
            "embedding needs a nonempty ODE state and path",
        ));
    }
    Ok(EmbeddedField { h, y_dim, d })
}

/// Embedded initial state `(y0, x0)`.
pub fn embedded_initial(y0: &[f64], x0: &[f64]) -> Vec<f64> {
    y0.iter().chain(x0).copied().collect()
}

impl EmbeddedField<'_> {
    /// Projection `π` onto the ODE coordinates.
    pub fn project<'z>(&self, z: &'z [f64]) -> &'z [f64] {
        &z[..self.y_dim]
    }

    /// Projection `σ` onto the copied path coordinates.
    pub fn copied<'z>(&self, z: &'z [f64]) -> &'z [f64] {
        &z[self.y_dim..]
    }
}

impl MatrixField for EmbeddedField<'_> {
    type Cache = HCache;

    fn state_dim(&self) -> usize {
        self.y_dim + self.d
    }

    fn matrix_len(&self) -> usize {
        (self.y_dim + self.d) * self.d
    }

    fn param_count(&self) -> usize {
        self.h.param_count()
    }

    fn matrix_cached(&self, z: &[f64]) -> Result<(Vec<f64>, HCache)> {
        if z.len() != self.state_dim() {
            return Err(Error::shape("embedded state has the wrong length"));
        }
        let d = self.d;
        let (y, x) = z.split_at(self.y_dim);
        let (hv, cache) = self.h.forward_cached(y, x)?;
        let mut m = vec![0.0; self.matrix_len()];
        for (i, v) in hv.into_iter().enumerate() {
            m[i * d + d - 1] = v;
        }
        for j in 0..d {
            m[(self.y_dim + j) * d + j] = 1.0;
        }
        Ok((m, cache))
    }

    fn matrix_vjp(&self, cache: &HCache, m_bar: &[f64], theta_bar: &mut [f64]) -> Result<Vec<f64>> {
        let d = self.d;
        let h_bar: Vec<f64> = (0..self.y_dim).map(|i| m_bar[i * d + d - 1]).collect();
        let (mut y_bar, x_bar) = self.h.vjp_into(cache, &h_bar, theta_bar)?;
        y_bar.extend(x_bar);
        Ok(y_bar)
    }
}

/// `y_{t0} = ζ(X_{t0})`, `dy/ds = h(y, X_s)`, logits `= ℓ(y_{tn})`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectOdeModel {
    pub zeta: Mlp,
    pub h: HNet,
    pub readout: Mlp,
}

impl DirectOdeModel {
    /// GRU-ODE variant.
    pub fn init_gru<R: Rng + ?Sized>(
        spec: &ModelSpec,
        input_dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = spec.hidden;
        let m = DirectOdeModel {
            zeta: linear_map(input_dim, w, rng)?,
            h: HNet::Gru(GruCell::init(input_dim, w, rng)),
            readout: linear_map(w, classes, rng)?,
        };
        m.validate()?;
        Ok(m)
    }

    /// MLP variant: `h` is a network with a final tanh.
    pub fn init_mlp<R: Rng + ?Sized>(
        spec: &ModelSpec,
        input_dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = spec.hidden;
        let net = Mlp::init(
            &spec.field_dims(w + input_dim, w),
            spec.field_activation,
            Activation::Tanh,
            rng,
        )?;
        let m = DirectOdeModel {
            zeta: linear_map(input_dim, w, rng)?,
            h: HNet::mlp(net, w)?,
            readout: linear_map(w, classes, rng)?,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn input_dim(&self) -> usize {
        self.zeta.in_dim()
    }

    pub fn classes(&self) -> usize {
        self.readout.out_dim()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let w = self.h.state_dim();
        check_linear(&self.zeta, self.h.input_dim(), w, "initial map")?;
        check_linear(&self.readout, w, self.classes(), "readout")
    }

    pub(crate) fn group_sizes(&self) -> Vec<(ParamRole, usize)> {
        vec![
            (ParamRole::Initial, self.zeta.param_count()),
            (ParamRole::Field, self.h.param_count()),
            (ParamRole::Readout, self.readout.param_count()),
        ]
    }

    pub(crate) fn params(&self) -> Vec<f64> {
        let mut p = self.zeta.params();
        p.extend(self.h.params());
        p.extend(self.readout.params());
        p
    }

    pub(crate) fn set_params(&mut self, src: &[f64]) -> Result<()> {
        let (a, rest) = src.split_at(self.zeta.param_count());
        let (b, c) = rest.split_at(self.h.param_count());
        self.zeta.set_params(a)?;
        self.h.set_params(b)?;
        self.readout.set_params(c)
    }

    pub fn terminal_state(&self, sample: &PreparedSample, step: f64) -> Result<Vec<f64>> {
        let (t0, t1) = sample.span();
        let field = DirectField::new(&self.h, &sample.path)?;
        let y0 = self.zeta.forward(&sample.path.evaluate(t0)?)?;
        Ok(rk4_solve(&field, &y0, t0, t1, step, RecordMode::Terminal)?.z_terminal)
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
        let [g_zeta, g_h, g_read] = &mut parts[..] else {
            unreachable!("three groups")
        };
        let x0 = sample.path.evaluate(sample.span().0)?;
        let (y0, zcache) = self.zeta.forward_cached(&x0)?;
        let field = DirectField::new(&self.h, &sample.path)?;
        let (value, logits, y0_bar) = terminal_value_and_grad(
            &field,
            &y0,
            sample.span(),
            step,
            mode,
            &self.readout,
            loss,
            g_h,
            g_read,
        )?;
        self.zeta.vjp_into(&zcache, &y0_bar, g_zeta)?;
        Ok(SampleGrad {
            loss: value,
            logits,
            grads,
        })
    }
}
