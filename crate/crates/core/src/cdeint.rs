//! Solving controlled differential equations as ODEs.
//!
//! A CDE `z_t = z_{t0} + ∫ f(z_s) dX_s` driven by a differentiable path is
//! the ODE `dz/ds = g(z, s) = f(z)·X'(s)`. This module integrates such
//! fields with the fixed-step fourth-order Runge–Kutta 3/8 rule and provides
//! two backward passes:
//!
//! * [`adjoint_backward`] re-integrates `z` backwards alongside the adjoint
//!   `a = dL/dz` and the parameter-gradient accumulator. Its working set does
//!   not depend on the number of steps.
//! * [`direct_backward`] differentiates the stored discrete recursion exactly;
//!   its memory grows linearly with the number of steps.
//!
//! Steps never straddle a breakpoint of the field (for a spline-driven field,
//! the knots), so each step integrates a single polynomial piece of the path.

use crate::error::{Error, Result};
use crate::nn::{Mlp, MlpCache, ParamGrads};
use crate::path::ControlPath;

/// Butcher tableau of the 3/8 rule.
const NODES: [f64; 4] = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
const WEIGHTS: [f64; 4] = [1.0 / 8.0, 3.0 / 8.0, 3.0 / 8.0, 1.0 / 8.0];
const COUPLING: [[f64; 3]; 4] = [
    [0.0, 0.0, 0.0],
    [1.0 / 3.0, 0.0, 0.0],
    [-1.0 / 3.0, 1.0, 0.0],
    [1.0, -1.0, 1.0],
];

/// A time-dependent vector field `dz/ds = g(z, s)` with parameters `θ`.
///
/// `window` is the solver step containing `s`; fields driven by piecewise
/// paths use it to pick the path piece at step endpoints.
pub trait VectorField {
    type Cache;

    fn state_dim(&self) -> usize;

    fn param_count(&self) -> usize;

    /// Times that solver steps must land on.
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }

    fn eval(&self, z: &[f64], s: f64, window: (f64, f64)) -> Result<Vec<f64>> {
        Ok(self.eval_cached(z, s, window)?.0)
    }

    fn eval_cached(&self, z: &[f64], s: f64, window: (f64, f64))
        -> Result<(Vec<f64>, Self::Cache)>;

    /// Accumulates `aᵀ·∂g/∂θ` into `theta_bar` and returns `aᵀ·∂g/∂z`.
    fn vjp(&self, cache: &Self::Cache, a: &[f64], theta_bar: &mut [f64]) -> Result<Vec<f64>>;

    /// `∂g/∂s` at `(z, s)`.
    fn time_derivative(&self, _z: &[f64], _s: f64, _window: (f64, f64)) -> Result<Vec<f64>> {
        Err(Error::Mode(
            "field does not provide a time derivative".into(),
        ))
    }
}

/// A network producing a `w × d` matrix (row-major) from a state in `ℝʷ`:
/// the `f` of a CDE `dz = f(z)·dX`.
pub trait MatrixField {
    type Cache;

    fn state_dim(&self) -> usize;

    /// Length of the flattened matrix, `w·d`.
    fn matrix_len(&self) -> usize;

    fn param_count(&self) -> usize;

    fn matrix(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.matrix_cached(z)?.0)
    }

    fn matrix_cached(&self, z: &[f64]) -> Result<(Vec<f64>, Self::Cache)>;

    /// Accumulates parameter gradients and returns the state cotangent for a
    /// cotangent `m_bar` on the flattened matrix.
    fn matrix_vjp(
        &self,
        cache: &Self::Cache,
        m_bar: &[f64],
        theta_bar: &mut [f64],
    ) -> Result<Vec<f64>>;
}

impl MatrixField for Mlp {
    type Cache = MlpCache;

    fn state_dim(&self) -> usize {
        self.in_dim()
    }

    fn matrix_len(&self) -> usize {
        self.out_dim()
    }

    fn param_count(&self) -> usize {
        Mlp::param_count(self)
    }

    fn matrix(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.forward(z)
    }

    fn matrix_cached(&self, z: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        self.forward_cached(z)
    }

    fn matrix_vjp(
        &self,
        cache: &MlpCache,
        m_bar: &[f64],
        theta_bar: &mut [f64],
    ) -> Result<Vec<f64>> {
        self.vjp_into(cache, m_bar, theta_bar)
    }
}

/// `g(z, s) = f(z) · X'(s)` with `f(z)` a `w × d` matrix and `d` the path
/// dimension.
#[derive(Debug)]
pub struct OdeField<'a, M: ?Sized, P: ?Sized> {
    f: &'a M,
    path: &'a P,
    hidden: usize,
    channels: usize,
}

impl<M: ?Sized, P: ?Sized> Clone for OdeField<'_, M, P> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<M: ?Sized, P: ?Sized> Copy for OdeField<'_, M, P> {}

pub fn make_field<'a, M, P>(f: &'a M, path: &'a P) -> Result<OdeField<'a, M, P>>
where
    M: MatrixField + ?Sized,
    P: ControlPath + ?Sized,
{
    let hidden = f.state_dim();
    let channels = path.dim();
    if f.matrix_len() != hidden * channels {
        return Err(Error::shape(format!(
            "vector field maps {hidden} -> {} but a {hidden}x{channels} matrix is needed \
             for a {channels}-channel path",
            f.matrix_len(),
        )));
    }
    Ok(OdeField {
        f,
        path,
        hidden,
        channels,
    })
}

impl<M: MatrixField + ?Sized, P: ControlPath + ?Sized> OdeField<'_, M, P> {
    pub fn path(&self) -> &P {
        self.path
    }

    fn contract(&self, matrix: &[f64], v: &[f64]) -> Vec<f64> {
        matrix
            .chunks_exact(self.channels)
            .map(|row| crate::nn::dot(row, v))
            .collect()
    }
}

pub struct OdeFieldCache<C> {
    inner: C,
    dx: Vec<f64>,
}

impl<M: MatrixField + ?Sized, P: ControlPath + ?Sized> VectorField for OdeField<'_, M, P> {
    type Cache = OdeFieldCache<M::Cache>;

    fn state_dim(&self) -> usize {
        self.hidden
    }

    fn param_count(&self) -> usize {
        self.f.param_count()
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.path.breakpoints()
    }

    fn eval(&self, z: &[f64], s: f64, window: (f64, f64)) -> Result<Vec<f64>> {
        let dx = self.path.derivative_in(s, window)?;
        Ok(self.contract(&self.f.matrix(z)?, &dx))
    }

    fn eval_cached(
        &self,
        z: &[f64],
        s: f64,
        window: (f64, f64),
    ) -> Result<(Vec<f64>, Self::Cache)> {
        let dx = self.path.derivative_in(s, window)?;
        let (m, inner) = self.f.matrix_cached(z)?;
        Ok((self.contract(&m, &dx), OdeFieldCache { inner, dx }))
    }

    fn vjp(&self, cache: &Self::Cache, a: &[f64], theta_bar: &mut [f64]) -> Result<Vec<f64>> {
        let m_bar: Vec<f64> = a
            .iter()
            .flat_map(|&ai| cache.dx.iter().map(move |&dj| ai * dj))
            .collect();
        self.f.matrix_vjp(&cache.inner, &m_bar, theta_bar)
    }

    fn time_derivative(&self, z: &[f64], s: f64, window: (f64, f64)) -> Result<Vec<f64>> {
        let ddx = self.path.second_derivative_in(s, window)?;
        Ok(self.contract(&self.f.matrix(z)?, &ddx))
    }
}

/// An autonomous field `dz/ds = f(z)` given by a square MLP.
#[derive(Clone, Copy, Debug)]
pub struct AutonomousField<'a> {
    f: &'a Mlp,
}

impl<'a> AutonomousField<'a> {
    pub fn new(f: &'a Mlp) -> Result<Self> {
        if f.in_dim() != f.out_dim() {
            return Err(Error::shape(format!(
                "autonomous field must map R^n to R^n, got {} -> {}",
                f.in_dim(),
                f.out_dim()
            )));
        }
        Ok(AutonomousField { f })
    }
}

impl VectorField for AutonomousField<'_> {
    type Cache = MlpCache;

    fn state_dim(&self) -> usize {
        self.f.in_dim()
    }

    fn param_count(&self) -> usize {
        self.f.param_count()
    }

    fn eval(&self, z: &[f64], _s: f64, _window: (f64, f64)) -> Result<Vec<f64>> {
        self.f.forward(z)
    }

    fn eval_cached(&self, z: &[f64], _s: f64, _window: (f64, f64)) -> Result<(Vec<f64>, MlpCache)> {
        self.f.forward_cached(z)
    }

    fn vjp(&self, cache: &MlpCache, a: &[f64], theta_bar: &mut [f64]) -> Result<Vec<f64>> {
        self.f.vjp_into(cache, a, theta_bar)
    }

    fn time_derivative(&self, z: &[f64], _s: f64, _window: (f64, f64)) -> Result<Vec<f64>> {
        Ok(vec![0.0; z.len()])
    }
}

/// What a forward solve keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecordMode {
    /// Terminal state only.
    Terminal,
    /// The state at every grid time.
    Trajectory,
    /// Everything [`direct_backward`] needs: every step's stage caches.
    Direct,
}

pub struct SolveRecord<C> {
    pub z_terminal: Vec<f64>,
    /// Grid times `t_start = s_0 < … < s_steps = t_end`.
    pub times: Vec<f64>,
    /// States at `times` (trajectory and direct modes).
    pub states: Vec<Vec<f64>>,
    /// Per-step stage caches (direct mode).
    pub stages: Vec<[C; 4]>,
    pub step_size: f64,
    pub steps: usize,
    /// State-sized records held at the end of the solve.
    pub retained_state_count: usize,
    pub mode: RecordMode,
}

/// Step nodes from `t_start` to `t_end`: advance by `step`, but never past
/// the next breakpoint, which becomes a node itself.
pub fn time_grid(t_start: f64, t_end: f64, step: f64, breakpoints: &[f64]) -> Result<Vec<f64>> {
    if !(t_start < t_end) || !t_start.is_finite() || !t_end.is_finite() {
        return Err(Error::Config(format!(
            "solve interval [{t_start}, {t_end}] is empty or non-finite"
        )));
    }
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Config(format!("step must be positive, got {step}")));
    }
    let mut stops: Vec<f64> = breakpoints
        .iter()
        .copied()
        .filter(|&b| b > t_start && b < t_end)
        .collect();
    stops.push(t_end);
    stops.sort_by(f64::total_cmp);
    stops.dedup();
    // Slivers below this are merged into the preceding step.
    let slack = 1e-9 * step;
    let mut grid = vec![t_start];
    let mut cur = t_start;
    for stop in stops {
        while cur < stop {
            let next = cur + step;
            cur = if next >= stop - slack { stop } else { next };
            grid.push(cur);
        }
    }
    Ok(grid)
}

fn axpy(y: &[f64], h: f64, ks: &[&[f64]], coeffs: &[f64]) -> Vec<f64> {
    let mut out = y.to_vec();
    for (k, &c) in ks.iter().zip(coeffs) {
        if c != 0.0 {
            for (o, v) in out.iter_mut().zip(k.iter()) {
                *o += h * c * v;
            }
        }
    }
    out
}

fn check_finite(z: &[f64], s: f64) -> Result<()> {
    if z.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericalBlowup { s })
    }
}

/// Stage time `i` of the step from `s` to `s_end`; the last stage lands
/// exactly on `s_end`.
#[inline]
fn stage_time(i: usize, s: f64, s_end: f64) -> f64 {
    if i == 3 {
        s_end
    } else {
        s + NODES[i] * (s_end - s)
    }
}

/// One 3/8-rule step from `s` to `s_end` (which may lie before `s`).
/// `rhs(y, s)` returns the derivative.
fn rk38_step(
    y: &[f64],
    s: f64,
    s_end: f64,
    mut rhs: impl FnMut(&[f64], f64) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    let h = s_end - s;
    let mut ks: Vec<Vec<f64>> = Vec::with_capacity(4);
    for i in 0..4 {
        let input = {
            let refs: Vec<&[f64]> = ks.iter().map(Vec::as_slice).collect();
            axpy(y, h, &refs, &COUPLING[i][..i])
        };
        ks.push(rhs(&input, stage_time(i, s, s_end))?);
    }
    let refs: Vec<&[f64]> = ks.iter().map(Vec::as_slice).collect();
    Ok(axpy(y, h, &refs, &WEIGHTS))
}

/// Integrates `field` from `z0` at `t_start` to `t_end`.
pub fn rk4_solve<F: VectorField>(
    field: &F,
    z0: &[f64],
    t_start: f64,
    t_end: f64,
    step: f64,
    mode: RecordMode,
) -> Result<SolveRecord<F::Cache>> {
    if z0.len() != field.state_dim() {
        return Err(Error::shape(format!(
            "initial state has length {}, field expects {}",
            z0.len(),
            field.state_dim()
        )));
    }
    let grid = time_grid(t_start, t_end, step, &field.breakpoints())?;
    let steps = grid.len() - 1;
    let mut z = z0.to_vec();
    let mut states = Vec::new();
    let mut stages = Vec::new();
    if mode != RecordMode::Terminal {
        states.push(z.clone());
    }
    for w in grid.windows(2) {
        let (s, s_next) = (w[0], w[1]);
        let h = s_next - s;
        let window = (s, s_next);
        z = if mode == RecordMode::Direct {
            let mut ks: Vec<Vec<f64>> = Vec::with_capacity(4);
            let mut caches = Vec::with_capacity(4);
            for i in 0..4 {
                let input = {
                    let refs: Vec<&[f64]> = ks.iter().map(Vec::as_slice).collect();
                    axpy(&z, h, &refs, &COUPLING[i][..i])
                };
                let (k, cache) = field.eval_cached(&input, stage_time(i, s, s_next), window)?;
                ks.push(k);
                caches.push(cache);
            }
            let refs: Vec<&[f64]> = ks.iter().map(Vec::as_slice).collect();
            let next = axpy(&z, h, &refs, &WEIGHTS);
            let caches: [F::Cache; 4] = caches
                .try_into()
                .unwrap_or_else(|_| unreachable!("four stages"));
            stages.push(caches);
            next
        } else {
            rk38_step(&z, s, s_next, |y, t| field.eval(y, t, window))?
        };
        check_finite(&z, s_next)?;
        if mode != RecordMode::Terminal {
            states.push(z.clone());
        }
    }
    // Working set of a terminal solve: current state plus four stage slopes.
    let retained_state_count = match mode {
        RecordMode::Terminal => 5,
        RecordMode::Trajectory => states.len() + 4,
        RecordMode::Direct => states.len() + 4 * stages.len(),
    };
    Ok(SolveRecord {
        z_terminal: z,
        times: grid,
        states,
        stages,
        step_size: step,
        steps,
        retained_state_count,
        mode,
    })
}

/// Gradients produced by a backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Backward {
    pub z0_bar: Vec<f64>,
    pub theta_bar: ParamGrads,
    /// `dL/dt_start` with the initial state held fixed, when requested.
    pub t0_bar: Option<f64>,
    /// State-sized records held at peak during the backward pass.
    pub retained_state_count: usize,
}

/// Adjoint backward pass.
///
/// Integrates the augmented state `(z, a, θ̄[, q])` from `t_end` to
/// `t_start` over the forward grid reversed, with
/// `dz/ds = g`, `da/ds = −aᵀ∂g/∂z`, `dθ̄/ds = −aᵀ∂g/∂θ`. When `want_t0_grad`
/// is set, `q` starts at `−a_T·g(z_T, t_end)` and follows `dq/ds = −a·∂g/∂s`,
/// which for a CDE is `−a·(f(z)·X''(s))`; its final value is `dL/dt_start`.
pub fn adjoint_backward<F: VectorField>(
    field: &F,
    z_terminal: &[f64],
    loss_grad: &[f64],
    t_start: f64,
    t_end: f64,
    step: f64,
    want_t0_grad: bool,
) -> Result<Backward> {
    let w = field.state_dim();
    let p = field.param_count();
    if z_terminal.len() != w || loss_grad.len() != w {
        return Err(Error::shape(format!(
            "adjoint expects states of length {w}, got {} and {}",
            z_terminal.len(),
            loss_grad.len()
        )));
    }
    let grid = time_grid(t_start, t_end, step, &field.breakpoints())?;
    let q_len = usize::from(want_t0_grad);
    let mut aug = Vec::with_capacity(2 * w + p + q_len);
    aug.extend_from_slice(z_terminal);
    aug.extend_from_slice(loss_grad);
    aug.extend(std::iter::repeat_n(0.0, p));
    if want_t0_grad {
        let last = (grid[grid.len() - 2], t_end);
        let g = field.eval(z_terminal, t_end, last)?;
        aug.push(-crate::nn::dot(loss_grad, &g));
    }

    for w_ in grid.windows(2).rev() {
        let (s_lo, s_hi) = (w_[0], w_[1]);
        let window = (s_lo, s_hi);
        let rhs = |y: &[f64], s: f64| -> Result<Vec<f64>> {
            let (z, rest) = y.split_at(w);
            let a = &rest[..w];
            let (g, cache) = field.eval_cached(z, s, window)?;
            let mut out = vec![0.0; y.len()];
            out[..w].copy_from_slice(&g);
            let (head, theta) = out.split_at_mut(2 * w);
            let theta = &mut theta[..p];
            let z_bar = field.vjp(&cache, a, theta)?;
            for (o, v) in head[w..].iter_mut().zip(&z_bar) {
                *o = -v;
            }
            theta.iter_mut().for_each(|v| *v = -*v);
            if want_t0_grad {
                let dg_ds = field.time_derivative(z, s, window)?;
                out[2 * w + p] = -crate::nn::dot(a, &dg_ds);
            }
            Ok(out)
        };
        aug = rk38_step(&aug, s_hi, s_lo, rhs)?;
        check_finite(&aug, s_lo)?;
    }
    Ok(Backward {
        z0_bar: aug[w..2 * w].to_vec(),
        theta_bar: ParamGrads(aug[2 * w..2 * w + p].to_vec()),
        t0_bar: want_t0_grad.then(|| aug[2 * w + p]),
        // Augmented state plus four stage slopes, whatever the step count.
        retained_state_count: 5,
    })
}

/// Exact reverse-mode derivative of the discrete solve recorded in `record`.
pub fn direct_backward<F: VectorField>(
    field: &F,
    record: &SolveRecord<F::Cache>,
    loss_grad: &[f64],
) -> Result<Backward> {
    if record.mode != RecordMode::Direct {
        return Err(Error::Mode(format!(
            "direct backward needs a direct-mode record, got {:?}",
            record.mode
        )));
    }
    if loss_grad.len() != field.state_dim() {
        return Err(Error::shape("loss gradient does not match state dimension"));
    }
    let mut theta = ParamGrads::zeros(field.param_count());
    let mut y_bar = loss_grad.to_vec();
    for (n, caches) in record.stages.iter().enumerate().rev() {
        let h = record.times[n + 1] - record.times[n];
        let mut k_bar: Vec<Vec<f64>> = WEIGHTS
            .iter()
            .map(|&b| y_bar.iter().map(|v| h * b * v).collect())
            .collect();
        let mut prev = y_bar.clone();
        for i in (0..4).rev() {
            let stage_bar = field.vjp(&caches[i], &k_bar[i], &mut theta.0)?;
            for (p, v) in prev.iter_mut().zip(&stage_bar) {
                *p += v;
            }
            for j in 0..i {
                let c = COUPLING[i][j];
                if c != 0.0 {
                    for (kb, v) in k_bar[j].iter_mut().zip(&stage_bar) {
                        *kb += h * c * v;
                    }
                }
            }
        }
        y_bar = prev;
    }
    Ok(Backward {
        z0_bar: y_bar,
        theta_bar: theta,
        t0_bar: None,
        retained_state_count: record.retained_state_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Linear};
    use crate::path::PiecewiseLinear;
    use crate::seeded_rng;
    use crate::spline::fit_natural_cubic;
    use crate::timeseries::TimeSeries;
    use rand::Rng;

    /// Time-only path on [a, b].
    fn clock(a: f64, b: f64) -> PiecewiseLinear {
        PiecewiseLinear::new(vec![a, b], vec![vec![a], vec![b]]).unwrap()
    }

    /// Scalar linear field f(z) = θ·z (single linear layer, no bias).
    fn linear_scalar(theta: f64) -> Mlp {
        let mut l = Linear::zeros(1, 1);
        l.weight[0] = theta;
        Mlp::from_layers(vec![l], Activation::Relu, Activation::Identity).unwrap()
    }

    fn random_series(seed: u64, n: usize, channels: usize) -> TimeSeries {
        let mut rng = seeded_rng(seed);
        let mut t = 0.0;
        let times: Vec<f64> = (0..n)
            .map(|_| {
                let now = t;
                t += rng.random_range(0.2..0.6);
                now
            })
            .collect();
        let rows = (0..n)
            .map(|_| (0..channels).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        TimeSeries::from_dense(times, rows, None).unwrap()
    }

    fn random_field(seed: u64, w: usize, d: usize) -> Mlp {
        Mlp::init(
            &[w, 6, w * d],
            Activation::Tanh,
            Activation::Tanh,
            &mut seeded_rng(seed),
        )
        .unwrap()
    }

    #[test]
    fn grid_lands_on_breakpoints_and_end() {
        let g = time_grid(0.0, 1.0, 0.3, &[0.5]).unwrap();
        assert_eq!(g, vec![0.0, 0.3, 0.5, 0.8, 1.0]);
        let g = time_grid(0.0, 1.0, 0.25, &[]).unwrap();
        assert_eq!(g, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!(time_grid(1.0, 1.0, 0.1, &[]).is_err());
        assert!(time_grid(0.0, 1.0, 0.0, &[]).is_err());
    }

    #[test]
    fn make_field_checks_shape() {
        let path = clock(0.0, 1.0);
        let bad = Mlp::init(
            &[2, 3],
            Activation::Relu,
            Activation::Identity,
            &mut seeded_rng(1),
        )
        .unwrap();
        assert!(matches!(make_field(&bad, &path), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_field_keeps_state() {
        let path = clock(0.0, 2.0);
        let f = Mlp::from_layers(
            vec![Linear::zeros(2, 2)],
            Activation::Relu,
            Activation::Identity,
        )
        .unwrap();
        let field = make_field(&f, &path).unwrap();
        assert_eq!(
            field.eval(&[1.0, 2.0], 0.5, (0.0, 1.0)).unwrap(),
            vec![0.0, 0.0]
        );
        let rec = rk4_solve(&field, &[1.0, -3.0], 0.0, 2.0, 0.1, RecordMode::Terminal).unwrap();
        assert_eq!(rec.z_terminal, vec![1.0, -3.0]);
        let back =
            adjoint_backward(&field, &rec.z_terminal, &[0.5, 2.0], 0.0, 2.0, 0.1, false).unwrap();
        assert_eq!(back.z0_bar, vec![0.5, 2.0]);
        let rec = rk4_solve(&field, &[1.0, -3.0], 0.0, 2.0, 0.1, RecordMode::Direct).unwrap();
        let direct = direct_backward(&field, &rec, &[0.5, 2.0]).unwrap();
        assert_eq!(direct.z0_bar, vec![0.5, 2.0]);
        // With a constant state the parameter gradient is a·zᵀ·∫X', exact for both.
        assert!(crate::oracle::max_relative_error(&back.theta_bar.0, &direct.theta_bar.0) < 1e-12);
    }

    #[test]
    fn constant_field_on_clock_is_time_driven() {
        let mut l = Linear::zeros(1, 1);
        l.bias[0] = 1.0;
        let f = Mlp::from_layers(vec![l], Activation::Relu, Activation::Identity).unwrap();
        let path = clock(1.0, 3.0);
        let field = make_field(&f, &path).unwrap();
        let rec = rk4_solve(&field, &[0.5], 1.0, 3.0, 0.3, RecordMode::Terminal).unwrap();
        assert!((rec.z_terminal[0] - 2.5).abs() < 1e-14);
    }

    #[test]
    fn field_matches_explicit_loop() {
        let series = random_series(3, 5, 2);
        let path = fit_natural_cubic(&series).unwrap();
        let f = random_field(4, 3, 3);
        let field = make_field(&f, &path).unwrap();
        let z = [0.3, -0.2, 0.9];
        let s = 0.37;
        let m = f.forward(&z).unwrap();
        let dx = path.derivative(s).unwrap();
        let mut want = vec![0.0; 3];
        for i in 0..3 {
            for j in 0..3 {
                want[i] += m[i * 3 + j] * dx[j];
            }
        }
        let got = field.eval(&z, s, (s, s)).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    #[test]
    fn exponential_growth() {
        let f = linear_scalar(1.0);
        let path = clock(0.0, 1.0);
        let field = make_field(&f, &path).unwrap();
        let rec = rk4_solve(&field, &[1.0], 0.0, 1.0, 0.01, RecordMode::Terminal).unwrap();
        assert!((rec.z_terminal[0] - std::f64::consts::E).abs() < 1e-8);
        assert_eq!(rec.steps, 100);
    }

    #[test]
    fn linear_sensitivity_closed_form() {
        // z' = θz, z(0) = 1 → z(1) = e^θ; dz(1)/dθ = e^θ at θ = 1 (times z0 = 1).
        let f = linear_scalar(1.0);
        let path = clock(0.0, 1.0);
        let field = make_field(&f, &path).unwrap();
        let rec = rk4_solve(&field, &[1.0], 0.0, 1.0, 0.01, RecordMode::Direct).unwrap();
        let adj = adjoint_backward(&field, &rec.z_terminal, &[1.0], 0.0, 1.0, 0.01, false).unwrap();
        let e = std::f64::consts::E;
        assert!((adj.theta_bar.0[0] - e).abs() < 1e-5);
        assert!((adj.z0_bar[0] - e).abs() < 1e-5);
        let dir = direct_backward(&field, &rec, &[1.0]).unwrap();
        assert!((dir.theta_bar.0[0] - e).abs() < 1e-5);
    }

    #[test]
    fn direct_backward_requires_direct_record() {
        let f = linear_scalar(1.0);
        let path = clock(0.0, 1.0);
        let field = make_field(&f, &path).unwrap();
        let rec = rk4_solve(&field, &[1.0], 0.0, 1.0, 0.1, RecordMode::Trajectory).unwrap();
        assert!(matches!(
            direct_backward(&field, &rec, &[1.0]),
            Err(Error::Mode(_))
        ));
    }

    #[test]
    fn blowup_is_reported() {
        let f = linear_scalar(800.0);
        let path = clock(0.0, 50.0);
        let field = make_field(&f, &path).unwrap();
        let err = rk4_solve(&field, &[1.0], 0.0, 50.0, 0.5, RecordMode::Terminal);
        assert!(matches!(err, Err(Error::NumericalBlowup { .. })));
    }

    fn loss_of(z: &[f64], weights: &[f64]) -> f64 {
        crate::nn::dot(z, weights)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let series = random_series(10, 5, 2);
        let path = fit_natural_cubic(&series).unwrap();
        let (t0, t1) = (series.start(), series.end());
        let f = random_field(11, 3, 3);
        let z0 = [0.4, -0.3, 0.2];
        let lw = [1.0, -0.5, 0.7];
        let step = series.min_gap();
        let solve = |f: &Mlp, z0: &[f64]| {
            let field = make_field(f, &path).unwrap();
            rk4_solve(&field, z0, t0, t1, step, RecordMode::Terminal)
                .unwrap()
                .z_terminal
        };
        let field = make_field(&f, &path).unwrap();
        let rec = rk4_solve(&field, &z0, t0, t1, step, RecordMode::Direct).unwrap();
        let direct = direct_backward(&field, &rec, &lw).unwrap();
        let h = 1e-6;
        let p = f.params();
        // Finite differences carry ~1e-10 absolute noise, so errors are
        // measured on the scale of the whole gradient.
        let floor = direct.theta_bar.max_abs();
        for k in 0..p.len() {
            let fd = crate::oracle::central_difference(
                |q| {
                    let mut g = f.clone();
                    g.set_params(q).unwrap();
                    loss_of(&solve(&g, &z0), &lw)
                },
                &p,
                k,
                h,
            );
            assert!(
                crate::oracle::relative_error(direct.theta_bar.0[k], fd, floor) < 1e-7,
                "param {k}: {} vs {fd}",
                direct.theta_bar.0[k]
            );
        }
        for i in 0..3 {
            let fd = crate::oracle::central_difference(|z| loss_of(&solve(&f, z), &lw), &z0, i, h);
            assert!(crate::oracle::relative_error(direct.z0_bar[i], fd, 1e-3) < 1e-7);
        }
        // The adjoint approximates the same gradient, converging at fourth order.
        let gap_at = |h: f64| {
            let rec = rk4_solve(&field, &z0, t0, t1, h, RecordMode::Direct).unwrap();
            let direct = direct_backward(&field, &rec, &lw).unwrap();
            let adj = adjoint_backward(&field, &rec.z_terminal, &lw, t0, t1, h, false).unwrap();
            let mut all = adj.theta_bar.0.clone();
            all.extend(&adj.z0_bar);
            let mut want = direct.theta_bar.0.clone();
            want.extend(&direct.z0_bar);
            crate::oracle::max_relative_error(&all, &want)
        };
        let gaps: Vec<f64> = [1.0, 2.0, 4.0, 8.0]
            .iter()
            .map(|k| gap_at(step / k))
            .collect();
        for pair in gaps.windows(2) {
            assert!(pair[0] / pair[1] > 10.0, "gaps {gaps:?}");
        }
        assert!(gaps[3] < 1e-5, "gaps {gaps:?}");
    }

    #[test]
    fn t0_gradient_matches_finite_differences() {
        let series = random_series(20, 6, 2);
        let path = fit_natural_cubic(&series).unwrap();
        let f = random_field(21, 2, 3);
        let z0 = [0.5, -0.4];
        let lw = [0.8, 1.1];
        let t1 = series.end();
        let start = 0.5 * (series.times()[1] + series.times()[2]);
        let step = 0.005;
        let field = make_field(&f, &path).unwrap();
        let solve = |t0: f64| {
            loss_of(
                &rk4_solve(&field, &z0, t0, t1, step, RecordMode::Terminal)
                    .unwrap()
                    .z_terminal,
                &lw,
            )
        };
        let rec = rk4_solve(&field, &z0, start, t1, step, RecordMode::Terminal).unwrap();
        let adj = adjoint_backward(&field, &rec.z_terminal, &lw, start, t1, step, true).unwrap();
        let h = 1e-5;
        let fd = (solve(start + h) - solve(start - h)) / (2.0 * h);
        let got = adj.t0_bar.unwrap();
        assert!(
            crate::oracle::relative_error(got, fd, 1e-3) < 1e-4,
            "{got} vs {fd}"
        );
    }

    #[test]
    fn rk4_is_fourth_order() {
        // Smooth nonlinear scalar field z' = -z·tanh(z)-ish via a tanh MLP on a clock.
        let mut f = random_field(5, 1, 1);
        let p: Vec<f64> = f.params().iter().map(|x| 3.0 * x).collect();
        f.set_params(&p).unwrap();
        let path = clock(0.0, 2.0);
        let field = make_field(&f, &path).unwrap();
        let solve = |h: f64| {
            rk4_solve(&field, &[0.7], 0.0, 2.0, h, RecordMode::Terminal)
                .unwrap()
                .z_terminal[0]
        };
        let steps = [0.8, 0.4, 0.2, 0.1];
        let reference = solve(0.1 / 16.0);
        let errs: Vec<f64> = steps
            .iter()
            .map(|&h| (solve(h) - reference).abs())
            .collect();
        let slope = log_log_slope(&steps, &errs);
        assert!((slope - 4.0).abs() < 0.3, "slope {slope}, errs {errs:?}");
    }

    fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
        let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
        let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
        let n = lx.len() as f64;
        let mx = lx.iter().sum::<f64>() / n;
        let my = ly.iter().sum::<f64>() / n;
        let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
        let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
        cov / var
    }

    #[test]
    fn memory_counts() {
        let f = random_field(6, 2, 2);
        let path = PiecewiseLinear::uniform(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let field = make_field(&f, &path).unwrap();
        let mut direct = Vec::new();
        let mut adjoint = Vec::new();
        for steps in [10usize, 100, 1000] {
            let h = 1.0 / steps as f64;
            let rec = rk4_solve(&field, &[0.1, 0.2], 0.0, 1.0, h, RecordMode::Direct).unwrap();
            assert_eq!(rec.steps, steps);
            direct.push(
                direct_backward(&field, &rec, &[1.0, 1.0])
                    .unwrap()
                    .retained_state_count,
            );
            let fwd = rk4_solve(&field, &[0.1, 0.2], 0.0, 1.0, h, RecordMode::Terminal).unwrap();
            adjoint.push(
                adjoint_backward(&field, &fwd.z_terminal, &[1.0, 1.0], 0.0, 1.0, h, false)
                    .unwrap()
                    .retained_state_count,
            );
        }
        assert!(adjoint.windows(2).all(|w| w[0] == w[1]));
        let ratio = direct[2] as f64 / direct[0] as f64;
        assert!((ratio / 100.0 - 1.0).abs() < 0.1);
    }
}
