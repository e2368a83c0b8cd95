//! Continuous driving paths.
//!
//! Solvers step across a path in windows that never straddle a breakpoint.
//! The `*_in` accessors take the current window so that a time exactly on a
//! breakpoint is evaluated with the piece the window belongs to; this matters
//! for paths whose derivative jumps at breakpoints.

use crate::error::{Error, Result};

pub trait ControlPath {
    /// Number of output channels.
    fn dim(&self) -> usize;

    /// Closed interval on which the path is defined.
    fn domain(&self) -> (f64, f64);

    /// Sorted times (including both domain ends) where some channel changes piece.
    fn breakpoints(&self) -> Vec<f64>;

    fn evaluate_in(&self, t: f64, window: (f64, f64)) -> Result<Vec<f64>>;
    fn derivative_in(&self, t: f64, window: (f64, f64)) -> Result<Vec<f64>>;
    fn second_derivative_in(&self, t: f64, window: (f64, f64)) -> Result<Vec<f64>>;

    fn evaluate(&self, t: f64) -> Result<Vec<f64>> {
        self.evaluate_in(t, (t, t))
    }

    fn derivative(&self, t: f64) -> Result<Vec<f64>> {
        self.derivative_in(t, (t, t))
    }

    fn second_derivative(&self, t: f64) -> Result<Vec<f64>> {
        self.second_derivative_in(t, (t, t))
    }
}

pub(crate) fn check_domain(t: f64, (start, end): (f64, f64)) -> Result<()> {
    if t >= start && t <= end {
        Ok(())
    } else {
        Err(Error::Domain { t, start, end })
    }
}

/// Index `i` of the piece `[knots[i], knots[i+1]]` used at `t`.
///
/// A time on an interior knot resolves to the piece on its right; the last
/// knot resolves to the final piece. When the window has positive width its
/// midpoint decides instead. Times outside the knot range map to the nearest
/// end piece.
pub(crate) fn locate(knots: &[f64], t: f64, window: (f64, f64)) -> usize {
    let pieces = knots.len() - 1;
    let probe = if window.1 > window.0 {
        0.5 * (window.0 + window.1)
    } else {
        t
    };
    // Count of knots <= probe, minus one.
    let idx = knots.partition_point(|&k| k <= probe);
    idx.saturating_sub(1).min(pieces - 1)
}

/// A polyline through `points[i]` at `times[i]`, linear on each piece.
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseLinear {
    times: Vec<f64>,
    points: Vec<Vec<f64>>,
}

impl PiecewiseLinear {
    pub fn new(times: Vec<f64>, points: Vec<Vec<f64>>) -> Result<Self> {
        if times.len() < 2 || times.len() != points.len() {
            return Err(Error::MalformedSeries(format!(
                "polyline needs >= 2 knots with one point each (got {} times, {} points)",
                times.len(),
                points.len()
            )));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::MalformedSeries(
                "polyline times must be strictly increasing".into(),
            ));
        }
        let dim = points[0].len();
        if dim == 0 || points.iter().any(|p| p.len() != dim) {
            return Err(Error::shape(
                "polyline points must share a nonzero dimension",
            ));
        }
        Ok(PiecewiseLinear { times, points })
    }

    /// Knots at `0, 1, …, n−1`.
    pub fn uniform(points: Vec<Vec<f64>>) -> Result<Self> {
        let times = (0..points.len()).map(|i| i as f64).collect();
        Self::new(times, points)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    /// Same points, knots moved to `retime(t_i)`. `retime` must be strictly increasing.
    pub fn retimed(&self, retime: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(
            self.times.iter().map(|&t| retime(t)).collect(),
            self.points.clone(),
        )
    }

    /// Appends the identity time channel as the last coordinate.
    pub fn with_time_channel(&self) -> Self {
        let points = self
            .times
            .iter()
            .zip(&self.points)
            .map(|(&t, p)| {
                let mut p = p.clone();
                p.push(t);
                p
            })
            .collect();
        PiecewiseLinear {
            times: self.times.clone(),
            points,
        }
    }

    /// Same shape scaled by `factor` in every channel.
    pub fn scaled(&self, factor: f64) -> Self {
        PiecewiseLinear {
            times: self.times.clone(),
            points: self
                .points
                .iter()
                .map(|p| p.iter().map(|x| x * factor).collect())
                .collect(),
        }
    }

    fn slope(&self, i: usize) -> impl Iterator<Item = f64> + '_ {
        let dt = self.times[i + 1] - self.times[i];
        self.points[i]
            .iter()
            .zip(&self.points[i + 1])
            .map(move |(a, b)| (b - a) / dt)
    }
}

impl ControlPath for PiecewiseLinear {
    fn dim(&self) -> usize {
        self.points[0].len()
    }

    fn domain(&self) -> (f64, f64) {
        (self.times[0], self.times[self.times.len() - 1])
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.times.clone()
    }

    fn evaluate_in(&self, t: f64, window: (f64, f64)) -> Result<Vec<f64>> {
        check_domain(t, self.domain())?;
        let i = locate(&self.times, t, window);
        let dt = t - self.times[i];
        Ok(self.points[i]
            .iter()
            .zip(self.slope(i))
            .map(|(a, m)| a + m * dt)
            .collect())
    }

    fn derivative_in(&self, t: f64, window: (f64, f64)) -> Result<Vec<f64>> {
        check_domain(t, self.domain())?;
        Ok(self.slope(locate(&self.times, t, window)).collect())
    }

    fn second_derivative_in(&self, t: f64, _window: (f64, f64)) -> Result<Vec<f64>> {
        check_domain(t, self.domain())?;
        Ok(vec![0.0; self.dim()])
    }
}

/// The path `X∘ψ`, where `ψ(s) = s + α·L·sin(2π(s − a)/L)/(2π)` is a smooth
/// increasing self-map of the domain `[a, a + L]` (requires `|α| < 1`).
///
/// The image is the same curve traversed at a different speed.
#[derive(Clone, Debug)]
pub struct SmoothRetime<'a, P: ?Sized> {
    path: &'a P,
    alpha: f64,
    breakpoints: Vec<f64>,
}

impl<'a, P: ControlPath + ?Sized> SmoothRetime<'a, P> {
    pub fn new(path: &'a P, alpha: f64) -> Result<Self> {
        if !(alpha.abs() < 1.0) {
            return Err(Error::Config(format!(
                "retiming strength {alpha} must lie in (-1, 1)"
            )));
        }
        let mut r = SmoothRetime {
            path,
            alpha,
            breakpoints: Vec::new(),
        };
        let (a, b) = path.domain();
        r.breakpoints = path
            .breakpoints()
            .into_iter()
            .map(|k| if k <= a || k >= b { k } else { r.inverse(k) })
            .collect();
        Ok(r)
    }

    fn phase(&self, s: f64) -> (f64, f64) {
        let (a, b) = self.path.domain();
        let len = b - a;
        (std::f64::consts::TAU * (s - a) / len, len)
    }

    /// `(ψ, ψ', ψ'')` at `s`.
    fn warp(&self, s: f64) -> (f64, f64, f64) {
        let (a, b) = self.path.domain();
        let (theta, len) = self.phase(s);
        let psi = s + self.alpha * len * theta.sin() / std::f64::consts::TAU;
        let d1 = 1.0 + self.alpha * theta.cos();
        let d2 = -self.alpha * theta.sin() * std::f64::consts::TAU / len;
        (psi.clamp(a, b), d1, d2)
    }

    /// `ψ⁻¹(t)` by bisection.
    fn inverse(&self, t: f64) -> f64 {
        let (mut lo, mut hi) = self.path.domain();
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.warp(mid).0 < t {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn inner_window(&self, window: (f64, f64)) -> (f64, f64) {
        (self.warp(window.0).0, self.warp(window.1).0)
    }
}

impl<P: ControlPath + ?Sized> ControlPath for SmoothRetime<'_, P> {
    fn dim(&self) -> usize {
        self.path.dim()
    }

    fn domain(&self) -> (f64, f64) {
        self.path.domain()
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.breakpoints.clone()
    }

    fn evaluate_in(&self, t: f64, window: (f64, f64)) -> Result<Vec<f64>> {
        check_domain(t, self.domain())?;
        self.path
            .evaluate_in(self.warp(t).0, self.inner_window(window))
    }

    fn derivative_in(&self, t: f64, window: (f64, f64)) -> Result<Vec<f64>> {
        check_domain(t, self.domain())?;
        let (psi, d1, _) = self.warp(t);
        let dx = self.path.derivative_in(psi, self.inner_window(window))?;
        Ok(dx.into_iter().map(|v| v * d1).collect())
    }

    fn second_derivative_in(&self, t: f64, window: (f64, f64)) -> Result<Vec<f64>> {
        check_domain(t, self.domain())?;
        let (psi, d1, d2) = self.warp(t);
        let inner = self.inner_window(window);
        let dx = self.path.derivative_in(psi, inner)?;
        let ddx = self.path.second_derivative_in(psi, inner)?;
        Ok(dx
            .into_iter()
            .zip(ddx)
            .map(|(v, w)| w * d1 * d1 + v * d2)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn locate_prefers_right_piece_except_at_end() {
        let knots = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(locate(&knots, 0.0, (0.0, 0.0)), 0);
        assert_eq!(locate(&knots, 1.0, (1.0, 1.0)), 1);
        assert_eq!(locate(&knots, 2.5, (2.5, 2.5)), 2);
        assert_eq!(locate(&knots, 3.0, (3.0, 3.0)), 2);
        // A window ending on a knot keeps the left piece.
        assert_eq!(locate(&knots, 1.0, (0.5, 1.0)), 0);
    }

    #[test]
    fn polyline_values_and_slopes() {
        let p = PiecewiseLinear::new(vec![0.0, 1.0, 3.0], vec![vec![0.0], vec![2.0], vec![0.0]])
            .unwrap();
        assert_eq!(p.evaluate(0.5).unwrap(), vec![1.0]);
        assert_eq!(p.evaluate(2.0).unwrap(), vec![1.0]);
        assert_eq!(p.derivative(1.0).unwrap(), vec![-1.0]);
        assert_eq!(p.derivative_in(1.0, (0.5, 1.0)).unwrap(), vec![2.0]);
        assert_eq!(p.second_derivative(2.0).unwrap(), vec![0.0]);
        assert!(matches!(p.evaluate(3.5), Err(Error::Domain { .. })));
    }

    #[test]
    fn time_channel_is_identity() {
        let p = PiecewiseLinear::uniform(vec![vec![1.0], vec![3.0]])
            .unwrap()
            .with_time_channel();
        assert_eq!(p.evaluate(0.25).unwrap(), vec![1.5, 0.25]);
        assert_eq!(p.derivative(0.25).unwrap(), vec![2.0, 1.0]);
    }

    #[test]
    fn smooth_retime_keeps_endpoints_and_image() {
        let p = PiecewiseLinear::new(
            vec![0.0, 0.5, 2.0],
            vec![vec![0.0, 1.0], vec![1.0, 1.0], vec![0.0, -1.0]],
        )
        .unwrap();
        let r = SmoothRetime::new(&p, 0.6).unwrap();
        assert_eq!(r.evaluate(0.0).unwrap(), p.evaluate(0.0).unwrap());
        assert_eq!(r.evaluate(2.0).unwrap(), p.evaluate(2.0).unwrap());
        let bp = r.breakpoints();
        assert_eq!(bp.len(), 3);
        // The interior knot is reached at the retimed breakpoint.
        let at = r.evaluate(bp[1]).unwrap();
        assert!((at[0] - 1.0).abs() < 1e-12 && (at[1] - 1.0).abs() < 1e-12);
        assert!(SmoothRetime::new(&p, 1.0).is_err());
    }

    #[test]
    fn smooth_retime_derivatives_match_finite_differences() {
        let p = PiecewiseLinear::new(vec![0.0, 1.0], vec![vec![0.0], vec![2.0]]).unwrap();
        let r = SmoothRetime::new(&p, -0.4).unwrap();
        let h = 1e-5;
        for t in [0.2, 0.45, 0.8] {
            let fd = (r.evaluate(t + h).unwrap()[0] - r.evaluate(t - h).unwrap()[0]) / (2.0 * h);
            assert!((r.derivative(t).unwrap()[0] - fd).abs() < 1e-8);
            let fd2 =
                (r.derivative(t + h).unwrap()[0] - r.derivative(t - h).unwrap()[0]) / (2.0 * h);
            assert!((r.second_derivative(t).unwrap()[0] - fd2).abs() < 1e-6);
        }
    }
}
