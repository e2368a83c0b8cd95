//! Natural cubic spline interpolation of (partially observed) time series.
//!
//! Each channel is interpolated independently through the times at which it
//! was observed. On the piece `[t_i, t_{i+1}]` a channel is stored in local
//! coordinates `u = t − t_i` as `Y_i(u) = a_i + b_i·u + c_i·u² + d_i·u³`,
//! where `a_i = x_i`, `b_i = D_i` and the knot derivatives `D` solve the
//! symmetric tridiagonal system `T·D = k` produced by the C² and natural
//! boundary conditions.
//!
//! A channel whose observations start after (or end before) the series does
//! continues linearly with its boundary slope. Since the natural condition
//! zeroes the second derivative at the channel's end knots, this extension
//! keeps the channel C².

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::path::{check_domain, locate, ControlPath};
use crate::timeseries::TimeSeries;

/// One channel's cubic pieces.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSpline {
    knots: Vec<f64>,
    /// `[a, b, c, d]` per piece, in piece-local coordinates.
    coeffs: Vec<[f64; 4]>,
}

impl ChannelSpline {
    /// Fits the natural cubic spline through `(times[i], values[i])`.
    pub fn fit(times: &[f64], values: &[f64]) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::shape("spline knots and values differ in length"));
        }
        if times.len() < 2 {
            return Err(Error::InsufficientObservations(format!(
                "spline needs at least 2 knots, got {}",
                times.len()
            )));
        }
        if let Some(w) = times.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::MalformedSeries(format!(
                "spline knots not strictly increasing: {} then {}",
                w[0], w[1]
            )));
        }
        let gaps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
        let slopes = knot_derivatives(&gaps, values)?;
        let coeffs = gaps
            .iter()
            .enumerate()
            .map(|(i, &tau)| {
                let dx = values[i + 1] - values[i];
                let c = 3.0 * dx / (tau * tau) - (slopes[i + 1] + 2.0 * slopes[i]) / tau;
                let d = -2.0 * dx / (tau * tau * tau) + (slopes[i + 1] + slopes[i]) / (tau * tau);
                [values[i], slopes[i], c, d]
            })
            .collect();
        Ok(ChannelSpline {
            knots: times.to_vec(),
            coeffs,
        })
    }

    /// The identity map `t ↦ t` on `[start, end]`.
    pub fn identity(start: f64, end: f64) -> Self {
        ChannelSpline {
            knots: vec![start, end],
            coeffs: vec![[start, 1.0, 0.0, 0.0]],
        }
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn coefficients(&self) -> &[[f64; 4]] {
        &self.coeffs
    }

    /// Knot derivatives `D_0 … D_n` (the `b` coefficients plus the final slope).
    pub fn knot_slopes(&self) -> Vec<f64> {
        let mut d: Vec<f64> = self.coeffs.iter().map(|c| c[1]).collect();
        d.push(self.eval_piece(self.coeffs.len() - 1, self.last_knot(), 1));
        d
    }

    fn first_knot(&self) -> f64 {
        self.knots[0]
    }

    fn last_knot(&self) -> f64 {
        self.knots[self.knots.len() - 1]
    }

    /// `order`-th derivative of piece `i` at absolute time `t`.
    fn eval_piece(&self, i: usize, t: f64, order: u8) -> f64 {
        let [a, b, c, d] = self.coeffs[i];
        let u = t - self.knots[i];
        match order {
            0 => a + u * (b + u * (c + u * d)),
            1 => b + u * (2.0 * c + 3.0 * u * d),
            _ => 2.0 * c + 6.0 * u * d,
        }
    }

    fn eval(&self, t: f64, window: (f64, f64), order: u8) -> f64 {
        let (first, last) = (self.first_knot(), self.last_knot());
        let probe = if window.1 > window.0 {
            0.5 * (window.0 + window.1)
        } else {
            t
        };
        // Linear continuation outside the observed range.
        let edge = if probe < first {
            Some((0, first))
        } else if probe > last {
            Some((self.coeffs.len() - 1, last))
        } else {
            None
        };
        match edge {
            Some((piece, knot)) => {
                let slope = self.eval_piece(piece, knot, 1);
                match order {
                    0 => self.eval_piece(piece, knot, 0) + slope * (t - knot),
                    1 => slope,
                    _ => 0.0,
                }
            }
            None => self.eval_piece(locate(&self.knots, t, window), t, order),
        }
    }
}

/// Solves the natural-spline system for the knot derivatives.
fn knot_derivatives(gaps: &[f64], values: &[f64]) -> Result<Vec<f64>> {
    let n = gaps.len();
    let inv: Vec<f64> = gaps.iter().map(|t| 1.0 / t).collect();
    let secant: Vec<f64> = (0..n)
        .map(|i| 3.0 * (values[i + 1] - values[i]) * inv[i] * inv[i])
        .collect();
    let mut diag = vec![0.0; n + 1];
    let mut rhs = vec![0.0; n + 1];
    diag[0] = 2.0 * inv[0];
    rhs[0] = secant[0];
    for i in 1..n {
        diag[i] = 2.0 * (inv[i - 1] + inv[i]);
        rhs[i] = secant[i - 1] + secant[i];
    }
    diag[n] = 2.0 * inv[n - 1];
    rhs[n] = secant[n - 1];
    solve_tridiagonal(&diag, &inv, &rhs)
}

/// Thomas algorithm for the symmetric tridiagonal system with main diagonal
/// `diag` and sub/super-diagonal `off` (`off.len() == diag.len() − 1`).
pub fn solve_tridiagonal(diag: &[f64], off: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    if n == 0 || rhs.len() != n || off.len() + 1 != n {
        return Err(Error::shape(format!(
            "tridiagonal system: diag {}, off {}, rhs {}",
            n,
            off.len(),
            rhs.len()
        )));
    }
    let mut upper = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut pivot = diag[0];
    for i in 0..n {
        if i > 0 {
            pivot = diag[i] - off[i - 1] * upper[i - 1];
        }
        if pivot == 0.0 || !pivot.is_finite() {
            return Err(Error::NumericalFailure(format!(
                "zero pivot in tridiagonal solve at row {i}"
            )));
        }
        if i + 1 < n {
            upper[i] = off[i] / pivot;
        }
        let carried = if i > 0 { off[i - 1] * y[i - 1] } else { 0.0 };
        y[i] = (rhs[i] - carried) / pivot;
    }
    for i in (0..n - 1).rev() {
        y[i] -= upper[i] * y[i + 1];
    }
    Ok(y)
}

/// Per-channel natural cubic splines over a common domain, with the identity
/// time channel appended last.
#[derive(Clone, Debug, PartialEq)]
pub struct SplinePath {
    channels: Vec<ChannelSpline>,
    start: f64,
    end: f64,
    breakpoints: Vec<f64>,
}

impl SplinePath {
    pub fn channels(&self) -> &[ChannelSpline] {
        &self.channels
    }

    /// `channel,knot_start,a,b,c,d` rows for inspection.
    pub fn coefficients_csv(&self) -> String {
        let mut out = String::from("channel,knot_start,a,b,c,d\n");
        for (ch, spline) in self.channels.iter().enumerate() {
            for (k, [a, b, c, d]) in spline.knots.iter().zip(&spline.coeffs) {
                let _ = writeln!(out, "{ch},{k},{a},{b},{c},{d}");
            }
        }
        out
    }

    /// Every channel except the trailing time channel.
    pub fn data_channels(&self) -> &[ChannelSpline] {
        &self.channels[..self.channels.len() - 1]
    }

    fn eval_all(&self, t: f64, window: (f64, f64), order: u8) -> Result<Vec<f64>> {
        check_domain(t, (self.start, self.end))?;
        Ok(self
            .channels
            .iter()
            .map(|c| c.eval(t, window, order))
            .collect())
    }
}

impl ControlPath for SplinePath {
    fn dim(&self) -> usize {
        self.channels.len()
    }

    fn domain(&self) -> (f64, f64) {
        (self.start, self.end)
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.breakpoints.clone()
    }

    fn evaluate_in(&self, t: f64, window: (f64, f64)) -> Result<Vec<f64>> {
        self.eval_all(t, window, 0)
    }

    fn derivative_in(&self, t: f64, window: (f64, f64)) -> Result<Vec<f64>> {
        self.eval_all(t, window, 1)
    }

    fn second_derivative_in(&self, t: f64, window: (f64, f64)) -> Result<Vec<f64>> {
        self.eval_all(t, window, 2)
    }
}

/// Interpolates every channel of `series` through its own observation times
/// and appends time as the final channel.
pub fn fit_natural_cubic(series: &TimeSeries) -> Result<SplinePath> {
    let mut channels = (0..series.channel_count())
        .map(|c| {
            let (t, x) = series.channel_observations(c);
            ChannelSpline::fit(&t, &x)
        })
        .collect::<Result<Vec<_>>>()?;
    let (start, end) = (series.start(), series.end());
    channels.push(ChannelSpline::identity(start, end));
    let mut breakpoints: Vec<f64> = channels
        .iter()
        .flat_map(|c| c.knots.iter().copied())
        .filter(|t| (start..=end).contains(t))
        .collect();
    breakpoints.sort_by(f64::total_cmp);
    breakpoints.dedup();
    Ok(SplinePath {
        channels,
        start,
        end,
        breakpoints,
    })
}

/// Structural magnitude bound for the natural cubic spline of `series`, with
/// the absolute constant set to 1:
/// `‖τ‖∞·‖x‖∞·(min τ)⁻²·(‖τ‖∞ + (min τ)⁻¹)` where `τ` are the knot gaps.
pub fn crude_bound(series: &TimeSeries) -> f64 {
    let gaps: Vec<f64> = series.times().windows(2).map(|w| w[1] - w[0]).collect();
    let max_gap = gaps.iter().copied().fold(0.0, f64::max);
    let min_gap = gaps.iter().copied().fold(f64::INFINITY, f64::min);
    let x = series.max_abs();
    max_gap * x * min_gap.powi(-2) * (max_gap + 1.0 / min_gap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{dense_solve, tridiagonal_dense};
    use crate::seeded_rng;
    use rand::Rng;

    fn series(times: &[f64], xs: &[f64]) -> TimeSeries {
        TimeSeries::from_dense(times.to_vec(), xs.iter().map(|&x| vec![x]).collect(), None).unwrap()
    }

    #[test]
    fn collinear_data_is_a_line() {
        let path = fit_natural_cubic(&series(&[0.0, 1.0, 2.0], &[0.0, 1.0, 2.0])).unwrap();
        let ch = &path.channels()[0];
        for [_, _, c, d] in ch.coefficients() {
            assert!(c.abs() < 1e-12 && d.abs() < 1e-12);
        }
        for d in ch.knot_slopes() {
            assert!((d - 1.0).abs() < 1e-12);
        }
        assert!((path.evaluate(0.5).unwrap()[0] - 0.5).abs() < 1e-12);
        assert!((path.derivative(1.7).unwrap()[0] - 1.0).abs() < 1e-12);
        assert!(path.second_derivative(0.3).unwrap()[0].abs() < 1e-12);
    }

    #[test]
    fn two_knots_give_a_segment() {
        let path = fit_natural_cubic(&series(&[0.0, 1.0], &[0.0, 1.0])).unwrap();
        for t in [0.0, 0.25, 0.5, 1.0] {
            assert!(path.second_derivative(t).unwrap()[0].abs() < 1e-14);
            assert!((path.evaluate(t).unwrap()[0] - t).abs() < 1e-14);
        }
    }

    #[test]
    fn hat_data_matches_dense_solve() {
        // Oracle: assemble the 3x3 system densely and solve independently.
        let tau = [1.0f64, 1.0];
        let x = [0.0, 1.0, 0.0];
        let a = tridiagonal_dense(
            &[
                2.0 / tau[0],
                2.0 * (1.0 / tau[0] + 1.0 / tau[1]),
                2.0 / tau[1],
            ],
            &[1.0 / tau[0], 1.0 / tau[1]],
        );
        let s0 = 3.0 * (x[1] - x[0]) / (tau[0] * tau[0]);
        let s1 = 3.0 * (x[2] - x[1]) / (tau[1] * tau[1]);
        let d_oracle = dense_solve(&a, &[s0, s0 + s1, s1]).unwrap();
        assert!((d_oracle[0] - 1.5).abs() < 1e-14);
        assert!(d_oracle[1].abs() < 1e-14);
        assert!((d_oracle[2] + 1.5).abs() < 1e-14);

        let path = fit_natural_cubic(&series(&[0.0, 1.0, 2.0], &x)).unwrap();
        let slopes = path.channels()[0].knot_slopes();
        for (d, o) in slopes.iter().zip(&d_oracle) {
            assert!((d - o).abs() < 1e-14);
        }
        assert!((path.evaluate(0.5).unwrap()[0] - 0.6875).abs() < 1e-14);
        assert!(path.derivative(1.0).unwrap()[0].abs() < 1e-14);
        assert!((path.second_derivative(1.0).unwrap()[0] + 3.0).abs() < 1e-14);
    }

    #[test]
    fn thomas_identity_and_random_vs_dense() {
        assert_eq!(
            solve_tridiagonal(&[1.0, 1.0], &[0.0], &[3.0, 4.0]).unwrap(),
            vec![3.0, 4.0]
        );
        let mut rng = seeded_rng(42);
        for _ in 0..20 {
            let n = 20;
            let off: Vec<f64> = (0..n - 1).map(|_| rng.random_range(-1.0..1.0)).collect();
            let diag: Vec<f64> = (0..n)
                .map(|i| {
                    let l = if i > 0 { off[i - 1].abs() } else { 0.0 };
                    let r = if i + 1 < n { off[i].abs() } else { 0.0 };
                    l + r + rng.random_range(0.1..2.0)
                })
                .collect();
            let rhs: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let got = solve_tridiagonal(&diag, &off, &rhs).unwrap();
            let want = dense_solve(&tridiagonal_dense(&diag, &off), &rhs).unwrap();
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-9 * (1.0 + w.abs()));
            }
        }
    }

    #[test]
    fn thomas_rejects_zero_pivot_and_bad_shapes() {
        assert!(matches!(
            solve_tridiagonal(&[0.0, 1.0], &[1.0], &[1.0, 1.0]),
            Err(Error::NumericalFailure(_))
        ));
        assert!(matches!(
            solve_tridiagonal(&[1.0, 1.0], &[], &[1.0, 1.0]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn time_channel_is_identity() {
        let s = series(&[0.5, 1.0, 3.0], &[1.0, -1.0, 2.0]);
        let path = fit_natural_cubic(&s).unwrap();
        assert_eq!(path.dim(), 2);
        assert_eq!(path.channels()[1].coefficients(), &[[0.5, 1.0, 0.0, 0.0]]);
        for t in [0.5, 0.7, 2.9, 3.0] {
            assert_eq!(path.evaluate(t).unwrap()[1], t);
            assert_eq!(path.derivative(t).unwrap()[1], 1.0);
        }
    }

    #[test]
    fn domain_errors() {
        let path = fit_natural_cubic(&series(&[0.0, 1.0], &[0.0, 1.0])).unwrap();
        assert!(matches!(path.evaluate(-0.1), Err(Error::Domain { .. })));
        assert!(matches!(path.derivative(1.1), Err(Error::Domain { .. })));
        assert!(matches!(
            path.second_derivative(2.0),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn duplicate_knots_rejected() {
        assert!(matches!(
            ChannelSpline::fit(&[0.0, 1.0, 1.0], &[0.0, 1.0, 2.0]),
            Err(Error::MalformedSeries(_))
        ));
    }

    #[test]
    fn partially_observed_channels_use_own_knots() {
        let s = TimeSeries::new(
            vec![0.0, 1.0, 2.0, 3.0],
            vec![
                vec![None, Some(0.0)],
                vec![Some(1.0), Some(1.0)],
                vec![Some(2.0), None],
                vec![Some(4.0), Some(0.0)],
            ],
            None,
        )
        .unwrap();
        let path = fit_natural_cubic(&s).unwrap();
        assert_eq!(path.channels()[0].knots(), &[1.0, 2.0, 3.0]);
        assert_eq!(path.channels()[1].knots(), &[0.0, 1.0, 3.0]);
        assert_eq!(path.breakpoints(), vec![0.0, 1.0, 2.0, 3.0]);
        // Channel 0 extends linearly before its first knot, continuing C².
        let left = path.evaluate(0.0).unwrap()[0];
        let slope = path.derivative(1.0).unwrap()[0];
        assert!((left - (1.0 - slope)).abs() < 1e-12);
        assert!(path.second_derivative(0.5).unwrap()[0].abs() < 1e-15);
        assert!((path.evaluate(2.0).unwrap()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn crude_bound_values() {
        let uniform = series(&[0.0, 1.0, 2.0, 3.0], &[1.0, -1.0, 0.5, 0.0]);
        assert_eq!(crude_bound(&uniform), 2.0);
        let squeezed = series(&[0.0, 0.5, 2.0, 3.0], &[1.0, -1.0, 0.5, 0.0]);
        assert!(crude_bound(&squeezed) > crude_bound(&uniform));
    }

    #[test]
    fn coefficient_dump_has_a_row_per_piece() {
        let path = fit_natural_cubic(&series(&[0.0, 1.0, 2.0], &[0.0, 1.0, 0.0])).unwrap();
        let csv = path.coefficients_csv();
        assert_eq!(csv.lines().count(), 1 + 2 + 1);
        assert!(csv.starts_with("channel,knot_start,a,b,c,d\n0,0,0,1.5,"));
    }
}
