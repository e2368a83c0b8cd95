//! Truncated path signatures, computed two independent ways.
//!
//! [`signature_cde`] solves the stacked signature CDE with the crate's RK4
//! integrator: level `i` is driven by level `i − 1` through `M(y)`, where
//! `M(y)·b` flattens the outer product with `b`'s index outermost, so the
//! level-`i` entry at `j·k + m` is `∫ y^{i−1}_m dX^j`.
//! [`signature_oracle`] evaluates the same iterated integrals by brute-force
//! left-point quadrature on a piecewise-linear path and never touches the
//! integrator.

use crate::cdeint::{rk4_solve, RecordMode, VectorField};
use crate::error::{Error, Result};
use crate::path::{ControlPath, PiecewiseLinear};

/// `κ(depth, v) = Σ_{i=0}^{depth} (v + 1)^i`: the truncated signature length
/// of a path with `v + 1` channels.
pub fn kappa(depth: usize, v: usize) -> usize {
    let d = v + 1;
    (0..=depth).map(|i| d.pow(i as u32)).sum()
}

/// The `(k·d) × d` matrix with `y` down the diagonal blocks:
/// column `j` holds `y` in rows `j·k .. (j+1)·k`.
pub fn build_m(y: &[f64], d: usize) -> Vec<Vec<f64>> {
    let k = y.len();
    let mut m = vec![vec![0.0; d]; k * d];
    for j in 0..d {
        for (i, &yi) in y.iter().enumerate() {
            m[j * k + i][j] = yi;
        }
    }
    m
}

/// Truncated signature; level `i` occupies `d^i` consecutive entries.
#[derive(Clone, Debug, PartialEq)]
pub struct SignatureTensor {
    pub depth: usize,
    pub channels: usize,
    pub flat: Vec<f64>,
}

impl SignatureTensor {
    /// `(1, 0, …, 0)`.
    pub fn unit(depth: usize, channels: usize) -> Self {
        let mut flat = vec![0.0; kappa(depth, channels - 1)];
        flat[0] = 1.0;
        SignatureTensor {
            depth,
            channels,
            flat,
        }
    }

    fn level_range(&self, level: usize) -> std::ops::Range<usize> {
        let start = if level == 0 {
            0
        } else {
            kappa(level - 1, self.channels - 1)
        };
        start..start + self.channels.pow(level as u32)
    }

    pub fn level(&self, level: usize) -> &[f64] {
        &self.flat[self.level_range(level)]
    }
}

/// `M̃(y)·X'(s)` for the stacked signature state.
struct SignatureField<'a, P: ?Sized> {
    path: &'a P,
    depth: usize,
    channels: usize,
}

impl<P: ControlPath + ?Sized> SignatureField<'_, P> {
    fn apply(&self, y: &[f64], dx: &[f64]) -> Vec<f64> {
        let d = self.channels;
        let mut out = vec![0.0; y.len()];
        let mut prev_start = 0;
        let mut prev_len = 1;
        for _ in 1..=self.depth {
            let start = prev_start + prev_len;
            let prev = &y[prev_start..prev_start + prev_len];
            for (j, &dxj) in dx.iter().enumerate() {
                for (m, &ym) in prev.iter().enumerate() {
                    out[start + j * prev_len + m] = ym * dxj;
                }
            }
            prev_start = start;
            prev_len *= d;
        }
        out
    }
}

impl<P: ControlPath + ?Sized> VectorField for SignatureField<'_, P> {
    type Cache = Vec<f64>;

    fn state_dim(&self) -> usize {
        kappa(self.depth, self.channels - 1)
    }

    fn param_count(&self) -> usize {
        0
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.path.breakpoints()
    }

    fn eval_cached(&self, y: &[f64], s: f64, window: (f64, f64)) -> Result<(Vec<f64>, Vec<f64>)> {
        let dx = self.path.derivative_in(s, window)?;
        Ok((self.apply(y, &dx), dx))
    }

    fn vjp(&self, dx: &Vec<f64>, a: &[f64], _theta_bar: &mut [f64]) -> Result<Vec<f64>> {
        let d = self.channels;
        let mut y_bar = vec![0.0; a.len()];
        let mut prev_start = 0;
        let mut prev_len = 1;
        for _ in 1..=self.depth {
            let start = prev_start + prev_len;
            for (j, &dxj) in dx.iter().enumerate() {
                for m in 0..prev_len {
                    y_bar[prev_start + m] += a[start + j * prev_len + m] * dxj;
                }
            }
            prev_start = start;
            prev_len *= d;
        }
        Ok(y_bar)
    }
}

/// Terminal value of the signature CDE started from `(1, 0, …, 0)`.
pub fn signature_cde<P: ControlPath + ?Sized>(
    path: &P,
    depth: usize,
    step: f64,
) -> Result<SignatureTensor> {
    if depth == 0 {
        return Err(Error::Config("signature depth must be at least 1".into()));
    }
    let channels = path.dim();
    let field = SignatureField {
        path,
        depth,
        channels,
    };
    let (start, end) = path.domain();
    let init = SignatureTensor::unit(depth, channels);
    let rec = rk4_solve(&field, &init.flat, start, end, step, RecordMode::Terminal)?;
    Ok(SignatureTensor {
        depth,
        channels,
        flat: rec.z_terminal,
    })
}

/// Left-point quadrature of the iterated integrals along `polyline`, with
/// `grid` equal sub-steps per segment.
pub fn signature_oracle(polyline: &PiecewiseLinear, depth: usize, grid: usize) -> SignatureTensor {
    let channels = polyline.dim();
    let mut sig = SignatureTensor::unit(depth, channels);
    let ranges: Vec<_> = (0..=depth).map(|l| sig.level_range(l)).collect();
    let points = polyline.points();
    for seg in points.windows(2) {
        let delta: Vec<f64> = seg[0]
            .iter()
            .zip(&seg[1])
            .map(|(a, b)| (b - a) / grid as f64)
            .collect();
        for _ in 0..grid {
            // Highest level first so each update reads the left-point values.
            for level in (1..=depth).rev() {
                let prev = ranges[level - 1].clone();
                let cur = ranges[level].start;
                let k = prev.len();
                for (j, &dj) in delta.iter().enumerate() {
                    for m in 0..k {
                        sig.flat[cur + j * k + m] += sig.flat[prev.start + m] * dj;
                    }
                }
            }
        }
    }
    sig
}

/// [`signature_oracle`] with two Richardson levels over grids `g`, `2g` and
/// `4g`. The left-point error expands in powers of `1/g`; the combination
/// `(8·S(4g) − 6·S(2g) + S(g))/3` cancels the first two terms. Finer grids
/// stop helping once summation round-off dominates.
pub fn signature_oracle_extrapolated(
    polyline: &PiecewiseLinear,
    depth: usize,
    grid: usize,
) -> SignatureTensor {
    let s1 = signature_oracle(polyline, depth, grid);
    let s2 = signature_oracle(polyline, depth, 2 * grid);
    let s4 = signature_oracle(polyline, depth, 4 * grid);
    let flat = s1
        .flat
        .iter()
        .zip(&s2.flat)
        .zip(&s4.flat)
        .map(|((a, b), c)| (8.0 * c - 6.0 * b + a) / 3.0)
        .collect();
    SignatureTensor { flat, ..s1 }
}
