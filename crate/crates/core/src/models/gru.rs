//! A standard GRU cell with an explicit cache and vector-Jacobian product.
//!
//! ```text
//! r  = σ(W_ir x + b_ir + W_hr h + b_hr)
//! u  = σ(W_iu x + b_iu + W_hu h + b_hu)
//! n  = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
//! h' = (1 − u) ⊙ n + u ⊙ h
//! ```
//!
//! The input-side and hidden-side maps are each one [`Linear`] of width `3w`
//! with rows ordered `r, u, n`. Parameters are the input map followed by the
//! hidden map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruCell {
    pub input: Linear,
    pub hidden: Linear,
}

#[derive(Clone, Debug)]
pub struct GruCache {
    x: Vec<f64>,
    h: Vec<f64>,
    hn: Vec<f64>,
    r: Vec<f64>,
    u: Vec<f64>,
    n: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl GruCell {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        GruCell {
            input: Linear::zeros(input_dim, 3 * hidden_dim),
            hidden: Linear::zeros(hidden_dim, 3 * hidden_dim),
        }
    }

    /// Every parameter uniform on `±1/√w`, the usual GRU initialization.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let mut cell = GruCell::zeros(input_dim, hidden_dim);
        for l in [&mut cell.input, &mut cell.hidden] {
            for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *v = rng.random_range(-bound..=bound);
            }
        }
        cell
    }

    pub fn input_dim(&self) -> usize {
        self.input.in_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden.in_dim
    }

    pub fn param_count(&self) -> usize {
        self.input.param_count() + self.hidden.param_count()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in [&self.input, &self.hidden] {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.param_count() {
            return Err(Error::shape(format!(
                "GRU cell has {} parameters, got {}",
                self.param_count(),
                src.len()
            )));
        }
        let mut at = 0;
        for l in [&mut self.input, &mut self.hidden] {
            let (nw, nb) = (l.weight.len(), l.bias.len());
            l.weight.copy_from_slice(&src[at..at + nw]);
            l.bias.copy_from_slice(&src[at + nw..at + nw + nb]);
            at += nw + nb;
        }
        Ok(())
    }

    fn check(&self, x: &[f64], h: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() || h.len() != self.hidden_dim() {
            return Err(Error::shape(format!(
                "GRU cell expects input {} and hidden {}, got {} and {}",
                self.input_dim(),
                self.hidden_dim(),
                x.len(),
                h.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x, h)?.0)
    }

    pub fn forward_cached(&self, x: &[f64], h: &[f64]) -> Result<(Vec<f64>, GruCache)> {
        self.check(x, h)?;
        let w = self.hidden_dim();
        let gx = self.input.forward(x);
        let gh = self.hidden.forward(h);
        let r: Vec<f64> = (0..w).map(|i| sigmoid(gx[i] + gh[i])).collect();
        let u: Vec<f64> = (0..w).map(|i| sigmoid(gx[w + i] + gh[w + i])).collect();
        let hn = gh[2 * w..].to_vec();
        let n: Vec<f64> = (0..w)
            .map(|i| (gx[2 * w + i] + r[i] * hn[i]).tanh())
            .collect();
        let out = (0..w).map(|i| (1.0 - u[i]) * n[i] + u[i] * h[i]).collect();
        let cache = GruCache {
            x: x.to_vec(),
            h: h.to_vec(),
            hn,
            r,
            u,
            n,
        };
        Ok((out, cache))
    }

    /// Accumulates parameter gradients into `grads` and returns
    /// `(x_bar, h_bar)` for the cotangent `out_bar` on the new hidden state.
    pub fn vjp_into(
        &self,
        cache: &GruCache,
        out_bar: &[f64],
        grads: &mut [f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let w = self.hidden_dim();
        if out_bar.len() != w || grads.len() != self.param_count() {
            return Err(Error::shape(
                "GRU cotangent or gradient buffer has the wrong length",
            ));
        }
        let mut gx_bar = vec![0.0; 3 * w];
        let mut gh_bar = vec![0.0; 3 * w];
        let mut h_bar = vec![0.0; w];
        for i in 0..w {
            let ob = out_bar[i];
            let (r, u, n) = (cache.r[i], cache.u[i], cache.n[i]);
            h_bar[i] = ob * u;
            let u_pre = ob * (cache.h[i] - n) * u * (1.0 - u);
            let n_pre = ob * (1.0 - u) * (1.0 - n * n);
            let r_pre = n_pre * cache.hn[i] * r * (1.0 - r);
            gx_bar[i] = r_pre;
            gh_bar[i] = r_pre;
            gx_bar[w + i] = u_pre;
            gh_bar[w + i] = u_pre;
            gx_bar[2 * w + i] = n_pre;
            gh_bar[2 * w + i] = n_pre * r;
        }
        let (gi, gh) = grads.split_at_mut(self.input.param_count());
        let x_bar = self.input.backward(&cache.x, &gx_bar, gi);
        let hh = self.hidden.backward(&cache.h, &gh_bar, gh);
        h_bar.iter_mut().zip(&hh).for_each(|(a, b)| *a += b);
        Ok((x_bar, h_bar))
    }
}
