//! Small dense networks with explicit forward caches and vector-Jacobian
//! products.
//!
//! Parameters are laid out flat, layer by layer, each layer as its row-major
//! weight matrix followed by its bias. [`ParamGrads`] uses the same layout.

use std::ops::{AddAssign, Range};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[serde(alias = "none")]
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative at pre-activation `x`. ReLU uses 0 at the origin.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Affine map `y = W·x + b` with `W` stored row-major (`out × in`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Weights uniform on `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = glorot_bound(in_dim, out_dim);
        let weight = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Linear {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        self.weight
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + dot(row, x))
            .collect()
    }

    /// Accumulates parameter gradients into `grads` (this layer's flat slice)
    /// and returns `Wᵀ·y_bar`.
    pub fn backward(&self, x: &[f64], y_bar: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let (gw, gb) = grads.split_at_mut(self.weight.len());
        let mut x_bar = vec![0.0; self.in_dim];
        for (o, &yb) in y_bar.iter().enumerate() {
            if yb == 0.0 {
                continue;
            }
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut gw[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                x_bar[i] += row[i] * yb;
                grow[i] += yb * x[i];
            }
            gb[o] += yb;
        }
        x_bar
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.weight);
        out.extend_from_slice(&self.bias);
    }

    fn read_params(&mut self, src: &[f64]) -> usize {
        let (w, rest) = src.split_at(self.weight.len());
        let nb = self.bias.len();
        self.weight.copy_from_slice(w);
        self.bias.copy_from_slice(&rest[..nb]);
        self.param_count()
    }
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradient accumulator in the flat parameter layout of its network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads(pub Vec<f64>);

impl ParamGrads {
    pub fn zeros(len: usize) -> Self {
        ParamGrads(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, g| m.max(g.abs()))
    }
}

impl AddAssign<&ParamGrads> for ParamGrads {
    fn add_assign(&mut self, rhs: &ParamGrads) {
        debug_assert_eq!(self.0.len(), rhs.0.len());
        self.0.iter_mut().zip(&rhs.0).for_each(|(a, b)| *a += b);
    }
}

/// Per-layer record of a forward pass: each layer's input and pre-activation.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl MlpCache {
    /// Number of stored vectors (two per layer).
    pub fn stored_vectors(&self) -> usize {
        self.inputs.len() + self.pre.len()
    }
}

/// A feedforward network: affine layers with `hidden` activation between
/// them and `output` activation after the last one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
}

const CHECKPOINT_FORMAT: &str = "cdeflow-mlp";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct MlpCheckpoint {
    format: String,
    version: u32,
    dims: Vec<usize>,
    #[serde(flatten)]
    mlp: Mlp,
}

impl Mlp {
    /// Glorot-initialized network with layer widths `dims`.
    pub fn init<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::shape(format!(
                "an MLP needs at least input and output widths, got {dims:?}"
            )));
        }
        if dims.contains(&0) {
            return Err(Error::shape(format!("zero-width layer in {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|w| Linear::glorot(w[0], w[1], rng))
            .collect();
        Ok(Mlp {
            layers,
            hidden,
            output,
        })
    }

    /// Builds a network from explicit layers, checking that widths chain.
    pub fn from_layers(
        layers: Vec<Linear>,
        hidden: Activation,
        output: Activation,
    ) -> Result<Self> {
        let mlp = Mlp {
            layers,
            hidden,
            output,
        };
        mlp.validate()?;
        Ok(mlp)
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::shape("an MLP needs at least one layer"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weight.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(Error::shape(format!(
                    "layer {i} storage does not match its dims"
                )));
            }
            if l.weight.iter().chain(&l.bias).any(|x| !x.is_finite()) {
                return Err(Error::shape(format!("layer {i} has non-finite entries")));
            }
        }
        if let Some(i) = self
            .layers
            .windows(2)
            .position(|w| w[0].out_dim != w[1].in_dim)
        {
            return Err(Error::shape(format!(
                "layer {i} outputs {} but layer {} expects {}",
                self.layers[i].out_dim,
                i + 1,
                self.layers[i + 1].in_dim
            )));
        }
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.in_dim())
            .chain(self.layers.iter().map(|l| l.out_dim))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.layers.iter().for_each(|l| l.write_params(&mut out));
        out
    }

    pub fn set_params(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.param_count() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                src.len()
            )));
        }
        let mut used = 0;
        for l in &mut self.layers {
            used += l.read_params(&src[used..]);
        }
        Ok(())
    }

    /// Flat range of each layer's weight block (bias excluded).
    pub fn weight_ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.layers
            .iter()
            .map(|l| {
                let r = start..start + l.weight.len();
                start += l.param_count();
                r
            })
            .collect()
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output
        } else {
            self.hidden
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() == self.in_dim() {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "MLP expects input of length {}, got {}",
                self.in_dim(),
                x.len()
            )))
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let act = self.activation(i);
            h = layer.forward(&h);
            h.iter_mut().for_each(|v| *v = act.apply(*v));
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let act = self.activation(i);
            let p = layer.forward(&h);
            let next = p.iter().map(|&v| act.apply(v)).collect();
            inputs.push(std::mem::replace(&mut h, next));
            pre.push(p);
        }
        Ok((h, MlpCache { inputs, pre }))
    }

    /// Accumulates `y_barᵀ·∂y/∂θ` into `grads` and returns `y_barᵀ·∂y/∂x`.
    pub fn vjp_into(&self, cache: &MlpCache, y_bar: &[f64], grads: &mut [f64]) -> Result<Vec<f64>> {
        if y_bar.len() != self.out_dim() {
            return Err(Error::shape(format!(
                "cotangent of length {} for MLP output {}",
                y_bar.len(),
                self.out_dim()
            )));
        }
        if grads.len() != self.param_count() || cache.pre.len() != self.layers.len() {
            return Err(Error::shape("gradient buffer or cache does not match MLP"));
        }
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for l in &self.layers {
            offsets.push(acc);
            acc += l.param_count();
        }
        let mut bar = y_bar.to_vec();
        for i in (0..self.layers.len()).rev() {
            let act = self.activation(i);
            for (b, &p) in bar.iter_mut().zip(&cache.pre[i]) {
                *b *= act.derivative(p);
            }
            let layer = &self.layers[i];
            let g = &mut grads[offsets[i]..offsets[i] + layer.param_count()];
            bar = layer.backward(&cache.inputs[i], &bar, g);
        }
        Ok(bar)
    }

    pub fn vjp(&self, cache: &MlpCache, y_bar: &[f64]) -> Result<(Vec<f64>, ParamGrads)> {
        let mut grads = ParamGrads::zeros(self.param_count());
        let x_bar = self.vjp_into(cache, y_bar, &mut grads.0)?;
        Ok((x_bar, grads))
    }

    pub fn to_checkpoint(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&MlpCheckpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            dims: self.dims(),
            mlp: self.clone(),
        })?)
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let ck: MlpCheckpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        ck.mlp.validate()?;
        if ck.mlp.dims() != ck.dims {
            return Err(Error::shape(format!(
                "checkpoint declares dims {:?} but layers give {:?}",
                ck.dims,
                ck.mlp.dims()
            )));
        }
        Ok(ck.mlp)
    }
}
