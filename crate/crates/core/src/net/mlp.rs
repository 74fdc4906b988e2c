// Fully connected ReLU network with a linear output head.
//
// Weights are stored input-major (`w[k * out + o]`), so both the forward
// pass and the weight gradient are axpy sweeps over contiguous rows. Each
// sample is processed independently with a fixed operation order, which
// makes a sample's output independent of the batch it is evaluated in.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FluxError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpConfig {
    /// Filled in from the encoder; ignored when read from a config file.
    #[serde(skip)]
    pub input_dim: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self { input_dim: 0, hidden_layers: 2, hidden_width: 64 }
    }
}

impl MlpConfig {
    pub const OUTPUT_DIM: usize = 2;

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || (self.hidden_layers > 0 && self.hidden_width == 0) {
            return Err(FluxError::Config(format!("invalid network shape {self:?}")));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every layer, output head last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers + 1);
        let mut fan_in = self.input_dim;
        for _ in 0..self.hidden_layers {
            dims.push((fan_in, self.hidden_width));
            fan_in = self.hidden_width;
        }
        dims.push((fan_in, Self::OUTPUT_DIM));
        dims
    }

    /// Per-sample activation storage: every layer input plus the output.
    pub fn activation_len(&self) -> usize {
        self.layer_dims().iter().map(|&(i, _)| i).sum::<usize>() + Self::OUTPUT_DIM
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Input-major: `weight[k * fan_out + o]` connects input `k` to output `o`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { fan_in, fan_out, weight: vec![0.0; fan_in * fan_out], bias: vec![0.0; fan_out] }
    }

    pub fn add_assign(&mut self, other: &Dense) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.weight.iter_mut().chain(self.bias.iter_mut()).for_each(|v| *v *= s);
    }

    #[inline]
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        for (k, &xk) in x.iter().enumerate() {
            if xk == 0.0 {
                continue;
            }
            let row = &self.weight[k * self.fan_out..(k + 1) * self.fan_out];
            for (o, w) in out.iter_mut().zip(row) {
                *o += xk * w;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub cfg: MlpConfig,
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn zeros(cfg: MlpConfig) -> Result<Self> {
        cfg.validate()?;
        let layers = cfg.layer_dims().into_iter().map(|(i, o)| Dense::zeros(i, o)).collect();
        Ok(Self { cfg, layers })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(cfg: MlpConfig, rng: &mut R) -> Result<Self> {
        let mut mlp = Self::zeros(cfg)?;
        for layer in &mut mlp.layers {
            let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            for w in &mut layer.weight {
                *w = rng.gen_range(-limit..=limit);
            }
        }
        Ok(mlp)
    }

    pub fn zero_grad(&self) -> Vec<Dense> {
        self.layers.iter().map(|l| Dense::zeros(l.fan_in, l.fan_out)).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Forward pass for one sample. `acts` receives the input of every layer
    /// followed by the output; `acts[..input_dim]` must already hold the input.
    pub fn forward_in_place(&self, acts: &mut [f64]) {
        let mut offset = 0;
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (head, tail) = acts.split_at_mut(offset + layer.fan_in);
            let x = &head[offset..];
            let out = &mut tail[..layer.fan_out];
            layer.apply(x, out);
            if l < last {
                for v in out.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            offset += layer.fan_in;
        }
    }

    /// Locates the first layer whose output holds a non-finite value.
    pub fn first_non_finite_layer(&self, acts: &[f64]) -> Option<usize> {
        let mut offset = self.cfg.input_dim;
        if acts[..offset].iter().any(|v| !v.is_finite()) {
            return Some(0);
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if acts[offset..offset + layer.fan_out].iter().any(|v| !v.is_finite()) {
                return Some(l + 1);
            }
            offset += layer.fan_out;
        }
        None
    }

    /// Reverse pass for one sample: accumulates parameter gradients into
    /// `grads` and writes the input gradient into `d_input`. `scratch` must
    /// hold at least `2 * max(fan_out)` values.
    pub fn backward_in_place(
        &self,
        acts: &[f64],
        d_output: &[f64],
        grads: &mut [Dense],
        d_input: &mut [f64],
        scratch: &mut Vec<f64>,
    ) {
        let widest = self.layers.iter().map(|l| l.fan_in.max(l.fan_out)).max().unwrap_or(0);
        scratch.resize(2 * widest, 0.0);
        let (cur, next) = scratch.split_at_mut(widest);
        let mut n_cur = d_output.len();
        cur[..n_cur].copy_from_slice(d_output);

        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut offset = 0;
        for layer in &self.layers {
            offsets.push(offset);
            offset += layer.fan_in;
        }

        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let x = &acts[offsets[l]..offsets[l] + layer.fan_in];
            let dz = &cur[..n_cur];
            let g = &mut grads[l];
            for (b, d) in g.bias.iter_mut().zip(dz) {
                *b += d;
            }
            for (k, &xk) in x.iter().enumerate() {
                if xk == 0.0 {
                    continue;
                }
                let row = &mut g.weight[k * layer.fan_out..(k + 1) * layer.fan_out];
                for (w, d) in row.iter_mut().zip(dz) {
                    *w += xk * d;
                }
            }
            let dx = if l == 0 { &mut d_input[..layer.fan_in] } else { &mut next[..layer.fan_in] };
            for (k, slot) in dx.iter_mut().enumerate() {
                let row = &layer.weight[k * layer.fan_out..(k + 1) * layer.fan_out];
                let mut s = 0.0;
                for (w, d) in row.iter().zip(dz) {
                    s += w * d;
                }
                // ReLU derivative of the previous layer; zero for inactive units
                *slot = if l > 0 && x[k] <= 0.0 { 0.0 } else { s };
            }
            if l > 0 {
                cur[..layer.fan_in].copy_from_slice(&next[..layer.fan_in]);
                n_cur = layer.fan_in;
            }
        }
    }
}
