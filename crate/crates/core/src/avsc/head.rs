// SPDX-License-Identifier: Apache-2.0

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::mask::sigmoid;
use crate::matching::{softmax, SIMPLEX_TOLERANCE};
use crate::{Error, Result};

/// Precomputed audio feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AudioEmbedding(pub Vec<f64>);

impl AudioEmbedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("audio embedding must be finite".into()));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Output normalization of the audio head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Softmax over categories: a point on the K-simplex.
    Simplex,
    /// Independent sigmoid per category.
    #[default]
    Independent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioDistribution {
    probs: Vec<f64>,
    mode: HeadMode,
}

impl AudioDistribution {
    pub fn new(probs: Vec<f64>, mode: HeadMode) -> Result<Self> {
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidValue(format!("audio probability {p} is outside [0, 1]")));
        }
        if mode == HeadMode::Simplex {
            let sum: f64 = probs.iter().sum();
            if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
                return Err(Error::InvalidValue(format!("simplex audio probabilities sum to {sum}")));
            }
        }
        Ok(Self { probs, mode })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn mode(&self) -> HeadMode {
        self.mode
    }

    pub fn num_categories(&self) -> usize {
        self.probs.len()
    }
}

/// Fully connected layer; `weights` is `outputs × inputs`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weights: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }
}

/// MLP mapping an audio embedding to K category probabilities. Hidden layers
/// use `tanh`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioHead {
    layers: Vec<Dense>,
    mode: HeadMode,
}

/// Activations saved by [`AudioHead::forward_with_cache`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of each layer; `inputs[0]` is the embedding.
    inputs: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

impl ForwardCache {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Gradients laid out like the head's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub layers: Vec<Dense>,
}

impl HeadGradients {
    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn add_scaled(&mut self, other: &HeadGradients, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
    }
}

fn flatten_layers(layers: &[Dense]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend_from_slice(&l.weights);
        out.extend_from_slice(&l.bias);
    }
    out
}

impl AudioHead {
    /// Zero-initialized head with layer widths `dims = [D, hidden…, K]`.
    pub fn zeros(dims: &[usize], mode: HeadMode) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidValue(format!("invalid audio head dimensions {dims:?}")));
        }
        let layers = dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Ok(Self { layers, mode })
    }

    /// Uniform Glorot initialization of the weights; biases start at zero.
    pub fn random(dims: &[usize], mode: HeadMode, rng: &mut impl Rng) -> Result<Self> {
        let mut head = Self::zeros(dims, mode)?;
        for l in &mut head.layers {
            let bound = (6.0 / (l.inputs + l.outputs) as f64).sqrt();
            for w in &mut l.weights {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(head)
    }

    pub fn from_layers(layers: Vec<Dense>, mode: HeadMode) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidValue("audio head needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::DimensionMismatch {
                    context: "audio head layer parameters",
                    expected: l.inputs * l.outputs + l.outputs,
                    found: l.weights.len() + l.bias.len(),
                });
            }
            if i > 0 && layers[i - 1].outputs != l.inputs {
                return Err(Error::DimensionMismatch {
                    context: "audio head layer chain",
                    expected: layers[i - 1].outputs,
                    found: l.inputs,
                });
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::InvalidValue("audio head parameters must be finite".into()));
            }
        }
        Ok(Self { layers, mode })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn mode(&self) -> HeadMode {
        self.mode
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn num_categories(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.outputs));
        d
    }

    pub fn params(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                context: "audio head parameter vector",
                expected: self.num_params(),
                found: params.len(),
            });
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// Gradient step `θ ← θ − lr·g`.
    pub fn apply_gradient(&mut self, grads: &HeadGradients, lr: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, d) in l.weights.iter_mut().zip(&g.weights) {
                *w -= lr * d;
            }
            for (b, d) in l.bias.iter_mut().zip(&g.bias) {
                *b -= lr * d;
            }
        }
    }

    pub fn zero_gradients(&self) -> HeadGradients {
        HeadGradients { layers: self.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect() }
    }

    pub fn forward(&self, emb: &AudioEmbedding) -> Result<AudioDistribution> {
        let cache = self.forward_with_cache(emb)?;
        Ok(AudioDistribution { probs: cache.probs, mode: self.mode })
    }

    pub fn forward_with_cache(&self, emb: &AudioEmbedding) -> Result<ForwardCache> {
        if emb.dim() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "audio embedding",
                expected: self.input_dim(),
                found: emb.dim(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = emb.0.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let z = l.apply(&x);
            inputs.push(std::mem::take(&mut x));
            x = if i == last { z } else { z.into_iter().map(f64::tanh).collect() };
        }
        let probs = match self.mode {
            HeadMode::Simplex => softmax(&x),
            HeadMode::Independent => x.iter().map(|&z| sigmoid(z)).collect(),
        };
        Ok(ForwardCache { inputs, probs })
    }

    /// Vector-Jacobian product: gradient of `Σ_k upstream[k]·probs[k]` with
    /// respect to every head parameter.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<HeadGradients> {
        let k = self.num_categories();
        if upstream.len() != k {
            return Err(Error::DimensionMismatch { context: "audio upstream gradient", expected: k, found: upstream.len() });
        }
        let p = &cache.probs;
        let mut delta: Vec<f64> = match self.mode {
            HeadMode::Simplex => {
                let dot: f64 = p.iter().zip(upstream).map(|(a, b)| a * b).sum();
                p.iter().zip(upstream).map(|(pk, gk)| pk * (gk - dot)).collect()
            }
            HeadMode::Independent => p.iter().zip(upstream).map(|(pk, gk)| gk * pk * (1.0 - pk)).collect(),
        };
        let mut grads = self.zero_gradients();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let x = &cache.inputs[i];
            let g = &mut grads.layers[i];
            for o in 0..l.outputs {
                g.bias[o] = delta[o];
                let row = &mut g.weights[o * l.inputs..(o + 1) * l.inputs];
                for (w, &xi) in row.iter_mut().zip(x) {
                    *w = delta[o] * xi;
                }
            }
            if i > 0 {
                // x = tanh(z) for hidden layers
                delta = (0..l.inputs)
                    .map(|j| {
                        let s: f64 = (0..l.outputs).map(|o| l.weights[o * l.inputs + j] * delta[o]).sum();
                        s * (1.0 - x[j] * x[j])
                    })
                    .collect();
            }
        }
        Ok(grads)
    }
}
