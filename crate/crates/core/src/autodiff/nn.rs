//! Parameterised building blocks composed from tape primitives.

use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{glorot, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, din: usize, dout: usize) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), glorot(rng, &[din, dout], din, dout)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dout])),
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, din: usize, dout: usize) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), Tensor::zeros(&[din, dout])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dout])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, Some(b))
    }
}

/// Token-axis convolution with same padding; weight is `[k, cin, cout]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        kernel: usize,
        cin: usize,
        cout: usize,
    ) -> Self {
        Conv1d {
            weight: store.add(
                format!("{name}.weight"),
                glorot(rng, &[kernel, cin, cout], kernel * cin, cout),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
            kernel,
        }
    }

    /// 1×1 convolution whose weights and bias start at exactly zero.
    pub fn zero_1x1(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Self {
        Conv1d {
            weight: store.add(format!("{name}.weight"), Tensor::zeros(&[1, cin, cout])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
            kernel: 1,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv1d(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Single-head scaled dot-product self-attention over the token axis.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    dim: usize,
}

/// Output of [`SelfAttention::forward`]; `weights` is `[R, T, T]`, each row
/// a probability distribution over attended tokens.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub output: Var,
    pub weights: Var,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize) -> Self {
        SelfAttention {
            query: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            key: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            value: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            out: Linear::new(store, rng, &format!("{name}.o"), dim, dim),
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Attended> {
        let q = self.query.forward(g, store, x)?;
        let k = self.key.forward(g, store, x)?;
        let v = self.value.forward(g, store, x)?;
        let scores = g.batched_matmul(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (self.dim as f64).sqrt());
        let weights = g.softmax(scores);
        let mixed = g.batched_matmul(weights, v, false)?;
        let output = self.out.forward(g, store, mixed)?;
        Ok(Attended { output, weights })
    }
}

/// Linear → GELU → dropout → linear.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub dropout: f64,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        hidden: usize,
        dropout: f64,
    ) -> Self {
        FeedForward {
            up: Linear::new(store, rng, &format!("{name}.up"), dim, hidden),
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, dim),
            dropout,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.gelu(h);
        let h = g.dropout(h, self.dropout)?;
        self.down.forward(g, store, h)
    }
}
