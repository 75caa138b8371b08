//! Channel-independent reshaping and patch-token embedding.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::Linear;
use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{PetsError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchConfig {
    pub patch_len: usize,
    pub token_dim: usize,
    /// Additive learnable position table.
    pub position: bool,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            patch_len: 8,
            token_dim: 32,
            position: true,
        }
    }
}

impl PatchConfig {
    /// Number of tokens `P_L` for a series of length `len`.
    pub fn tokens(&self, len: usize) -> Result<usize> {
        if self.patch_len == 0 || self.token_dim == 0 {
            return Err(PetsError::InvalidConfig(
                "patch_len and token_dim must be positive".into(),
            ));
        }
        if len % self.patch_len != 0 {
            return Err(PetsError::InvalidConfig(format!(
                "patch length {} does not divide series length {len}",
                self.patch_len
            )));
        }
        Ok(len / self.patch_len)
    }
}

/// `[B, d, L] → [B·d, L]`; row `b·d + c` holds `x[b, c, :]`.
pub fn channel_flatten(x: &Tensor) -> Result<Tensor> {
    match x.shape() {
        &[b, d, l] => x.clone().reshape(&[b * d, l]),
        s => Err(PetsError::Shape(format!("channel_flatten: expected [B, d, L], got {s:?}"))),
    }
}

/// Inverse of [`channel_flatten`].
pub fn channel_unflatten(x: &Tensor, channels: usize) -> Result<Tensor> {
    match x.shape() {
        &[r, l] if channels > 0 && r % channels == 0 => {
            x.clone().reshape(&[r / channels, channels, l])
        }
        s => Err(PetsError::Shape(format!(
            "channel_unflatten: {s:?} does not fold into {channels} channels"
        ))),
    }
}

/// Non-overlapping patch projection with an optional position table.
#[derive(Clone, Debug)]
pub struct PatchEmbedding {
    pub proj: Linear,
    pub position: Option<ParamId>,
    patch_len: usize,
    tokens: usize,
}

impl PatchEmbedding {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &PatchConfig,
        len: usize,
    ) -> Result<Self> {
        let tokens = cfg.tokens(len)?;
        let proj = Linear::new(store, rng, &format!("{name}.proj"), cfg.patch_len, cfg.token_dim);
        let position = cfg.position.then(|| {
            store.add(
                format!("{name}.position"),
                Tensor::zeros(&[tokens, cfg.token_dim]),
            )
        });
        Ok(PatchEmbedding {
            proj,
            position,
            patch_len: cfg.patch_len,
            tokens,
        })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// Closed-form parameter count: `p·P_d + P_d (+ P_L·P_d with positions)`.
    pub fn param_count(cfg: &PatchConfig, len: usize) -> Result<usize> {
        let tokens = cfg.tokens(len)?;
        let d = cfg.token_dim;
        Ok(cfg.patch_len * d + d + if cfg.position { tokens * d } else { 0 })
    }

    /// `[R, L] → [R, P_L, P_d]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.tokens * self.patch_len {
            return Err(PetsError::Shape(format!(
                "patch_embed: expected [R, {}], got {s:?}",
                self.tokens * self.patch_len
            )));
        }
        let patches = g.reshape(x, &[s[0], self.tokens, self.patch_len])?;
        let tokens = self.proj.forward(g, store, patches)?;
        match self.position {
            Some(id) => {
                let pos = g.param(store, id);
                g.add_broadcast(tokens, pos)
            }
            None => Ok(tokens),
        }
    }
}
