//! Pattern-assisted encoder layers: prompt adapter, rendering, backbone and
//! mixing blocks.
//!
//! Every tensor here is `[R, P_L, P_d]` unless noted; pattern concatenations
//! are `[R, K·P_L, P_d]` with pattern `k` occupying tokens
//! `k·P_L .. (k+1)·P_L`.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::nn::{Conv1d, FeedForward, LayerNorm, Linear, SelfAttention};
use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{PetsError, Result};

/// Sizes shared by every block of a layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FpaDims {
    pub k: usize,
    pub tokens: usize,
    pub dim: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
}

const KERNEL: usize = 3;

/// Pattern that bypasses the zero gate in layer `n` (both 1-based).
pub fn focus_pattern(n: usize, k: usize) -> usize {
    (n - 1) % k + 1
}

fn check_patterns(g: &Graph, patterns: &[Var], dims: &FpaDims, op: &str) -> Result<()> {
    if patterns.len() != dims.k {
        return Err(PetsError::Shape(format!(
            "{op}: expected {} patterns, got {}",
            dims.k,
            patterns.len()
        )));
    }
    for &p in patterns {
        let s = g.shape(p);
        if s.len() != 3 || s[1] != dims.tokens || s[2] != dims.dim {
            return Err(PetsError::Shape(format!(
                "{op}: pattern shape {s:?}, expected [R, {}, {}]",
                dims.tokens, dims.dim
            )));
        }
    }
    Ok(())
}

/// Per-pattern extractor: layer norm, linear, token-mixing conv on the
/// transposed tensor, linear, activation, dropout.
#[derive(Clone, Debug)]
pub struct PatternExtractor {
    pub norm: LayerNorm,
    pub inner: Linear,
    pub token_conv: Conv1d,
    pub outer: Linear,
}

#[derive(Clone, Debug)]
pub struct Ppa {
    pub extractors: Vec<PatternExtractor>,
    pub norm_attn: LayerNorm,
    pub attn: SelfAttention,
    pub norm_conv: LayerNorm,
    pub conv: Conv1d,
    pub resplit: Vec<Conv1d>,
}

impl Ppa {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dims: &FpaDims) -> Self {
        let d = dims.dim;
        let extractors = (1..=dims.k)
            .map(|k| PatternExtractor {
                norm: LayerNorm::new(store, &format!("{name}.pattern{k}.norm"), d),
                inner: Linear::new(store, rng, &format!("{name}.pattern{k}.inner"), d, d),
                token_conv: Conv1d::new(
                    store,
                    rng,
                    &format!("{name}.pattern{k}.token_conv"),
                    KERNEL,
                    dims.tokens,
                    dims.tokens,
                ),
                outer: Linear::new(store, rng, &format!("{name}.pattern{k}.outer"), d, d),
            })
            .collect();
        Ppa {
            extractors,
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), d),
            attn: SelfAttention::new(store, rng, &format!("{name}.attn"), d),
            norm_conv: LayerNorm::new(store, &format!("{name}.norm_conv"), d),
            conv: Conv1d::new(store, rng, &format!("{name}.conv"), KERNEL, d, d),
            resplit: (1..=dims.k)
                .map(|k| Conv1d::new(store, rng, &format!("{name}.resplit{k}"), KERNEL, d, d))
                .collect(),
        }
    }

    /// Returns the refreshed patterns and the `[R, K·P_L, K·P_L]` attention.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        patterns: &[Var],
        dims: &FpaDims,
    ) -> Result<(Vec<Var>, Var)> {
        check_patterns(g, patterns, dims, "ppa")?;
        let mut extracted = Vec::with_capacity(dims.k);
        for (e, ex) in patterns.iter().zip(&self.extractors) {
            let h = ex.norm.forward(g, store, *e)?;
            let h = ex.inner.forward(g, store, h)?;
            let ht = g.transpose_tokens(h)?;
            let ht = ex.token_conv.forward(g, store, ht)?;
            let h = g.transpose_tokens(ht)?;
            let h = ex.outer.forward(g, store, h)?;
            let h = g.gelu(h);
            extracted.push(g.dropout(h, dims.dropout)?);
        }
        let cat = g.concat_tokens(&extracted)?;
        let n = self.norm_attn.forward(g, store, cat)?;
        let att = self.attn.forward(g, store, n)?;
        let cat = g.add(cat, att.output)?;
        let n = self.norm_conv.forward(g, store, cat)?;
        let conv = self.conv.forward(g, store, n)?;
        let cat = g.add(cat, conv)?;
        let segments = g.split_tokens(cat, &vec![dims.tokens; dims.k])?;
        let out = segments
            .into_iter()
            .zip(&self.resplit)
            .map(|(s, c)| c.forward(g, store, s))
            .collect::<Result<Vec<_>>>()?;
        Ok((out, att.weights))
    }
}

#[derive(Clone, Debug)]
pub struct Mpr {
    /// Zero-initialised 1×1 gate per pattern; `None` for the focus pattern.
    pub gates: Vec<Option<Conv1d>>,
    pub norm_attn: LayerNorm,
    pub attn: SelfAttention,
    pub norm_conv: LayerNorm,
    pub conv: Conv1d,
}

impl Mpr {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dims: &FpaDims,
        layer: usize,
    ) -> Self {
        let focus = focus_pattern(layer, dims.k);
        let gates = (1..=dims.k)
            .map(|k| {
                (k != focus).then(|| {
                    Conv1d::zero_1x1(store, &format!("{name}.gate{k}"), dims.dim, dims.dim)
                })
            })
            .collect();
        Mpr {
            gates,
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), dims.dim),
            norm_conv: LayerNorm::new(store, &format!("{name}.norm_conv"), dims.dim),
            attn: SelfAttention::new(store, rng, &format!("{name}.attn"), dims.dim),
            conv: Conv1d::new(store, rng, &format!("{name}.conv"), KERNEL, dims.dim, dims.dim),
        }
    }

    /// Prompt `P = H_prev + Pool(rendered patterns)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        patterns: &[Var],
        hidden_prev: Var,
        dims: &FpaDims,
    ) -> Result<Var> {
        check_patterns(g, patterns, dims, "mpr")?;
        let gated = patterns
            .iter()
            .zip(&self.gates)
            .map(|(p, gate)| match gate {
                Some(c) => c.forward(g, store, *p),
                None => Ok(*p),
            })
            .collect::<Result<Vec<_>>>()?;
        let cat = g.concat_tokens(&gated)?;
        let n = self.norm_attn.forward(g, store, cat)?;
        let att = self.attn.forward(g, store, n)?;
        let cat = g.add(cat, att.output)?;
        let n = self.norm_conv.forward(g, store, cat)?;
        let conv = self.conv.forward(g, store, n)?;
        let cat = g.add(cat, conv)?;
        let pooled = g.group_avg_pool(cat, dims.k)?;
        g.add(hidden_prev, pooled)
    }
}

/// Pre-norm transformer block with an additive prompt.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub norm_attn: LayerNorm,
    pub attn: SelfAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dims: &FpaDims) -> Self {
        Backbone {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), dims.dim),
            attn: SelfAttention::new(store, rng, &format!("{name}.attn"), dims.dim),
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), dims.dim),
            ffn: FeedForward::new(
                store,
                rng,
                &format!("{name}.ffn"),
                dims.dim,
                dims.ffn_hidden,
                dims.dropout,
            ),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, hidden_prev: Var, prompt: Var) -> Result<Var> {
        if g.shape(hidden_prev) != g.shape(prompt) {
            return Err(PetsError::shape("backbone", g.shape(hidden_prev), g.shape(prompt)));
        }
        let n = self.norm_attn.forward(g, store, hidden_prev)?;
        let att = self.attn.forward(g, store, n)?;
        let h = g.add(hidden_prev, att.output)?;
        let n = self.norm_ffn.forward(g, store, h)?;
        let f = self.ffn.forward(g, store, n)?;
        g.add_n(&[prompt, h, f])
    }
}

#[derive(Clone, Debug)]
pub struct Mpm {
    pub convs: Vec<Conv1d>,
    pub norm_attn: LayerNorm,
    pub attn: SelfAttention,
    pub norm_conv: LayerNorm,
    pub conv: Conv1d,
}

impl Mpm {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dims: &FpaDims) -> Self {
        let d = dims.dim;
        Mpm {
            convs: (1..=dims.k)
                .map(|k| Conv1d::new(store, rng, &format!("{name}.conv{k}"), KERNEL, d, d))
                .collect(),
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), d),
            attn: SelfAttention::new(store, rng, &format!("{name}.attn"), d),
            norm_conv: LayerNorm::new(store, &format!("{name}.norm_conv"), d),
            conv: Conv1d::new(store, rng, &format!("{name}.pool_conv"), KERNEL, d, d),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        patterns: &[Var],
        hidden: Var,
        dims: &FpaDims,
    ) -> Result<Vec<Var>> {
        check_patterns(g, patterns, dims, "mpm")?;
        let mut mixed = Vec::with_capacity(dims.k);
        for (e, c) in patterns.iter().zip(&self.convs) {
            let s = g.add(*e, hidden)?;
            mixed.push(c.forward(g, store, s)?);
        }
        let cat = g.concat_tokens(&mixed)?;
        let n = self.norm_attn.forward(g, store, cat)?;
        let att = self.attn.forward(g, store, n)?;
        let cat = g.add(cat, att.output)?;
        let n = self.norm_conv.forward(g, store, cat)?;
        let conv = self.conv.forward(g, store, n)?;
        let pre = g.add(cat, conv)?;
        let pool = g.group_avg_pool(pre, dims.k)?;
        mixed.iter().map(|e| g.add(*e, pool)).collect()
    }
}

/// One composite layer; `index` is 1-based and fixes the focus pattern.
#[derive(Clone, Debug)]
pub struct FpaLayer {
    pub index: usize,
    pub ppa: Ppa,
    pub mpr: Mpr,
    pub backbone: Backbone,
    pub mpm: Mpm,
}

impl FpaLayer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, index: usize, dims: &FpaDims) -> Self {
        let name = format!("fpa{index}");
        FpaLayer {
            index,
            ppa: Ppa::new(store, rng, &format!("{name}.ppa"), dims),
            mpr: Mpr::new(store, rng, &format!("{name}.mpr"), dims, index),
            backbone: Backbone::new(store, rng, &format!("{name}.backbone"), dims),
            mpm: Mpm::new(store, rng, &format!("{name}.mpm"), dims),
        }
    }

    /// Closed-form parameter count of one layer.
    pub fn param_count(dims: &FpaDims) -> usize {
        let (k, t, d, f) = (dims.k, dims.tokens, dims.dim, dims.ffn_hidden);
        let linear = |i: usize, o: usize| i * o + o;
        let conv = |kern: usize, i: usize, o: usize| kern * i * o + o;
        let attn = 4 * linear(d, d);
        let ppa = k * (2 * d + 2 * linear(d, d) + conv(KERNEL, t, t)) + 4 * d + attn + conv(KERNEL, d, d) + k * conv(KERNEL, d, d);
        let mpr = (k - 1) * conv(1, d, d) + 4 * d + attn + conv(KERNEL, d, d);
        let backbone = 2 * 2 * d + attn + linear(d, f) + linear(f, d);
        let mpm = k * conv(KERNEL, d, d) + 4 * d + attn + conv(KERNEL, d, d);
        ppa + mpr + backbone + mpm
    }
}

/// Result of running the whole stack.
#[derive(Clone, Debug)]
pub struct StackOutput {
    /// `H^1 .. H^N`.
    pub hiddens: Vec<Var>,
    pub patterns: Vec<Var>,
    /// Per-layer pattern attention, present when recording was requested.
    pub attention: Vec<Var>,
}

/// Runs PPA → MPR → backbone → MPM for every layer, starting from
/// `H^0 = hidden0`.
pub fn fpa_stack_forward(
    g: &mut Graph,
    store: &ParamStore,
    hidden0: Var,
    patterns0: &[Var],
    layers: &[FpaLayer],
    dims: &FpaDims,
    record_attention: bool,
) -> Result<StackOutput> {
    if layers.is_empty() {
        return Err(PetsError::InvalidConfig("at least one layer is required".into()));
    }
    let mut hidden = hidden0;
    let mut patterns = patterns0.to_vec();
    let mut out = StackOutput {
        hiddens: Vec::with_capacity(layers.len()),
        patterns: Vec::new(),
        attention: Vec::new(),
    };
    for layer in layers {
        let (refreshed, weights) = layer.ppa.forward(g, store, &patterns, dims)?;
        let prompt = layer.mpr.forward(g, store, &refreshed, hidden, dims)?;
        hidden = layer.backbone.forward(g, store, hidden, prompt)?;
        patterns = layer.mpm.forward(g, store, &refreshed, hidden, dims)?;
        out.hiddens.push(hidden);
        if record_attention {
            out.attention.push(weights);
        }
    }
    out.patterns = patterns;
    Ok(out)
}
