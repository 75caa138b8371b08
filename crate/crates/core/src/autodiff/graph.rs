//! Reverse-mode tape.
//!
//! A [`Graph`] records every primitive applied to its [`Var`]s in creation
//! order, which is already a topological order. [`Graph::backward`] walks the
//! tape once in reverse and accumulates vector-Jacobian products into the
//! leaves. Intermediate gradients live only for the duration of one backward
//! call, so calling it twice accumulates leaf gradients exactly twice.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::linalg::{gemm, MatRef};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{PetsError, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    /// `b` matches the trailing dimensions of `a`.
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchedMatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Softmax(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad_left: usize,
    },
    GroupAvgPool {
        x: Var,
        groups: usize,
    },
    Concat(Vec<Var>),
    SliceTokens {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Transpose12(Var),
    Mean(Var),
    RowGroupMean {
        x: Var,
        group: usize,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
        weights: Option<Vec<f64>>,
        denom: f64,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Tape of recorded primitive applications.
pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
    rng: ChaCha8Rng,
    params: HashMap<ParamId, Var>,
}

impl Graph {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            params: HashMap::new(),
        }
    }

    /// Training-mode graph with a seeded dropout stream.
    pub fn training(seed: u64) -> Self {
        Graph {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Graph::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is accumulated by [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Bind a stored parameter as a gradient-tracked leaf. Repeated binds
    /// within one graph return the same `Var`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.variable(store.value(id).clone());
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Add the gradients of every bound parameter into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (&id, &v) in &self.params {
            if let Some(g) = &self.nodes[v.0].grad {
                for (acc, x) in store.grad_mut(id).iter_mut().zip(g) {
                    *acc += x;
                }
            }
        }
    }

    // ------------------------------------------------------------------
    // elementwise
    // ------------------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Sum of several same-shaped values.
    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var> {
        let (first, rest) = vars
            .split_first()
            .ok_or_else(|| PetsError::InvalidInput("add_n of zero terms".into()))?;
        let mut acc = *first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(PetsError::shape("add_broadcast", sa, sb));
        }
        let bd = self.value(b).data();
        let n = bd.len().max(1);
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bd[i % n])
            .collect();
        let t = Tensor::new(sa.to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::AddBroadcast(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * c).collect())
            .expect("shape preserved");
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| gelu(x)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("shape preserved");
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    /// Inverted dropout. Identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(PetsError::InvalidConfig(format!(
                "dropout rate {p} outside [0, 1)"
            )));
        }
        if !self.training || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(a).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let v = self.value(a);
        let data = zip_map(v.data(), &mask, |x, m| x * m);
        let t = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Dropout { x: a, mask }, rg))
    }

    // ------------------------------------------------------------------
    // products
    // ------------------------------------------------------------------

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(PetsError::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), k, n),
            &mut out,
            0.0,
        );
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    /// `x · w + b` over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sw.len() != 2 || sx.is_empty() || *sx.last().unwrap() != sw[0] {
            return Err(PetsError::shape("linear", &sx, &sw));
        }
        let (din, dout) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(PetsError::shape("linear bias", self.shape(b), &[dout]));
            }
        }
        let m = self.value(x).numel() / din;
        let mut out = vec![0.0; m * dout];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bd);
            }
        }
        gemm(
            MatRef::new(self.value(x).data(), m, din),
            MatRef::new(self.value(w).data(), din, dout),
            &mut out,
            if b.is_some() { 1.0 } else { 0.0 },
        );
        let mut shape = sx;
        *shape.last_mut().unwrap() = dout;
        let t = Tensor::new(shape, out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(t, Op::Linear { x, w, b }, rg))
    }

    /// `[R, M, K] × [R, K, N] → [R, M, N]`, or with `transpose_b`
    /// `[R, M, K] × [R, N, K]ᵀ → [R, M, N]`.
    pub fn batched_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(PetsError::shape("batched_matmul", &sa, &sb));
        }
        let (r, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if kb != k {
            return Err(PetsError::shape("batched_matmul", &sa, &sb));
        }
        let mut out = vec![0.0; r * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..r {
            let am = MatRef::new(&ad[i * m * k..(i + 1) * m * k], m, k);
            let bslice = &bd[i * k * n..(i + 1) * k * n];
            let bm = if transpose_b {
                MatRef::new(bslice, n, k).t()
            } else {
                MatRef::new(bslice, k, n)
            };
            gemm(am, bm, &mut out[i * m * n..(i + 1) * m * n], 0.0);
        }
        let t = Tensor::new(vec![r, m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            t,
            Op::BatchedMatMul {
                a,
                b,
                transpose_b,
            },
            rg,
        ))
    }

    // ------------------------------------------------------------------
    // normalisation
    // ------------------------------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let d = v.last_dim();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(d) {
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let t = Tensor::new(v.shape().to_vec(), data).expect("shape preserved");
        let rg = self.rg(&[a]);
        self.push(t, Op::Softmax(a), rg)
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(PetsError::shape(
                "layer_norm",
                self.shape(x),
                self.shape(gamma),
            ));
        }
        let v = self.value(x);
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let rows = v.numel() / d;
        let mut xhat = vec![0.0; v.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; v.numel()];
        for r in 0..rows {
            let row = &v.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bt[j];
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    // ------------------------------------------------------------------
    // token-axis structure ([R, T, D] tensors)
    // ------------------------------------------------------------------

    /// Convolution along the token axis with "same" zero padding.
    /// `x: [R, T, Cin]`, `w: [k, Cin, Cout]`, `b: [Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sw[1] != sx[2] {
            return Err(PetsError::shape("conv1d", &sx, &sw));
        }
        let (r, t, cin) = (sx[0], sx[1], sx[2]);
        let (k, cout) = (sw[0], sw[2]);
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(PetsError::shape("conv1d bias", self.shape(b), &[cout]));
            }
        }
        let pad_left = (k - 1) / 2;
        let mut out = vec![0.0; r * t * cout];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(bd);
            }
        }
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        for tap in 0..k {
            let Some((t0, t1, s0)) = conv_span(t, tap, pad_left) else {
                continue;
            };
            let n = t1 - t0;
            let wm = MatRef::new(&wd[tap * cin * cout..(tap + 1) * cin * cout], cin, cout);
            for i in 0..r {
                let src = &xd[(i * t + s0) * cin..(i * t + s0 + n) * cin];
                let dst = &mut out[(i * t + t0) * cout..(i * t + t1) * cout];
                gemm(MatRef::new(src, n, cin), wm, dst, 1.0);
            }
        }
        let tns = Tensor::new(vec![r, t, cout], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(tns, Op::Conv1d { x, w, b, pad_left }, rg))
    }

    /// Average the `groups` tokens sharing a position:
    /// `[R, G·T, D] → [R, T, D]`, output token `t` pools `{t, t+T, …}`.
    pub fn group_avg_pool(&mut self, x: Var, groups: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || groups == 0 || s[1] % groups != 0 {
            return Err(PetsError::Shape(format!(
                "group_avg_pool: {s:?} not divisible into {groups} groups"
            )));
        }
        let (r, gt, d) = (s[0], s[1], s[2]);
        let t = gt / groups;
        let xd = self.value(x).data();
        let mut out = vec![0.0; r * t * d];
        let inv = 1.0 / groups as f64;
        for i in 0..r {
            for g in 0..groups {
                let src = &xd[(i * gt + g * t) * d..(i * gt + (g + 1) * t) * d];
                let dst = &mut out[i * t * d..(i + 1) * t * d];
                for (o, v) in dst.iter_mut().zip(src) {
                    *o += v * inv;
                }
            }
        }
        let tns = Tensor::new(vec![r, t, d], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(tns, Op::GroupAvgPool { x, groups }, rg))
    }

    /// Concatenate `[R, Ti, D]` tensors along the token axis.
    pub fn concat_tokens(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| PetsError::InvalidInput("concat of zero tensors".into()))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() != 3 {
            return Err(PetsError::Shape(format!("concat_tokens: rank-3 expected, got {s0:?}")));
        }
        let (r, d) = (s0[0], s0[2]);
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 3 || s[0] != r || s[2] != d {
                return Err(PetsError::shape("concat_tokens", &s0, s));
            }
            total += s[1];
        }
        let mut out = Vec::with_capacity(r * total * d);
        for i in 0..r {
            for &p in parts {
                let v = self.value(p);
                let t = v.shape()[1];
                out.extend_from_slice(&v.data()[i * t * d..(i + 1) * t * d]);
            }
        }
        let tns = Tensor::new(vec![r, total, d], out)?;
        let rg = self.rg(parts);
        Ok(self.push(tns, Op::Concat(parts.to_vec()), rg))
    }

    /// Tokens `start..start+len` of an `[R, T, D]` tensor.
    pub fn slice_tokens(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || start + len > s[1] {
            return Err(PetsError::Shape(format!(
                "slice_tokens: {start}..{} out of range for {s:?}",
                start + len
            )));
        }
        let (r, t, d) = (s[0], s[1], s[2]);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(r * len * d);
        for i in 0..r {
            out.extend_from_slice(&xd[(i * t + start) * d..(i * t + start + len) * d]);
        }
        let tns = Tensor::new(vec![r, len, d], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(tns, Op::SliceTokens { x, start }, rg))
    }

    /// Split along the token axis into pieces of the given lengths.
    pub fn split_tokens(&mut self, x: Var, lens: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(lens.len());
        for &len in lens {
            out.push(self.slice_tokens(x, start, len)?);
            start += len;
        }
        if start != self.shape(x).get(1).copied().unwrap_or(0) {
            return Err(PetsError::Shape(format!(
                "split_tokens: lengths {lens:?} do not cover {:?}",
                self.shape(x)
            )));
        }
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// `[R, T, D] → [R, D, T]`.
    pub fn transpose_tokens(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(PetsError::Shape(format!("transpose_tokens: rank-3 expected, got {s:?}")));
        }
        let out = transpose12(self.value(x).data(), s[0], s[1], s[2]);
        let tns = Tensor::new(vec![s[0], s[2], s[1]], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(tns, Op::Transpose12(x), rg))
    }

    /// `[R, T, D] → [R, T·D]`.
    pub fn flatten_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let r = *s
            .first()
            .ok_or_else(|| PetsError::Shape("flatten of a scalar".into()))?;
        let rest: usize = s[1..].iter().product();
        self.reshape(x, &[r, rest])
    }

    /// Mean over consecutive groups of rows: `[B·G, F] → [B, F]`.
    pub fn row_group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || group == 0 || s[0] % group != 0 {
            return Err(PetsError::Shape(format!(
                "row_group_mean: {s:?} not divisible into groups of {group}"
            )));
        }
        let (rows, f) = (s[0], s[1]);
        let b = rows / group;
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * f];
        let inv = 1.0 / group as f64;
        for (i, row) in xd.chunks(f).enumerate() {
            let dst = &mut out[(i / group) * f..(i / group + 1) * f];
            for (o, v) in dst.iter_mut().zip(row) {
                *o += v * inv;
            }
        }
        let t = Tensor::new(vec![b, f], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::RowGroupMean { x, group }, rg))
    }

    // ------------------------------------------------------------------
    // reductions and losses
    // ------------------------------------------------------------------

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.numel().max(1) as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Mean squared error against a constant target.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        self.weighted_mse(pred, target, None)
    }

    /// Squared error averaged over positions with nonzero weight, weighted
    /// by `weights` (e.g. a missing-value mask).
    pub fn weighted_mse(
        &mut self,
        pred: Var,
        target: &Tensor,
        weights: Option<&[f64]>,
    ) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(PetsError::shape("mse_loss", self.shape(pred), target.shape()));
        }
        let p = self.value(pred).data();
        if let Some(w) = weights {
            if w.len() != p.len() {
                return Err(PetsError::Shape(format!(
                    "mse_loss weights: {} values for {} predictions",
                    w.len(),
                    p.len()
                )));
            }
        }
        let denom = match weights {
            Some(w) => w.iter().sum::<f64>(),
            None => p.len() as f64,
        };
        if denom <= 0.0 {
            return Err(PetsError::InvalidInput("mse_loss over zero positions".into()));
        }
        let mut s = 0.0;
        for (i, (a, b)) in p.iter().zip(target.data()).enumerate() {
            let wi = weights.map_or(1.0, |w| w[i]);
            s += wi * (a - b) * (a - b);
        }
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(s / denom),
            Op::Mse {
                pred,
                target: target.data().to_vec(),
                weights: weights.map(|w| w.to_vec()),
                denom,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(PetsError::Shape(format!(
                "cross_entropy: logits {s:?} for {} labels",
                labels.len()
            )));
        }
        let c = s[1];
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(PetsError::InvalidInput(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &l) in probs.chunks_mut(c).zip(labels) {
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
            loss -= row[l].ln();
        }
        loss /= labels.len() as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(PetsError::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // backward
    // ------------------------------------------------------------------

    /// Accumulate `d loss / d leaf` into every gradient-tracked leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(PetsError::InvalidInput(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.vjp(i, &g, &mut grads);
        }
        Ok(())
    }

    fn vjp(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::AddBroadcast(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    let n = d.len().max(1);
                    for (k, y) in g.iter().enumerate() {
                        d[k % n] += y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * bv[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * av[k];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |d| {
                d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)
            }),
            Op::Gelu(a) => {
                let av = val(*a);
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * gelu_grad(av[k]);
                    }
                });
            }
            Op::Dropout { x, mask } => acc(*x, &mut |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * mask[k];
                }
            }),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let gm = MatRef::new(g, m, n);
                acc(*a, &mut |d| gemm(gm, MatRef::new(val(*b), k, n).t(), d, 1.0));
                acc(*b, &mut |d| gemm(MatRef::new(val(*a), m, k).t(), gm, d, 1.0));
            }
            Op::Linear { x, w, b } => {
                let sw = self.nodes[w.0].value.shape();
                let (din, dout) = (sw[0], sw[1]);
                let m = g.len() / dout;
                let gm = MatRef::new(g, m, dout);
                acc(*x, &mut |d| gemm(gm, MatRef::new(val(*w), din, dout).t(), d, 1.0));
                acc(*w, &mut |d| gemm(MatRef::new(val(*x), m, din).t(), gm, d, 1.0));
                if let Some(b) = b {
                    acc(*b, &mut |d| {
                        for row in g.chunks(dout) {
                            add_into(d, row);
                        }
                    });
                }
            }
            Op::BatchedMatMul { a, b, transpose_b } => {
                let sa = self.nodes[a.0].value.shape();
                let (r, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for i in 0..r {
                        let gm = MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n);
                        let bs = &bv[i * k * n..(i + 1) * k * n];
                        // dA = dC · Bᵀ, with B stored [K,N] or [N,K]
                        let bm = if *transpose_b {
                            MatRef::new(bs, n, k)
                        } else {
                            MatRef::new(bs, k, n).t()
                        };
                        gemm(gm, bm, &mut d[i * m * k..(i + 1) * m * k], 1.0);
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..r {
                        let gm = MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n);
                        let am = MatRef::new(&av[i * m * k..(i + 1) * m * k], m, k);
                        let dst = &mut d[i * k * n..(i + 1) * k * n];
                        if *transpose_b {
                            // B is [N,K]: dB = dCᵀ · A
                            gemm(gm.t(), am, dst, 1.0);
                        } else {
                            gemm(am.t(), gm, dst, 1.0);
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let dlen = node.value.last_dim();
                acc(*a, &mut |d| {
                    for ((dr, yr), gr) in d.chunks_mut(dlen).zip(y.chunks(dlen)).zip(g.chunks(dlen))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..dlen {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let dlen = self.nodes[gamma.0].value.numel();
                let gv = val(*gamma);
                acc(*x, &mut |d| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * dlen..(r + 1) * dlen];
                        let hr = &xhat[r * dlen..(r + 1) * dlen];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..dlen {
                            let dh = gr[j] * gv[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        let nf = dlen as f64;
                        for j in 0..dlen {
                            let dh = gr[j] * gv[j];
                            d[r * dlen + j] += is * (dh - s1 / nf - hr[j] * s2 / nf);
                        }
                    }
                });
                acc(*gamma, &mut |d| {
                    for (k, y) in g.iter().enumerate() {
                        d[k % dlen] += y * xhat[k];
                    }
                });
                acc(*beta, &mut |d| {
                    for row in g.chunks(dlen) {
                        add_into(d, row);
                    }
                });
            }
            Op::Conv1d { x, w, b, pad_left } => {
                let sx = self.nodes[x.0].value.shape();
                let sw = self.nodes[w.0].value.shape();
                let (r, t, cin) = (sx[0], sx[1], sx[2]);
                let (k, cout) = (sw[0], sw[2]);
                let (xv, wv) = (val(*x), val(*w));
                acc(*x, &mut |d| {
                    for tap in 0..k {
                        let Some((t0, t1, s0)) = conv_span(t, tap, *pad_left) else {
                            continue;
                        };
                        let n = t1 - t0;
                        let wm = MatRef::new(&wv[tap * cin * cout..(tap + 1) * cin * cout], cin, cout);
                        for i in 0..r {
                            let gsrc = &g[(i * t + t0) * cout..(i * t + t1) * cout];
                            let dst = &mut d[(i * t + s0) * cin..(i * t + s0 + n) * cin];
                            gemm(MatRef::new(gsrc, n, cout), wm.t(), dst, 1.0);
                        }
                    }
                });
                acc(*w, &mut |d| {
                    for tap in 0..k {
                        let Some((t0, t1, s0)) = conv_span(t, tap, *pad_left) else {
                            continue;
                        };
                        let n = t1 - t0;
                        let dst = &mut d[tap * cin * cout..(tap + 1) * cin * cout];
                        for i in 0..r {
                            let xs = &xv[(i * t + s0) * cin..(i * t + s0 + n) * cin];
                            let gs = &g[(i * t + t0) * cout..(i * t + t1) * cout];
                            gemm(MatRef::new(xs, n, cin).t(), MatRef::new(gs, n, cout), dst, 1.0);
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |d| {
                        for row in g.chunks(cout) {
                            add_into(d, row);
                        }
                    });
                }
            }
            Op::GroupAvgPool { x, groups } => {
                let s = node.value.shape();
                let (r, t, dd) = (s[0], s[1], s[2]);
                let inv = 1.0 / *groups as f64;
                acc(*x, &mut |d| {
                    for i in 0..r {
                        let gs = &g[i * t * dd..(i + 1) * t * dd];
                        for gg in 0..*groups {
                            let base = (i * groups * t + gg * t) * dd;
                            for (o, y) in d[base..base + t * dd].iter_mut().zip(gs) {
                                *o += y * inv;
                            }
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let s = node.value.shape();
                let (r, total, dd) = (s[0], s[1], s[2]);
                let mut offset = 0;
                for &p in parts {
                    let tp = self.nodes[p.0].value.shape()[1];
                    acc(p, &mut |d| {
                        for i in 0..r {
                            let src = &g[(i * total + offset) * dd..(i * total + offset + tp) * dd];
                            add_into(&mut d[i * tp * dd..(i + 1) * tp * dd], src);
                        }
                    });
                    offset += tp;
                }
            }
            Op::SliceTokens { x, start } => {
                let sx = self.nodes[x.0].value.shape();
                let (r, t, dd) = (sx[0], sx[1], sx[2]);
                let len = node.value.shape()[1];
                acc(*x, &mut |d| {
                    for i in 0..r {
                        let dst = &mut d[(i * t + start) * dd..(i * t + start + len) * dd];
                        add_into(dst, &g[i * len * dd..(i + 1) * len * dd]);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Transpose12(x) => {
                let s = node.value.shape();
                let back = transpose12(g, s[0], s[1], s[2]);
                acc(*x, &mut |d| add_into(d, &back));
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::RowGroupMean { x, group } => {
                let f = node.value.shape()[1];
                let inv = 1.0 / *group as f64;
                acc(*x, &mut |d| {
                    for (i, row) in d.chunks_mut(f).enumerate() {
                        let src = &g[(i / group) * f..(i / group + 1) * f];
                        row.iter_mut().zip(src).for_each(|(o, y)| *o += y * inv);
                    }
                });
            }
            Op::Mse {
                pred,
                target,
                weights,
                denom,
            } => {
                let p = val(*pred);
                acc(*pred, &mut |d| {
                    for k in 0..d.len() {
                        let wk = weights.as_ref().map_or(1.0, |w| w[k]);
                        d[k] += g[0] * 2.0 * wk * (p[k] - target[k]) / denom;
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.nodes[logits.0].value.shape()[1];
                let nb = labels.len() as f64;
                acc(*logits, &mut |d| {
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..c {
                            let y = if j == l { 1.0 } else { 0.0 };
                            d[r * c + j] += g[0] * (probs[r * c + j] - y) / nb;
                        }
                    }
                });
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

/// Output rows `t0..t1` of a same-padded convolution tap read input rows
/// starting at `s0`. `None` when the tap never overlaps the sequence.
fn conv_span(t: usize, tap: usize, pad_left: usize) -> Option<(usize, usize, usize)> {
    // output row o reads input row o + tap - pad_left
    let t0 = pad_left.saturating_sub(tap);
    let t1 = (t + pad_left).saturating_sub(tap).min(t);
    if t0 >= t1 {
        return None;
    }
    Some((t0, t1, t0 + tap - pad_left))
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

fn transpose12(x: &[f64], r: usize, t: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..r {
        for a in 0..t {
            for b in 0..d {
                out[(i * d + b) * t + a] = x[(i * t + a) * d + b];
            }
        }
    }
    out
}
