//! Tape of recorded operations and the reverse sweep over it.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order; `backward` walks it in exact reverse. Every reduction
//! runs in a fixed index order, which keeps results bit-reproducible.

use crate::real::gemm;
use crate::{NumericsError, Real, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const MASK_FILL: f64 = -1e30;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchedMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Sum { x: Var },
    Gather { table: Var, ids: Vec<usize> },
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { x: Var, tanh: Vec<T> },
    CausalMask { x: Var, len: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T> },
    SplitHeads { x: Var, layout: HeadLayout },
    MergeHeads { x: Var, layout: HeadLayout },
    Rotary { x: Var, len: usize, head_dim: usize, cos: Vec<T>, sin: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchedMatMul { .. } => "batched_matmul",
            Op::Add { .. } => "add",
            Op::AddBias { .. } => "add_bias",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::Gather { .. } => "embedding_gather",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::CausalMask { .. } => "causal_mask",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::Rotary { .. } => "rotary",
        }
    }
}

/// Geometry of a multi-head view: rows are `batch * len` token positions,
/// `cols` is the width of the source matrix, and `offset` the first column
/// of the selected `heads * head_dim` block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadLayout {
    pub batch: usize,
    pub len: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub cols: usize,
    pub offset: usize,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-use tape. Build one per forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> NumericsError {
    NumericsError::Shape { op, detail }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), check_finite: true }
    }

    /// Disable the per-op NaN/Inf scan (it is on by default).
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var, NumericsError> {
        if self.check_finite && value.data().iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { op: op.name(), phase: "forward" });
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a (..., k) @ b (k, n) -> (..., n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} @ {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).len() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let mut shape = sa.clone();
        *shape.last_mut().expect("non-empty") = n;
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, m, k, n }, rg)
    }

    /// `a (B, m, k) @ b (B, k, n)`, or `@ b^T` with `b (B, n, k)` when `trans_b`.
    pub fn batched_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0];
        let (batch, m, k) = if ok { (sa[0], sa[1], sa[2]) } else { (0, 0, 0) };
        let (kb, n) = if trans_b && ok { (sb[2], sb[1]) } else if ok { (sb[1], sb[2]) } else { (0, 0) };
        if !ok || kb != k {
            return Err(shape_err(
                "batched_matmul",
                format!("{sa:?} @ {sb:?}{}", if trans_b { "^T" } else { "" }),
            ));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    false,
                    &bd[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::BatchedMatMul { a, b, batch, m, k, n, trans_b },
            rg,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", format!("{:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let out: Vec<T> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(self.shape(a).to_vec(), out)?, Op::Add { a, b }, rg)
    }

    /// Broadcast-add a vector along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return Err(shape_err("add_bias", format!("{:?} + {:?}", self.shape(x), self.shape(bias))));
        }
        let bd = self.value(bias).data();
        let out: Vec<T> =
            self.value(x).data().iter().enumerate().map(|(i, &v)| v + bd[i % n]).collect();
        let rg = self.rg(x) || self.rg(bias);
        self.push(Tensor::new(self.shape(x).to_vec(), out)?, Op::AddBias { x, bias }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", format!("{:?} * {:?}", self.shape(a), self.shape(b))));
        }
        let out: Vec<T> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(self.shape(a).to_vec(), out)?, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, NumericsError> {
        let factor = T::from_f64_lossy(factor);
        let out = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, factor }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = self.value(x).data().iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Rows of `table (V, D)` selected by `ids`, giving `(ids.len(), D)`.
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(shape_err("embedding_gather", format!("table {st:?}")));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(shape_err("embedding_gather", format!("id {bad} out of range for table {st:?}")));
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        self.push(Tensor::new(vec![ids.len(), d], out)?, Op::Gather { table, ids: ids.to_vec() }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, NumericsError> {
        let n = self.value(x).last_dim();
        if n == 0 {
            return Err(shape_err("softmax", format!("{:?}", self.shape(x))));
        }
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(self.shape(x).to_vec(), out)?, Op::Softmax { x }, rg)
    }

    /// Normalize over the last axis, then apply `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NumericsError> {
        let n = self.value(x).last_dim();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(shape_err(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", self.shape(x), self.shape(gamma), self.shape(beta)),
            ));
        }
        let eps = T::from_f64_lossy(LN_EPS);
        let nf = T::from_usize(n).expect("row width");
        let xd = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xd.len() / n;
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / nf;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / nf;
            let rs = (var + eps).sqrt().recip();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(Tensor::new(self.shape(x).to_vec(), out)?, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (c, a, half) = (T::from_f64_lossy(GELU_C), T::from_f64_lossy(GELU_A), T::from_f64_lossy(0.5));
        let xv = self.value(x);
        let two = T::one() + T::one();
        // tanh(u) = 1 - 2 / (1 + e^(2u)), cheaper than a libm tanh call.
        let tanh: Vec<T> = xv.data().iter().map(|&v| T::one() - two / (T::one() + (two * c * (v + a * v * v * v)).exp())).collect();
        let out: Vec<T> = xv.data().iter().zip(&tanh).map(|(&v, &t)| half * v * (T::one() + t)).collect();
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        self.push(out, Op::Gelu { x, tanh }, rg)
    }

    /// Fill positions above the diagonal of each trailing `(len, len)` block
    /// with a large negative value so a following softmax ignores them.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return Err(shape_err("causal_mask", format!("{s:?}")));
        }
        let len = s[s.len() - 1];
        let fill = T::from_f64_lossy(MASK_FILL);
        let mut out = self.value(x).data().to_vec();
        for block in out.chunks_mut(len * len) {
            for i in 0..len {
                for j in i + 1..len {
                    block[i * len + j] = fill;
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(s, out)?, Op::CausalMask { x, len }, rg)
    }

    /// Mean token cross-entropy over positions where `mask` is set.
    /// An all-false mask gives loss 0 and zero gradients.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var, NumericsError> {
        let count = mask.iter().filter(|&&m| m).count();
        let w = if count == 0 { 0.0 } else { 1.0 / count as f64 };
        let weights: Vec<f64> = mask.iter().map(|&m| if m { w } else { 0.0 }).collect();
        self.cross_entropy_weighted(logits, targets, &weights)
    }

    /// `sum_i weights[i] * CE(logits[i], targets[i])`; rows with zero weight
    /// are skipped entirely.
    pub fn cross_entropy_weighted(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var, NumericsError> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || targets.len() != s[0] || weights.len() != s[0] {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {s:?}, {} targets, {} weights", targets.len(), weights.len()),
            ));
        }
        let v = s[1];
        if let Some(&bad) = targets.iter().zip(weights).find(|(&t, &w)| w != 0.0 && t >= v).map(|(t, _)| t) {
            return Err(shape_err("cross_entropy", format!("target {bad} out of range for {v} classes")));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![T::zero(); ld.len()];
        let mut loss = T::zero();
        let weights_t: Vec<T> = weights.iter().map(|&w| T::from_f64_lossy(w)).collect();
        for (i, &w) in weights_t.iter().enumerate() {
            if w == T::zero() {
                continue;
            }
            let row = &ld[i * v..(i + 1) * v];
            let p = &mut probs[i * v..(i + 1) * v];
            p.copy_from_slice(row);
            let max = p.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut z = T::zero();
            for e in p.iter_mut() {
                *e = (*e - max).exp();
                z = z + *e;
            }
            for e in p.iter_mut() {
                *e = *e / z;
            }
            let lse = max + z.ln();
            loss = loss + w * (lse - row[targets[i]]);
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights_t, probs },
            rg,
        )
    }

    /// Per-row losses `-ln p[target]` of a cross-entropy node (0 for rows
    /// with zero weight), or `None` if `v` is not a cross-entropy node.
    pub fn cross_entropy_rows(&self, v: Var) -> Option<Vec<T>> {
        let Op::CrossEntropy { logits, targets, weights, probs } = &self.nodes[v.0].op else {
            return None;
        };
        let n = self.value(*logits).last_dim();
        Some(
            targets
                .iter()
                .zip(weights)
                .enumerate()
                .map(|(i, (&t, &w))| if w == T::zero() { T::zero() } else { -probs[i * n + t].max(T::min_positive_value()).ln() })
                .collect(),
        )
    }

    /// View columns `offset .. offset + heads*head_dim` of `x (batch*len, cols)`
    /// as `(batch*heads, len, head_dim)`.
    pub fn split_heads(&mut self, x: Var, layout: HeadLayout) -> Result<Var, NumericsError> {
        let HeadLayout { batch, len, heads, head_dim, cols, offset } = layout;
        if self.shape(x) != [batch * len, cols] || offset + heads * head_dim > cols {
            return Err(shape_err("split_heads", format!("{:?} with {layout:?}", self.shape(x))));
        }
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); batch * heads * len * head_dim];
        for b in 0..batch {
            for h in 0..heads {
                for l in 0..len {
                    let src = (b * len + l) * cols + offset + h * head_dim;
                    let dst = ((b * heads + h) * len + l) * head_dim;
                    out[dst..dst + head_dim].copy_from_slice(&xd[src..src + head_dim]);
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![batch * heads, len, head_dim], out)?, Op::SplitHeads { x, layout }, rg)
    }

    /// Inverse of `split_heads` into a fresh `(batch*len, heads*head_dim)` matrix.
    pub fn merge_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var, NumericsError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[0] != batch * heads {
            return Err(shape_err("merge_heads", format!("{s:?} with batch {batch}, heads {heads}")));
        }
        let (len, head_dim) = (s[1], s[2]);
        let cols = heads * head_dim;
        let layout = HeadLayout { batch, len, heads, head_dim, cols, offset: 0 };
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); batch * len * cols];
        for b in 0..batch {
            for h in 0..heads {
                for l in 0..len {
                    let src = ((b * heads + h) * len + l) * head_dim;
                    let dst = (b * len + l) * cols + h * head_dim;
                    out[dst..dst + head_dim].copy_from_slice(&xd[src..src + head_dim]);
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![batch * len, cols], out)?, Op::MergeHeads { x, layout }, rg)
    }

    /// Rotary position embedding on `(batch*heads, len, head_dim)`; pairs
    /// dimension `e` with `e + head_dim/2` and rotates by `pos * base^(-2e/head_dim)`.
    pub fn rotary(&mut self, x: Var, base: f64) -> Result<Var, NumericsError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || !s[2].is_multiple_of(2) {
            return Err(shape_err("rotary", format!("{s:?}")));
        }
        let (len, head_dim) = (s[1], s[2]);
        let half = head_dim / 2;
        let mut cos = vec![T::zero(); len * half];
        let mut sin = vec![T::zero(); len * half];
        for p in 0..len {
            for e in 0..half {
                let theta = p as f64 * base.powf(-2.0 * e as f64 / head_dim as f64);
                cos[p * half + e] = T::from_f64_lossy(theta.cos());
                sin[p * half + e] = T::from_f64_lossy(theta.sin());
            }
        }
        let mut out = self.value(x).data().to_vec();
        rotate(&mut out, len, head_dim, &cos, &sin, false);
        let rg = self.rg(x);
        self.push(Tensor::new(s, out)?, Op::Rotary { x, len, head_dim, cos, sin }, rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        if !self.value(loss).shape().is_empty() && self.value(loss).len() != 1 {
            return Err(NumericsError::NonScalarLoss { shape: self.shape(loss).to_vec() });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>, op: &'static str) -> Result<(), NumericsError> {
        if !self.rg(v) {
            return Ok(());
        }
        if self.check_finite && delta.iter().any(|x| !x.is_finite()) {
            return Err(NumericsError::NonFinite { op, phase: "backward" });
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(delta) {
                    *e = *e + d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<(), NumericsError> {
        let name = op.name();
        match op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.rg(a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, g, false, self.value(b).data(), true, &mut da, false);
                    self.accumulate(grads, a, da, name)?;
                }
                if self.rg(b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(k, m, n, self.value(a).data(), true, g, false, &mut db, false);
                    self.accumulate(grads, b, db, name)?;
                }
            }
            &Op::BatchedMatMul { a, b, batch, m, k, n, trans_b } => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                if self.rg(a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bd[i * k * n..(i + 1) * k * n];
                        // dA = dC @ B^T, or dC @ B when B was used transposed.
                        gemm(m, n, k, gi, false, bi, !trans_b, &mut da[i * m * k..(i + 1) * m * k], false);
                    }
                    self.accumulate(grads, a, da, name)?;
                }
                if self.rg(b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &ad[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            // B is (n, k): dB = dC^T @ A
                            gemm(n, m, k, gi, true, ai, false, dbi, false);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, dbi, false);
                        }
                    }
                    self.accumulate(grads, b, db, name)?;
                }
            }
            &Op::Add { a, b } => {
                self.accumulate(grads, a, g.to_vec(), name)?;
                self.accumulate(grads, b, g.to_vec(), name)?;
            }
            &Op::AddBias { x, bias } => {
                self.accumulate(grads, x, g.to_vec(), name)?;
                if self.rg(bias) {
                    let n = self.value(bias).len();
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    self.accumulate(grads, bias, db, name)?;
                }
            }
            &Op::Mul { a, b } => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                if self.rg(a) {
                    self.accumulate(grads, a, g.iter().zip(bd).map(|(&gv, &bv)| gv * bv).collect(), name)?;
                }
                if self.rg(b) {
                    self.accumulate(grads, b, g.iter().zip(ad).map(|(&gv, &av)| gv * av).collect(), name)?;
                }
            }
            &Op::Scale { x, factor } => {
                self.accumulate(grads, x, g.iter().map(|&v| v * factor).collect(), name)?;
            }
            &Op::Sum { x } => {
                self.accumulate(grads, x, vec![g[0]; self.value(x).len()], name)?;
            }
            Op::Gather { table, ids } if self.rg(*table) => {
                let d = self.value(*table).last_dim();
                let mut dt = vec![T::zero(); self.value(*table).len()];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] = dt[i * d + j] + g[r * d + j];
                    }
                }
                self.accumulate(grads, *table, dt, name)?;
            }
            Op::Gather { .. } => {}
            &Op::Softmax { x } => {
                let n = out.last_dim();
                let y = out.data();
                let mut dx = vec![T::zero(); y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&yv, &gv)| a + yv * gv);
                    for j in 0..n {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, x, dx, name)?;
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = out.last_dim();
                let nf = T::from_usize(n).expect("row width");
                let gm = self.value(*gamma).data();
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![T::zero(); n];
                    let mut db = vec![T::zero(); n];
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] = dg[j] + gr[j] * hr[j];
                            db[j] = db[j] + gr[j];
                        }
                    }
                    self.accumulate(grads, *gamma, dg, name)?;
                    self.accumulate(grads, *beta, db, name)?;
                }
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, ((dxr, gr), hr)) in dx.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).enumerate() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..n {
                            let dh = gr[j] * gm[j];
                            s1 = s1 + dh;
                            s2 = s2 + dh * hr[j];
                        }
                        let scale = rstd[r] / nf;
                        for j in 0..n {
                            let dh = gr[j] * gm[j];
                            dxr[j] = scale * (nf * dh - s1 - hr[j] * s2);
                        }
                    }
                    self.accumulate(grads, *x, dx, name)?;
                }
            }
            Op::Gelu { x, tanh } => {
                let x = *x;
                let (c, a3, half) = (T::from_f64_lossy(GELU_C), T::from_f64_lossy(3.0 * GELU_A), T::from_f64_lossy(0.5));
                let xd = self.value(x).data();
                let dx = xd
                    .iter()
                    .zip(tanh)
                    .zip(g)
                    .map(|((&v, &t), &gv)| {
                        let d = half * (T::one() + t) + half * v * (T::one() - t * t) * c * (T::one() + a3 * v * v);
                        gv * d
                    })
                    .collect();
                self.accumulate(grads, x, dx, name)?;
            }
            &Op::CausalMask { x, len } => {
                let mut dx = g.to_vec();
                for block in dx.chunks_mut(len * len) {
                    for i in 0..len {
                        for j in i + 1..len {
                            block[i * len + j] = T::zero();
                        }
                    }
                }
                self.accumulate(grads, x, dx, name)?;
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let v = self.value(*logits).last_dim();
                let mut dl = vec![T::zero(); probs.len()];
                for (i, &w) in weights.iter().enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    let scale = g[0] * w;
                    for j in 0..v {
                        dl[i * v + j] = scale * probs[i * v + j];
                    }
                    dl[i * v + targets[i]] = dl[i * v + targets[i]] - scale;
                }
                self.accumulate(grads, *logits, dl, name)?;
            }
            &Op::SplitHeads { x, layout } => {
                let HeadLayout { batch, len, heads, head_dim, cols, offset } = layout;
                let mut dx = vec![T::zero(); batch * len * cols];
                for b in 0..batch {
                    for h in 0..heads {
                        for l in 0..len {
                            let dst = (b * len + l) * cols + offset + h * head_dim;
                            let src = ((b * heads + h) * len + l) * head_dim;
                            dx[dst..dst + head_dim].copy_from_slice(&g[src..src + head_dim]);
                        }
                    }
                }
                self.accumulate(grads, x, dx, name)?;
            }
            &Op::MergeHeads { x, layout } => {
                let HeadLayout { batch, len, heads, head_dim, cols, .. } = layout;
                let mut dx = vec![T::zero(); batch * heads * len * head_dim];
                for b in 0..batch {
                    for h in 0..heads {
                        for l in 0..len {
                            let dst = ((b * heads + h) * len + l) * head_dim;
                            let src = (b * len + l) * cols + h * head_dim;
                            dx[dst..dst + head_dim].copy_from_slice(&g[src..src + head_dim]);
                        }
                    }
                }
                self.accumulate(grads, x, dx, name)?;
            }
            Op::Rotary { x, len, head_dim, cos, sin } => {
                let mut dx = g.to_vec();
                rotate(&mut dx, *len, *head_dim, cos, sin, true);
                self.accumulate(grads, *x, dx, name)?;
            }
        }
        Ok(())
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut z = T::zero();
    for e in row.iter_mut() {
        *e = (*e - max).exp();
        z = z + *e;
    }
    for e in row.iter_mut() {
        *e = *e / z;
    }
}

fn rotate<T: Real>(data: &mut [T], len: usize, head_dim: usize, cos: &[T], sin: &[T], inverse: bool) {
    let half = head_dim / 2;
    for (i, row) in data.chunks_mut(head_dim).enumerate() {
        let p = i % len;
        for e in 0..half {
            let (c, s) = (cos[p * half + e], sin[p * half + e]);
            let s = if inverse { -s } else { s };
            let (a, b) = (row[e], row[e + half]);
            row[e] = a * c - b * s;
            row[e + half] = a * s + b * c;
        }
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of `len` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); len])
    }
}
