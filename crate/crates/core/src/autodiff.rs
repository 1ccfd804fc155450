//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in the order it is built, so node ids
//! are already a topological order and [`Graph::backward`] walks them in
//! reverse, visiting each node once. Activations are 2-D `(rows, cols)`;
//! sequence models lay a batch of windows out as rows `b * n_pos + t`.

use crate::attention::{self, AttentionConfig, AttnKind};
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Tensor};

/// Added under the square root of the RMS normalizer.
pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `x · w` per position; `w` is `(k, n)` shared or `(n_pos, k, n)`.
    Linear { x: Var, w: Var, n_pos: usize },
    /// Adds `b` (`(n)` shared or `(n_pos, n)`) to every row.
    AddBias { x: Var, b: Var, n_pos: usize },
    /// `y_t = Σ_{t'<=t} x_{t'} W[t(t+1)/2 + t']`.
    BlockCausal { x: Var, w: Var, n_pos: usize },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Square(Var),
    /// `1 / (1 + x)`
    Recip1p(Var),
    RowSoftmax(Var),
    RmsNorm(Var),
    Concat(Vec<Var>),
    SliceCols { x: Var, start: usize },
    TimeSlice { x: Var, t: usize, n_pos: usize },
    TimeStack(Vec<Var>),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<u32> },
    AttnScores { q: Var, k: Var, cfg: AttentionConfig, n_pos: usize },
    CausalMap { z: Var, kind: AttnKind, n_pos: usize },
    AttnApply { a: Var, v: Var, heads: usize, n_pos: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::shape(op, a.shape(), b.shape())
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass; retained for leaves only.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.val(x).shape(), self.val(w).shape());
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::shape("matmul", xs, ws));
        }
        self.linear(x, w, 1)
    }

    /// Position-wise linear map over rows `b * n_pos + t`.
    pub fn linear(&mut self, x: Var, w: Var, n_pos: usize) -> Result<Var> {
        let (xv, wv) = (self.val(x), self.val(w));
        let k = xv.cols();
        let rows = xv.rows();
        let (k_w, n, per_pos) = match wv.shape() {
            [k, n] => (*k, *n, false),
            [p, k, n] if *p == n_pos => (*k, *n, true),
            _ => return Err(shape_err("linear", xv, wv)),
        };
        if xv.rank() != 2 || k_w != k || n_pos == 0 || rows % n_pos != 0 {
            return Err(shape_err("linear", xv, wv));
        }
        let b = rows / n_pos;
        let mut out = vec![0.0; rows * n];
        let (xd, wd) = (xv.data(), wv.data());
        for p in 0..n_pos {
            let w_off = if per_pos { p * k * n } else { 0 };
            gemm(
                b,
                k,
                n,
                MatRef::rows(&xd[p * k..], n_pos * k),
                MatRef::rows(&wd[w_off..w_off + k * n], n),
                &mut out[p * n..],
                n_pos * n,
                false,
            );
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            Tensor::new(vec![rows, n], out)?,
            Op::Linear { x, w, n_pos },
            rg,
        ))
    }

    pub fn add_bias(&mut self, x: Var, b: Var, n_pos: usize) -> Result<Var> {
        let (xv, bv) = (self.val(x), self.val(b));
        let n = xv.cols();
        let per_pos = match bv.shape() {
            [m] if *m == n => false,
            [p, m] if *p == n_pos && *m == n => true,
            _ => return Err(shape_err("add_bias", xv, bv)),
        };
        if xv.rank() != 2 || n_pos == 0 || !xv.rows().is_multiple_of(n_pos) {
            return Err(shape_err("add_bias", xv, bv));
        }
        let mut out = xv.clone();
        let bd = bv.data();
        for (r, row) in out.data_mut().chunks_mut(n).enumerate() {
            let off = if per_pos { (r % n_pos) * n } else { 0 };
            for (o, bb) in row.iter_mut().zip(&bd[off..off + n]) {
                *o += bb;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddBias { x, b, n_pos }, rg))
    }

    pub fn block_causal(&mut self, x: Var, w: Var, n_pos: usize) -> Result<Var> {
        let (xv, wv) = (self.val(x), self.val(w));
        let d = xv.cols();
        let blocks = n_pos * (n_pos + 1) / 2;
        if xv.rank() != 2 || n_pos == 0 || !xv.rows().is_multiple_of(n_pos) || wv.shape() != [blocks, d, d] {
            return Err(shape_err("block_causal", xv, wv));
        }
        let rows = xv.rows();
        let b = rows / n_pos;
        let mut out = vec![0.0; rows * d];
        let (xd, wd) = (xv.data(), wv.data());
        for t in 0..n_pos {
            for tp in 0..=t {
                let blk = (t * (t + 1) / 2 + tp) * d * d;
                gemm(
                    b,
                    d,
                    d,
                    MatRef::rows(&xd[tp * d..], n_pos * d),
                    MatRef::rows(&wd[blk..blk + d * d], d),
                    &mut out[t * d..],
                    n_pos * d,
                    tp > 0,
                );
            }
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
            Op::BlockCausal { x, w, n_pos },
            rg,
        ))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.val(x).map(f);
        let rg = self.rg(&[x]);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn recip1p(&mut self, x: Var) -> Var {
        self.unary(x, Op::Recip1p(x), |v| 1.0 / (1.0 + v))
    }

    pub fn row_softmax(&mut self, x: Var) -> Var {
        let mut out = self.val(x).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::RowSoftmax(x), rg)
    }

    /// Parameter-free row normalization `x / sqrt(mean(x²) + eps)`.
    pub fn rms_norm(&mut self, x: Var) -> Var {
        let mut out = self.val(x).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            let r = rms(row);
            for v in row {
                *v /= r;
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::RmsNorm(x), rg)
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("concat", &[], &[]))?;
        let rows = self.val(*first).rows();
        let mut cols = 0;
        for &x in xs {
            let v = self.val(x);
            if v.rank() != 2 || v.rows() != rows {
                return Err(shape_err("concat", self.val(*first), v));
            }
            cols += v.cols();
        }
        let mut out = vec![0.0; rows * cols];
        let mut off = 0;
        for &x in xs {
            let v = self.val(x);
            let c = v.cols();
            for (r, src) in v.data().chunks(c).enumerate() {
                out[r * cols + off..r * cols + off + c].copy_from_slice(src);
            }
            off += c;
        }
        let rg = self.rg(xs);
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::Concat(xs.to_vec()), rg))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.val(x);
        if v.rank() != 2 || start >= end || end > v.cols() {
            return Err(Error::shape("slice_cols", v.shape(), &[start, end]));
        }
        let c = v.cols();
        let data: Vec<f64> = v
            .data()
            .chunks(c)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let out = Tensor::new(vec![v.rows(), end - start], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    /// Rows `b * n_pos + t` for every `b`, giving `(batch, cols)`.
    pub fn time_slice(&mut self, x: Var, t: usize, n_pos: usize) -> Result<Var> {
        let v = self.val(x);
        if v.rank() != 2 || t >= n_pos || !v.rows().is_multiple_of(n_pos) {
            return Err(Error::shape("time_slice", v.shape(), &[t, n_pos]));
        }
        let c = v.cols();
        let b = v.rows() / n_pos;
        let mut data = Vec::with_capacity(b * c);
        for bi in 0..b {
            let r = bi * n_pos + t;
            data.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![b, c], data)?, Op::TimeSlice { x, t, n_pos }, rg))
    }

    /// Inverse of [`Graph::time_slice`]: interleaves per-step `(batch, cols)` tensors.
    pub fn time_stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("time_stack", &[], &[]))?;
        let shape = self.val(*first).shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("time_stack", &shape, &[]));
        }
        let (b, c, n_pos) = (shape[0], shape[1], xs.len());
        let mut out = vec![0.0; b * n_pos * c];
        for (t, &x) in xs.iter().enumerate() {
            let v = self.val(x);
            if v.shape() != shape.as_slice() {
                return Err(Error::shape("time_stack", &shape, v.shape()));
            }
            for bi in 0..b {
                let r = bi * n_pos + t;
                out[r * c..(r + 1) * c].copy_from_slice(&v.data()[bi * c..(bi + 1) * c]);
            }
        }
        let rg = self.rg(xs);
        Ok(self.push(Tensor::new(vec![b * n_pos, c], out)?, Op::TimeStack(xs.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean cross-entropy of `logits` `(rows, classes)` against one target per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let v = self.val(logits);
        let c = v.cols();
        if v.rank() != 2 || v.rows() != targets.len() {
            return Err(Error::shape("cross_entropy", v.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= c) {
            return Err(Error::shape("cross_entropy target", &[bad as usize], &[c]));
        }
        let mut total = 0.0;
        for (row, &t) in v.data().chunks(c).zip(targets) {
            total += log_sum_exp(row) - row[t as usize];
        }
        let loss = total / targets.len().max(1) as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head causal scores `(batch, heads, n_pos, n_pos)` from `q`, `k`
    /// shaped `(batch * n_pos, heads * head_dim)`.
    pub fn attn_scores(&mut self, q: Var, k: Var, cfg: &AttentionConfig, n_pos: usize) -> Result<Var> {
        cfg.validate()?;
        let (qv, kv) = (self.val(q), self.val(k));
        let d = cfg.embed_dim();
        if qv.shape() != kv.shape() || qv.rank() != 2 || qv.cols() != d || n_pos == 0 || !qv.rows().is_multiple_of(n_pos) {
            return Err(shape_err("attn_scores", qv, kv));
        }
        let b = qv.rows() / n_pos;
        let (h, hd, t) = (cfg.n_heads, cfg.head_dim, n_pos);
        let mut z = vec![0.0; b * h * t * t];
        for bi in 0..b {
            for head in 0..h {
                let blk = (bi * h + head) * t * t;
                attention::score_block(
                    qv.data(),
                    kv.data(),
                    bi * t * d + head * hd,
                    d,
                    hd,
                    t,
                    cfg.beta,
                    cfg.alibi_slopes[head],
                    &mut z[blk..blk + t * t],
                );
            }
        }
        let rg = self.rg(&[q, k]);
        Ok(self.push(
            Tensor::new(vec![b, h, t, t], z)?,
            Op::AttnScores {
                q,
                k,
                cfg: cfg.clone(),
                n_pos,
            },
            rg,
        ))
    }

    /// Causal DPA or EA normalization of a score tensor from [`Graph::attn_scores`].
    pub fn causal_attention(&mut self, z: Var, kind: AttnKind) -> Result<Var> {
        let zv = self.val(z);
        let t = match zv.shape() {
            [_, _, t, t2] if t == t2 => *t,
            s => return Err(Error::shape("causal_attention", s, &[])),
        };
        let mut a = vec![0.0; zv.len()];
        for (zb, ab) in zv.data().chunks(t * t).zip(a.chunks_mut(t * t)) {
            match kind {
                AttnKind::Dpa => attention::dpa_block(zb, ab, t),
                AttnKind::Ea => attention::ea_block(zb, ab, t),
            }
        }
        let shape = zv.shape().to_vec();
        let rg = self.rg(&[z]);
        Ok(self.push(Tensor::new(shape, a)?, Op::CausalMap { z, kind, n_pos: t }, rg))
    }

    /// Weighted value sums with heads concatenated: `(batch * n_pos, d)`.
    pub fn attn_apply(&mut self, a: Var, v: Var) -> Result<Var> {
        let (av, vv) = (self.val(a), self.val(v));
        let (b, h, t) = match av.shape() {
            [b, h, t, t2] if t == t2 => (*b, *h, *t),
            _ => return Err(shape_err("attn_apply", av, vv)),
        };
        let d = vv.cols();
        if vv.rank() != 2 || vv.rows() != b * t || h == 0 || d % h != 0 {
            return Err(shape_err("attn_apply", av, vv));
        }
        let hd = d / h;
        let mut out = vec![0.0; b * t * d];
        for bi in 0..b {
            for head in 0..h {
                let blk = (bi * h + head) * t * t;
                attention::apply_block(
                    &av.data()[blk..blk + t * t],
                    vv.data(),
                    &mut out,
                    bi * t * d + head * hd,
                    d,
                    hd,
                    t,
                );
            }
        }
        let rg = self.rg(&[a, v]);
        Ok(self.push(
            Tensor::new(vec![b * t, d], out)?,
            Op::AttnApply {
                a,
                v,
                heads: h,
                n_pos: t,
            },
            rg,
        ))
    }

    /// Backpropagates from a scalar `loss`. Gradients of intermediate nodes are
    /// released as soon as they have been propagated; leaves keep theirs.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.val(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let seed = Tensor::full(lv.shape(), 1.0);
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(seed);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &Tensor) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let out = &nodes[i].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let node = &nodes[v.0];
            if !node.requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(node.value.shape()));
            f(slot.data_mut());
        };
        let gd = g.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Linear { x, w, n_pos } => {
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                let (k, n, p_count) = (xv.cols(), out.cols(), *n_pos);
                let b = xv.rows() / p_count;
                let per_pos = wv.rank() == 3;
                acc(*x, &mut |dx| {
                    for p in 0..p_count {
                        let w_off = if per_pos { p * k * n } else { 0 };
                        gemm(
                            b,
                            n,
                            k,
                            MatRef::rows(&gd[p * n..], p_count * n),
                            MatRef::transposed(&wv.data()[w_off..w_off + k * n], n),
                            &mut dx[p * k..],
                            p_count * k,
                            true,
                        );
                    }
                });
                acc(*w, &mut |dw| {
                    for p in 0..p_count {
                        let w_off = if per_pos { p * k * n } else { 0 };
                        gemm(
                            k,
                            b,
                            n,
                            MatRef::transposed(&xv.data()[p * k..], p_count * k),
                            MatRef::rows(&gd[p * n..], p_count * n),
                            &mut dw[w_off..w_off + k * n],
                            n,
                            true,
                        );
                    }
                });
            }
            Op::AddBias { x, b, n_pos } => {
                acc(*x, &mut |dx| add_into(dx, gd));
                let n = out.cols();
                let per_pos = nodes[b.0].value.rank() == 2;
                acc(*b, &mut |db| {
                    for (r, row) in gd.chunks(n).enumerate() {
                        let off = if per_pos { (r % n_pos) * n } else { 0 };
                        add_into(&mut db[off..off + n], row);
                    }
                });
            }
            Op::BlockCausal { x, w, n_pos } => {
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                let d = xv.cols();
                let p_count = *n_pos;
                let b = xv.rows() / p_count;
                acc(*x, &mut |dx| {
                    for t in 0..p_count {
                        for tp in 0..=t {
                            let blk = (t * (t + 1) / 2 + tp) * d * d;
                            gemm(
                                b,
                                d,
                                d,
                                MatRef::rows(&gd[t * d..], p_count * d),
                                MatRef::transposed(&wv.data()[blk..blk + d * d], d),
                                &mut dx[tp * d..],
                                p_count * d,
                                true,
                            );
                        }
                    }
                });
                acc(*w, &mut |dw| {
                    for t in 0..p_count {
                        for tp in 0..=t {
                            let blk = (t * (t + 1) / 2 + tp) * d * d;
                            gemm(
                                d,
                                b,
                                d,
                                MatRef::transposed(&xv.data()[tp * d..], p_count * d),
                                MatRef::rows(&gd[t * d..], p_count * d),
                                &mut dw[blk..blk + d * d],
                                d,
                                true,
                            );
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, gd));
                acc(*b, &mut |db| add_into(db, gd));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |da| {
                    for ((d, &gg), &o) in da.iter_mut().zip(gd).zip(bv) {
                        *d += gg * o;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, &gg), &o) in db.iter_mut().zip(gd).zip(av) {
                        *d += gg * o;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |dx| {
                for (d, &gg) in dx.iter_mut().zip(gd) {
                    *d += gg * c;
                }
            }),
            Op::Relu(x) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |dx| {
                    for ((d, &gg), &v) in dx.iter_mut().zip(gd).zip(xv) {
                        if v > 0.0 {
                            *d += gg;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                acc(*x, &mut |dx| {
                    for ((d, &gg), &s) in dx.iter_mut().zip(gd).zip(y) {
                        *d += gg * s * (1.0 - s);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = out.data();
                acc(*x, &mut |dx| {
                    for ((d, &gg), &s) in dx.iter_mut().zip(gd).zip(y) {
                        *d += gg * (1.0 - s * s);
                    }
                });
            }
            Op::Square(x) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |dx| {
                    for ((d, &gg), &v) in dx.iter_mut().zip(gd).zip(xv) {
                        *d += gg * 2.0 * v;
                    }
                });
            }
            Op::Recip1p(x) => {
                let y = out.data();
                acc(*x, &mut |dx| {
                    for ((d, &gg), &r) in dx.iter_mut().zip(gd).zip(y) {
                        *d -= gg * r * r;
                    }
                });
            }
            Op::RowSoftmax(x) => {
                let c = out.cols();
                let y = out.data();
                acc(*x, &mut |dx| {
                    for ((dr, gr), yr) in dx.chunks_mut(c).zip(gd.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, &gg), &s) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += s * (gg - dot);
                        }
                    }
                });
            }
            Op::RmsNorm(x) => {
                let c = out.cols();
                let (xv, y) = (nodes[x.0].value.data(), out.data());
                acc(*x, &mut |dx| {
                    for (((dr, gr), yr), xr) in dx
                        .chunks_mut(c)
                        .zip(gd.chunks(c))
                        .zip(y.chunks(c))
                        .zip(xv.chunks(c))
                    {
                        let r = rms(xr);
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for ((d, &gg), &s) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += (gg - s * dot) / r;
                        }
                    }
                });
            }
            Op::Concat(xs) => {
                let cols = out.cols();
                let mut off = 0;
                for &x in xs {
                    let c = nodes[x.0].value.cols();
                    acc(x, &mut |dx| {
                        for (r, dr) in dx.chunks_mut(c).enumerate() {
                            add_into(dr, &gd[r * cols + off..r * cols + off + c]);
                        }
                    });
                    off += c;
                }
            }
            Op::SliceCols { x, start } => {
                let c_in = nodes[x.0].value.cols();
                let c = out.cols();
                acc(*x, &mut |dx| {
                    for (dr, gr) in dx.chunks_mut(c_in).zip(gd.chunks(c)) {
                        add_into(&mut dr[*start..*start + c], gr);
                    }
                });
            }
            Op::TimeSlice { x, t, n_pos } => {
                let c = out.cols();
                acc(*x, &mut |dx| {
                    for (bi, gr) in gd.chunks(c).enumerate() {
                        let r = bi * n_pos + t;
                        add_into(&mut dx[r * c..(r + 1) * c], gr);
                    }
                });
            }
            Op::TimeStack(xs) => {
                let c = out.cols();
                let n_pos = xs.len();
                for (t, &x) in xs.iter().enumerate() {
                    acc(x, &mut |dx| {
                        for (bi, dr) in dx.chunks_mut(c).enumerate() {
                            let r = bi * n_pos + t;
                            add_into(dr, &gd[r * c..(r + 1) * c]);
                        }
                    });
                }
            }
            Op::Sum(x) => {
                let s = gd[0];
                acc(*x, &mut |dx| {
                    for d in dx {
                        *d += s;
                    }
                });
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = &nodes[logits.0].value;
                let c = lv.cols();
                let scale = gd[0] / targets.len().max(1) as f64;
                acc(*logits, &mut |dl| {
                    let mut p = vec![0.0; c];
                    for ((dr, lr), &t) in dl.chunks_mut(c).zip(lv.data().chunks(c)).zip(targets) {
                        p.copy_from_slice(lr);
                        softmax_in_place(&mut p);
                        p[t as usize] -= 1.0;
                        for (d, &pp) in dr.iter_mut().zip(&p) {
                            *d += scale * pp;
                        }
                    }
                });
            }
            Op::AttnScores { q, k, cfg, n_pos } => {
                let (qv, kv) = (&nodes[q.0].value, &nodes[k.0].value);
                let d = cfg.embed_dim();
                let t = *n_pos;
                let b = qv.rows() / t;
                let (h, hd) = (cfg.n_heads, cfg.head_dim);
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                for bi in 0..b {
                    for head in 0..h {
                        let blk = (bi * h + head) * t * t;
                        attention::score_block_backward(
                            &gd[blk..blk + t * t],
                            qv.data(),
                            kv.data(),
                            &mut dq,
                            &mut dk,
                            bi * t * d + head * hd,
                            d,
                            hd,
                            t,
                            cfg.beta,
                        );
                    }
                }
                acc(*q, &mut |d| add_into(d, &dq));
                acc(*k, &mut |d| add_into(d, &dk));
            }
            Op::CausalMap { z, kind, n_pos } => {
                let t = *n_pos;
                let zv = nodes[z.0].value.data();
                let a = out.data();
                acc(*z, &mut |dz| {
                    for (((zb, ab), gb), db) in zv
                        .chunks(t * t)
                        .zip(a.chunks(t * t))
                        .zip(gd.chunks(t * t))
                        .zip(dz.chunks_mut(t * t))
                    {
                        match kind {
                            AttnKind::Dpa => attention::dpa_block_backward(ab, gb, db, t),
                            AttnKind::Ea => attention::ea_block_backward(zb, ab, gb, db, t),
                        }
                    }
                });
            }
            Op::AttnApply { a, v, heads, n_pos } => {
                let (av, vv) = (&nodes[a.0].value, &nodes[v.0].value);
                let (t, h) = (*n_pos, *heads);
                let d = vv.cols();
                let hd = d / h;
                let b = vv.rows() / t;
                let mut da = vec![0.0; av.len()];
                let mut dv = vec![0.0; vv.len()];
                for bi in 0..b {
                    for head in 0..h {
                        let blk = (bi * h + head) * t * t;
                        attention::apply_block_backward(
                            &av.data()[blk..blk + t * t],
                            vv.data(),
                            gd,
                            &mut da[blk..blk + t * t],
                            &mut dv,
                            bi * t * d + head * hd,
                            d,
                            hd,
                            t,
                        );
                    }
                }
                acc(*a, &mut |d| add_into(d, &da));
                acc(*v, &mut |d| add_into(d, &dv));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn rms(row: &[f64]) -> f64 {
    let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
    (ms + RMS_EPS).sqrt()
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_uniform() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let y = g.row_softmax(x);
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_classes() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[3, 16]));
        let l = g.cross_entropy(x, &[0, 5, 15]).unwrap();
        assert!((g.value(l).item() - 16f64.ln()).abs() < 1e-12);
        assert!(g.cross_entropy(x, &[0, 16, 1]).is_err());
        assert!(g.cross_entropy(x, &[0]).is_err());
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.input(Tensor::identity(3));
        let x = g.input(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn shape_errors_report_both_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 2]));
        match g.matmul(a, b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("{other:?}"),
        }
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn sum_and_half_square_gradients() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 2], &[1.0, -2.0, 0.5, 3.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);

        let mut g = Graph::new();
        let x = g.param(t(&[2, 2], &[1.0, -2.0, 0.5, 3.0]));
        let sq = g.square(x);
        let s = g.sum(sq);
        let l = g.scale(s, 0.5);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), g.value(x).data());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 2], &[2.0, 3.0]));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let s = g.sum(z);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[5.0, 7.0]);
    }

    #[test]
    fn time_slice_stack_inverse() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[6, 2], |i| i as f64));
        let parts: Vec<Var> = (0..3).map(|t| g.time_slice(x, t, 3).unwrap()).collect();
        assert_eq!(g.value(parts[1]).data(), &[2.0, 3.0, 8.0, 9.0]);
        let y = g.time_stack(&parts).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }
}
