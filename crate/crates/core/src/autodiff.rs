//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node appended to a tape, so node
//! order is already a topological order. [`Graph::backward`] sweeps the tape
//! in reverse from a scalar root and adds the resulting gradients into the
//! accumulators of the leaf nodes. Accumulators persist across calls until
//! [`Graph::zero_grad`].
//!
//! Only nodes that transitively depend on a leaf created with
//! [`Graph::param`] take part in the backward sweep; constants are free.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    RmsNorm { x: Var, g: Var, eps: f64 },
    LayerNorm { x: Var, g: Var, b: Var, eps: f64 },
    Conv2d { x: Var, k: Var, pad: usize },
    Reshape(Var),
    SwapLeading(Var),
    Expand(Var),
    ConcatLast(Vec<Var>),
    GatherRows { table: Var, idx: Vec<usize> },
    Sum(Var),
    Mean(Var),
    MaskedMae { pred: Var, dpred: Vec<f64> },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::RmsNorm { .. } => "rms_norm",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::Reshape(_) => "reshape",
            Op::SwapLeading(_) => "swap_leading",
            Op::Expand(_) => "expand",
            Op::ConcatLast(_) => "concat",
            Op::GatherRows { .. } => "gather_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MaskedMae { .. } => "masked_mae",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ScaleBy(a, b) => {
                vec![*a, *b]
            }
            Op::BatchMatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Softmax(a)
            | Op::Reshape(a)
            | Op::SwapLeading(a)
            | Op::Expand(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::RmsNorm { x, g, .. } => vec![*x, *g],
            Op::LayerNorm { x, g, b, .. } => vec![*x, *g, *b],
            Op::Conv2d { x, k, .. } => vec![*x, *k],
            Op::ConcatLast(parts) => parts.clone(),
            Op::GatherRows { table, .. } => vec![*table],
            Op::MaskedMae { pred, .. } => vec![*pred],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    /// Persistent accumulator; only leaves keep one.
    grad: Option<Tensor>,
}

/// Read-only view of a recorded node.
#[derive(Debug, Clone, Copy)]
pub struct DiffNode<'g> {
    pub value: &'g Tensor,
    pub op_tag: &'static str,
    pub grad: Option<&'g Tensor>,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn node(&self, v: Var) -> DiffNode<'_> {
        let n = &self.nodes[v.0];
        DiffNode {
            value: &n.value,
            op_tag: n.op.tag(),
            grad: n.grad.as_ref(),
        }
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    /// First node, in tape order, holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (Var(i), n.op.tag()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- primitives -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// Batched product `[B,m,k]·[B,k,n]`, or `[B,m,k]·[B,n,k]ᵀ` when
    /// `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ba, m, k) = self.value(a).dims3("batch_matmul lhs")?;
        let (bb, r, c) = self.value(b).dims3("batch_matmul rhs")?;
        let (kb, n) = if trans_b { (c, r) } else { (r, c) };
        if ba != bb || k != kb {
            return Err(Error::dim(format!(
                "batch_matmul shapes {:?} and {:?} (trans_b={trans_b}) are incompatible",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ba * m * n);
        for i in 0..ba {
            let ai = &av[i * m * k..(i + 1) * m * k];
            let bi = &bv[i * k * n..(i + 1) * k * n];
            if trans_b {
                out.extend(tensor::gemm_nt(ai, bi, m, k, n));
            } else {
                out.extend(tensor::gemm(ai, bi, m, k, n));
            }
        }
        let v = Tensor::new(&[ba, m, n], out)?;
        Ok(self.push(v, Op::BatchMatMul { a, b, trans_b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    /// Multiply every entry of `a` by the single value held in `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim(format!(
                "scale_by needs a one-element factor, got {:?}",
                self.shape(s)
            )));
        }
        let c = self.value(s).data()[0];
        let v = self.value(a).map(|x| x * c);
        Ok(self.push(v, Op::ScaleBy(a, s)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = tensor::relu(self.value(a));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    /// Softmax over the last axis. Masked entries (zeros of `mask`, which
    /// must match the trailing axes of `a`) get exactly zero weight; fully
    /// masked rows become zero rows and their flat row indices are returned.
    pub fn softmax(&mut self, a: Var, mask: Option<&Tensor>) -> Result<(Var, Vec<usize>)> {
        let (v, empty) = tensor::softmax_rows(self.value(a), mask)?;
        Ok((self.push(v, Op::Softmax(a)), empty))
    }

    pub fn rms_norm(&mut self, x: Var, g: Var, eps: f64) -> Result<Var> {
        let v = tensor::rms_norm(self.value(x), self.value(g), eps)?;
        Ok(self.push(v, Op::RmsNorm { x, g, eps }))
    }

    /// Mean/variance normalization over the last axis with gain and bias.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if self.value(g).len() != n || self.value(b).len() != n {
            return Err(Error::dim(format!(
                "layer_norm gain/bias must have {n} entries, got {:?}/{:?}",
                self.shape(g),
                self.shape(b)
            )));
        }
        let (gv, bv) = (self.value(g).data(), self.value(b).data());
        let mut out = vec![0.0; xv.len()];
        for (src, dst) in xv.data().chunks(n).zip(out.chunks_mut(n)) {
            let (mean, inv) = moments(src, eps);
            for j in 0..n {
                dst[j] = (src[j] - mean) * inv * gv[j] + bv[j];
            }
        }
        let v = Tensor::new(xv.shape(), out)?;
        Ok(self.push(v, Op::LayerNorm { x, g, b, eps }))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, pad: usize) -> Result<Var> {
        let v = tensor::conv2d(self.value(x), self.value(k), pad)?;
        Ok(self.push(v, Op::Conv2d { x, k, pad }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn swap_leading(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).swap_leading()?;
        Ok(self.push(v, Op::SwapLeading(a)))
    }

    /// Broadcast `a` to `shape`, numpy style: axes are right-aligned and
    /// missing or unit axes are repeated.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let map = broadcast_map(self.shape(a), shape)?;
        let src = self.value(a).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::Expand(a)))
    }

    /// Concatenate along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let lead = &self.shape(*first)[..self.shape(*first).len() - 1];
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || &s[..s.len() - 1] != lead {
                return Err(Error::dim(format!(
                    "concat: {:?} does not share leading axes {lead:?}",
                    s
                )));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::ConcatLast(parts.to_vec())))
    }

    /// Row lookup: `table[idx[i], :]` for each `i`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (rows, d) = self.value(table).dims2("gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::dim(format!("gather_rows index {bad} out of {rows} rows")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let v = Tensor::new(&[idx.len(), d], out)?;
        Ok(self.push(
            v,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(v, Op::Mean(a))
    }

    /// Mean absolute error over entries where `valid` is nonzero. With no
    /// valid entries the loss is 0 and carries no gradient.
    pub fn masked_mae(&mut self, pred: Var, target: &Tensor, valid: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        tensor::same_shape(p, target, "masked_mae target")?;
        tensor::same_shape(p, valid, "masked_mae mask")?;
        let count = valid.data().iter().filter(|&&m| m != 0.0).count();
        let mut total = 0.0;
        let mut dpred = vec![0.0; p.len()];
        if count > 0 {
            let inv = 1.0 / count as f64;
            for i in 0..p.len() {
                if valid.data()[i] != 0.0 {
                    let diff = p.data()[i] - target.data()[i];
                    total += diff.abs();
                    dpred[i] = if diff > 0.0 {
                        inv
                    } else if diff < 0.0 {
                        -inv
                    } else {
                        0.0
                    };
                }
            }
            total *= inv;
        }
        Ok(self.push(Tensor::scalar(total), Op::MaskedMae { pred, dpred }))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar `root`, adding into leaf accumulators.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&gy),
                    None => node.grad = Some(gy),
                }
                continue;
            }
            for (parent, g) in self.local_grads(i, &gy)? {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Vector-Jacobian products of node `i` against upstream gradient `gy`.
    fn local_grads(&self, i: usize, gy: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2("matmul")?;
                let n = bv.shape()[1];
                if self.wants(*a) {
                    let d = tensor::gemm_nt(gy.data(), bv.data(), m, n, k);
                    out.push((*a, Tensor::new(&[m, k], d)?));
                }
                if self.wants(*b) {
                    let d = tensor::gemm_tn(av.data(), gy.data(), k, m, n);
                    out.push((*b, Tensor::new(&[k, n], d)?));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (bs, m, k) = av.dims3("batch_matmul")?;
                let n = y.shape()[2];
                let (wa, wb) = (self.wants(*a), self.wants(*b));
                let mut da = Vec::with_capacity(if wa { av.len() } else { 0 });
                let mut db = Vec::with_capacity(if wb { bv.len() } else { 0 });
                for s in 0..bs {
                    let g = &gy.data()[s * m * n..(s + 1) * m * n];
                    let ai = &av.data()[s * m * k..(s + 1) * m * k];
                    let bi = &bv.data()[s * k * n..(s + 1) * k * n];
                    if *trans_b {
                        if wa {
                            da.extend(tensor::gemm(g, bi, m, n, k));
                        }
                        if wb {
                            db.extend(tensor::gemm_tn(g, ai, n, m, k));
                        }
                    } else {
                        if wa {
                            da.extend(tensor::gemm_nt(g, bi, m, n, k));
                        }
                        if wb {
                            db.extend(tensor::gemm_tn(ai, g, k, m, n));
                        }
                    }
                }
                if wa {
                    out.push((*a, Tensor::new(av.shape(), da)?));
                }
                if wb {
                    out.push((*b, Tensor::new(bv.shape(), db)?));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, gy.clone()));
                out.push((*b, gy.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, gy.clone()));
                out.push((*b, gy.map(|g| -g)));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    out.push((*a, gy.zip_map(self.value(*b), |g, v| g * v)?));
                }
                if self.wants(*b) {
                    out.push((*b, gy.zip_map(self.value(*a), |g, v| g * v)?));
                }
            }
            Op::Scale(a, c) => out.push((*a, gy.map(|g| g * c))),
            Op::ScaleBy(a, s) => {
                let c = self.value(*s).data()[0];
                if self.wants(*a) {
                    out.push((*a, gy.map(|g| g * c)));
                }
                if self.wants(*s) {
                    let dot: f64 = gy
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(g, x)| g * x)
                        .sum();
                    out.push((*s, Tensor::new(self.shape(*s), vec![dot])?));
                }
            }
            Op::Relu(a) => {
                let d = gy.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 })?;
                out.push((*a, d));
            }
            Op::Sigmoid(a) => out.push((*a, gy.zip_map(y, |g, s| g * s * (1.0 - s))?)),
            Op::Softmax(a) => {
                let n = y.last_dim();
                let mut d = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.data().chunks(n).zip(gy.data().chunks(n)).zip(d.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((*a, Tensor::new(y.shape(), d)?));
            }
            Op::RmsNorm { x, g, eps } => {
                let (xv, gv) = (self.value(*x), self.value(*g));
                let n = xv.last_dim();
                let mut dx = vec![0.0; xv.len()];
                let mut dg = vec![0.0; n];
                for ((xr, gr), dr) in xv.data().chunks(n).zip(gy.data().chunks(n)).zip(dx.chunks_mut(n)) {
                    let inv = tensor::rms_inv(xr, *eps);
                    let mut s = 0.0;
                    for j in 0..n {
                        s += gr[j] * gv.data()[j] * xr[j];
                        dg[j] += gr[j] * xr[j] * inv;
                    }
                    let c = inv * inv * inv * s / n as f64;
                    for j in 0..n {
                        dr[j] = inv * gv.data()[j] * gr[j] - xr[j] * c;
                    }
                }
                if self.wants(*x) {
                    out.push((*x, Tensor::new(xv.shape(), dx)?));
                }
                if self.wants(*g) {
                    out.push((*g, Tensor::new(gv.shape(), dg)?));
                }
            }
            Op::LayerNorm { x, g, b, eps } => {
                let (xv, gv) = (self.value(*x), self.value(*g));
                let n = xv.last_dim();
                let nf = n as f64;
                let mut dx = vec![0.0; xv.len()];
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                let mut xhat = vec![0.0; n];
                let mut gh = vec![0.0; n];
                for ((xr, gr), dr) in xv.data().chunks(n).zip(gy.data().chunks(n)).zip(dx.chunks_mut(n)) {
                    let (mean, inv) = moments(xr, *eps);
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for j in 0..n {
                        xhat[j] = (xr[j] - mean) * inv;
                        gh[j] = gr[j] * gv.data()[j];
                        s1 += gh[j];
                        s2 += gh[j] * xhat[j];
                        dg[j] += gr[j] * xhat[j];
                        db[j] += gr[j];
                    }
                    for j in 0..n {
                        dr[j] = inv / nf * (nf * gh[j] - s1 - xhat[j] * s2);
                    }
                }
                if self.wants(*x) {
                    out.push((*x, Tensor::new(xv.shape(), dx)?));
                }
                if self.wants(*g) {
                    out.push((*g, Tensor::new(gv.shape(), dg)?));
                }
                if self.wants(*b) {
                    out.push((*b, Tensor::new(self.shape(*b), db)?));
                }
            }
            Op::Conv2d { x, k, pad } => {
                let (xv, kv) = (self.value(*x), self.value(*k));
                let geo = tensor::conv_geometry(xv, kv, *pad)?;
                let mut dx = vec![0.0; xv.len()];
                let mut dk = vec![0.0; kv.len()];
                for bi in 0..geo.batch {
                    for co in 0..geo.c_out {
                        let go = &gy.data()[((bi * geo.c_out + co) * geo.oh) * geo.ow..][..geo.oh * geo.ow];
                        for ci in 0..geo.c_in {
                            let xoff = ((bi * geo.c_in + ci) * geo.h) * geo.w;
                            let koff = ((co * geo.c_in + ci) * geo.kh) * geo.kw;
                            for ky in 0..geo.kh {
                                for kx in 0..geo.kw {
                                    let w = kv.data()[koff + ky * geo.kw + kx];
                                    let mut acc = 0.0;
                                    for oy in 0..geo.oh {
                                        let iy = oy + ky;
                                        if iy < geo.pad || iy - geo.pad >= geo.h {
                                            continue;
                                        }
                                        let iy = iy - geo.pad;
                                        for ox in 0..geo.ow {
                                            let ix = ox + kx;
                                            if ix < geo.pad || ix - geo.pad >= geo.w {
                                                continue;
                                            }
                                            let xi = xoff + iy * geo.w + ix - geo.pad;
                                            let g = go[oy * geo.ow + ox];
                                            acc += xv.data()[xi] * g;
                                            dx[xi] += w * g;
                                        }
                                    }
                                    dk[koff + ky * geo.kw + kx] += acc;
                                }
                            }
                        }
                    }
                }
                if self.wants(*x) {
                    out.push((*x, Tensor::new(xv.shape(), dx)?));
                }
                if self.wants(*k) {
                    out.push((*k, Tensor::new(kv.shape(), dk)?));
                }
            }
            Op::Reshape(a) => out.push((*a, gy.reshape(self.shape(*a))?)),
            Op::SwapLeading(a) => out.push((*a, gy.swap_leading()?)),
            Op::Expand(a) => {
                let src_shape = self.shape(*a);
                let map = broadcast_map(src_shape, y.shape())?;
                let mut d = vec![0.0; src_shape.iter().product()];
                for (o, &si) in map.iter().enumerate() {
                    d[si] += gy.data()[o];
                }
                out.push((*a, Tensor::new(src_shape, d)?));
            }
            Op::ConcatLast(parts) => {
                let total = y.last_dim();
                let rows = y.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&gy.data()[r * total + offset..r * total + offset + w]);
                        }
                        out.push((p, Tensor::new(self.shape(p), d)?));
                    }
                    offset += w;
                }
            }
            Op::GatherRows { table, idx } => {
                let shape = self.shape(*table);
                let d = shape[1];
                let mut dt = Tensor::zeros(shape);
                for (r, &i) in idx.iter().enumerate() {
                    let dst = &mut dt.data_mut()[i * d..(i + 1) * d];
                    for (t, g) in dst.iter_mut().zip(&gy.data()[r * d..(r + 1) * d]) {
                        *t += g;
                    }
                }
                out.push((*table, dt));
            }
            Op::Sum(a) => out.push((*a, Tensor::full(self.shape(*a), gy.data()[0]))),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                out.push((*a, Tensor::full(self.shape(*a), gy.data()[0] / n)));
            }
            Op::MaskedMae { pred, dpred } => {
                let g = gy.data()[0];
                let d = dpred.iter().map(|v| v * g).collect();
                out.push((*pred, Tensor::new(self.shape(*pred), d)?));
            }
        }
        Ok(out)
    }
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// For each flat index of `to`, the flat index in `from` it reads.
fn broadcast_map(from: &[usize], to: &[usize]) -> Result<Vec<usize>> {
    if from.len() > to.len() {
        return Err(Error::dim(format!("cannot broadcast {from:?} to {to:?}")));
    }
    let lead = to.len() - from.len();
    let mut src_strides = vec![0usize; to.len()];
    let mut stride = 1;
    for ax in (0..from.len()).rev() {
        let (f, t) = (from[ax], to[lead + ax]);
        if f != t && f != 1 {
            return Err(Error::dim(format!("cannot broadcast {from:?} to {to:?}")));
        }
        src_strides[lead + ax] = if f == 1 { 0 } else { stride };
        stride *= f;
    }
    let total: usize = to.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; to.len()];
    for _ in 0..total {
        map.push(idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum());
        for ax in (0..to.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < to[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Ok(map)
}

/// Central-difference gradient of a scalar function:
/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Default step for [`finite_diff_grad`].
pub const FD_STEP: f64 = 1e-5;

/// Largest elementwise relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
