//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in creation order, which is already a topological
//! order, so the backward pass is a single reverse sweep. Leaves may borrow
//! their values (model parameters) instead of copying them.

use std::borrow::Cow;

use super::tensor::{self, as_matrix, gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulCol(Var, Var),
    Gelu(Var),
    Softmax(Var),
    CausalSoftmax(Var, f64),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Vec<Var>),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations for one forward pass.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an owned leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_raw(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    /// Adds a leaf that borrows its value, e.g. a model parameter.
    pub fn leaf_ref(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.push_raw(Cow::Borrowed(value), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        value.check_finite(name)?;
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_raw(Cow::Owned(value), op, rg))
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        as_matrix(self.value(v))
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner extents differ: {m}x{k} · {k2}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b])
    }

    /// `a[m×k] · b[n×k]ᵀ`; the layout used for `[out×in]` weight matrices.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (n, k2) = self.dims(b)?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_nt inner extents differ: {m}x{k} · ({n}x{k2})ᵀ"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul_nt", Tensor::matrix(m, n, out)?, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Dimension(format!(
                "add shapes differ: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    /// Adds a length-`n` row vector to every row of `a[m×n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let vr = self.value(row);
        if vr.len() != n {
            return Err(Error::Dimension(format!(
                "add_row: bias of length {} for {n} columns",
                vr.len()
            )));
        }
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for (x, b) in data[i * n..(i + 1) * n].iter_mut().zip(vr.data()) {
                *x += b;
            }
        }
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("add_row", t, Op::AddRow(a, row), &[a, row])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Dimension(format!(
                "mul shapes differ: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * s).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push("scale", t, Op::Scale(a, s), &[a])
    }

    /// Scales row `i` of `a[m×n]` by `s[i]`, where `s` holds `m` elements.
    pub fn mul_col(&mut self, a: Var, s: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let vs = self.value(s);
        if vs.len() != m {
            return Err(Error::Dimension(format!(
                "mul_col: {} scales for {m} rows",
                vs.len()
            )));
        }
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            let si = vs.data()[i];
            for x in &mut data[i * n..(i + 1) * n] {
                *x *= si;
            }
        }
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("mul_col", t, Op::MulCol(a, s), &[a, s])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| tensor::gelu(x)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push("gelu", t, Op::Gelu(a), &[a])
    }

    /// Row-wise softmax with max subtraction. A 1-D input is one row.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let n = va.cols();
        let mut out = vec![0.0; va.len()];
        for (src, dst) in va.data().chunks(n).zip(out.chunks_mut(n)) {
            tensor::softmax_into(src, dst);
        }
        let t = Tensor::new(va.shape().to_vec(), out)?;
        self.push("softmax", t, Op::Softmax(a), &[a])
    }

    /// Softmax of `scale · a` over a square score matrix where row `i`
    /// only sees columns `0..=i`. Masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var, scale: f64) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if m != n {
            return Err(Error::Dimension(format!(
                "causal_softmax expects a square matrix, got {m}x{n}"
            )));
        }
        let va = self.value(a).data();
        let mut out = vec![0.0; m * n];
        let mut buf = vec![0.0; n];
        for i in 0..m {
            let w = i + 1;
            for j in 0..w {
                buf[j] = scale * va[i * n + j];
            }
            tensor::softmax_into(&buf[..w], &mut out[i * n..i * n + w]);
        }
        let t = Tensor::matrix(m, n, out)?;
        self.push("causal_softmax", t, Op::CausalSoftmax(a, scale), &[a])
    }

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::Dimension("layer_norm parameter width".into()));
        }
        let vx = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &vx[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if width == 0 || start + width > n {
            return Err(Error::Dimension(format!(
                "slice_cols {start}..{} of {n} columns",
                start + width
            )));
        }
        let va = self.value(a).data();
        let mut out = Vec::with_capacity(m * width);
        for i in 0..m {
            out.extend_from_slice(&va[i * n + start..i * n + start + width]);
        }
        let t = Tensor::matrix(m, width, out)?;
        self.push("slice_cols", t, Op::SliceCols(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Dimension("concat_cols of nothing".into()))?;
        let (m, _) = self.dims(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims(p)?;
            if pm != m {
                return Err(Error::Dimension("concat_cols row counts differ".into()));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::matrix(m, total, out)?;
        self.push("concat_cols", t, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Dimension("concat_rows of nothing".into()))?;
        let (_, n) = self.dims(first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pm, pn) = self.dims(p)?;
            if pn != n {
                return Err(Error::Dimension("concat_rows column counts differ".into()));
            }
            rows += pm;
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::matrix(rows, n, out)?;
        self.push("concat_rows", t, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Picks rows of `table` by index (embedding lookup, row selection).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(table)?;
        if ids.is_empty() {
            return Err(Error::Dimension("gather_rows with no ids".into()));
        }
        let vt = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= m {
                return Err(Error::Dimension(format!("row {id} out of {m}")));
            }
            out.extend_from_slice(&vt[id * n..(id + 1) * n]);
        }
        let t = Tensor::matrix(ids.len(), n, out)?;
        self.push("gather_rows", t, Op::GatherRows(table, ids.to_vec()), &[table])
    }

    /// Mean negative log-likelihood of `targets` over the unmasked rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (l, v) = self.dims(logits)?;
        if targets.len() != l || mask.len() != l {
            return Err(Error::Dimension(format!(
                "cross_entropy: {l} rows, {} targets, {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::InvalidBatch("every position is masked".into()));
        }
        let vl = self.value(logits).data();
        let mut probs = vec![0.0; l * v];
        let mut total = 0.0;
        for i in 0..l {
            if !mask[i] {
                continue;
            }
            let t = targets[i];
            if t >= v {
                return Err(Error::Dimension(format!("target {t} outside vocab {v}")));
            }
            let row = &vl[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t];
            for j in 0..v {
                probs[i * v + j] = (row[j] - lse).exp();
            }
        }
        let loss = Tensor::scalar(total / count as f64);
        self.push(
            "cross_entropy",
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            &[logits],
        )
    }

    /// Elementwise sum of same-shaped tensors.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Dimension("sum of nothing".into()))?;
        let shape = self.value(first).shape().to_vec();
        let mut acc = self.value(first).clone();
        for &p in &parts[1..] {
            let vp = self.value(p);
            if vp.shape() != shape.as_slice() {
                return Err(Error::Dimension("sum shapes differ".into()));
            }
            acc.add_assign(vp.data());
        }
        self.push("sum", acc, Op::Sum(parts.to_vec()), parts)
    }

    /// Mean of same-shaped tensors.
    pub fn mean(&mut self, parts: &[Var]) -> Result<Var> {
        let s = self.sum(parts)?;
        self.scale(s, 1.0 / parts.len() as f64)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    fn propagate(&self, node: &Node<'a>, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a)?;
                let (_, n) = self.dims(*b)?;
                if let Some(ga) = self.slot(grads, *a) {
                    gemm_nt(gd, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm_tn(self.value(*a).data(), gd, gb, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(*a)?;
                let (n, _) = self.dims(*b)?;
                if let Some(ga) = self.slot(grads, *a) {
                    gemm_nn(gd, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm_tn(gd, self.value(*a).data(), gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        tensor::axpy(1.0, gd, gv);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.slot(grads, *a) {
                    tensor::axpy(1.0, gd, ga);
                }
                if let Some(gr) = self.slot(grads, *row) {
                    let n = gr.len();
                    for chunk in gd.chunks(n) {
                        tensor::axpy(1.0, chunk, gr);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, gi), bi) in ga.iter_mut().zip(gd).zip(vb) {
                        *x += gi * bi;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((x, gi), ai) in gb.iter_mut().zip(gd).zip(va) {
                        *x += gi * ai;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.slot(grads, *a) {
                    tensor::axpy(*s, gd, ga);
                }
            }
            Op::MulCol(a, s) => {
                let (m, n) = self.dims(*a)?;
                let vs = self.value(*s).data();
                let va = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..m {
                        tensor::axpy(vs[i], &gd[i * n..(i + 1) * n], &mut ga[i * n..(i + 1) * n]);
                    }
                }
                if let Some(gs) = self.slot(grads, *s) {
                    for i in 0..m {
                        gs[i] += tensor::dot(&gd[i * n..(i + 1) * n], &va[i * n..(i + 1) * n]);
                    }
                }
            }
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, gi), xi) in ga.iter_mut().zip(gd).zip(va) {
                        *x += gi * tensor::gelu_grad(*xi);
                    }
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = node.value.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((yr, gr), out) in y.chunks(n).zip(gd.chunks(n)).zip(ga.chunks_mut(n)) {
                        let s = tensor::dot(yr, gr);
                        for j in 0..n {
                            out[j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::CausalSoftmax(a, scale) => {
                let y = node.value.data();
                let n = node.value.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..n {
                        let w = i + 1;
                        let yr = &y[i * n..i * n + w];
                        let gr = &gd[i * n..i * n + w];
                        let s = tensor::dot(yr, gr);
                        for j in 0..w {
                            ga[i * n + j] += scale * yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, n) = self.dims(*x)?;
                let g = self.value(*gain).data();
                if let Some(gx) = self.slot(grads, *x) {
                    let mut dxhat = vec![0.0; n];
                    for i in 0..m {
                        let gr = &gd[i * n..(i + 1) * n];
                        let xh = &xhat[i * n..(i + 1) * n];
                        for j in 0..n {
                            dxhat[j] = gr[j] * g[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = tensor::dot(&dxhat, xh) / n as f64;
                        for j in 0..n {
                            gx[i * n + j] += inv_std[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
                if let Some(gg) = self.slot(grads, *gain) {
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += gd[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for chunk in gd.chunks(n) {
                        tensor::axpy(1.0, chunk, gb);
                    }
                }
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.dims(*a)?;
                let w = node.value.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..m {
                        tensor::axpy(
                            1.0,
                            &gd[i * w..(i + 1) * w],
                            &mut ga[i * n + start..i * n + start + w],
                        );
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let m = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(gp) = self.slot(grads, p) {
                        for i in 0..m {
                            tensor::axpy(
                                1.0,
                                &gd[i * total + offset..i * total + offset + w],
                                &mut gp[i * w..(i + 1) * w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.slot(grads, p) {
                        tensor::axpy(1.0, &gd[offset..offset + len], gp);
                    }
                    offset += len;
                }
            }
            Op::GatherRows(table, ids) => {
                let n = self.value(*table).cols();
                if let Some(gt) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        tensor::axpy(1.0, &gd[r * n..(r + 1) * n], &mut gt[id * n..(id + 1) * n]);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let v = self.value(*logits).cols();
                let scale = gd[0] / *count as f64;
                if let Some(gl) = self.slot(grads, *logits) {
                    for (i, &on) in mask.iter().enumerate() {
                        if !on {
                            continue;
                        }
                        let row = &mut gl[i * v..(i + 1) * v];
                        tensor::axpy(scale, &probs[i * v..(i + 1) * v], row);
                        row[targets[i]] -= scale;
                    }
                }
            }
            Op::Sum(parts) => {
                for &p in parts {
                    if let Some(gp) = self.slot(grads, p) {
                        tensor::axpy(1.0, gd, gp);
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradient buffer of `v`, created on first use; `None` when `v` does not
    /// require a gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(node.value.shape()));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    /// Shape of a node, used to build zero gradients for untouched leaves.
    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }
}

/// Per-node gradients from one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: usize,
}

impl Gradients {
    /// Gradient of `v`, or `None` when nothing reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, with exact zeros when `v` is off every path to the loss.
    pub fn get_or_zero(&self, tape: &Tape<'_>, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Number of nodes whose gradient was propagated.
    pub fn visited(&self) -> usize {
        self.visited
    }
}
