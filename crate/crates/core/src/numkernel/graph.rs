//! Tape-based reverse-mode differentiation.
//!
//! Ops are appended to a [`Graph`] in execution order; [`Graph::backward`] walks the tape
//! in reverse and accumulates gradients additively. Only nodes that transitively depend on a
//! leaf flagged `requires_grad` take part in the backward pass, so frozen tensors never
//! materialize a gradient.

use std::sync::Arc;

use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use super::tensor::{BoolMatrix, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
    RepeatRow { row: Var, times: usize },
    ConcatRows(Vec<Var>),
    SliceRows { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceCols { a: Var, start: usize },
    Rope { a: Var, head_dim: usize, cos: Vec<T>, sin: Vec<T> },
    MaskedSoftmax(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, include: Vec<bool>, probs: Vec<T>, count: usize },
    Sum(Var),
    SumSquares(Var),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recorded computation. Confined to one thread; drop it to release intermediates.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    pub fn get_slice(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads[v.0].take()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, false, Op::Leaf)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, true, Op::Leaf)
    }

    /// Leaf sharing storage with the caller (no copy).
    pub fn leaf_shared(&mut self, t: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul_fwd(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul_nt_fwd(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::MatMulNt(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        kernels::check_finite("add", &data)?;
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        kernels::check_finite("mul", &data)?;
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::from_f64(s);
        let data: Vec<T> = self.value(a).data().iter().map(|x| *x * s).collect();
        kernels::check_finite("scale", &data)?;
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, rg, Op::Scale(a, s)))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .map(|x| *x * kernels::sigmoid(*x))
            .collect();
        kernels::check_finite("silu", &data)?;
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, rg, Op::Silu(a)))
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (out, inv_rms) = kernels::rms_norm_fwd(self.value(x), self.value(gain), eps)?;
        let rg = self.rg(&[x, gain]);
        Ok(self.push(out, rg, Op::RmsNorm { x, gain, inv_rms }))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, d) = (t.rows(), t.cols());
        if ids.is_empty() {
            return Err(Error::dim("gather_rows", "no ids"));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::dim("gather_rows", format!("row {id} of {rows}")));
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::matrix(ids.len(), d, data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(out, rg, Op::Gather { table, ids: ids.to_vec() }))
    }

    /// Stacks `times` copies of a length-D vector into a `times × D` matrix.
    pub fn repeat_row(&mut self, row: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(Error::dim("repeat_row", "zero copies"));
        }
        let src = self.value(row).data();
        let d = src.len();
        let mut data = Vec::with_capacity(times * d);
        for _ in 0..times {
            data.extend_from_slice(src);
        }
        let out = Tensor::matrix(times, d, data)?;
        let rg = self.rg(&[row]);
        Ok(self.push(out, rg, Op::RepeatRow { row, times }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat_rows", "no parts"));
        };
        if parts.len() == 1 {
            return Ok(first);
        }
        let d = self.value(first).cols();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 2 || v.cols() != d {
                return Err(Error::dim("concat_rows", format!("part {:?} vs width {d}", v.shape())));
            }
            rows += v.rows();
        }
        let mut data = Vec::with_capacity(rows * d);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::matrix(rows, d, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        if len == 0 || start + len > v.rows() {
            return Err(Error::dim("slice_rows", format!("[{start}, {}) of {} rows", start + len, v.rows())));
        }
        let d = v.cols();
        let out = Tensor::matrix(len, d, v.data()[start * d..(start + len) * d].to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, rg, Op::SliceRows { a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat_cols", "no parts"));
        };
        if parts.len() == 1 {
            return Ok(first);
        }
        let rows = self.value(first).rows();
        let mut width = 0;
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 2 || v.rows() != rows {
                return Err(Error::dim("concat_cols", format!("part {:?} vs {rows} rows", v.shape())));
            }
            width += v.cols();
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::matrix(rows, width, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, rg, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        let (rows, d) = (v.rows(), v.cols());
        if len == 0 || start + len > d {
            return Err(Error::dim("slice_cols", format!("[{start}, {}) of {d} cols", start + len)));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let out = Tensor::matrix(rows, len, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, rg, Op::SliceCols { a, start }))
    }

    /// Rotary rotation of every head (half-split pairing), one position per row.
    pub fn rope(&mut self, a: Var, positions: &[usize], head_dim: usize, base: f64) -> Result<Var> {
        let v = self.value(a);
        let (rows, d) = (v.rows(), v.cols());
        if positions.len() != rows {
            return Err(Error::dim("rope", format!("{} positions for {rows} rows", positions.len())));
        }
        if head_dim % 2 != 0 || d % head_dim != 0 {
            return Err(Error::dim("rope", format!("width {d} with head dim {head_dim}")));
        }
        let (cos, sin) = kernels::rope_tables::<T>(positions, head_dim, base);
        let mut data = vec![T::zero(); rows * d];
        kernels::rope_apply(v.data(), &mut data, d, head_dim, &cos, &sin, false);
        let out = Tensor::matrix(rows, d, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, rg, Op::Rope { a, head_dim, cos, sin }))
    }

    pub fn masked_softmax_rows(&mut self, a: Var, mask: &BoolMatrix) -> Result<Var> {
        let out = kernels::masked_softmax_fwd(self.value(a), mask)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, rg, Op::MaskedSoftmax(a)))
    }

    /// Mean negative log-likelihood over rows with `include[r]`.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize], include: &[bool]) -> Result<Var> {
        let (loss, probs, count) = kernels::cross_entropy_fwd(self.value(logits), targets, include)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                include: include.to_vec(),
                probs,
                count,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, x| acc + *x);
        kernels::check_finite("sum", &[s])?;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), rg, Op::Sum(a)))
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, x| acc + *x * *x);
        kernels::check_finite("sum_squares", &[s])?;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), rg, Op::SumSquares(a)))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![T::zero(); self.nodes[v.0].value.numel()]);
        }
        slot.as_mut()
    }

    fn add_into(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl Fn(usize) -> T) {
        if let Some(g) = self.accumulate(grads, v) {
            for (i, x) in g.iter_mut().enumerate() {
                *x = *x + f(i);
            }
        }
    }

    fn backprop(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(ga) = self.accumulate(grads, *a) {
                    // dA = dC · Bᵀ
                    gemm_nt(m, n, k, gy, bv.data(), ga, true);
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    // dB = Aᵀ · dC
                    gemm_tn(k, m, n, av.data(), gy, gb, true);
                }
            }
            Op::MatMulNt(a, b) => {
                // C = A·Bᵀ, A: m×k, B: n×k
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if let Some(ga) = self.accumulate(grads, *a) {
                    gemm_nn(m, n, k, gy, bv.data(), ga, true);
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    gemm_tn(n, m, k, gy, av.data(), gb, true);
                }
            }
            Op::Add(a, b) => {
                self.add_into(grads, *a, |i| gy[i]);
                self.add_into(grads, *b, |i| gy[i]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.add_into(grads, *a, |i| gy[i] * bv[i]);
                self.add_into(grads, *b, |i| gy[i] * av[i]);
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.add_into(grads, *a, |i| gy[i] * s);
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                self.add_into(grads, *a, |i| {
                    let sg = kernels::sigmoid(x[i]);
                    gy[i] * sg * (T::one() + x[i] * (T::one() - sg))
                });
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x);
                let g = self.value(*gain).data();
                let d = xv.cols();
                let dn = T::from_f64(d as f64);
                if let Some(gx) = self.accumulate(grads, *x) {
                    for (r, &ir) in inv_rms.iter().enumerate() {
                        let xr = xv.row(r);
                        let gyr = &gy[r * d..(r + 1) * d];
                        let dot = (0..d).fold(T::zero(), |acc, j| acc + gyr[j] * g[j] * xr[j]);
                        let coef = ir * ir * ir * dot / dn;
                        for j in 0..d {
                            gx[r * d + j] = gx[r * d + j] + ir * g[j] * gyr[j] - xr[j] * coef;
                        }
                    }
                }
                if let Some(gg) = self.accumulate(grads, *gain) {
                    for (r, &ir) in inv_rms.iter().enumerate() {
                        let xr = xv.row(r);
                        for j in 0..d {
                            gg[j] = gg[j] + gy[r * d + j] * xr[j] * ir;
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = self.value(*table).cols();
                if let Some(gt) = self.accumulate(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] = gt[id * d + j] + gy[r * d + j];
                        }
                    }
                }
            }
            Op::RepeatRow { row, times } => {
                let d = self.value(*row).numel();
                if let Some(g) = self.accumulate(grads, *row) {
                    for r in 0..*times {
                        for j in 0..d {
                            g[j] = g[j] + gy[r * d + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    self.add_into(grads, *p, |i| gy[offset + i]);
                    offset += len;
                }
            }
            Op::SliceRows { a, start } => {
                let d = self.value(*a).cols();
                let off = start * d;
                if let Some(g) = self.accumulate(grads, *a) {
                    for (i, v) in gy.iter().enumerate() {
                        g[off + i] = g[off + i] + *v;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let width: usize = node.value.cols();
                let mut col = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    let c0 = col;
                    self.add_into(grads, *p, |i| {
                        let (r, c) = (i / w, i % w);
                        gy[r * width + c0 + c]
                    });
                    col += w;
                }
            }
            Op::SliceCols { a, start } => {
                let d = self.value(*a).cols();
                let w = node.value.cols();
                if let Some(g) = self.accumulate(grads, *a) {
                    for (i, v) in gy.iter().enumerate() {
                        let (r, c) = (i / w, i % w);
                        let dst = r * d + start + c;
                        g[dst] = g[dst] + *v;
                    }
                }
            }
            Op::Rope { a, head_dim, cos, sin } => {
                let d = node.value.cols();
                if let Some(g) = self.accumulate(grads, *a) {
                    let mut tmp = vec![T::zero(); gy.len()];
                    kernels::rope_apply(gy, &mut tmp, d, *head_dim, cos, sin, true);
                    for (x, t) in g.iter_mut().zip(tmp) {
                        *x = *x + t;
                    }
                }
            }
            Op::MaskedSoftmax(a) => {
                let y = node.value.data();
                let kv = node.value.cols();
                if let Some(g) = self.accumulate(grads, *a) {
                    for r in 0..node.value.rows() {
                        let yr = &y[r * kv..(r + 1) * kv];
                        let gr = &gy[r * kv..(r + 1) * kv];
                        let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (p, q)| acc + *p * *q);
                        for j in 0..kv {
                            g[r * kv + j] = g[r * kv + j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, include, probs, count } => {
                let v = self.value(*logits).cols();
                let scale = gy[0] / T::from_f64(*count as f64);
                if let Some(g) = self.accumulate(grads, *logits) {
                    for (r, &inc) in include.iter().enumerate() {
                        if !inc {
                            continue;
                        }
                        for j in 0..v {
                            let mut p = probs[r * v + j];
                            if j == targets[r] {
                                p = p - T::one();
                            }
                            g[r * v + j] = g[r * v + j] + p * scale;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let s = gy[0];
                self.add_into(grads, *a, |_| s);
            }
            Op::SumSquares(a) => {
                let x = self.value(*a).data();
                let s = gy[0] + gy[0];
                self.add_into(grads, *a, |i| s * x[i]);
            }
        }
    }
}
