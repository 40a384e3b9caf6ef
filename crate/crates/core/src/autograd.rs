//! Minimal reverse-mode automatic differentiation over dense row-major
//! matrices in `f64`.
//!
//! A [`Graph`] is a Wengert tape: every operation appends a node holding its
//! forward value, and [`Graph::backward`] walks the tape in reverse. Spatial
//! feature maps are stored as `[positions, channels]` matrices with the grid
//! size carried by the ops that need it (convolution, pooling, upsampling).

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            rows * cols,
            data.len(),
            "tensor data length does not match {rows}x{cols}"
        );
        Self { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn row(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::from_vec(1, n, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn as_scalar(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_vec(
            self.rows,
            self.cols,
            self.data.iter().map(|&x| f(x)).collect(),
        )
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape(), other.shape());
        Tensor::from_vec(
            self.rows,
            self.cols,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(
            self.cols,
            other.rows,
            "matmul {:?} x {:?}",
            self.shape(),
            other.shape()
        );
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            let arow = &self.data[i * k..(i + 1) * k];
            for (p, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Tensor::from_vec(m, n, out)
    }

    /// `self^T * other` without materializing the transpose.
    pub fn tmatmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.rows, other.rows);
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let arow = &self.data[p * m..(p + 1) * m];
            let brow = &other.data[p * n..(p + 1) * n];
            for (i, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Tensor::from_vec(m, n, out)
    }

    /// `self * other^T` without materializing the transpose.
    pub fn matmul_t(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.cols);
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(a, b)| a * b).sum();
            }
        }
        Tensor::from_vec(m, n, out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Tensor),
    DivScalar(Var, Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Silu(Var),
    Square(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var, Vec<f64>),
    Im2Col3x3 { x: Var, h: usize, w: usize },
    AvgPool2 { x: Var, h: usize, w: usize },
    Upsample2 { x: Var, h: usize, w: usize },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode tape. Constants may borrow their values (`'a`) so frozen
/// parameters are never copied.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf (owned).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Non-trainable leaf borrowing its value.
    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).as_scalar()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip(self.value(b), |x, y| x + y);
        let ng = self.needs(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip(self.value(b), |x, y| x - y);
        let ng = self.needs(&[a, b]);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip(self.value(b), |x, y| x * y);
        let ng = self.needs(&[a, b]);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Adds a `[1, cols]` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let xv = self.value(x);
        let rv = self.value(row);
        assert_eq!(rv.rows(), 1);
        assert_eq!(rv.cols(), xv.cols());
        let mut out = xv.clone();
        let c = xv.cols();
        for chunk in out.data_mut().chunks_mut(c) {
            for (o, b) in chunk.iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let ng = self.needs(&[x, row]);
        self.push(out, Op::AddRow(x, row), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let ng = self.needs(&[x]);
        self.push(out, Op::Scale(x, s), ng)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v + s);
        let ng = self.needs(&[x]);
        self.push(out, Op::AddScalar(x), ng)
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Var {
        let out = self.value(x).zip(&c, |a, b| a * b);
        let ng = self.needs(&[x]);
        self.push(out, Op::MulConst(x, c), ng)
    }

    /// Divides every entry of `x` by the `[1, 1]` node `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Var {
        let d = self.scalar(s);
        let out = self.value(x).map(|v| v / d);
        let ng = self.needs(&[x, s]);
        self.push(out, Op::DivScalar(x, s), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.needs(&[a, b]);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        let ng = self.needs(&[a, b]);
        self.push(out, Op::MatMulT(a, b), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v / (1.0 + (-v).exp()));
        let ng = self.needs(&[x]);
        self.push(out, Op::Silu(x), ng)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let ng = self.needs(&[x]);
        self.push(out, Op::Square(x), ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let ng = self.needs(&[x]);
        self.push(out, Op::SoftmaxRows(x), ng)
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let mut out = self.value(x).clone();
        let c = out.cols();
        let mut inv_std = Vec::with_capacity(out.rows());
        for row in out.data_mut().chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            inv_std.push(r);
        }
        let ng = self.needs(&[x]);
        self.push(out, Op::LayerNormRows(x, inv_std), ng)
    }

    /// Unfolds 3x3 zero-padded neighbourhoods: `[h*w, c] -> [h*w, 9*c]`.
    pub fn im2col3x3(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), h * w);
        let c = xv.cols();
        let mut out = Tensor::zeros(h * w, 9 * c);
        for i in 0..h {
            for j in 0..w {
                let orow = (i * w + j) * 9 * c;
                for (k, (di, dj)) in OFFSETS.iter().enumerate() {
                    let (si, sj) = (i as isize + di, j as isize + dj);
                    if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                        continue;
                    }
                    let src = (si as usize * w + sj as usize) * c;
                    out.data_mut()[orow + k * c..orow + (k + 1) * c]
                        .copy_from_slice(&xv.data()[src..src + c]);
                }
            }
        }
        let ng = self.needs(&[x]);
        self.push(out, Op::Im2Col3x3 { x, h, w }, ng)
    }

    /// 2x2 average pooling of an `[h*w, c]` grid.
    pub fn avg_pool2(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), h * w);
        assert!(h.is_multiple_of(2) && w.is_multiple_of(2));
        let c = xv.cols();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(oh * ow, c);
        for i in 0..h {
            for j in 0..w {
                let o = ((i / 2) * ow + j / 2) * c;
                let s = (i * w + j) * c;
                for k in 0..c {
                    out.data_mut()[o + k] += 0.25 * xv.data()[s + k];
                }
            }
        }
        let ng = self.needs(&[x]);
        self.push(out, Op::AvgPool2 { x, h, w }, ng)
    }

    /// Nearest-neighbour 2x upsampling of an `[h*w, c]` grid.
    pub fn upsample2(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), h * w);
        let c = xv.cols();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Tensor::zeros(oh * ow, c);
        for i in 0..oh {
            for j in 0..ow {
                let s = ((i / 2) * w + j / 2) * c;
                let o = (i * ow + j) * c;
                out.data_mut()[o..o + c].copy_from_slice(&xv.data()[s..s + c]);
            }
        }
        let ng = self.needs(&[x]);
        self.push(out, Op::Upsample2 { x, h, w }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut off = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows(), rows);
            let pc = pv.cols();
            for r in 0..rows {
                out.data_mut()[r * total + off..r * total + off + pc]
                    .copy_from_slice(&pv.data()[r * pc..(r + 1) * pc]);
            }
            off += pc;
        }
        let ng = self.needs(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        assert!(start + len <= c);
        let mut out = Tensor::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            out.data_mut()[r * len..(r + 1) * len]
                .copy_from_slice(&xv.data()[r * c + start..r * c + start + len]);
        }
        let ng = self.needs(&[x]);
        self.push(out, Op::SliceCols { x, start }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.cols(), cols);
            data.extend_from_slice(pv.data());
        }
        let rows = data.len() / cols;
        let ng = self.needs(parts);
        self.push(
            Tensor::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            ng,
        )
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&xv.data()[i * c..(i + 1) * c]);
        }
        let ng = self.needs(&[x]);
        self.push(
            Tensor::from_vec(idx.len(), c, data),
            Op::GatherRows(x, idx.to_vec()),
            ng,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / v.len() as f64;
        let ng = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &*self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, g.zip(bv, |x, y| x * y));
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, g.zip(av, |x, y| x * y));
                }
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                if self.nodes[row.0].needs_grad {
                    let c = g.cols();
                    let mut rg = vec![0.0; c];
                    for chunk in g.data().chunks(c) {
                        for (r, v) in rg.iter_mut().zip(chunk) {
                            *r += v;
                        }
                    }
                    self.accumulate(grads, *row, Tensor::row(rg));
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.map(|v| v * s)),
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::MulConst(x, c) => self.accumulate(grads, *x, g.zip(c, |a, b| a * b)),
            Op::DivScalar(x, s) => {
                let d = self.scalar(*s);
                if self.nodes[x.0].needs_grad {
                    self.accumulate(grads, *x, g.map(|v| v / d));
                }
                if self.nodes[s.0].needs_grad {
                    let xv = self.value(*x);
                    let dot: f64 = g.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                    self.accumulate(grads, *s, Tensor::scalar(-dot / (d * d)));
                }
            }
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, self.value(*a).tmatmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                // out = a b^T: da = g b, db = g^T a
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, g.matmul(self.value(*b)));
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, g.tmatmul(self.value(*a)));
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                let dg = g.zip(xv, |gv, v| {
                    let s = 1.0 / (1.0 + (-v).exp());
                    gv * (s + v * s * (1.0 - s))
                });
                self.accumulate(grads, *x, dg);
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, g.zip(xv, |gv, v| 2.0 * gv * v));
            }
            Op::SoftmaxRows(x) => {
                let c = out.cols();
                let mut dx = Tensor::zeros(out.rows(), c);
                for ((drow, yrow), grow) in dx
                    .data_mut()
                    .chunks_mut(c)
                    .zip(out.data().chunks(c))
                    .zip(g.data().chunks(c))
                {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    for ((d, y), gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *d = y * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNormRows(x, inv_std) => {
                let c = out.cols();
                let n = c as f64;
                let mut dx = Tensor::zeros(out.rows(), c);
                for (((drow, yrow), grow), r) in dx
                    .data_mut()
                    .chunks_mut(c)
                    .zip(out.data().chunks(c))
                    .zip(g.data().chunks(c))
                    .zip(inv_std)
                {
                    let gm = grow.iter().sum::<f64>() / n;
                    let gy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((d, y), gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *d = r * (gv - gm - y * gy);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Im2Col3x3 { x, h, w } => {
                let (h, w) = (*h, *w);
                let c = g.cols() / 9;
                let mut dx = Tensor::zeros(h * w, c);
                for i in 0..h {
                    for j in 0..w {
                        let grow = (i * w + j) * 9 * c;
                        for (k, (di, dj)) in OFFSETS.iter().enumerate() {
                            let (si, sj) = (i as isize + di, j as isize + dj);
                            if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                continue;
                            }
                            let dst = (si as usize * w + sj as usize) * c;
                            let src = &g.data()[grow + k * c..grow + (k + 1) * c];
                            for (d, s) in dx.data_mut()[dst..dst + c].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::AvgPool2 { x, h, w } => {
                let (h, w) = (*h, *w);
                let c = g.cols();
                let ow = w / 2;
                let mut dx = Tensor::zeros(h * w, c);
                for i in 0..h {
                    for j in 0..w {
                        let o = ((i / 2) * ow + j / 2) * c;
                        let s = (i * w + j) * c;
                        for k in 0..c {
                            dx.data_mut()[s + k] = 0.25 * g.data()[o + k];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample2 { x, h, w } => {
                let (h, w) = (*h, *w);
                let c = g.cols();
                let ow = 2 * w;
                let mut dx = Tensor::zeros(h * w, c);
                for i in 0..2 * h {
                    for j in 0..ow {
                        let s = ((i / 2) * w + j / 2) * c;
                        let o = (i * ow + j) * c;
                        for k in 0..c {
                            dx.data_mut()[s + k] += g.data()[o + k];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut off = 0;
                for p in parts {
                    let pc = self.value(*p).cols();
                    if self.nodes[p.0].needs_grad {
                        let mut dp = Tensor::zeros(g.rows(), pc);
                        for r in 0..g.rows() {
                            dp.data_mut()[r * pc..(r + 1) * pc]
                                .copy_from_slice(&g.data()[r * total + off..r * total + off + pc]);
                        }
                        self.accumulate(grads, *p, dp);
                    }
                    off += pc;
                }
            }
            Op::SliceCols { x, start } => {
                let xc = self.value(*x).cols();
                let len = g.cols();
                let mut dx = Tensor::zeros(g.rows(), xc);
                for r in 0..g.rows() {
                    dx.data_mut()[r * xc + start..r * xc + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut off = 0;
                for p in parts {
                    let pr = self.value(*p).rows();
                    if self.nodes[p.0].needs_grad {
                        let dp =
                            Tensor::from_vec(pr, c, g.data()[off * c..(off + pr) * c].to_vec());
                        self.accumulate(grads, *p, dp);
                    }
                    off += pr;
                }
            }
            Op::GatherRows(x, idx) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = Tensor::zeros(xv.rows(), c);
                for (r, &i) in idx.iter().enumerate() {
                    for k in 0..c {
                        dx.data_mut()[i * c + k] += g.data()[r * c + k];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let (r, c) = self.shape(*x);
                let gv = g.as_scalar();
                self.accumulate(grads, *x, Tensor::from_vec(r, c, vec![gv; r * c]));
            }
            Op::Mean(x) => {
                let (r, c) = self.shape(*x);
                let gv = g.as_scalar() / (r * c) as f64;
                self.accumulate(grads, *x, Tensor::from_vec(r, c, vec![gv; r * c]));
            }
        }
    }
}

const OFFSETS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(
            r,
            c,
            (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    /// Central-difference check of d(build(x))/dx for every entry of x.
    fn check(x0: Tensor, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let y = build(&mut g, x);
        let grads = g.backward(y);
        let analytic = grads.get(x).expect("gradient").clone();
        let h = 1e-5;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.param(xp);
                let y = build(&mut g, x);
                g.scalar(y)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (a - numeric).abs() / denom < 1e-5,
                "entry {i}: analytic {a} numeric {numeric}"
            );
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 5);
        let c = random(&mut rng, 5, 4);
        assert_eq!(
            a.transpose().tmatmul(&b),
            a.transpose().transpose().matmul(&b)
        );
        let ab_t = a.matmul_t(&c);
        let reference = a.matmul(&c.transpose());
        for (x, y) in ab_t.data().iter().zip(reference.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matmul_softmax_layernorm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random(&mut rng, 4, 3);
        let wt = random(&mut rng, 5, 4);
        check(random(&mut rng, 5, 4), |g, x| {
            let n = g.layer_norm_rows(x, 1e-5);
            let wv = g.constant(w.clone());
            let m = g.matmul(n, wv);
            let s = g.softmax_rows(m);
            let wtv = g.constant(wt.clone());
            let q = g.matmul_t(x, wtv);
            let sq = g.square(q);
            let a = g.sum(s);
            let b = g.mean(sq);
            let s2 = g.silu(s);
            let c = g.sum(s2);
            let ab = g.add(a, b);
            g.add(ab, c)
        });
    }

    #[test]
    fn gradient_spatial_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random(&mut rng, 18, 2);
        check(random(&mut rng, 16, 2), |g, x| {
            let cols = g.im2col3x3(x, 4, 4);
            let wv = g.constant(w.clone());
            let y = g.matmul(cols, wv);
            let p = g.avg_pool2(y, 4, 4);
            let u = g.upsample2(p, 2, 2);
            let z = g.mul(u, x);
            let cat = g.concat_cols(&[z, x]);
            let sl = g.slice_cols(cat, 1, 2);
            let sq = g.square(sl);
            g.sum(sq)
        });
    }

    #[test]
    fn gradient_rows_and_scalars() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mask = random(&mut rng, 3, 2);
        check(random(&mut rng, 3, 2).map(f64::abs), |g, x| {
            let r = g.gather_rows(x, &[2, 0, 2]);
            let r2 = g.slice_cols(r, 0, 2);
            let first = g.gather_rows(x, &[1]);
            let stacked = g.concat_rows(&[r2, first]);
            let s = g.sum(stacked);
            let s = g.add_scalar(s, 0.5);
            let d = g.div_scalar(x, s);
            let m = g.mul_const(d, mask.clone());
            let row = g.gather_rows(x, &[0]);
            let ar = g.add_row(m, row);
            let sc = g.scale(ar, -1.5);
            let diff = g.sub(sc, x);
            let sq = g.square(diff);
            g.sum(sq)
        });
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(2.0));
        let p = g.param(Tensor::scalar(3.0));
        let y = g.mul(c, p);
        let grads = g.backward(y);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().as_scalar(), 2.0);
    }
}
