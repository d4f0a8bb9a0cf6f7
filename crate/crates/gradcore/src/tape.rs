//! Dynamic reverse-mode tape.
//!
//! Every forward op appends a node holding its value and a description of
//! how it was produced. Nodes are only ever appended, so recording order is a
//! topological order and [`Tape::backward`] walks it in exact reverse.

use crate::matrix::{matmul_acc, matmul_at_acc, matmul_bt_acc, Matrix};
use crate::GradError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary elementwise op is stretched.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// `1 x C` row repeated over every row.
    Row,
    /// `R x 1` column repeated over every column.
    Col,
    /// `1 x 1` repeated everywhere.
    Scalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    Shift(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Recip(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    MaskedFill(Var, Vec<bool>),
    LayerNormRows(Var, Vec<f64>),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    GatherCols(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Records a computation graph for one forward pass.
///
/// A tape supports exactly one [`backward`](Tape::backward); build a fresh
/// tape for the next pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the loss
    /// through any differentiable path.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, materialising zeros when the loss is independent of it.
    pub fn wrt(&self, v: Var) -> Matrix {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Matrix {
        match self.grads.get_mut(v.0).and_then(Option::take) {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: Matrix, op: Op, needs_grad: bool) -> Result<Var, GradError> {
        if !value.is_finite() {
            return Err(GradError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Adds an input node. Gradients are only accumulated for leaves created
    /// with `requires_grad`.
    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Result<Var, GradError> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Matrix) -> Result<Var, GradError> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Matrix) -> Result<Var, GradError> {
        self.leaf(value, true)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, GradError> {
        let value = self.nodes[a.0].value.map(f);
        let needs = self.needs(a);
        self.push(name, value, op, needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(GradError::ShapeMismatch { op: "matmul", left: sa, right: sb });
        }
        let mut out = Matrix::zeros(sa.0, sb.1);
        matmul_acc(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out);
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul", out, Op::MatMul(a, b), needs)
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return Err(GradError::ShapeMismatch { op: "matmul_bt", left: sa, right: sb });
        }
        let mut out = Matrix::zeros(sa.0, sb.0);
        matmul_bt_acc(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out);
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul_bt", out, Op::MatMulBt(a, b), needs)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, GradError> {
        let value = self.nodes[a.0].value.transpose();
        let needs = self.needs(a);
        self.push("transpose", value, Op::Transpose(a), needs)
    }

    fn bcast(op: &'static str, sa: (usize, usize), sb: (usize, usize)) -> Result<Bcast, GradError> {
        if sa == sb {
            Ok(Bcast::Same)
        } else if sb == (1, 1) {
            Ok(Bcast::Scalar)
        } else if sb.0 == 1 && sb.1 == sa.1 {
            Ok(Bcast::Row)
        } else if sb.1 == 1 && sb.0 == sa.0 {
            Ok(Bcast::Col)
        } else {
            Err(GradError::ShapeMismatch { op, left: sa, right: sb })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var, GradError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bc = Self::bcast(name, sa, sb)?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = Matrix::zeros(sa.0, sa.1);
        for r in 0..sa.0 {
            for c in 0..sa.1 {
                let y = match bc {
                    Bcast::Same => bv.get(r, c),
                    Bcast::Row => bv.get(0, c),
                    Bcast::Col => bv.get(r, 0),
                    Bcast::Scalar => bv.get(0, 0),
                };
                out.set(r, c, f(av.get(r, c), y));
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(name, out, make(a, b, bc), needs)
    }

    /// Elementwise `a + b`; `b` may be a row, column or scalar broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Hadamard product with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var, GradError> {
        self.unary("scale", a, |x| x * k, Op::Scale(a, k))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, GradError> {
        self.scale(a, -1.0)
    }

    /// `a + k` for a constant `k`.
    pub fn shift(&mut self, a: Var, k: f64) -> Result<Var, GradError> {
        self.unary("shift", a, |x| x + k, Op::Shift(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary("recip", a, |x| 1.0 / x, Op::Recip(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, GradError> {
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Elementwise minimum of two same-shaped nodes. On ties the gradient
    /// flows to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(GradError::ShapeMismatch { op: "minimum", left: sa, right: sb });
        }
        let av = self.nodes[a.0].value.as_slice();
        let bv = self.nodes[b.0].value.as_slice();
        let data = av.iter().zip(bv).map(|(x, y)| x.min(*y)).collect();
        let needs = self.needs(a) || self.needs(b);
        self.push("minimum", Matrix::from_vec(sa.0, sa.1, data), Op::Minimum(a, b), needs)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, GradError> {
        let mut out = self.nodes[a.0].value.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let needs = self.needs(a);
        self.push("softmax_rows", out, Op::SoftmaxRows(a), needs)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var, GradError> {
        let mut out = self.nodes[a.0].value.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let needs = self.needs(a);
        self.push("log_softmax_rows", out, Op::LogSoftmaxRows(a), needs)
    }

    /// Horizontal concatenation; all parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, GradError> {
        let rows = parts.first().map_or(0, |&p| self.shape(p).0);
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(GradError::ShapeMismatch { op: "concat_cols", left: self.shape(parts[0]), right: s });
            }
            cols += s.1;
        }
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.nodes[p.0].value.row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), needs)
    }

    /// Vertical concatenation; all parts must share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, GradError> {
        let cols = parts.first().map_or(0, |&p| self.shape(p).1);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.1 != cols {
                return Err(GradError::ShapeMismatch { op: "concat_rows", left: self.shape(parts[0]), right: s });
            }
            rows += s.0;
            data.extend_from_slice(self.nodes[p.0].value.as_slice());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push("concat_rows", Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), needs)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, GradError> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(GradError::Invalid { op: "slice_cols", msg: format!("columns {start}..{} out of {c}", start + len) });
        }
        let src = &self.nodes[a.0].value;
        let mut out = Matrix::zeros(r, len);
        for i in 0..r {
            out.row_mut(i).copy_from_slice(&src.row(i)[start..start + len]);
        }
        let needs = self.needs(a);
        self.push("slice_cols", out, Op::SliceCols(a, start), needs)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, GradError> {
        let (r, c) = self.shape(a);
        if start + len > r {
            return Err(GradError::Invalid { op: "slice_rows", msg: format!("rows {start}..{} out of {r}", start + len) });
        }
        let src = &self.nodes[a.0].value.as_slice()[start * c..(start + len) * c];
        let out = Matrix::from_vec(len, c, src.to_vec());
        let needs = self.needs(a);
        self.push("slice_rows", out, Op::SliceRows(a, start), needs)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, GradError> {
        let s = self.nodes[a.0].value.as_slice().iter().sum();
        let needs = self.needs(a);
        self.push("sum", Matrix::scalar(s), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, GradError> {
        let v = &self.nodes[a.0].value;
        if v.is_empty() {
            return Err(GradError::Invalid { op: "mean", msg: "mean of an empty matrix".into() });
        }
        let s = v.as_slice().iter().sum::<f64>() / v.len() as f64;
        let needs = self.needs(a);
        self.push("mean", Matrix::scalar(s), Op::Mean(a), needs)
    }

    /// Row-wise sum, `R x C -> R x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var, GradError> {
        let v = &self.nodes[a.0].value;
        let data = (0..v.rows()).map(|r| v.row(r).iter().sum()).collect();
        let needs = self.needs(a);
        self.push("sum_rows", Matrix::col_vector(data), Op::SumRows(a), needs)
    }

    /// Replaces entries where `mask` is true by `fill`. The mask is row-major
    /// and must cover every entry.
    pub fn masked_fill(&mut self, a: Var, mask: Vec<bool>, fill: f64) -> Result<Var, GradError> {
        let v = &self.nodes[a.0].value;
        if mask.len() != v.len() {
            return Err(GradError::Invalid { op: "masked_fill", msg: format!("mask has {} entries for {} values", mask.len(), v.len()) });
        }
        let mut out = v.clone();
        for (o, &m) in out.as_mut_slice().iter_mut().zip(&mask) {
            if m {
                *o = fill;
            }
        }
        let needs = self.needs(a);
        self.push("masked_fill", out, Op::MaskedFill(a, mask), needs)
    }

    /// Normalises each row to zero mean and unit variance (biased variance).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var, GradError> {
        let mut out = self.nodes[a.0].value.clone();
        let cols = out.cols() as f64;
        let mut inv_std = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mu = row.iter().sum::<f64>() / cols;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / cols;
            let is = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mu) * is;
            }
            inv_std.push(is);
        }
        let needs = self.needs(a);
        self.push("layer_norm_rows", out, Op::LayerNormRows(a, inv_std), needs)
    }

    /// Picks `a[r, idx[r]]` for every row, `R x C -> R x 1`.
    pub fn gather_cols(&mut self, a: Var, idx: Vec<usize>) -> Result<Var, GradError> {
        let v = &self.nodes[a.0].value;
        if idx.len() != v.rows() || idx.iter().any(|&i| i >= v.cols()) {
            return Err(GradError::Invalid { op: "gather_cols", msg: format!("{} indices for a {}x{} matrix", idx.len(), v.rows(), v.cols()) });
        }
        let data = idx.iter().enumerate().map(|(r, &c)| v.get(r, c)).collect();
        let needs = self.needs(a);
        self.push("gather_cols", Matrix::col_vector(data), Op::GatherCols(a, idx), needs)
    }

    /// Row `i` of the output is row `idx[i]` of `a`; rows may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var, GradError> {
        let v = &self.nodes[a.0].value;
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.rows()) {
            return Err(GradError::Invalid { op: "gather_rows", msg: format!("row {bad} out of {}", v.rows()) });
        }
        let cols = v.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in &idx {
            data.extend_from_slice(v.row(i));
        }
        let needs = self.needs(a);
        self.push("gather_rows", Matrix::from_vec(idx.len(), cols, data), Op::GatherRows(a, idx), needs)
    }

    /// Back-propagates from a `1 x 1` loss.
    ///
    /// Can be called once per tape; a second call returns
    /// [`GradError::AlreadyBackward`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, GradError> {
        if self.consumed {
            return Err(GradError::AlreadyBackward);
        }
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(GradError::NotScalar { rows: r, cols: c });
        }
        self.consumed = true;
        let n = self.nodes.len();
        let shapes: Vec<_> = self.nodes.iter().map(|nd| nd.value.shape()).collect();
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Matrix::scalar(1.0));
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        // Only leaves that asked for gradients keep them.
        for (i, nd) in self.nodes.iter().enumerate() {
            if !matches!(nd.op, Op::Leaf) || !nd.needs_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        macro_rules! slot {
            ($v:expr) => {
                grad_slot(grads, $v, self.nodes[$v.0].value.shape())
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    matmul_bt_acc(g, val(*b), slot!(*a));
                }
                if needs(*b) {
                    matmul_at_acc(val(*a), g, slot!(*b));
                }
            }
            Op::MatMulBt(a, b) => {
                // C = A Bᵀ: dA = dC B, dB = dCᵀ A
                if needs(*a) {
                    matmul_acc(g, val(*b), slot!(*a));
                }
                if needs(*b) {
                    matmul_at_acc(g, val(*a), slot!(*b));
                }
            }
            Op::Transpose(a) => {
                if needs(*a) {
                    slot!(*a).add_assign(&g.transpose());
                }
            }
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs(*a) {
                    slot!(*a).add_assign(g);
                }
                if needs(*b) {
                    reduce_into(g, *bc, sign, None, slot!(*b));
                }
            }
            Op::Mul(a, b, bc) => {
                let (av, bv) = (val(*a), val(*b));
                if needs(*a) {
                    let ga = slot!(*a);
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            let y = match bc {
                                Bcast::Same => bv.get(r, c),
                                Bcast::Row => bv.get(0, c),
                                Bcast::Col => bv.get(r, 0),
                                Bcast::Scalar => bv.get(0, 0),
                            };
                            let cur = ga.get(r, c);
                            ga.set(r, c, cur + g.get(r, c) * y);
                        }
                    }
                }
                if needs(*b) {
                    reduce_into(g, *bc, 1.0, Some(av), slot!(*b));
                }
            }
            Op::Scale(a, k) => {
                if needs(*a) {
                    let ga = slot!(*a);
                    for (o, gv) in ga.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *o += k * gv;
                    }
                }
            }
            Op::Shift(a) => {
                if needs(*a) {
                    slot!(*a).add_assign(g);
                }
            }
            Op::Sigmoid(a) => self.elementwise_back(*a, g, &node.value, |_, y| y * (1.0 - y), grads),
            Op::Tanh(a) => self.elementwise_back(*a, g, &node.value, |_, y| 1.0 - y * y, grads),
            Op::Softplus(a) => self.elementwise_back(*a, g, &node.value, |x, _| sigmoid(x), grads),
            Op::Exp(a) => self.elementwise_back(*a, g, &node.value, |_, y| y, grads),
            Op::Log(a) => self.elementwise_back(*a, g, &node.value, |x, _| 1.0 / x, grads),
            Op::Recip(a) => self.elementwise_back(*a, g, &node.value, |_, y| -y * y, grads),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.elementwise_back(*a, g, &node.value, move |x, _| if x < lo || x > hi { 0.0 } else { 1.0 }, grads)
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if needs(*a) {
                    let ga = slot!(*a);
                    for i in 0..g.len() {
                        if av.as_slice()[i] <= bv.as_slice()[i] {
                            ga.as_mut_slice()[i] += g.as_slice()[i];
                        }
                    }
                }
                if needs(*b) {
                    let gb = slot!(*b);
                    for i in 0..g.len() {
                        if av.as_slice()[i] > bv.as_slice()[i] {
                            gb.as_mut_slice()[i] += g.as_slice()[i];
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if needs(*a) {
                    let y = &node.value;
                    let ga = slot!(*a);
                    for r in 0..y.rows() {
                        let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(p, q)| p * q).sum();
                        let yr = y.row(r);
                        let gr = g.row(r);
                        for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                            *o += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                if needs(*a) {
                    let y = &node.value;
                    let ga = slot!(*a);
                    for r in 0..y.rows() {
                        let gsum: f64 = g.row(r).iter().sum();
                        let yr = y.row(r);
                        let gr = g.row(r);
                        for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                            *o += gr[c] - yr[c].exp() * gsum;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.cols();
                    if needs(p) {
                        let gp = slot!(p);
                        for r in 0..g.rows() {
                            for (o, gv) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *o += gv;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.nodes[p.0].value.rows();
                    if needs(p) {
                        let gp = slot!(p);
                        let cols = gp.cols();
                        let src = &g.as_slice()[off * cols..(off + h) * cols];
                        for (o, gv) in gp.as_mut_slice().iter_mut().zip(src) {
                            *o += gv;
                        }
                    }
                    off += h;
                }
            }
            Op::SliceCols(a, start) => {
                if needs(*a) {
                    let ga = slot!(*a);
                    for r in 0..g.rows() {
                        for (o, gv) in ga.row_mut(r)[*start..*start + g.cols()].iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::SliceRows(a, start) => {
                if needs(*a) {
                    let ga = slot!(*a);
                    let cols = ga.cols();
                    let dst = &mut ga.as_mut_slice()[start * cols..(start + g.rows()) * cols];
                    for (o, gv) in dst.iter_mut().zip(g.as_slice()) {
                        *o += gv;
                    }
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                if needs(*a) {
                    let ga = slot!(*a);
                    let mut k = g.item();
                    if matches!(node.op, Op::Mean(_)) {
                        k /= ga.len() as f64;
                    }
                    for o in ga.as_mut_slice() {
                        *o += k;
                    }
                }
            }
            Op::SumRows(a) => {
                if needs(*a) {
                    let ga = slot!(*a);
                    for r in 0..ga.rows() {
                        let k = g.get(r, 0);
                        for o in ga.row_mut(r) {
                            *o += k;
                        }
                    }
                }
            }
            Op::MaskedFill(a, mask) => {
                if needs(*a) {
                    let ga = slot!(*a);
                    for ((o, gv), &m) in ga.as_mut_slice().iter_mut().zip(g.as_slice()).zip(mask) {
                        if !m {
                            *o += gv;
                        }
                    }
                }
            }
            Op::LayerNormRows(a, inv_std) => {
                if needs(*a) {
                    let xhat = &node.value;
                    let ga = slot!(*a);
                    let c = xhat.cols() as f64;
                    for r in 0..xhat.rows() {
                        let xr = xhat.row(r);
                        let gr = g.row(r);
                        let mean_g = gr.iter().sum::<f64>() / c;
                        let mean_gx = gr.iter().zip(xr).map(|(p, q)| p * q).sum::<f64>() / c;
                        let is = inv_std[r];
                        for (j, o) in ga.row_mut(r).iter_mut().enumerate() {
                            *o += is * (gr[j] - mean_g - xr[j] * mean_gx);
                        }
                    }
                }
            }
            Op::GatherCols(a, idx) => {
                if needs(*a) {
                    let ga = slot!(*a);
                    for (r, &c) in idx.iter().enumerate() {
                        let cur = ga.get(r, c);
                        ga.set(r, c, cur + g.get(r, 0));
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                if needs(*a) {
                    let ga = slot!(*a);
                    for (r, &src) in idx.iter().enumerate() {
                        for (o, gv) in ga.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                }
            }
        }
    }

    fn elementwise_back(
        &self,
        a: Var,
        g: &Matrix,
        out: &Matrix,
        d: impl Fn(f64, f64) -> f64,
        grads: &mut [Option<Matrix>],
    ) {
        if !self.nodes[a.0].needs_grad {
            return;
        }
        let x = &self.nodes[a.0].value;
        let slot = grads[a.0].get_or_insert_with(|| Matrix::zeros(x.rows(), x.cols()));
        for (((o, gv), xv), yv) in slot.as_mut_slice().iter_mut().zip(g.as_slice()).zip(x.as_slice()).zip(out.as_slice()) {
            *o += gv * d(*xv, *yv);
        }
    }
}

fn grad_slot(grads: &mut [Option<Matrix>], v: Var, shape: (usize, usize)) -> &mut Matrix {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

/// Accumulates `sign * g` (optionally `⊙ other`) into a broadcast operand's
/// gradient, summing over the broadcast axes.
fn reduce_into(g: &Matrix, bc: Bcast, sign: f64, other: Option<&Matrix>, dst: &mut Matrix) {
    for r in 0..g.rows() {
        for c in 0..g.cols() {
            let mut v = sign * g.get(r, c);
            if let Some(o) = other {
                v *= o.get(r, c);
            }
            let (dr, dc) = match bc {
                Bcast::Same => (r, c),
                Bcast::Row => (0, c),
                Bcast::Col => (r, 0),
                Bcast::Scalar => (0, 0),
            };
            let cur = dst.get(dr, dc);
            dst.set(dr, dc, cur + v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::row_vector(vec![0.0, 0.0])).unwrap();
        let y = t.softmax_rows(x).unwrap();
        assert_eq!(t.value(y).as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::scalar(0.0)).unwrap();
        let y = t.softplus(x).unwrap();
        assert!((t.item(y) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((t.item(y) - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let x = t.param(Matrix::row_vector(vec![1.0, 2.0, 3.0])).unwrap();
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(x).as_slice(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn independent_leaf_gets_zero_gradient() {
        let mut t = Tape::new();
        let x = t.param(Matrix::row_vector(vec![1.0, 2.0])).unwrap();
        let y = t.param(Matrix::row_vector(vec![3.0, 4.0])).unwrap();
        let loss = t.sum(y).unwrap();
        let g = t.backward(loss).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.wrt(x).as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut t = Tape::new();
        let x = t.param(Matrix::scalar(2.0)).unwrap();
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert!(matches!(t.backward(y), Err(GradError::AlreadyBackward)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.param(Matrix::row_vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(t.backward(x), Err(GradError::NotScalar { rows: 1, cols: 2 })));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::zeros(2, 3)).unwrap();
        let b = t.constant(Matrix::zeros(2, 3)).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn log_of_zero_is_reported_at_the_op() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::scalar(0.0)).unwrap();
        assert!(matches!(t.log(a), Err(GradError::NonFinite { op: "log" })));
    }

    #[test]
    fn masked_entries_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.param(Matrix::row_vector(vec![1.0, 2.0, 3.0])).unwrap();
        let m = t.masked_fill(x, vec![false, true, false], -1e30).unwrap();
        let s = t.softmax_rows(m).unwrap();
        assert_eq!(t.value(s).get(0, 1), 0.0);
        let l = t.gather_cols(s, vec![0]).unwrap();
        let l = t.sum(l).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(x).get(0, 1), 0.0);
    }
}
