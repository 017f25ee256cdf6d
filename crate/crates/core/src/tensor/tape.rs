//! Recording tape for reverse-mode differentiation.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node holding
//! its value and the information its vector-Jacobian product needs. Node ids
//! increase monotonically, so a node's inputs always precede it and a single
//! reverse sweep visits each node once.

use std::cell::{Cell, RefCell};
use std::rc::Rc;
use std::sync::Arc;

use rand::Rng;

use crate::cg::{self, CgConfig};
use crate::matrix::Matrix;
use crate::sparse::CsrMatrix;

use super::{Result, TensorError};

/// A constant sparse operand together with its transpose, which the backward
/// pass of a sparse product needs.
#[derive(Clone, Debug)]
pub struct SparseOperator {
    matrix: Arc<CsrMatrix>,
    transpose: Arc<CsrMatrix>,
}

impl SparseOperator {
    pub fn new(matrix: CsrMatrix) -> Self {
        let matrix = Arc::new(matrix);
        let transpose = if matrix.is_symmetric(0.0) {
            Arc::clone(&matrix)
        } else {
            Arc::new(matrix.transpose())
        };
        Self { matrix, transpose }
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn is_symmetric(&self) -> bool {
        Arc::ptr_eq(&self.matrix, &self.transpose)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Sin,
    Cos,
    Tanh,
    Exp,
    Ln,
    Softplus,
    Sigmoid,
    Gelu,
    Recip,
    Powf(f64),
    Clamp(f64, f64),
}

impl Unary {
    fn forward(self, x: f64) -> f64 {
        match self {
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Softplus => softplus(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Gelu => x * normal_cdf(x),
            Unary::Recip => 1.0 / x,
            Unary::Powf(p) => x.powf(p),
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
        }
    }

    /// Derivative at input `x` with output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Softplus => sigmoid(x),
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Gelu => normal_cdf(x) + x * normal_pdf(x),
            Unary::Recip => -y * y,
            Unary::Powf(p) => {
                if x == 0.0 {
                    if p > 1.0 {
                        0.0
                    } else if p == 1.0 {
                        1.0
                    } else {
                        f64::INFINITY
                    }
                } else {
                    p * x.powf(p - 1.0)
                }
            }
            Unary::Clamp(lo, hi) => {
                if (lo..=hi).contains(&x) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn name(self) -> &'static str {
        match self {
            Unary::Sin => "sin",
            Unary::Cos => "cos",
            Unary::Tanh => "tanh",
            Unary::Exp => "exp",
            Unary::Ln => "ln",
            Unary::Softplus => "softplus",
            Unary::Sigmoid => "sigmoid",
            Unary::Gelu => "gelu",
            Unary::Recip => "recip",
            Unary::Powf(_) => "powf",
            Unary::Clamp(..) => "clamp",
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    SpMM(SparseOperator, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    MulConst(usize, Rc<Matrix>),
    Scale(usize, f64),
    AddScalar(usize),
    Concat(Vec<usize>),
    SelectRows(usize, Vec<usize>),
    SliceCols(usize, usize),
    Gather(usize, Vec<(usize, usize)>),
    Sum(usize),
    Mean(usize),
    SumCols(usize),
    MeanRows(usize),
    Unary(usize, Unary),
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Matrix, inv_std: Vec<f64> },
    Softmax(usize),
    ShiftedSolve { laplacian: SparseOperator, shift: f64, cfg: CgConfig, input: usize },
}

struct Node {
    value: Rc<Matrix>,
    op: Op,
    tracked: bool,
}

/// Operation recorder. One tape per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    strict: bool,
    fault: Cell<Option<&'static str>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let v = self.value();
        write!(f, "Var#{}({}x{})", self.id, v.rows(), v.cols())
    }
}

/// Gradients of a scalar with respect to every tracked leaf.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Matrix> {
        self.leaves.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Matrix> {
        self.leaves.get_mut(var.id).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that flags any non-finite value produced by an operation; the
    /// fault surfaces from [`Tape::check_finite`] and [`Tape::backward`].
    pub fn strict() -> Self {
        Self { strict: true, ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix, op: Op, tracked: bool) -> Var<'_> {
        if self.strict && self.fault.get().is_none() && !value.is_finite() {
            self.fault.set(Some(op_name(&op)));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, tracked });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    fn value_of(&self, id: usize) -> Rc<Matrix> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Leaf whose gradient is collected by [`Tape::backward`].
    pub fn param(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&self, value: Matrix, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.fault.get() {
            Some(op) => Err(TensorError::NonFiniteInput { op }),
            None => Ok(()),
        }
    }

    /// Horizontal concatenation (along the last axis).
    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let values: Vec<Rc<Matrix>> = parts.iter().map(|v| v.value()).collect();
        let rows = values.first().map_or(0, |m| m.rows());
        if let Some(bad) = values.iter().find(|m| m.rows() != rows) {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                left: values[0].shape(),
                right: bad.shape(),
            });
        }
        let refs: Vec<&Matrix> = values.iter().map(|m| m.as_ref()).collect();
        let out = Matrix::hconcat(&refs);
        let tracked = parts.iter().any(|v| self.tracked(v.id));
        Ok(self.push(out, Op::Concat(parts.iter().map(|v| v.id).collect()), tracked))
    }

    /// Reverse sweep from a `1 × 1` loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check_finite()?;
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.id].value.shape();
        if shape != [1, 1] {
            return Err(TensorError::NonScalarLoss { shape });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.id + 1];
        let mut leaves: Vec<Option<Matrix>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Matrix::scalar(1.0));

        let acc = |grads: &mut Vec<Option<Matrix>>, id: usize, g: Matrix| {
            if !nodes[id].tracked {
                return;
            }
            match &mut grads[id] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            let val = |i: usize| -> &Matrix { &nodes[i].value };
            match &node.op {
                Op::Leaf => leaves[id] = Some(g),
                &Op::MatMul(a, b) => {
                    if nodes[a].tracked {
                        acc(&mut grads, a, g.matmul_nt(val(b)));
                    }
                    if nodes[b].tracked {
                        acc(&mut grads, b, val(a).matmul_tn(&g));
                    }
                }
                Op::SpMM(op, b) => acc(&mut grads, *b, op.transpose.mul_dense(&g)),
                &Op::Add(a, b) => {
                    acc(&mut grads, a, g.clone());
                    acc(&mut grads, b, g);
                }
                &Op::Sub(a, b) => {
                    acc(&mut grads, b, g.scale(-1.0));
                    acc(&mut grads, a, g);
                }
                &Op::Mul(a, b) => {
                    if nodes[a].tracked {
                        acc(&mut grads, a, g.hadamard(val(b)));
                    }
                    if nodes[b].tracked {
                        acc(&mut grads, b, g.hadamard(val(a)));
                    }
                }
                &Op::AddRow(a, r) => {
                    if nodes[r].tracked {
                        acc(&mut grads, r, column_sums(&g));
                    }
                    acc(&mut grads, a, g);
                }
                &Op::MulCol(a, c) => {
                    if nodes[c].tracked {
                        let av = val(a);
                        let gc: Vec<f64> = (0..g.rows())
                            .map(|i| g.row(i).iter().zip(av.row(i)).map(|(x, y)| x * y).sum())
                            .collect();
                        acc(&mut grads, c, Matrix::column(gc));
                    }
                    if nodes[a].tracked {
                        let cv = val(c);
                        let mut ga = g;
                        for i in 0..ga.rows() {
                            let s = cv.get(i, 0);
                            ga.row_mut(i).iter_mut().for_each(|x| *x *= s);
                        }
                        acc(&mut grads, a, ga);
                    }
                }
                Op::MulConst(a, c) => acc(&mut grads, *a, g.hadamard(c)),
                &Op::Scale(a, c) => acc(&mut grads, a, g.scale(c)),
                &Op::AddScalar(a) => acc(&mut grads, a, g),
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = val(p).cols();
                        if nodes[p].tracked {
                            acc(&mut grads, p, slice_cols(&g, start, w));
                        }
                        start += w;
                    }
                }
                Op::SelectRows(a, idx) => {
                    let av = val(*a);
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, x) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += x;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                &Op::SliceCols(a, start) => {
                    let av = val(a);
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    for i in 0..g.rows() {
                        ga.row_mut(i)[start..start + g.cols()].copy_from_slice(g.row(i));
                    }
                    acc(&mut grads, a, ga);
                }
                Op::Gather(a, idx) => {
                    let av = val(*a);
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    for (k, &(i, j)) in idx.iter().enumerate() {
                        ga.set(i, j, ga.get(i, j) + g.get(k, 0));
                    }
                    acc(&mut grads, *a, ga);
                }
                &Op::Sum(a) => {
                    let [r, c] = val(a).shape();
                    acc(&mut grads, a, Matrix::filled(r, c, g.item()));
                }
                &Op::Mean(a) => {
                    let [r, c] = val(a).shape();
                    acc(&mut grads, a, Matrix::filled(r, c, g.item() / (r * c) as f64));
                }
                &Op::SumCols(a) => {
                    let [r, c] = val(a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..r {
                        let gi = g.get(i, 0);
                        ga.row_mut(i).iter_mut().for_each(|x| *x = gi);
                    }
                    acc(&mut grads, a, ga);
                }
                &Op::MeanRows(a) => {
                    let [r, c] = val(a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..r {
                        for j in 0..c {
                            ga.set(i, j, g.get(0, j) / r as f64);
                        }
                    }
                    acc(&mut grads, a, ga);
                }
                &Op::Unary(a, kind) => {
                    let x = val(a);
                    let y = &node.value;
                    let mut ga = g;
                    for ((gi, &xi), &yi) in ga.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                        *gi *= kind.derivative(xi, yi);
                    }
                    acc(&mut grads, a, ga);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let gamma = val(gain);
                    if nodes[bias].tracked {
                        acc(&mut grads, bias, column_sums(&g));
                    }
                    if nodes[gain].tracked {
                        acc(&mut grads, gain, column_sums(&g.hadamard(xhat)));
                    }
                    if nodes[x].tracked {
                        let d = g.cols() as f64;
                        let mut gx = Matrix::zeros(g.rows(), g.cols());
                        for i in 0..g.rows() {
                            let gh: Vec<f64> =
                                g.row(i).iter().zip(gamma.row(0)).map(|(a, b)| a * b).collect();
                            let s1: f64 = gh.iter().sum();
                            let s2: f64 = gh.iter().zip(xhat.row(i)).map(|(a, b)| a * b).sum();
                            for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                                *o = inv_std[i] / d * (d * gh[j] - s1 - xhat.get(i, j) * s2);
                            }
                        }
                        acc(&mut grads, x, gx);
                    }
                }
                &Op::Softmax(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                        for (j, o) in ga.row_mut(i).iter_mut().enumerate() {
                            *o = y.get(i, j) * (g.get(i, j) - dot);
                        }
                    }
                    acc(&mut grads, a, ga);
                }
                Op::ShiftedSolve { laplacian, shift, cfg, input } => {
                    // (I + shift·L) is symmetric, so the adjoint solve reuses it.
                    let gi = cg::solve_shifted_columns(laplacian.matrix(), *shift, &g, *cfg)
                        .map_err(|e| TensorError::CgNonConvergence {
                            residual: e.residual,
                            iterations: e.iterations,
                        })?;
                    acc(&mut grads, *input, gi);
                }
            }
        }
        Ok(Gradients { leaves })
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::SpMM(..) => "spmm",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::MulCol(..) => "mul_col",
        Op::MulConst(..) => "mul_const",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Concat(..) => "concat",
        Op::SelectRows(..) => "select_rows",
        Op::SliceCols(..) => "slice_cols",
        Op::Gather(..) => "gather",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::SumCols(..) => "sum_cols",
        Op::MeanRows(..) => "mean_rows",
        Op::Unary(_, u) => u.name(),
        Op::LayerNorm { .. } => "layer_norm",
        Op::Softmax(..) => "softmax",
        Op::ShiftedSolve { .. } => "shifted_solve",
    }
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (o, x) in out.iter_mut().zip(m.row(i)) {
            *o += x;
        }
    }
    Matrix::row_vector(out)
}

fn slice_cols(m: &Matrix, start: usize, width: usize) -> Matrix {
    let mut data = Vec::with_capacity(m.rows() * width);
    for i in 0..m.rows() {
        data.extend_from_slice(&m.row(i)[start..start + width]);
    }
    Matrix::new(m.rows(), width, data)
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Matrix> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> [usize; 2] {
        self.value().shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.tracked(self.id)
    }

    /// Same value, cut off from the gradient graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value().as_ref().clone())
    }

    fn unary_node(self, out: Matrix, op: Op) -> Var<'t> {
        let tracked = self.requires_grad();
        self.tape.push(out, op, tracked)
    }

    fn binary_node(self, other: Var<'t>, out: Matrix, op: Op) -> Var<'t> {
        let tracked = self.requires_grad() || other.requires_grad();
        self.tape.push(out, op, tracked)
    }

    fn same_shape(self, other: Var<'t>, op: &'static str) -> Result<(Rc<Matrix>, Rc<Matrix>)> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch { op, left: a.shape(), right: b.shape() });
        }
        Ok((a, b))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.cols() != b.rows() {
            return Err(TensorError::ShapeMismatch { op: "matmul", left: a.shape(), right: b.shape() });
        }
        let out = a.matmul(&b);
        Ok(self.binary_node(other, out, Op::MatMul(self.id, other.id)))
    }

    /// `S · self` for a constant sparse `S`.
    pub fn spmm_left(self, op: &SparseOperator) -> Result<Var<'t>> {
        let b = self.value();
        if op.matrix.ncols() != b.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "spmm",
                left: [op.matrix.nrows(), op.matrix.ncols()],
                right: b.shape(),
            });
        }
        let out = op.matrix.mul_dense(&b);
        Ok(self.unary_node(out, Op::SpMM(op.clone(), self.id)))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other, "add")?;
        Ok(self.binary_node(other, a.add(&b), Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other, "sub")?;
        Ok(self.binary_node(other, a.sub(&b), Op::Sub(self.id, other.id)))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other, "mul")?;
        Ok(self.binary_node(other, a.hadamard(&b), Op::Mul(self.id, other.id)))
    }

    /// Adds a `1 × C` row to every row.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let (a, r) = (self.value(), row.value());
        if r.rows() != 1 || r.cols() != a.cols() {
            return Err(TensorError::ShapeMismatch { op: "add_row", left: a.shape(), right: r.shape() });
        }
        let mut out = a.as_ref().clone();
        for i in 0..out.rows() {
            for (o, x) in out.row_mut(i).iter_mut().zip(r.row(0)) {
                *o += x;
            }
        }
        Ok(self.binary_node(row, out, Op::AddRow(self.id, row.id)))
    }

    /// Scales row `i` by `col[i]` for an `N × 1` column.
    pub fn mul_col(self, col: Var<'t>) -> Result<Var<'t>> {
        let (a, c) = (self.value(), col.value());
        if c.cols() != 1 || c.rows() != a.rows() {
            return Err(TensorError::ShapeMismatch { op: "mul_col", left: a.shape(), right: c.shape() });
        }
        let mut out = a.as_ref().clone();
        for i in 0..out.rows() {
            let s = c.get(i, 0);
            out.row_mut(i).iter_mut().for_each(|x| *x *= s);
        }
        Ok(self.binary_node(col, out, Op::MulCol(self.id, col.id)))
    }

    /// Elementwise product with a constant matrix (dropout masks).
    pub fn mul_const(self, c: Matrix) -> Result<Var<'t>> {
        let a = self.value();
        if a.shape() != c.shape() {
            return Err(TensorError::ShapeMismatch { op: "mul_const", left: a.shape(), right: c.shape() });
        }
        let out = a.hadamard(&c);
        Ok(self.unary_node(out, Op::MulConst(self.id, Rc::new(c))))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let out = self.value().scale(c);
        self.unary_node(out, Op::Scale(self.id, c))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let out = self.value().map(|x| x + c);
        self.unary_node(out, Op::AddScalar(self.id))
    }

    /// Rows `indices` in order (a row slice when the indices are contiguous).
    pub fn select_rows(self, indices: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        if let Some(&bad) = indices.iter().find(|&&i| i >= a.rows()) {
            return Err(TensorError::ShapeMismatch { op: "select_rows", left: a.shape(), right: [bad, 0] });
        }
        let out = a.select_rows(indices);
        Ok(self.unary_node(out, Op::SelectRows(self.id, indices.to_vec())))
    }

    pub fn slice_cols(self, start: usize, width: usize) -> Result<Var<'t>> {
        let a = self.value();
        if start + width > a.cols() {
            return Err(TensorError::ShapeMismatch { op: "slice_cols", left: a.shape(), right: [start, width] });
        }
        let out = slice_cols(&a, start, width);
        Ok(self.unary_node(out, Op::SliceCols(self.id, start)))
    }

    /// Entries at `(row, col)` positions as a `K × 1` column.
    pub fn gather(self, positions: &[(usize, usize)]) -> Result<Var<'t>> {
        let a = self.value();
        if let Some(&(i, j)) = positions.iter().find(|&&(i, j)| i >= a.rows() || j >= a.cols()) {
            return Err(TensorError::ShapeMismatch { op: "gather", left: a.shape(), right: [i, j] });
        }
        let out = Matrix::column(positions.iter().map(|&(i, j)| a.get(i, j)).collect());
        Ok(self.unary_node(out, Op::Gather(self.id, positions.to_vec())))
    }

    /// `−ln p[i, label_i]` for each `(i, label_i)`, as a column.
    pub fn nll_gather(self, positions: &[(usize, usize)]) -> Result<Var<'t>> {
        Ok(self.gather(positions)?.ln().neg())
    }

    pub fn sum(self) -> Var<'t> {
        let out = Matrix::scalar(self.value().sum());
        self.unary_node(out, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let a = self.value();
        let out = Matrix::scalar(a.sum() / a.len().max(1) as f64);
        self.unary_node(out, Op::Mean(self.id))
    }

    /// Per-row sums (`N × C → N × 1`).
    pub fn sum_cols(self) -> Var<'t> {
        let a = self.value();
        let out = Matrix::column((0..a.rows()).map(|i| a.row(i).iter().sum()).collect());
        self.unary_node(out, Op::SumCols(self.id))
    }

    /// Per-column means over rows (`N × C → 1 × C`).
    pub fn mean_rows(self) -> Var<'t> {
        let a = self.value();
        let n = a.rows().max(1) as f64;
        let out = column_sums(&a).scale(1.0 / n);
        self.unary_node(out, Op::MeanRows(self.id))
    }

    fn elementwise(self, kind: Unary) -> Var<'t> {
        let out = self.value().map(|x| kind.forward(x));
        self.unary_node(out, Op::Unary(self.id, kind))
    }

    pub fn sin(self) -> Var<'t> {
        self.elementwise(Unary::Sin)
    }

    pub fn cos(self) -> Var<'t> {
        self.elementwise(Unary::Cos)
    }

    pub fn tanh(self) -> Var<'t> {
        self.elementwise(Unary::Tanh)
    }

    pub fn exp(self) -> Var<'t> {
        self.elementwise(Unary::Exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.elementwise(Unary::Ln)
    }

    pub fn softplus(self) -> Var<'t> {
        self.elementwise(Unary::Softplus)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.elementwise(Unary::Sigmoid)
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(self) -> Var<'t> {
        self.elementwise(Unary::Gelu)
    }

    pub fn recip(self) -> Var<'t> {
        self.elementwise(Unary::Recip)
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        self.elementwise(Unary::Powf(p))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.elementwise(Unary::Clamp(lo, hi))
    }

    /// Per-row normalisation to zero mean and unit population variance,
    /// followed by the learned `1 × D` gain and bias.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let (g, b) = (gain.value(), bias.value());
        for p in [&g, &b] {
            if p.shape() != [1, x.cols()] {
                return Err(TensorError::ShapeMismatch { op: "layer_norm", left: x.shape(), right: p.shape() });
            }
        }
        let d = x.cols() as f64;
        let mut xhat = Matrix::zeros(x.rows(), x.cols());
        let mut inv_std = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = x.row(i);
            let mu = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, v) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = (v - mu) * inv;
            }
            inv_std.push(inv);
        }
        let mut out = xhat.clone();
        for i in 0..out.rows() {
            for ((o, gj), bj) in out.row_mut(i).iter_mut().zip(g.row(0)).zip(b.row(0)) {
                *o = *o * gj + bj;
            }
        }
        let tracked = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            out,
            Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id, xhat, inv_std },
            tracked,
        ))
    }

    /// Row-wise softmax.
    pub fn softmax(self) -> Var<'t> {
        let a = self.value();
        let mut out = a.as_ref().clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.unary_node(out, Op::Softmax(self.id))
    }

    /// Inverted dropout: in training mode keeps each entry with probability
    /// `1 − p` and scales kept entries by `1/(1 − p)`; identity otherwise.
    pub fn dropout<R: Rng + ?Sized>(self, p: f64, training: bool, rng: &mut R) -> Result<Var<'t>> {
        if !training || p <= 0.0 {
            return Ok(self);
        }
        let [r, c] = self.shape();
        let keep = 1.0 - p;
        let mask: Vec<f64> =
            (0..r * c).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        self.mul_const(Matrix::new(r, c, mask))
    }

    /// Solves `(I + shift·L) Y = self` column-wise with conjugate gradient.
    pub fn solve_shifted(self, laplacian: &SparseOperator, shift: f64, cfg: CgConfig) -> Result<Var<'t>> {
        let b = self.value();
        if laplacian.matrix.nrows() != b.rows() || !laplacian.is_symmetric() {
            return Err(TensorError::ShapeMismatch {
                op: "solve_shifted",
                left: [laplacian.matrix.nrows(), laplacian.matrix.ncols()],
                right: b.shape(),
            });
        }
        let out = cg::solve_shifted_columns(&laplacian.matrix, shift, &b, cfg).map_err(|e| {
            TensorError::CgNonConvergence { residual: e.residual, iterations: e.iterations }
        })?;
        Ok(self.unary_node(
            out,
            Op::ShiftedSolve { laplacian: laplacian.clone(), shift, cfg, input: self.id },
        ))
    }
}
