//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes are
//! addressed by [`Var`] handles; calling [`Tape::backward`] on a scalar node
//! returns gradients for every node that depends on an input.
//!
//! Only the primitives needed by the recommender are provided, including a
//! few fused ones (segment softmax, per-relation matrix-vector products,
//! batch normalization) whose backward passes are hand-written.

use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

use crate::sparse::SparseOperator;

pub type Mat = Array2<f64>;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row groups for [`Tape::relation_matvec`]: `groups[r]` lists the rows that
/// are transformed by relation `r`'s square matrix.
#[derive(Clone, Debug)]
pub struct RelationGroups {
    pub groups: Vec<Vec<usize>>,
}

impl RelationGroups {
    pub fn from_relations(relations: &[usize], relation_count: usize) -> Self {
        let mut groups = vec![Vec::new(); relation_count];
        for (row, &r) in relations.iter().enumerate() {
            groups[r].push(row);
        }
        Self { groups }
    }

    fn len(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }
}

enum Op {
    Input,
    Constant,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    ConstMatMul(Rc<Mat>, Var),
    SpMM(Rc<SparseOperator>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Rc<Mat>),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Ln(Var),
    LogSigmoid(Var),
    Abs(Var),
    Gather(Var, Rc<[usize]>),
    ScatterAdd(Var, Rc<[usize]>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    RowSum(Var),
    Sum(Var),
    Mean(Var),
    RowDot(Var, Var),
    RowNormalize(Var, Vec<f64>),
    RowSoftmax(Var),
    SegmentSoftmax(Var, Rc<[usize]>),
    RelationMatVec(Var, Rc<RelationGroups>, Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        inv_std: Vec<f64>,
        normalized: Mat,
    },
    Norm(Var),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

fn scalar(v: f64) -> Mat {
    Array2::from_elem((1, 1), v)
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

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Input, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Constant copy of `v`'s current value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    /// `c · x` for a constant left factor shared across tapes.
    pub fn const_matmul(&mut self, c: Rc<Mat>, x: Var) -> Var {
        let value = c.dot(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::ConstMatMul(c, x), rg)
    }

    /// Sparse message passing `S · x` with a frozen operator.
    pub fn spmm(&mut self, op: Rc<SparseOperator>, x: Var) -> Var {
        let value = op.forward.matmul_dense(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::SpMM(op, x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// Adds a `1×k` row to every row of an `n×k` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a single row");
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// Scales row `i` of an `n×k` matrix by entry `i` of an `n×1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.value(col).ncols(), 1, "mul_col expects a single column");
        let value = self.value(a) * self.value(col);
        let rg = self.rg(a) || self.rg(col);
        self.push(value, Op::MulCol(a, col), rg)
    }

    /// Multiplies every entry by a `1×1` node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let value = self.value(a) * k;
        let rg = self.rg(a) || self.rg(s);
        self.push(value, Op::MulScalar(a, s), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    /// Elementwise product with a constant (dropout masks, fixed slopes).
    pub fn mul_const(&mut self, a: Var, c: Rc<Mat>) -> Var {
        let value = self.value(a) * &*c;
        let rg = self.rg(a);
        self.push(value, Op::MulConst(a, c), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self
            .value(a)
            .mapv(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(a);
        self.push(value, Op::LeakyRelu(a, slope), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        let rg = self.rg(a);
        self.push(value, Op::Ln(a), rg)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(log_sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::LogSigmoid(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::abs);
        let rg = self.rg(a);
        self.push(value, Op::Abs(a), rg)
    }

    /// Selects rows `idx` (repetition allowed).
    pub fn gather(&mut self, a: Var, idx: Rc<[usize]>) -> Var {
        let value = self.value(a).select(Axis(0), &idx);
        let rg = self.rg(a);
        self.push(value, Op::Gather(a, idx), rg)
    }

    /// Sums row `k` of `a` into output row `idx[k]` of an `out_rows`-row result.
    pub fn scatter_add(&mut self, a: Var, idx: Rc<[usize]>, out_rows: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.nrows(), idx.len(), "scatter index length mismatch");
        let mut value = Array2::zeros((out_rows, src.ncols()));
        for (k, &target) in idx.iter().enumerate() {
            let mut row = value.row_mut(target);
            row += &src.row(k);
        }
        let rg = self.rg(a);
        self.push(value, Op::ScatterAdd(a, idx), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows column mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + width]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    /// `n×k → n×1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(a);
        self.push(value, Op::RowSum(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let n = m.len().max(1) as f64;
        let value = scalar(m.sum() / n);
        let rg = self.rg(a);
        self.push(value, Op::Mean(a), rg)
    }

    /// Rowwise inner products, `n×1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let value = (self.value(a) * self.value(b))
            .sum_axis(Axis(1))
            .insert_axis(Axis(1));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::RowDot(a, b), rg)
    }

    /// Scales each row to unit L2 norm; zero rows stay zero.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let norms: Vec<f64> = src
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .collect();
        let mut value = src.clone();
        for (mut row, &n) in value.rows_mut().into_iter().zip(&norms) {
            if n > 0.0 {
                row /= n;
            } else {
                row.fill(0.0);
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::RowNormalize(a, norms), rg)
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let z = row.sum();
            row /= z;
        }
        let rg = self.rg(a);
        self.push(value, Op::RowSoftmax(a), rg)
    }

    /// Softmax of an `n×1` column within contiguous segments
    /// `offsets[s]..offsets[s+1]`.
    pub fn segment_softmax(&mut self, a: Var, offsets: Rc<[usize]>) -> Var {
        let src = self.value(a);
        assert_eq!(src.ncols(), 1, "segment softmax expects a column");
        assert_eq!(*offsets.last().unwrap_or(&0), src.nrows(), "segment offsets mismatch");
        let mut value = src.clone();
        for w in offsets.windows(2) {
            if w[0] == w[1] {
                continue;
            }
            let mut seg = value.slice_mut(s![w[0]..w[1], 0]);
            let max = seg.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            seg.mapv_inplace(|x| (x - max).exp());
            let z = seg.sum();
            seg /= z;
        }
        let rg = self.rg(a);
        self.push(value, Op::SegmentSoftmax(a, offsets), rg)
    }

    /// Row `n` of the result is `W_{r(n)} · x_n`, where `weights` stacks the
    /// square per-relation matrices vertically.
    pub fn relation_matvec(&mut self, weights: Var, groups: Rc<RelationGroups>, x: Var) -> Var {
        let w = self.value(weights);
        let xv = self.value(x);
        let dim = w.ncols();
        assert_eq!(xv.ncols(), dim, "relation transform dimension mismatch");
        assert_eq!(groups.len(), xv.nrows(), "relation groups do not cover the input rows");
        assert_eq!(w.nrows(), dim * groups.groups.len(), "relation transform stack mismatch");
        let mut value = Array2::zeros(xv.raw_dim());
        for (r, rows) in groups.groups.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let wr = w.slice(s![r * dim..(r + 1) * dim, ..]);
            let xr = xv.select(Axis(0), rows);
            let out = xr.dot(&wr.t());
            for (k, &row) in rows.iter().enumerate() {
                value.row_mut(row).assign(&out.row(k));
            }
        }
        let rg = self.rg(weights) || self.rg(x);
        self.push(value, Op::RelationMatVec(weights, groups, x), rg)
    }

    /// Training-mode batch normalization over rows with biased variance.
    /// `gamma` and `beta` are `1×k`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let mean = xv.mean_axis(Axis(0)).expect("batch norm over empty batch");
        let centered = xv - &mean;
        let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).unwrap();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let inv = ndarray::Array1::from(inv_std.clone());
        let normalized = centered * &inv;
        let value = &normalized * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                inv_std,
                normalized,
            },
            rg,
        )
    }

    /// Frobenius norm, `1×1`.
    pub fn norm(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = scalar(m.iter().map(|v| v * v).sum::<f64>().sqrt());
        let rg = self.rg(a);
        self.push(value, Op::Norm(a), rg)
    }

    /// Sum of squared entries, `1×1`.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let sq = self.mul(a, a);
        self.sum(sq)
    }

    /// Backpropagates from a `1×1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward expects a scalar loss");
        let mut grads: Vec<Option<Mat>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, contribution: Mat) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &contribution,
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let y = &node.value;
        match &node.op {
            Op::Input | Op::Constant => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.dot(self.value(*b)));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::ConstMatMul(c, x) => {
                self.accumulate(grads, *x, c.t().dot(g));
            }
            Op::SpMM(op, x) => {
                self.accumulate(grads, *x, op.adjoint.matmul_dense(g));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*row) {
                    self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulCol(a, col) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g * self.value(*col));
                }
                if self.rg(*col) {
                    let gc = (g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    self.accumulate(grads, *col, gc);
                }
            }
            Op::MulScalar(a, s) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g * self.scalar(*s));
                }
                if self.rg(*s) {
                    self.accumulate(grads, *s, scalar((g * self.value(*a)).sum()));
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g * *k),
            Op::MulConst(a, c) => self.accumulate(grads, *a, g * &**c),
            Op::Tanh(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, &t| *d *= 1.0 - t * t);
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, &s| *d *= s * (1.0 - s));
                self.accumulate(grads, *a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| {
                        if x <= 0.0 {
                            *d *= slope
                        }
                    });
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => self.accumulate(grads, *a, g * y),
            Op::Ln(a) => self.accumulate(grads, *a, g / self.value(*a)),
            Op::LogSigmoid(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| *d *= sigmoid(-x));
                self.accumulate(grads, *a, d);
            }
            Op::Abs(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| *d *= if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 });
                self.accumulate(grads, *a, d);
            }
            Op::Gather(a, idx) => {
                let src = self.value(*a);
                let mut d = Array2::zeros(src.raw_dim());
                for (k, &row) in idx.iter().enumerate() {
                    let mut target = d.row_mut(row);
                    target += &g.row(k);
                }
                self.accumulate(grads, *a, d);
            }
            Op::ScatterAdd(a, idx) => {
                self.accumulate(grads, *a, g.select(Axis(0), idx));
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.value(p).nrows();
                    self.accumulate(grads, p, g.slice(s![start..start + n, ..]).to_owned());
                    start += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.value(p).ncols();
                    self.accumulate(grads, p, g.slice(s![.., start..start + n]).to_owned());
                    start += n;
                }
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut d = Array2::zeros(src.raw_dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                self.accumulate(grads, *a, d);
            }
            Op::RowSum(a) => {
                let src = self.value(*a);
                let d = Array2::from_shape_fn(src.raw_dim(), |(r, _)| g[[r, 0]]);
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let src = self.value(*a);
                self.accumulate(grads, *a, Array2::from_elem(src.raw_dim(), g[[0, 0]]));
            }
            Op::Mean(a) => {
                let src = self.value(*a);
                let n = src.len().max(1) as f64;
                self.accumulate(grads, *a, Array2::from_elem(src.raw_dim(), g[[0, 0]] / n));
            }
            Op::RowDot(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, self.value(*b) * g);
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.value(*a) * g);
                }
            }
            Op::RowNormalize(a, norms) => {
                let mut d = g.clone();
                for ((mut drow, yrow), &n) in d.rows_mut().into_iter().zip(y.rows()).zip(norms) {
                    if n > 0.0 {
                        let proj = yrow.dot(&drow);
                        drow.scaled_add(-proj, &yrow);
                        drow /= n;
                    } else {
                        drow.fill(0.0);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::RowSoftmax(a) => {
                let mut d = g * y;
                let dots = d.sum_axis(Axis(1));
                for ((mut drow, yrow), dot) in d.rows_mut().into_iter().zip(y.rows()).zip(dots) {
                    drow.scaled_add(-dot, &yrow);
                }
                self.accumulate(grads, *a, d);
            }
            Op::SegmentSoftmax(a, offsets) => {
                let mut d = g * y;
                for w in offsets.windows(2) {
                    let dot: f64 = d.slice(s![w[0]..w[1], 0]).sum();
                    for k in w[0]..w[1] {
                        d[[k, 0]] -= dot * y[[k, 0]];
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::RelationMatVec(weights, groups, x) => {
                let w = self.value(*weights);
                let xv = self.value(*x);
                let dim = w.ncols();
                let mut dw = if self.rg(*weights) {
                    Some(Array2::zeros(w.raw_dim()))
                } else {
                    None
                };
                let mut dx = if self.rg(*x) {
                    Some(Array2::zeros(xv.raw_dim()))
                } else {
                    None
                };
                for (r, rows) in groups.groups.iter().enumerate() {
                    if rows.is_empty() {
                        continue;
                    }
                    let wr = w.slice(s![r * dim..(r + 1) * dim, ..]);
                    let gr = g.select(Axis(0), rows);
                    if let Some(dw) = dw.as_mut() {
                        let xr = xv.select(Axis(0), rows);
                        let mut block = dw.slice_mut(s![r * dim..(r + 1) * dim, ..]);
                        block += &gr.t().dot(&xr);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let part = gr.dot(&wr);
                        for (k, &row) in rows.iter().enumerate() {
                            dx.row_mut(row).assign(&part.row(k));
                        }
                    }
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *weights, dw);
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                inv_std,
                normalized,
            } => {
                let n = normalized.nrows() as f64;
                let gamma_v = self.value(*gamma);
                let sum_g = g.sum_axis(Axis(0));
                let sum_gx = (g * normalized).sum_axis(Axis(0));
                if self.rg(*gamma) {
                    self.accumulate(grads, *gamma, sum_gx.clone().insert_axis(Axis(0)));
                }
                if self.rg(*beta) {
                    self.accumulate(grads, *beta, sum_g.clone().insert_axis(Axis(0)));
                }
                if self.rg(*x) {
                    let mut d = g * n;
                    d -= &sum_g;
                    d -= &(normalized * &sum_gx);
                    for (c, mut col) in d.columns_mut().into_iter().enumerate() {
                        col *= gamma_v[[0, c]] * inv_std[c] / n;
                    }
                    self.accumulate(grads, *x, d);
                }
            }
            Op::Norm(a) => {
                let n = y[[0, 0]];
                let src = self.value(*a);
                let d = if n > 0.0 {
                    src * (g[[0, 0]] / n)
                } else {
                    Array2::zeros(src.raw_dim())
                };
                self.accumulate(grads, *a, d);
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod testing {
    //! Central finite-difference checks shared by the model test modules.
    use super::*;

    /// Compares the tape gradient of `build` w.r.t. each input against
    /// central differences. Returns the worst relative error.
    pub fn check_gradients<F>(inputs: &[Mat], build: F) -> f64
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.input(m.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss);

        let eval = |values: &[Mat]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = values.iter().map(|m| t.input(m.clone())).collect();
            let l = build(&mut t, &vs);
            t.scalar(l)
        };

        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[k])
                .cloned()
                .unwrap_or_else(|| Array2::zeros(input.raw_dim()));
            for idx in 0..input.len() {
                let (r, c) = (idx / input.ncols(), idx % input.ncols());
                let mut plus = inputs.to_vec();
                plus[k][[r, c]] += h;
                let mut minus = inputs.to_vec();
                minus[k][[r, c]] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[[r, c]];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                worst = worst.max(err);
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::testing::check_gradients;
    use super::*;
    use crate::sparse::CsrMatrix;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn elementwise_chain_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(3, 4, &mut rng);
        let b = random(3, 4, &mut rng);
        let err = check_gradients(&[a, b], |t, v| {
            let m = t.mul(v[0], v[1]);
            let th = t.tanh(m);
            let s = t.sigmoid(v[1]);
            let sum = t.add(th, s);
            let ls = t.log_sigmoid(sum);
            let e = t.exp(v[0]);
            let q = t.sub(ls, e);
            t.sum(q)
        });
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn matmul_and_reduction_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(3, 4, &mut rng);
        let b = random(4, 2, &mut rng);
        let c = random(5, 2, &mut rng);
        let row = random(1, 2, &mut rng);
        let err = check_gradients(&[a, b, c, row], |t, v| {
            let ab = t.matmul(v[0], v[1]);
            let ab = t.add_row(ab, v[3]);
            let abct = t.matmul_t(ab, v[2]);
            let sm = t.row_softmax(abct);
            let rs = t.row_sum(sm);
            let weighted = t.mul_col(ab, rs);
            let nrm = t.row_normalize(weighted);
            let sq = t.sum_squares(abct);
            let m = t.mean(nrm);
            let lr = t.leaky_relu(ab, 0.01);
            let lrs = t.sum(lr);
            let total = t.add(sq, m);
            t.add(total, lrs)
        });
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn indexing_and_sparse_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(4, 3, &mut rng);
        let op = Rc::new(SparseOperator::new(CsrMatrix::from_triplets(
            3,
            4,
            &[(0, 1, 0.5), (0, 3, 2.0), (2, 0, -1.0)],
        )));
        let idx: Rc<[usize]> = Rc::from(vec![2, 0, 2, 1]);
        let err = check_gradients(&[x], |t, v| {
            let g = t.gather(v[0], idx.clone());
            let sc = t.scatter_add(g, idx.clone(), 4);
            let sp = t.spmm(op.clone(), sc);
            let cat = t.concat_rows(&[sp, v[0]]);
            let cols = t.concat_cols(&[cat, cat]);
            let sl = t.slice_cols(cols, 2, 3);
            let ab = t.abs(sl);
            let sq = t.mul(ab, sl);
            t.sum(sq)
        });
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn segment_softmax_relation_and_batchnorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scores = random(5, 1, &mut rng);
        let w = random(2 * 3, 3, &mut rng);
        let x = random(5, 3, &mut rng);
        let gamma = random(1, 3, &mut rng);
        let beta = random(1, 3, &mut rng);
        let offsets: Rc<[usize]> = Rc::from(vec![0, 2, 2, 5]);
        let groups = Rc::new(RelationGroups::from_relations(&[1, 0, 1, 1, 0], 2));
        let err = check_gradients(&[scores, w, x, gamma, beta], |t, v| {
            let a = t.segment_softmax(v[0], offsets.clone());
            let wx = t.relation_matvec(v[1], groups.clone(), v[2]);
            let weighted = t.mul_col(wx, a);
            let bn = t.batch_norm(weighted, v[3], v[4], 1e-5);
            let th = t.tanh(bn);
            let n = t.norm(v[1]);
            let s = t.sum(th);
            let sc = t.mul_scalar(v[2], n);
            let s2 = t.sum(sc);
            t.add(s, s2)
        });
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn segment_softmax_sums_to_one_per_segment() {
        let mut t = Tape::new();
        let x = t.constant(array![[1.0], [2.0], [3.0], [0.5]]);
        let y = t.segment_softmax(x, Rc::from(vec![0, 3, 4]));
        let v = t.value(y);
        assert!((v[[0, 0]] + v[[1, 0]] + v[[2, 0]] - 1.0).abs() < 1e-12);
        assert_eq!(v[[3, 0]], 1.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let a = t.input(array![[1.0, 2.0]]);
        let c = t.constant(array![[3.0, 4.0]]);
        let p = t.mul(a, c);
        let l = t.sum(p);
        let g = t.backward(l);
        assert_eq!(g.get(a).unwrap(), &array![[3.0, 4.0]]);
        assert!(g.get(c).is_none());
    }
}
