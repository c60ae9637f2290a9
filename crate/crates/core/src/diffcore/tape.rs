//! Reverse-mode differentiation over dense matrices.
//!
//! Every primitive records its operands on a [`Tape`] and computes its value
//! eagerly. [`Tape::backward`] walks the nodes once in reverse creation order,
//! which is a valid reverse topological order because operands always precede
//! the nodes that consume them. A tape is meant to live for one minibatch and
//! then be dropped.

use std::rc::Rc;
use std::sync::atomic::{AtomicU32, Ordering};

use super::matrix::{dot, matmul_into, Matrix};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Marker for "no source element" in [`Tape::gather`] index maps.
pub const GATHER_ZERO: usize = usize::MAX;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
    tape: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.id
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    AddRow(usize, usize),
    Relu(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    Transpose(usize),
    Reshape(usize),
    Slice {
        src: usize,
        offset: usize,
    },
    SliceCols {
        src: usize,
        start: usize,
    },
    Gather {
        src: usize,
        index: Rc<[usize]>,
        rows: usize,
        cols: usize,
    },
    Stack(Vec<usize>),
    ScaleCols(usize, Rc<[f64]>),
    BatchMatVec {
        g: usize,
        v: usize,
        m: usize,
        n: usize,
    },
    PassThrough(usize),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input: gradients flow into it.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Data input: no gradient is accumulated for it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[self.idx(v)].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.len(), 1, "scalar() on non-scalar node");
        m.data()[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn owns(&self, v: Var) -> bool {
        v.tape == self.id && v.id < self.nodes.len()
    }

    #[inline]
    fn idx(&self, v: Var) -> usize {
        assert!(
            self.owns(v),
            "variable {} does not belong to tape {}",
            v.id,
            self.id
        );
        v.id
    }

    fn push_raw(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var { id, tape: self.id }
    }

    fn push(&mut self, op: Op) -> Var {
        let value = forward(&op, |i| &self.nodes[i].value);
        let needs_grad = parents(&op).iter().any(|&p| self.nodes[p].needs_grad);
        self.push_raw(value, op, needs_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (a, b) = (self.idx(a), self.idx(b));
        assert_eq!(
            self.nodes[a].value.shape(),
            self.nodes[b].value.shape(),
            "add shape"
        );
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (a, b) = (self.idx(a), self.idx(b));
        assert_eq!(
            self.nodes[a].value.shape(),
            self.nodes[b].value.shape(),
            "sub shape"
        );
        self.push(Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (a, b) = (self.idx(a), self.idx(b));
        assert_eq!(
            self.nodes[a].value.shape(),
            self.nodes[b].value.shape(),
            "mul shape"
        );
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let a = self.idx(a);
        self.push(Op::Scale(a, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (a, b) = (self.idx(a), self.idx(b));
        assert_eq!(
            self.nodes[a].value.cols(),
            self.nodes[b].value.rows(),
            "matmul shape"
        );
        self.push(Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (a, b) = (self.idx(a), self.idx(b));
        assert_eq!(
            self.nodes[a].value.cols(),
            self.nodes[b].value.cols(),
            "matmul_bt shape"
        );
        self.push(Op::MatMulBt(a, b))
    }

    /// Adds a `1 x m` row to every row of an `n x m` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (a, b) = (self.idx(a), self.idx(row));
        let (rb, cb) = self.nodes[b].value.shape();
        assert!(rb == 1 && cb == self.nodes[a].value.cols(), "add_row shape");
        self.push(Op::AddRow(a, b))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let a = self.idx(a);
        self.push(Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let a = self.idx(a);
        self.push(Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let a = self.idx(a);
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let a = self.idx(a);
        assert!(!self.nodes[a].value.is_empty(), "mean of empty matrix");
        self.push(Op::Mean(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let a = self.idx(a);
        self.push(Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let a = self.idx(a);
        assert_eq!(self.nodes[a].value.len(), rows * cols, "reshape size");
        let value = self.nodes[a]
            .value
            .clone()
            .reshape(rows, cols)
            .expect("checked");
        let needs_grad = self.nodes[a].needs_grad;
        self.push_raw(value, Op::Reshape(a), needs_grad)
    }

    /// Contiguous run of the row-major storage of `src`, viewed as `rows x cols`.
    pub fn slice(&mut self, src: Var, offset: usize, rows: usize, cols: usize) -> Var {
        let s = self.idx(src);
        let len = rows * cols;
        let data = self.nodes[s].value.data()[offset..offset + len].to_vec();
        let value = Matrix::new(rows, cols, data).expect("sized");
        let needs_grad = self.nodes[s].needs_grad;
        self.push_raw(value, Op::Slice { src: s, offset }, needs_grad)
    }

    /// Columns `start..start + count` of every row.
    pub fn slice_cols(&mut self, src: Var, start: usize, count: usize) -> Var {
        let s = self.idx(src);
        let m = &self.nodes[s].value;
        assert!(start + count <= m.cols(), "slice_cols range");
        let mut out = Matrix::zeros(m.rows(), count);
        for r in 0..m.rows() {
            out.row_mut(r)
                .copy_from_slice(&m.row(r)[start..start + count]);
        }
        let needs_grad = self.nodes[s].needs_grad;
        self.push_raw(out, Op::SliceCols { src: s, start }, needs_grad)
    }

    /// `out.data[k] = src.data[index[k]]`, or zero where `index[k] == GATHER_ZERO`.
    pub fn gather(&mut self, src: Var, index: Rc<[usize]>, rows: usize, cols: usize) -> Var {
        let s = self.idx(src);
        assert_eq!(index.len(), rows * cols, "gather index length");
        let n = self.nodes[s].value.len();
        assert!(
            index.iter().all(|&k| k == GATHER_ZERO || k < n),
            "gather index out of range"
        );
        self.push(Op::Gather {
            src: s,
            index,
            rows,
            cols,
        })
    }

    /// Stacks flattened inputs as rows; all inputs must have equal length.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "stack of nothing");
        let ids: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect();
        let len = self.nodes[ids[0]].value.len();
        assert!(
            ids.iter().all(|&i| self.nodes[i].value.len() == len),
            "stack_rows lengths"
        );
        self.push(Op::Stack(ids))
    }

    /// Multiplies column `c` by `factors[c]`.
    pub fn scale_cols(&mut self, a: Var, factors: Rc<[f64]>) -> Var {
        let a = self.idx(a);
        assert_eq!(
            self.nodes[a].value.cols(),
            factors.len(),
            "scale_cols length"
        );
        self.push(Op::ScaleCols(a, factors))
    }

    /// Row-wise matrix-vector products: row `b` of `g` holds an `m x n`
    /// matrix in row-major order, row `b` of `v` a vector of length `n`.
    pub fn batch_matvec(&mut self, g: Var, v: Var, m: usize, n: usize) -> Var {
        let (gi, vi) = (self.idx(g), self.idx(v));
        let (gr, gc) = self.nodes[gi].value.shape();
        let (vr, vc) = self.nodes[vi].value.shape();
        assert!(gr == vr && gc == m * n && vc == n, "batch_matvec shape");
        self.push(Op::BatchMatVec { g: gi, v: vi, m, n })
    }

    /// Replaces the value of `a` while passing gradients through unchanged.
    pub fn pass_through(&mut self, a: Var, value: Matrix) -> Var {
        let a = self.idx(a);
        assert_eq!(
            self.nodes[a].value.shape(),
            value.shape(),
            "pass_through shape"
        );
        let needs_grad = self.nodes[a].needs_grad;
        self.push_raw(value, Op::PassThrough(a), needs_grad)
    }

    /// Recomputes every node from its recorded operands and checks that the
    /// result is bit-identical to the stored value.
    pub fn replay_matches(&self) -> bool {
        let mut values: Vec<Matrix> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf | Op::PassThrough(_) => node.value.clone(),
                Op::Reshape(a) => {
                    let (r, c) = node.value.shape();
                    values[*a].clone().reshape(r, c).expect("recorded shape")
                }
                Op::Slice { src, offset } => {
                    let (r, c) = node.value.shape();
                    Matrix::new(r, c, values[*src].data()[*offset..offset + r * c].to_vec())
                        .expect("recorded shape")
                }
                Op::SliceCols { src, start } => {
                    let (r, c) = node.value.shape();
                    let mut out = Matrix::zeros(r, c);
                    for i in 0..r {
                        out.row_mut(i)
                            .copy_from_slice(&values[*src].row(i)[*start..start + c]);
                    }
                    out
                }
                op => forward(op, |i| &values[i]),
            };
            let same = v.shape() == node.value.shape()
                && v.data()
                    .iter()
                    .zip(node.value.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return false;
            }
            values.push(v);
        }
        true
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.owns(loss) {
            return Err(Error::Tape(format!(
                "loss node {} was not recorded on this tape",
                loss.id
            )));
        }
        let lv = &self.nodes[loss.id].value;
        if lv.len() != 1 {
            return Err(Error::Tape(format!(
                "loss must be scalar, got {}x{}",
                lv.rows(),
                lv.cols()
            )));
        }
        if !lv.data()[0].is_finite() {
            return Err(Error::Numeric(format!(
                "loss is not finite: {}",
                lv.data()[0]
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=loss.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &g, &mut grads);
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes: self.nodes[..=loss.id]
                .iter()
                .map(|n| n.value.shape())
                .collect(),
        })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Matrix>], id: usize) -> Option<&'g mut Matrix> {
        if !self.nodes[id].needs_grad {
            return None;
        }
        let (r, c) = self.nodes[id].value.shape();
        Some(grads[id].get_or_insert_with(|| Matrix::zeros(r, c)))
    }

    fn propagate(&self, op: &Op, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |i: usize| &self.nodes[i].value;
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(s) = self.grad_slot(grads, *a) {
                    s.axpy(1.0, g);
                }
                if let Some(s) = self.grad_slot(grads, *b) {
                    s.axpy(1.0, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = self.grad_slot(grads, *a) {
                    s.axpy(1.0, g);
                }
                if let Some(s) = self.grad_slot(grads, *b) {
                    s.axpy(-1.0, g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if let Some(s) = self.grad_slot(grads, *a) {
                    for ((d, &gi), &bi) in s.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                        *d += gi * bi;
                    }
                }
                if let Some(s) = self.grad_slot(grads, *b) {
                    for ((d, &gi), &ai) in s.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(s) = self.grad_slot(grads, *a) {
                    s.axpy(*k, g);
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if let Some(s) = self.grad_slot(grads, *a) {
                    s.axpy(1.0, &g.matmul_bt(vb));
                }
                if let Some(s) = self.grad_slot(grads, *b) {
                    s.axpy(1.0, &va.t_matmul(g));
                }
            }
            Op::MatMulBt(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if let Some(s) = self.grad_slot(grads, *a) {
                    matmul_into(g, vb, s);
                }
                if let Some(s) = self.grad_slot(grads, *b) {
                    s.axpy(1.0, &g.t_matmul(va));
                }
            }
            Op::AddRow(a, b) => {
                if let Some(s) = self.grad_slot(grads, *a) {
                    s.axpy(1.0, g);
                }
                if let Some(s) = self.grad_slot(grads, *b) {
                    let d = s.data_mut();
                    for r in 0..g.rows() {
                        for (di, &gi) in d.iter_mut().zip(g.row(r)) {
                            *di += gi;
                        }
                    }
                }
            }
            Op::Relu(a) => {
                let va = val(*a);
                if let Some(s) = self.grad_slot(grads, *a) {
                    for ((d, &gi), &x) in s.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        if x > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Square(a) => {
                let va = val(*a);
                if let Some(s) = self.grad_slot(grads, *a) {
                    for ((d, &gi), &x) in s.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *d += 2.0 * x * gi;
                    }
                }
            }
            Op::Sum(a) => {
                let g0 = g.data()[0];
                if let Some(s) = self.grad_slot(grads, *a) {
                    s.data_mut().iter_mut().for_each(|d| *d += g0);
                }
            }
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                let g0 = g.data()[0] / n;
                if let Some(s) = self.grad_slot(grads, *a) {
                    s.data_mut().iter_mut().for_each(|d| *d += g0);
                }
            }
            Op::Transpose(a) => {
                if let Some(s) = self.grad_slot(grads, *a) {
                    s.axpy(1.0, &g.transpose());
                }
            }
            Op::Reshape(a) | Op::PassThrough(a) => {
                if let Some(s) = self.grad_slot(grads, *a) {
                    for (d, &gi) in s.data_mut().iter_mut().zip(g.data()) {
                        *d += gi;
                    }
                }
            }
            Op::Slice { src, offset } => {
                if let Some(s) = self.grad_slot(grads, *src) {
                    let dst = &mut s.data_mut()[*offset..offset + g.len()];
                    for (d, &gi) in dst.iter_mut().zip(g.data()) {
                        *d += gi;
                    }
                }
            }
            Op::SliceCols { src, start } => {
                if let Some(s) = self.grad_slot(grads, *src) {
                    for r in 0..g.rows() {
                        let dst = &mut s.row_mut(r)[*start..start + g.cols()];
                        for (d, &gi) in dst.iter_mut().zip(g.row(r)) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Gather { src, index, .. } => {
                if let Some(s) = self.grad_slot(grads, *src) {
                    let d = s.data_mut();
                    for (&k, &gi) in index.iter().zip(g.data()) {
                        if k != GATHER_ZERO {
                            d[k] += gi;
                        }
                    }
                }
            }
            Op::Stack(parts) => {
                for (r, &p) in parts.iter().enumerate() {
                    if let Some(s) = self.grad_slot(grads, p) {
                        for (d, &gi) in s.data_mut().iter_mut().zip(g.row(r)) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::ScaleCols(a, f) => {
                if let Some(s) = self.grad_slot(grads, *a) {
                    let cols = g.cols();
                    for (k, (d, &gi)) in s.data_mut().iter_mut().zip(g.data()).enumerate() {
                        *d += gi * f[k % cols];
                    }
                }
            }
            Op::BatchMatVec { g: gm, v, m, n } => {
                let (m, n) = (*m, *n);
                let (vg, vv) = (val(*gm), val(*v));
                if let Some(s) = self.grad_slot(grads, *gm) {
                    for b in 0..g.rows() {
                        let go = g.row(b);
                        let vb = vv.row(b);
                        let sb = s.row_mut(b);
                        for i in 0..m {
                            let gi = go[i];
                            for j in 0..n {
                                sb[i * n + j] += gi * vb[j];
                            }
                        }
                    }
                }
                if let Some(s) = self.grad_slot(grads, *v) {
                    for b in 0..g.rows() {
                        let go = g.row(b);
                        let gb = vg.row(b);
                        let sb = s.row_mut(b);
                        for i in 0..m {
                            let gi = go[i];
                            for j in 0..n {
                                sb[j] += gi * gb[i * n + j];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn parents(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::MatMul(a, b)
        | Op::MatMulBt(a, b)
        | Op::AddRow(a, b) => vec![*a, *b],
        Op::BatchMatVec { g, v, .. } => vec![*g, *v],
        Op::Scale(a, _)
        | Op::Relu(a)
        | Op::Square(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Transpose(a)
        | Op::Reshape(a)
        | Op::ScaleCols(a, _)
        | Op::PassThrough(a) => vec![*a],
        Op::Slice { src, .. } | Op::SliceCols { src, .. } | Op::Gather { src, .. } => vec![*src],
        Op::Stack(p) => p.clone(),
    }
}

fn forward<'a>(op: &Op, val: impl Fn(usize) -> &'a Matrix) -> Matrix {
    match op {
        Op::Add(a, b) => val(*a).add(val(*b)),
        Op::Sub(a, b) => val(*a).sub(val(*b)),
        Op::Mul(a, b) => val(*a).hadamard(val(*b)),
        Op::Scale(a, s) => val(*a).scale(*s),
        Op::MatMul(a, b) => val(*a).matmul(val(*b)),
        Op::MatMulBt(a, b) => val(*a).matmul_bt(val(*b)),
        Op::AddRow(a, b) => {
            let mut out = val(*a).clone();
            let row = val(*b).data();
            for r in 0..out.rows() {
                for (o, &x) in out.row_mut(r).iter_mut().zip(row) {
                    *o += x;
                }
            }
            out
        }
        Op::Relu(a) => val(*a).map(|x| if x > 0.0 { x } else { 0.0 }),
        Op::Square(a) => val(*a).map(|x| x * x),
        Op::Sum(a) => Matrix::filled(1, 1, val(*a).sum()),
        Op::Mean(a) => {
            let m = val(*a);
            Matrix::filled(1, 1, m.sum() / m.len() as f64)
        }
        Op::Transpose(a) => val(*a).transpose(),
        Op::Gather {
            src,
            index,
            rows,
            cols,
        } => {
            let s = val(*src).data();
            let data = index
                .iter()
                .map(|&k| if k == GATHER_ZERO { 0.0 } else { s[k] })
                .collect::<Vec<_>>();
            Matrix::new(*rows, *cols, data).expect("sized")
        }
        Op::Stack(parts) => {
            let len = val(parts[0]).len();
            let mut data = Vec::with_capacity(len * parts.len());
            for &p in parts {
                data.extend_from_slice(val(p).data());
            }
            Matrix::new(parts.len(), len, data).expect("sized")
        }
        Op::ScaleCols(a, f) => {
            let mut out = val(*a).clone();
            let cols = out.cols();
            for (k, x) in out.data_mut().iter_mut().enumerate() {
                *x *= f[k % cols];
            }
            out
        }
        Op::BatchMatVec { g, v, m, n } => {
            let (vg, vv) = (val(*g), val(*v));
            let mut out = Matrix::zeros(vg.rows(), *m);
            for b in 0..vg.rows() {
                let gb = vg.row(b);
                let vb = vv.row(b);
                let ob = out.row_mut(b);
                for i in 0..*m {
                    ob[i] = dot(&gb[i * n..(i + 1) * n], vb);
                }
            }
            out
        }
        Op::Leaf
        | Op::Reshape(_)
        | Op::Slice { .. }
        | Op::SliceCols { .. }
        | Op::PassThrough(_) => {
            unreachable!("recorded directly")
        }
    }
}

/// Gradients from one reverse sweep, indexed by the variables of the tape.
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Matrix {
        assert_eq!(v.tape, self.tape, "gradient lookup on a foreign tape");
        match self.grads.get(v.id) {
            Some(Some(g)) => g.clone(),
            Some(None) => {
                let (r, c) = self.shapes[v.id];
                Matrix::zeros(r, c)
            }
            // created after the loss: cannot influence it
            None => Matrix::zeros(0, 0),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }
}
