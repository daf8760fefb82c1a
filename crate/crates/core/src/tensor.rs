//! Dense f64 matrices and a reverse-mode tape.
//!
//! [`Tensor`] is a plain row-major value. A [`Tape`] records operations on
//! [`Var`] handles; [`Var::backward`] replays them in reverse and returns the
//! gradient of a scalar loss with respect to every recorded node.

use std::cell::RefCell;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("loss must be 1x1, got {0:?}")]
    NotScalarLoss((usize, usize)),
    #[error("variable belongs to a different tape")]
    DetachedTensor,
    #[error("slice {start}..{end} out of range for length {len}")]
    OutOfRange { start: usize, end: usize, len: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch { op, lhs: a.shape(), rhs: b.shape() }
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor {}x{} ", self.rows, self.cols)?;
        f.debug_list().entries(self.data.chunks(self.cols.max(1))).finish()
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t[(i, i)] = 1.0;
        }
        t
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::ShapeMismatch { op: "from_vec", lhs: (rows, cols), rhs: (data.len(), 1) });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds from nested rows; all rows must have equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(TensorError::ShapeMismatch { op: "from_rows", lhs: (rows.len(), cols), rhs: (1, r.len()) });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    /// Entries drawn uniformly from `[-scale, scale]`.
    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.random_range(-scale..=scale)).collect();
        Self { rows, cols, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    /// The single value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.shape(), (1, 1));
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(mismatch(op, self, other));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { rows: self.rows, cols: self.cols, data })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(mismatch("matmul", self, other));
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (d, &b) in dst.iter_mut().zip(other.row(k)) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    /// Adds a `1 x cols` row to every row.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(mismatch("add_row", self, row));
        }
        let mut out = self.clone();
        for chunk in out.data.chunks_mut(self.cols.max(1)) {
            for (d, r) in chunk.iter_mut().zip(&row.data) {
                *d += r;
            }
        }
        Ok(out)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid)
    }

    pub fn tanh(&self) -> Tensor {
        self.map(f64::tanh)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| v.max(0.0))
    }

    /// Row-wise softmax, shifted by the row maximum.
    pub fn softmax_rows(&self) -> Tensor {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.cols.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        out
    }

    pub fn concat_cols(&self, other: &Tensor) -> Result<Tensor> {
        if self.rows != other.rows {
            return Err(mismatch("concat_cols", self, other));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(Tensor { rows: self.rows, cols, data })
    }

    pub fn concat_rows(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.cols {
            return Err(mismatch("concat_rows", self, other));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Tensor { rows: self.rows + other.rows, cols: self.cols, data })
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        if start > end || end > self.rows {
            return Err(TensorError::OutOfRange { start, end, len: self.rows });
        }
        Ok(Tensor { rows: end - start, cols: self.cols, data: self.data[start * self.cols..end * self.cols].to_vec() })
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        if start > end || end > self.cols {
            return Err(TensorError::OutOfRange { start, end, len: self.cols });
        }
        let mut data = Vec::with_capacity(self.rows * (end - start));
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..end]);
        }
        Ok(Tensor { rows: self.rows, cols: end - start, data })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Mean squared error over all entries.
    pub fn mse(&self, target: &Tensor) -> Result<f64> {
        if self.shape() != target.shape() {
            return Err(mismatch("mse_loss", self, target));
        }
        let n = self.data.len().max(1) as f64;
        Ok(self.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
    }

    fn accumulate(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (d, s) in self.data.iter_mut().zip(&other.data) {
            *d += s;
        }
    }
}

impl std::ops::Index<(usize, usize)> for Tensor {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        assert!(i < self.rows && j < self.cols, "index ({i},{j}) out of {:?}", self.shape());
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Tensor {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        assert!(i < self.rows && j < self.cols, "index ({i},{j}) out of {:?}", self.shape());
        &mut self.data[i * self.cols + j]
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

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    SoftmaxRows(usize),
    ConcatCols(usize, usize),
    ConcatRows(usize, usize),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    Sum(usize),
    Mse(usize, usize),
}

struct Entry {
    value: Tensor,
    op: Op,
}

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(0);

/// Record of operations in creation order, which is also topological order.
pub struct Tape {
    id: usize,
    entries: RefCell<Vec<Entry>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("id", &self.id).field("len", &self.len()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), entries: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.entries.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input. Gradients are computed for every leaf, so
    /// parameters and constants are registered the same way.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut entries = self.entries.borrow_mut();
        entries.push(Entry { value, op });
        Var { tape: self, id: entries.len() - 1 }
    }

    fn value(&self, id: usize) -> std::cell::Ref<'_, Tensor> {
        std::cell::Ref::map(self.entries.borrow(), |e| &e[id].value)
    }

    fn check<'t>(&'t self, v: Var<'t>) -> Result<()> {
        if v.tape.id == self.id {
            Ok(())
        } else {
            Err(TensorError::DetachedTensor)
        }
    }

    fn unary<'t>(&'t self, x: Var<'t>, f: impl FnOnce(&Tensor) -> Result<Tensor>, op: Op) -> Result<Var<'t>> {
        self.check(x)?;
        let value = f(&self.value(x.id))?;
        Ok(self.push(value, op))
    }

    fn binary<'t>(
        &'t self,
        a: Var<'t>,
        b: Var<'t>,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
        op: Op,
    ) -> Result<Var<'t>> {
        self.check(a)?;
        self.check(b)?;
        let value = f(&self.value(a.id), &self.value(b.id))?;
        Ok(self.push(value, op))
    }

    fn backward(&self, loss: usize) -> Result<Gradients> {
        let entries = self.entries.borrow();
        let shape = entries[loss].value.shape();
        if shape != (1, 1) {
            return Err(TensorError::NotScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; entries.len()];
        grads[loss] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
            match &mut grads[id] {
                Some(existing) => existing.accumulate(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            let out = &entries[id].value;
            let val = |i: usize| &entries[i].value;
            match entries[id].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(&mut grads, a, g.matmul(&val(b).transpose())?);
                    acc(&mut grads, b, val(a).transpose().matmul(&g)?);
                }
                Op::Transpose(a) => acc(&mut grads, a, g.transpose()),
                Op::Add(a, b) => {
                    acc(&mut grads, a, g.clone());
                    acc(&mut grads, b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, a, g.clone());
                    acc(&mut grads, b, g.scale(-1.0));
                }
                Op::Hadamard(a, b) => {
                    acc(&mut grads, a, g.hadamard(val(b))?);
                    acc(&mut grads, b, g.hadamard(val(a))?);
                }
                Op::AddRow(a, r) => {
                    let mut row = Tensor::zeros(1, g.cols);
                    for i in 0..g.rows {
                        for (d, s) in row.data.iter_mut().zip(g.row(i)) {
                            *d += s;
                        }
                    }
                    acc(&mut grads, a, g.clone());
                    acc(&mut grads, r, row);
                }
                Op::Scale(a, k) => acc(&mut grads, a, g.scale(k)),
                Op::AddScalar(a) => acc(&mut grads, a, g.clone()),
                Op::Sigmoid(a) => {
                    let d = out.map(|s| s * (1.0 - s));
                    acc(&mut grads, a, g.hadamard(&d)?);
                }
                Op::Tanh(a) => {
                    let d = out.map(|t| 1.0 - t * t);
                    acc(&mut grads, a, g.hadamard(&d)?);
                }
                Op::Relu(a) => {
                    let d = val(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    acc(&mut grads, a, g.hadamard(&d)?);
                }
                Op::SoftmaxRows(a) => {
                    // dx = s ⊙ (g − <g, s>) per row
                    let mut dx = Tensor::zeros(out.rows, out.cols);
                    for i in 0..out.rows {
                        let (s, gr) = (out.row(i), g.row(i));
                        let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..out.cols {
                            dx.data[i * out.cols + j] = s[j] * (gr[j] - dot);
                        }
                    }
                    acc(&mut grads, a, dx);
                }
                Op::ConcatCols(a, b) => {
                    let split = val(a).cols;
                    acc(&mut grads, a, g.slice_cols(0, split)?);
                    acc(&mut grads, b, g.slice_cols(split, g.cols)?);
                }
                Op::ConcatRows(a, b) => {
                    let split = val(a).rows;
                    acc(&mut grads, a, g.slice_rows(0, split)?);
                    acc(&mut grads, b, g.slice_rows(split, g.rows)?);
                }
                Op::SliceRows(a, start) => {
                    let src = val(a);
                    let mut dx = Tensor::zeros(src.rows, src.cols);
                    dx.data[start * src.cols..start * src.cols + g.data.len()].copy_from_slice(&g.data);
                    acc(&mut grads, a, dx);
                }
                Op::SliceCols(a, start) => {
                    let src = val(a);
                    let mut dx = Tensor::zeros(src.rows, src.cols);
                    for i in 0..g.rows {
                        dx.data[i * src.cols + start..i * src.cols + start + g.cols].copy_from_slice(g.row(i));
                    }
                    acc(&mut grads, a, dx);
                }
                Op::Sum(a) => {
                    let src = val(a);
                    acc(&mut grads, a, Tensor::filled(src.rows, src.cols, g.item()));
                }
                Op::Mse(a, b) => {
                    let n = val(a).data.len().max(1) as f64;
                    let diff = val(a).sub(val(b))?.scale(2.0 * g.item() / n);
                    acc(&mut grads, b, diff.scale(-1.0));
                    acc(&mut grads, a, diff);
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { tape_id: self.id, grads })
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id).clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.value(self.id).shape()
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(self, rhs, |a, b| a.matmul(b), Op::MatMul(self.id, rhs.id))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        self.tape.unary(self, |a| Ok(a.transpose()), Op::Transpose(self.id))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(self, rhs, |a, b| a.add(b), Op::Add(self.id, rhs.id))
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(self, rhs, |a, b| a.sub(b), Op::Sub(self.id, rhs.id))
    }

    pub fn hadamard(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(self, rhs, |a, b| a.hadamard(b), Op::Hadamard(self.id, rhs.id))
    }

    /// Broadcast-adds a `1 x cols` row (a bias) to every row.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(self, row, |a, b| a.add_row(b), Op::AddRow(self.id, row.id))
    }

    pub fn scale(self, k: f64) -> Result<Var<'t>> {
        self.tape.unary(self, |a| Ok(a.scale(k)), Op::Scale(self.id, k))
    }

    pub fn add_scalar(self, k: f64) -> Result<Var<'t>> {
        self.tape.unary(self, |a| Ok(a.map(|v| v + k)), Op::AddScalar(self.id))
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.tape.unary(self, |a| Ok(a.sigmoid()), Op::Sigmoid(self.id))
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.tape.unary(self, |a| Ok(a.tanh()), Op::Tanh(self.id))
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.tape.unary(self, |a| Ok(a.relu()), Op::Relu(self.id))
    }

    pub fn softmax_rows(self) -> Result<Var<'t>> {
        self.tape.unary(self, |a| Ok(a.softmax_rows()), Op::SoftmaxRows(self.id))
    }

    pub fn concat_cols(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(self, rhs, |a, b| a.concat_cols(b), Op::ConcatCols(self.id, rhs.id))
    }

    pub fn concat_rows(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(self, rhs, |a, b| a.concat_rows(b), Op::ConcatRows(self.id, rhs.id))
    }

    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t>> {
        self.tape.unary(self, |a| a.slice_rows(start, end), Op::SliceRows(self.id, start))
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        self.tape.unary(self, |a| a.slice_cols(start, end), Op::SliceCols(self.id, start))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.tape.unary(self, |a| Ok(Tensor::scalar(a.sum())), Op::Sum(self.id))
    }

    pub fn mse_loss(self, target: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(self, target, |a, b| Ok(Tensor::scalar(a.mse(b)?)), Op::Mse(self.id, target.id))
    }

    /// Reverse pass from this 1x1 node.
    pub fn backward(self) -> Result<Gradients> {
        self.tape.backward(self.id)
    }
}

/// Gradients of one loss with respect to every node on its tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape_id: usize,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`; zeros if the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Result<Tensor> {
        if v.tape.id != self.tape_id {
            return Err(TensorError::DetachedTensor);
        }
        Ok(match self.grads.get(v.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = v.shape();
                Tensor::zeros(r, c)
            }
        })
    }
}

/// Learning rate annealed exponentially from `start` to `end` over
/// `anneal_iters` iterations, then held at `end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal_iters: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { start: 1e-3, end: 1e-5, anneal_iters: 5000 }
    }
}

impl LrSchedule {
    pub fn lr(&self, iteration: usize) -> f64 {
        if self.anneal_iters == 0 || iteration >= self.anneal_iters {
            return self.end;
        }
        let frac = iteration as f64 / self.anneal_iters as f64;
        self.start * (self.end / self.start).powf(frac)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, ..Self::default() }
    }
}

/// One bias-corrected Adam update applied in place.
///
/// The moment buffers are created lazily on the first call and must keep the
/// same parameter order afterwards.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(TensorError::ShapeMismatch { op: "adam_step", lhs: (params.len(), 1), rhs: (grads.len(), 1) });
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect();
        state.v = state.m.clone();
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m.get(i).map(Tensor::shape) != Some(p.shape()) {
            return Err(mismatch("adam_step", p, g));
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for k in 0..g.data.len() {
            let gk = g.data[k];
            m.data[k] = beta1 * m.data[k] + (1.0 - beta1) * gk;
            v.data[k] = beta2 * v.data[k] + (1.0 - beta2) * gk * gk;
            let m_hat = m.data[k] / bc1;
            let v_hat = v.data[k] / bc2;
            p.data[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(3, 4, 1.0, &mut rng);
        assert_eq!(Tensor::identity(3).matmul(&x).unwrap(), x);
    }

    #[test]
    fn analytic_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(Tensor::scalar(0.0).tanh().item(), 0.0);
        assert_eq!(Tensor::scalar(-1.0).relu().item(), 0.0);
        assert!(sigmoid(-800.0).is_finite() && sigmoid(800.0) == 1.0);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let err = Tensor::zeros(2, 3).matmul(&Tensor::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)") && msg.contains("matmul"), "{msg}");
        assert!(Tensor::zeros(2, 3).add(&Tensor::zeros(3, 2)).is_err());
        assert!(Tensor::zeros(2, 3).concat_cols(&Tensor::zeros(3, 1)).is_err());
    }

    #[test]
    fn softmax_large_inputs() {
        let s = t(&[&[1000.0, 1000.0], &[-1000.0, 0.0]]).softmax_rows();
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert!((s.row(1).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mse_gradient_is_two_x() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(1.7));
        let zero = tape.var(Tensor::scalar(0.0));
        let loss = x.mse_loss(zero).unwrap();
        let g = loss.backward().unwrap();
        assert!((g.wrt(x).unwrap().item() - 3.4).abs() < 1e-15);
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::new();
        let x = tape.var(Tensor::zeros(2, 2));
        assert_eq!(x.backward().unwrap_err(), TensorError::NotScalarLoss((2, 2)));
        let other = Tape::new();
        let y = other.var(Tensor::zeros(2, 2));
        assert_eq!(x.add(y).unwrap_err(), TensorError::DetachedTensor);
        let loss = x.sum().unwrap();
        let g = loss.backward().unwrap();
        assert_eq!(g.wrt(y).unwrap_err(), TensorError::DetachedTensor);
    }

    #[test]
    fn reused_node_accumulates() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(3.0));
        let y = x.hadamard(x).unwrap().add(x).unwrap().sum().unwrap();
        let g = y.backward().unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 7.0);
    }

    #[test]
    fn unused_input_has_zero_grad() {
        let tape = Tape::new();
        let x = tape.var(Tensor::filled(2, 3, 1.0));
        let unused = tape.var(Tensor::filled(4, 1, 1.0));
        let g = x.sum().unwrap().backward().unwrap();
        assert_eq!(g.wrt(unused).unwrap(), Tensor::zeros(4, 1));
    }

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule::default();
        assert_eq!(s.lr(0), 1e-3);
        assert!((s.lr(2500) - 1e-4).abs() < 1e-15);
        assert_eq!(s.lr(5000), 1e-5);
        assert_eq!(s.lr(9000), 1e-5);
        assert!((1..5000).all(|i| s.lr(i) < s.lr(i - 1)));
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = Tensor::filled(2, 2, 0.3);
        let before = p.clone();
        let mut state = AdamState::default();
        for _ in 0..10 {
            adam_step(&mut [&mut p], &[Tensor::zeros(2, 2)], &mut state, 1e-3).unwrap();
        }
        assert_eq!(p, before);
        assert!(state.m[0].data().iter().chain(state.v[0].data()).all(|&v| v == 0.0));
    }

    #[test]
    fn adam_constant_gradient_step_is_bounded_by_lr() {
        let lr = 1e-2;
        let mut p = Tensor::scalar(0.0);
        let mut state = AdamState::default();
        let mut prev = 0.0;
        for step in 0..500 {
            adam_step(&mut [&mut p], &[Tensor::scalar(4.0)], &mut state, lr).unwrap();
            let delta = (p.item() - prev).abs();
            assert!(delta <= lr * (1.0 + 1e-6), "step {step}: {delta}");
            prev = p.item();
        }
        // fixed gradient: the step approaches lr
        assert!((p.item() + 5.0).abs() < 1e-3, "{}", p.item());
    }

    #[test]
    fn adam_rejects_misaligned_shapes() {
        let mut p = Tensor::zeros(2, 2);
        let mut state = AdamState::default();
        assert!(adam_step(&mut [&mut p], &[Tensor::zeros(2, 1)], &mut state, 1e-3).is_err());
        assert!(adam_step(&mut [&mut p], &[], &mut state, 1e-3).is_err());
    }

    #[test]
    fn adam_descends_quadratic_bowl() {
        let target = t(&[&[1.0, -2.0, 0.5]]);
        let mut p = Tensor::zeros(1, 3);
        let mut state = AdamState::default();
        let mut losses = Vec::new();
        for _ in 0..200 {
            let tape = Tape::new();
            let x = tape.var(p.clone());
            let y = tape.var(target.clone());
            let loss = x.mse_loss(y).unwrap();
            losses.push(loss.value().item());
            let g = loss.backward().unwrap().wrt(x).unwrap();
            adam_step(&mut [&mut p], &[g], &mut state, 0.01).unwrap();
        }
        assert!(losses.windows(2).skip(10).all(|w| w[1] < w[0]));
        assert!(losses[199] < 0.5 * losses[0]);
    }
}
