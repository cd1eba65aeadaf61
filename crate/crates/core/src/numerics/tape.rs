//! Reverse-mode automatic differentiation over dense 2-D matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Values are
//! `f64` matrices; vectors are `1 x n` rows and scalars are `1 x 1`.
//! [`Tape::backward`] walks the record in reverse and returns the gradient
//! of every parameter that reached the loss.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{s, Array2, Axis};
use rand::Rng;

use super::params::{Gradients, ParameterStore};
use super::TensorError;

pub type Matrix = Array2<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    /// Collapse rows, giving `1 x cols`.
    Rows,
    /// Collapse columns, giving `rows x 1`.
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    RepeatRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Mean(Var, Reduce),
    Sum(Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Matrix,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SegmentSoftmax {
        x: Var,
        segments: Arc<[usize]>,
        n_segments: usize,
    },
    GatherRows(Var, Arc<[usize]>),
    ScatterAddRows(Var, Arc<[usize]>),
    ScaleRows(Var, Var),
    MaxPoolRows {
        x: Var,
        argmax: Vec<usize>,
    },
    Dropout(Var, Matrix),
    Pick(Var, usize, usize),
    Transpose(Var),
    SegmentMaxRows {
        x: Var,
        starts: Vec<usize>,
        argmax: Vec<Vec<usize>>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::RepeatRows(..) => "repeat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::Scale(..) => "scale",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Tanh(..) => "tanh",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SoftmaxRows(..) => "softmax",
            Op::LogSoftmaxRows(..) => "log_softmax",
            Op::SegmentSoftmax { .. } => "segment_softmax",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterAddRows(..) => "scatter_add_rows",
            Op::ScaleRows(..) => "scale_rows",
            Op::MaxPoolRows { .. } => "max_pool",
            Op::Dropout(..) => "dropout",
            Op::Pick(..) => "pick",
            Op::Transpose(..) => "transpose",
            Op::SegmentMaxRows { .. } => "segment_max",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::ScaleRows(a, b) => vec![*a, *b],
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.clone(),
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::RepeatRows(x)
            | Op::Mean(x, _)
            | Op::Sum(x)
            | Op::Scale(x, _)
            | Op::LeakyRelu(x, _)
            | Op::Tanh(x)
            | Op::SoftmaxRows(x)
            | Op::LogSoftmaxRows(x)
            | Op::GatherRows(x, _)
            | Op::ScatterAddRows(x, _)
            | Op::Dropout(x, _)
            | Op::Pick(x, ..)
            | Op::Transpose(x) => vec![*x],
            Op::SegmentSoftmax { x, .. } | Op::MaxPoolRows { x, .. } | Op::SegmentMaxRows { x, .. } => vec![*x],
        }
    }
}

struct Node {
    value: Matrix,
    op: Op,
    /// False when no parameter feeds this node.
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
}

fn shape(m: &Matrix) -> (usize, usize) {
    m.dim()
}

fn softmax_row(row: ndarray::ArrayView1<f64>) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let needs_grad = match op {
            Op::Leaf => false,
            Op::Param(_) => true,
            _ => op.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        shape(self.value(v))
    }

    /// Value of a `1 x 1` variable.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    /// A constant with no gradient flowing out of it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn row_vector(&mut self, values: &[f64]) -> Var {
        let m = Array2::from_shape_vec((1, values.len()), values.to_vec())
            .expect("row vector shape");
        self.constant(m)
    }

    /// Records a trainable parameter. Repeated calls for the same name
    /// return the same variable so gradients accumulate.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var, TensorError> {
        let id = store
            .id(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push(store.value_by_id(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        Ok(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::Shape { op, left: sa, right: sb });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(TensorError::Shape { op: "matmul", left: sa, right: sb });
        }
        let value = self.value(a).dot(self.value(b));
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let value = self.value(a) + self.value(b);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a) - self.value(b);
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a) * self.value(b);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Adds a `1 x n` bias to every row of an `m x n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.0 != 1 || sb.1 != sx.1 {
            return Err(TensorError::Shape { op: "add_row", left: sx, right: sb });
        }
        let value = self.value(x) + self.value(bias);
        Ok(self.push(value, Op::AddRow(x, bias)))
    }

    /// `x W + b` for a row-major batch `x`.
    pub fn affine(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        let h = self.matmul(x, weight)?;
        self.add_row(h, bias)
    }

    /// Stacks `times` copies of a `1 x n` row.
    pub fn repeat_rows(&mut self, row: Var, times: usize) -> Result<Var, TensorError> {
        let s = self.shape(row);
        if s.0 != 1 {
            return Err(TensorError::Shape { op: "repeat_rows", left: s, right: (1, s.1) });
        }
        let value = self
            .value(row)
            .broadcast((times, s.1))
            .expect("row broadcast")
            .to_owned();
        Ok(self.push(value, Op::RepeatRows(row)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        self.concat(parts, Axis(1))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        self.concat(parts, Axis(0))
    }

    fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var, TensorError> {
        let op_name = if axis == Axis(1) { "concat_cols" } else { "concat_rows" };
        let first = *parts.first().ok_or(TensorError::Domain {
            op: op_name,
            message: "nothing to concatenate".into(),
        })?;
        let other_axis = Axis(1 - axis.0);
        let fixed = self.value(first).len_of(other_axis);
        for &p in parts {
            if self.value(p).len_of(other_axis) != fixed {
                return Err(TensorError::Shape {
                    op: op_name,
                    left: self.shape(first),
                    right: self.shape(p),
                });
            }
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(axis, &views).expect("checked concat shapes");
        let op = if axis == Axis(1) {
            Op::ConcatCols(parts.to_vec())
        } else {
            Op::ConcatRows(parts.to_vec())
        };
        Ok(self.push(value, op))
    }

    pub fn mean(&mut self, x: Var, reduce: Reduce) -> Result<Var, TensorError> {
        let (r, c) = self.shape(x);
        if r == 0 || c == 0 {
            return Err(TensorError::Domain { op: "mean", message: "empty input".into() });
        }
        let value = match reduce {
            Reduce::Rows => self.value(x).mean_axis(Axis(0)).unwrap().insert_axis(Axis(0)),
            Reduce::Cols => self.value(x).mean_axis(Axis(1)).unwrap().insert_axis(Axis(1)),
        };
        Ok(self.push(value, Op::Mean(x, reduce)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        self.push(Array2::from_elem((1, 1), total), Op::Sum(x))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x) * factor;
        self.push(value, Op::Scale(x, factor))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).mapv(|v| if v >= 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu(x, slope))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::tanh);
        self.push(value, Op::Tanh(x))
    }

    /// Normalizes each row to zero mean and unit (population) variance,
    /// then applies the `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let (r, c) = self.shape(x);
        for p in [gain, bias] {
            if self.shape(p) != (1, c) {
                return Err(TensorError::Shape { op: "layer_norm", left: (r, c), right: self.shape(p) });
            }
        }
        let xv = self.value(x);
        let mut normed = Array2::zeros((r, c));
        let mut inv_std = Vec::with_capacity(r);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, v) in row.iter().enumerate() {
                normed[[i, j]] = (v - mean) * inv;
            }
        }
        let value = &normed * self.value(gain) + self.value(bias);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, normed, inv_std }))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = self.row_softmax(x, "softmax")?;
        Ok(self.push(value, Op::SoftmaxRows(x)))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, c) = self.shape(x);
        if c == 0 {
            return Err(TensorError::Domain { op: "log_softmax", message: "empty axis".into() });
        }
        let mut value = Array2::zeros((r, c));
        for (i, row) in self.value(x).rows().into_iter().enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            for (j, v) in row.iter().enumerate() {
                value[[i, j]] = v - lse;
            }
        }
        Ok(self.push(value, Op::LogSoftmaxRows(x)))
    }

    fn row_softmax(&self, x: Var, op: &'static str) -> Result<Matrix, TensorError> {
        let (r, c) = self.shape(x);
        if c == 0 {
            return Err(TensorError::Domain { op, message: "empty axis".into() });
        }
        let mut value = Array2::zeros((r, c));
        for (i, row) in self.value(x).rows().into_iter().enumerate() {
            for (j, p) in softmax_row(row).into_iter().enumerate() {
                value[[i, j]] = p;
            }
        }
        Ok(value)
    }

    /// Softmax of an `e x 1` column within groups: entry `k` belongs to
    /// segment `segments[k]`. Every segment must be non-empty.
    pub fn segment_softmax(
        &mut self,
        x: Var,
        segments: Arc<[usize]>,
        n_segments: usize,
    ) -> Result<Var, TensorError> {
        let (e, c) = self.shape(x);
        if c != 1 || segments.len() != e {
            return Err(TensorError::Shape { op: "segment_softmax", left: (e, c), right: (segments.len(), 1) });
        }
        let xv = self.value(x);
        let mut max = vec![f64::NEG_INFINITY; n_segments];
        for (k, &sg) in segments.iter().enumerate() {
            if sg >= n_segments {
                return Err(TensorError::Domain {
                    op: "segment_softmax",
                    message: format!("segment {sg} out of range {n_segments}"),
                });
            }
            max[sg] = max[sg].max(xv[[k, 0]]);
        }
        if let Some(empty) = max.iter().position(|m| *m == f64::NEG_INFINITY) {
            return Err(TensorError::Domain {
                op: "segment_softmax",
                message: format!("segment {empty} is empty"),
            });
        }
        let mut total = vec![0.0; n_segments];
        let mut value = Array2::zeros((e, 1));
        for (k, &sg) in segments.iter().enumerate() {
            let ex = (xv[[k, 0]] - max[sg]).exp();
            value[[k, 0]] = ex;
            total[sg] += ex;
        }
        for (k, &sg) in segments.iter().enumerate() {
            value[[k, 0]] /= total[sg];
        }
        Ok(self.push(value, Op::SegmentSoftmax { x, segments, n_segments }))
    }

    pub fn gather_rows(&mut self, x: Var, index: Arc<[usize]>) -> Result<Var, TensorError> {
        let (r, c) = self.shape(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(TensorError::Domain {
                op: "gather_rows",
                message: format!("row {bad} out of range {r}"),
            });
        }
        let xv = self.value(x);
        let mut value = Array2::zeros((index.len(), c));
        for (k, &i) in index.iter().enumerate() {
            value.row_mut(k).assign(&xv.row(i));
        }
        Ok(self.push(value, Op::GatherRows(x, index)))
    }

    /// Sums row `k` of `x` into output row `index[k]`; the output has
    /// `n_out` rows.
    pub fn scatter_add_rows(&mut self, x: Var, index: Arc<[usize]>, n_out: usize) -> Result<Var, TensorError> {
        let (r, c) = self.shape(x);
        if index.len() != r {
            return Err(TensorError::Shape { op: "scatter_add_rows", left: (r, c), right: (index.len(), 1) });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n_out) {
            return Err(TensorError::Domain {
                op: "scatter_add_rows",
                message: format!("row {bad} out of range {n_out}"),
            });
        }
        let xv = self.value(x);
        let mut value = Array2::zeros((n_out, c));
        for (k, &i) in index.iter().enumerate() {
            let mut dst = value.row_mut(i);
            dst += &xv.row(k);
        }
        Ok(self.push(value, Op::ScatterAddRows(x, index)))
    }

    /// Multiplies row `i` of `x` by `scales[i, 0]`.
    pub fn scale_rows(&mut self, x: Var, scales: Var) -> Result<Var, TensorError> {
        let (sx, ss) = (self.shape(x), self.shape(scales));
        if ss != (sx.0, 1) {
            return Err(TensorError::Shape { op: "scale_rows", left: sx, right: ss });
        }
        let value = self.value(x) * self.value(scales);
        Ok(self.push(value, Op::ScaleRows(x, scales)))
    }

    /// Column-wise max over rows. Ties go to the lowest row index.
    pub fn max_pool_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, c) = self.shape(x);
        if r == 0 {
            return Err(TensorError::Domain { op: "max_pool", message: "no rows to pool".into() });
        }
        let xv = self.value(x);
        let mut argmax = vec![0usize; c];
        let mut value = Array2::zeros((1, c));
        for j in 0..c {
            let mut best = 0;
            for i in 1..r {
                if xv[[i, j]] > xv[[best, j]] {
                    best = i;
                }
            }
            argmax[j] = best;
            value[[0, j]] = xv[[best, j]];
        }
        Ok(self.push(value, Op::MaxPoolRows { x, argmax }))
    }

    /// Column-wise max within each block of consecutive rows; block `k`
    /// starts at row `starts[k]` and ends where the next begins. Gives one
    /// output row per block, ties to the lowest row.
    pub fn segment_max_rows(&mut self, x: Var, starts: &[usize]) -> Result<Var, TensorError> {
        let (r, c) = self.shape(x);
        let bad = starts.first() != Some(&0)
            || starts.windows(2).any(|w| w[0] >= w[1])
            || starts.last().is_some_and(|&l| l >= r);
        if bad {
            return Err(TensorError::Domain {
                op: "segment_max",
                message: format!("block starts {starts:?} do not partition {r} rows into non-empty blocks"),
            });
        }
        let xv = self.value(x);
        let mut value = Array2::zeros((starts.len(), c));
        let mut argmax = Vec::with_capacity(starts.len());
        for (k, &lo) in starts.iter().enumerate() {
            let hi = starts.get(k + 1).copied().unwrap_or(r);
            let mut best = vec![lo; c];
            for i in lo + 1..hi {
                for j in 0..c {
                    if xv[[i, j]] > xv[[best[j], j]] {
                        best[j] = i;
                    }
                }
            }
            for j in 0..c {
                value[[k, j]] = xv[[best[j], j]];
            }
            argmax.push(best);
        }
        Ok(self.push(value, Op::SegmentMaxRows { x, starts: starts.to_vec(), argmax }))
    }

    /// Winning row per column and block of a [`Tape::segment_max_rows`]
    /// result, relative to each block's start.
    pub fn segment_argmax(&self, pooled: Var) -> Option<Vec<Vec<usize>>> {
        match &self.nodes[pooled.0].op {
            Op::SegmentMaxRows { starts, argmax, .. } => Some(
                argmax
                    .iter()
                    .zip(starts)
                    .map(|(rows, &lo)| rows.iter().map(|i| i - lo).collect())
                    .collect(),
            ),
            _ => None,
        }
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).t().as_standard_layout().into_owned();
        self.push(value, Op::Transpose(x))
    }

    /// Winning row per column of a [`Tape::max_pool_rows`] result.
    pub fn pool_argmax(&self, pooled: Var) -> Option<&[usize]> {
        match &self.nodes[pooled.0].op {
            Op::MaxPoolRows { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    /// Inverted dropout: in training mode each entry is zeroed with
    /// probability `p` and survivors are scaled by `1 / (1 - p)`.
    /// Outside training, or with `p == 0`, returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Domain { op: "dropout", message: format!("rate {p} outside [0, 1)") });
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let (r, c) = self.shape(x);
        let mask = Array2::from_shape_simple_fn((r, c), || if rng.random::<f64>() < p { 0.0 } else { keep });
        let value = self.value(x) * &mask;
        Ok(self.push(value, Op::Dropout(x, mask)))
    }

    /// Selects one entry as a `1 x 1` variable.
    pub fn pick(&mut self, x: Var, row: usize, col: usize) -> Result<Var, TensorError> {
        let (r, c) = self.shape(x);
        if row >= r || col >= c {
            return Err(TensorError::Domain {
                op: "pick",
                message: format!("({row}, {col}) outside {r}x{c}"),
            });
        }
        let v = self.value(x)[[row, col]];
        Ok(self.push(Array2::from_elem((1, 1), v), Op::Pick(x, row, col)))
    }

    /// Errors if any entry of `v` is NaN or infinite.
    pub fn check_finite(&self, v: Var, what: &str) -> Result<(), TensorError> {
        if self.value(v).iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFiniteValue(what.to_string()))
        }
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var, store: &ParameterStore) -> Result<Gradients, TensorError> {
        if self.shape(loss) != (1, 1) {
            return Err(TensorError::Shape { op: "backward", left: self.shape(loss), right: (1, 1) });
        }
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut out = Gradients::new(store.len());

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let op_name = node.op.name();
            let needs = |v: Var| self.nodes[v.0].needs_grad;
            let mut emit = |target: Var, grad: Matrix| -> Result<(), TensorError> {
                if !needs(target) {
                    return Ok(());
                }
                if !grad.iter().all(|v| v.is_finite()) {
                    return Err(TensorError::NonFinite { op: op_name });
                }
                match &mut grads[target.0] {
                    Some(acc) => *acc += &grad,
                    slot @ None => *slot = Some(grad),
                }
                Ok(())
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate(*id, g),
                Op::MatMul(a, b) => {
                    if needs(*a) {
                        emit(*a, g.dot(&self.value(*b).t()))?;
                    }
                    if needs(*b) {
                        emit(*b, self.value(*a).t().dot(&g))?;
                    }
                }
                Op::Add(a, b) => {
                    emit(*a, g.clone())?;
                    emit(*b, g)?;
                }
                Op::Sub(a, b) => {
                    emit(*b, -&g)?;
                    emit(*a, g)?;
                }
                Op::Mul(a, b) => {
                    emit(*a, &g * self.value(*b))?;
                    emit(*b, &g * self.value(*a))?;
                }
                Op::AddRow(x, bias) => {
                    emit(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)))?;
                    emit(*x, g)?;
                }
                Op::RepeatRows(row) => emit(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)))?,
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        emit(p, g.slice(s![.., start..start + w]).to_owned())?;
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = self.shape(p).0;
                        emit(p, g.slice(s![start..start + h, ..]).to_owned())?;
                        start += h;
                    }
                }
                Op::Mean(x, reduce) => {
                    let (r, c) = self.shape(*x);
                    let gx = match reduce {
                        Reduce::Rows => g.broadcast((r, c)).unwrap().mapv(|v| v / r as f64),
                        Reduce::Cols => g.broadcast((r, c)).unwrap().mapv(|v| v / c as f64),
                    };
                    emit(*x, gx)?;
                }
                Op::Sum(x) => emit(*x, Array2::from_elem(self.shape(*x), g[[0, 0]]))?,
                Op::Scale(x, f) => emit(*x, g * *f)?,
                Op::LeakyRelu(x, slope) => {
                    let mut gx = g;
                    gx.zip_mut_with(self.value(*x), |gv, &xv| {
                        if xv < 0.0 {
                            *gv *= slope
                        }
                    });
                    emit(*x, gx)?;
                }
                Op::Tanh(x) => {
                    let mut gx = g;
                    gx.zip_mut_with(&node.value, |gv, &y| *gv *= 1.0 - y * y);
                    emit(*x, gx)?;
                }
                Op::LayerNorm { x, gain, bias, normed, inv_std } => {
                    emit(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)))?;
                    emit(*gain, (&g * normed).sum_axis(Axis(0)).insert_axis(Axis(0)))?;
                    let dxhat = &g * self.value(*gain);
                    let (r, c) = normed.dim();
                    let n = c as f64;
                    let mut gx = Array2::zeros((r, c));
                    for i in 0..r {
                        let d = dxhat.row(i);
                        let xh = normed.row(i);
                        let sum_d: f64 = d.sum();
                        let sum_dx: f64 = d.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[[i, j]] = inv_std[i] / n * (n * d[j] - sum_d - xh[j] * sum_dx);
                        }
                    }
                    emit(*x, gx)?;
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    emit(*x, y * &(&g - &dot))?;
                }
                Op::LogSoftmaxRows(x) => {
                    let p = node.value.mapv(f64::exp);
                    let total = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    emit(*x, &g - &(&p * &total))?;
                }
                Op::SegmentSoftmax { x, segments, n_segments } => {
                    let y = &node.value;
                    let mut dot = vec![0.0; *n_segments];
                    for (k, &sg) in segments.iter().enumerate() {
                        dot[sg] += g[[k, 0]] * y[[k, 0]];
                    }
                    let mut gx = Array2::zeros(y.dim());
                    for (k, &sg) in segments.iter().enumerate() {
                        gx[[k, 0]] = y[[k, 0]] * (g[[k, 0]] - dot[sg]);
                    }
                    emit(*x, gx)?;
                }
                Op::GatherRows(x, index) => {
                    let mut gx = Array2::zeros(self.shape(*x));
                    for (k, &i) in index.iter().enumerate() {
                        let mut dst = gx.row_mut(i);
                        dst += &g.row(k);
                    }
                    emit(*x, gx)?;
                }
                Op::ScatterAddRows(x, index) => {
                    let mut gx = Array2::zeros(self.shape(*x));
                    for (k, &i) in index.iter().enumerate() {
                        gx.row_mut(k).assign(&g.row(i));
                    }
                    emit(*x, gx)?;
                }
                Op::ScaleRows(x, scales) => {
                    let gs = (&g * self.value(*x)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    emit(*scales, gs)?;
                    emit(*x, &g * self.value(*scales))?;
                }
                Op::MaxPoolRows { x, argmax } => {
                    let mut gx = Array2::zeros(self.shape(*x));
                    for (j, &i) in argmax.iter().enumerate() {
                        gx[[i, j]] = g[[0, j]];
                    }
                    emit(*x, gx)?;
                }
                Op::Dropout(x, mask) => emit(*x, g * mask)?,
                Op::Pick(x, r, c) => {
                    let mut gx = Array2::zeros(self.shape(*x));
                    gx[[*r, *c]] = g[[0, 0]];
                    emit(*x, gx)?;
                }
                Op::Transpose(x) => emit(*x, g.t().as_standard_layout().into_owned())?,
                Op::SegmentMaxRows { x, argmax, .. } => {
                    let mut gx = Array2::zeros(self.shape(*x));
                    for (sg, rows) in argmax.iter().enumerate() {
                        for (j, &i) in rows.iter().enumerate() {
                            gx[[i, j]] += g[[sg, j]];
                        }
                    }
                    emit(*x, gx)?;
                }
            }
        }
        Ok(out)
    }
}
