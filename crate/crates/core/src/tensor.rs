//! Dense rank-2 tensors and a tape for reverse-mode differentiation.
//!
//! A [`Tensor`] is a plain value: a row-major matrix of `f64`. Recording a
//! computation happens on a [`Tape`], which hands out lightweight [`Var`]
//! handles. Every operation on a `Var` appends a node to the tape; calling
//! [`Tape::backward`] walks the nodes in reverse and returns a [`Gradients`]
//! table.
//!
//! ```
//! use mrlab::tensor::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let w = tape.param(&Tensor::row(vec![3.0]));
//! let loss = w.square().sum().unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(w).data(), &[6.0]);
//! ```
//!
//! The tape is rebuilt for every forward pass. A tape can be differentiated
//! exactly once.

use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use thiserror::Error;

/// Smallest divisor magnitude accepted by `div`.
pub const DIV_GUARD: f64 = 1e-300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("domain error in {op}: entry {index} = {value}")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },
    #[error("backward already ran on this tape")]
    BackwardTwice,
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}x{}, {:?})", self.rows, self.cols, self.data)
    }
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "Tensor::new",
                format!("{} values for shape {rows}x{cols}", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, 0.0)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(1, 1, value)
    }

    /// A 1×n row vector.
    pub fn row(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    /// An n×1 column vector.
    pub fn col(data: Vec<f64>) -> Self {
        Self {
            rows: data.len(),
            cols: 1,
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a tensor from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(shape_err(
                    "from_rows",
                    format!("row {i} has {} values, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single value of a 1×1 tensor.
    pub fn item(&self) -> Result<f64> {
        if self.rows != 1 || self.cols != 1 {
            return Err(shape_err(
                "item",
                format!("expected 1x1, got {}x{}", self.rows, self.cols),
            ));
        }
        Ok(self.data[0])
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows `start..end` as a new tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.rows {
            return Err(shape_err(
                "slice_rows",
                format!("rows {start}..{end} of {}", self.rows),
            ));
        }
        Ok(Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        })
    }

    /// Columns `start..end` as a new tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.cols {
            return Err(shape_err(
                "slice_cols",
                format!("cols {start}..{end} of {}", self.cols),
            ));
        }
        let mut data = Vec::with_capacity(self.rows * (end - start));
        for r in 0..self.rows {
            data.extend_from_slice(&self.row_slice(r)[start..end]);
        }
        Ok(Self {
            rows: self.rows,
            cols: end - start,
            data,
        })
    }

    /// Stacks `times` copies of this tensor vertically.
    pub fn repeat_rows(&self, times: usize) -> Self {
        let mut data = Vec::with_capacity(self.data.len() * times);
        for _ in 0..times {
            data.extend_from_slice(&self.data);
        }
        Self {
            rows: self.rows * times,
            cols: self.cols,
            data,
        }
    }

    pub fn concat(&self, other: &Tensor, axis: Axis) -> Result<Self> {
        concat_values(self, other, axis)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        if self.cols != other.rows {
            return Err(shape_err(
                "matmul",
                format!(
                    "{}x{} times {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        Ok(matmul_nn(self, other))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

fn concat_values(a: &Tensor, b: &Tensor, axis: Axis) -> Result<Tensor> {
    match axis {
        Axis::Rows => {
            if a.cols != b.cols {
                return Err(shape_err(
                    "concat",
                    format!("row concat of {} and {} columns", a.cols, b.cols),
                ));
            }
            let mut data = a.data.clone();
            data.extend_from_slice(&b.data);
            Ok(Tensor {
                rows: a.rows + b.rows,
                cols: a.cols,
                data,
            })
        }
        Axis::Cols => {
            if a.rows != b.rows {
                return Err(shape_err(
                    "concat",
                    format!("column concat of {} and {} rows", a.rows, b.rows),
                ));
            }
            let cols = a.cols + b.cols;
            let mut data = Vec::with_capacity(a.rows * cols);
            for r in 0..a.rows {
                data.extend_from_slice(a.row_slice(r));
                data.extend_from_slice(b.row_slice(r));
            }
            Ok(Tensor {
                rows: a.rows,
                cols,
                data,
            })
        }
    }
}

// C = A·B
fn matmul_nn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    Tensor {
        rows: m,
        cols: n,
        data: out,
    }
}

// C = G·Bᵀ, G: m×n, B: k×n
fn matmul_nt(g: &Tensor, b: &Tensor) -> Tensor {
    let (m, n, k) = (g.rows, g.cols, b.rows);
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let g_row = &g.data[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b.data[p * n..(p + 1) * n];
            out[i * k + p] = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    Tensor {
        rows: m,
        cols: k,
        data: out,
    }
}

// C = Aᵀ·G, A: m×k, G: m×n
fn matmul_tn(a: &Tensor, g: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows, a.cols, g.cols);
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let g_row = &g.data[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += aip * gv;
            }
        }
    }
    Tensor {
        rows: k,
        cols: n,
        data: out,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryKind {
    Neg,
    Square,
    Abs,
    Log,
    Exp,
    Tanh,
    Sigmoid,
    LeakyRelu(f64),
    /// Clamp into `[lo, hi]`; zero gradient outside.
    Clamp(f64, f64),
}

impl UnaryKind {
    fn name(self) -> &'static str {
        match self {
            UnaryKind::Neg => "neg",
            UnaryKind::Square => "square",
            UnaryKind::Abs => "abs",
            UnaryKind::Log => "log",
            UnaryKind::Exp => "exp",
            UnaryKind::Tanh => "tanh",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::LeakyRelu(_) => "leaky_relu",
            UnaryKind::Clamp(..) => "clamp",
        }
    }

    pub fn apply(self, v: f64) -> f64 {
        match self {
            UnaryKind::Neg => -v,
            UnaryKind::Square => v * v,
            UnaryKind::Abs => v.abs(),
            UnaryKind::Log => v.ln(),
            UnaryKind::Exp => v.exp(),
            UnaryKind::Tanh => v.tanh(),
            UnaryKind::Sigmoid => sigmoid(v),
            UnaryKind::LeakyRelu(s) => {
                if v > 0.0 {
                    v
                } else {
                    s * v
                }
            }
            UnaryKind::Clamp(lo, hi) => v.clamp(lo, hi),
        }
    }

    /// d(out)/d(in) given the input and output values.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryKind::Neg => -1.0,
            UnaryKind::Square => 2.0 * x,
            // subgradient 0 at the kink
            UnaryKind::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            UnaryKind::Log => 1.0 / x,
            UnaryKind::Exp => y,
            UnaryKind::Tanh => 1.0 - y * y,
            UnaryKind::Sigmoid => y * (1.0 - y),
            UnaryKind::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            UnaryKind::Clamp(lo, hi) => {
                if x >= lo && x <= hi {
                    1.0
                } else {
                    0.0
                }
            }
        }
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
            BinaryKind::Div => a / b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(UnaryKind, usize),
    Binary(BinaryKind, usize, usize),
    MatMul(usize, usize),
    AddBias(usize, usize),
    Reduce(ReduceKind, usize),
    Concat(usize, usize, Axis),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    /// Per-entry median across `inputs`; `picks[e]` holds the one (odd count)
    /// or two (even count) inputs each output entry was taken from.
    Median(Vec<usize>, Vec<[usize; 2]>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<usize>>,
    consumed: Cell<bool>,
    stops: RefCell<StopLog>,
}

/// What [`Var::gradient_stop`] does with the values passing through it.
#[derive(Default)]
enum StopLog {
    #[default]
    Off,
    Record(Vec<Tensor>),
    Replay(std::collections::VecDeque<Tensor>),
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?})", self.idx, self.tape.nodes.borrow()[self.idx].value)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that remembers every gradient-stopped value, in order.
    pub fn recording_stops() -> Self {
        Self {
            stops: RefCell::new(StopLog::Record(Vec::new())),
            ..Self::default()
        }
    }

    /// A tape whose gradient stops emit `values` in order instead of their
    /// inputs, so a perturbed forward pass sees the stopped values of an
    /// earlier pass.
    pub fn replaying_stops(values: Vec<Tensor>) -> Self {
        Self {
            stops: RefCell::new(StopLog::Replay(values.into())),
            ..Self::default()
        }
    }

    /// Values recorded by a [`Tape::recording_stops`] tape.
    pub fn recorded_stops(&self) -> Vec<Tensor> {
        match &*self.stops.borrow() {
            StopLog::Record(v) => v.clone(),
            _ => Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].needs_grad
    }

    /// Registers a trainable parameter.
    pub fn param(&self, value: &Tensor) -> Var<'_> {
        let v = self.push(value.clone(), Op::Leaf, true);
        self.params.borrow_mut().push(v.idx);
        v
    }

    /// Records a value that receives no gradient.
    pub fn constant(&self, value: &Tensor) -> Var<'_> {
        self.push(value.clone(), Op::Leaf, false)
    }

    pub fn constant_owned(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant_owned(Tensor::scalar(value))
    }

    /// Element-wise median across equally shaped inputs.
    ///
    /// With an odd count the gradient of each entry flows to the input
    /// holding the median; with an even count the output is the midpoint of
    /// the two middle order statistics and each receives half the gradient.
    pub fn median<'t>(&'t self, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        let first = inputs
            .first()
            .ok_or_else(|| shape_err("median", "no inputs"))?;
        let shape = first.shape();
        let nodes = self.nodes.borrow();
        for v in inputs {
            if nodes[v.idx].value.shape() != shape {
                return Err(shape_err(
                    "median",
                    format!("{:?} vs {:?}", nodes[v.idx].value.shape(), shape),
                ));
            }
        }
        let k = inputs.len();
        let len = shape.0 * shape.1;
        let mut out = vec![0.0; len];
        let mut picks = Vec::with_capacity(len);
        let mut order: Vec<usize> = Vec::with_capacity(k);
        for (e, slot) in out.iter_mut().enumerate() {
            order.clear();
            order.extend(0..k);
            order.sort_by(|&i, &j| {
                nodes[inputs[i].idx].value.data[e].total_cmp(&nodes[inputs[j].idx].value.data[e])
            });
            let val = |i: usize| nodes[inputs[order[i]].idx].value.data[e];
            if k % 2 == 1 {
                *slot = val(k / 2);
                picks.push([order[k / 2], order[k / 2]]);
            } else {
                *slot = 0.5 * (val(k / 2 - 1) + val(k / 2));
                picks.push([order[k / 2 - 1], order[k / 2]]);
            }
        }
        let needs_grad = inputs.iter().any(|v| nodes[v.idx].needs_grad);
        drop(nodes);
        let ids = inputs.iter().map(|v| v.idx).collect();
        Ok(self.push(
            Tensor {
                rows: shape.0,
                cols: shape.1,
                data: out,
            },
            Op::Median(ids, picks),
            needs_grad,
        ))
    }

    /// Vertically stacks the inputs.
    pub fn stack_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let mut iter = parts.iter();
        let mut acc = *iter
            .next()
            .ok_or_else(|| shape_err("stack_rows", "no inputs"))?;
        for p in iter {
            acc = acc.concat(*p, Axis::Rows)?;
        }
        Ok(acc)
    }

    /// Sum of equally shaped inputs.
    pub fn add_all<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let mut iter = parts.iter();
        let mut acc = *iter
            .next()
            .ok_or_else(|| shape_err("add_all", "no inputs"))?;
        for p in iter {
            acc = acc.add(*p)?;
        }
        Ok(acc)
    }

    /// Reverse-mode pass from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(shape_err("backward", "loss recorded on another tape"));
        }
        if self.consumed.replace(true) {
            return Err(TensorError::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.idx];
        if !root.value.is_scalar() {
            return Err(shape_err(
                "backward",
                format!("loss must be 1x1, got {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.idx] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.idx).rev() {
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            propagate(&nodes, node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self.params.borrow().clone();
        Ok(Gradients { grads, params })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn reduce_to(g: Tensor, target: &Tensor) -> Tensor {
    if target.is_scalar() && !g.is_scalar() {
        Tensor::scalar(g.sum())
    } else {
        g
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    match &node.op {
        Op::Leaf => {}
        Op::Unary(kind, a) => {
            let x = &nodes[*a].value;
            let data = x
                .data
                .iter()
                .zip(&node.value.data)
                .zip(&g.data)
                .map(|((&xv, &yv), &gv)| gv * kind.derivative(xv, yv))
                .collect();
            accumulate(
                grads,
                *a,
                Tensor {
                    rows: x.rows,
                    cols: x.cols,
                    data,
                },
            );
        }
        Op::Binary(kind, a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let out_shape = node.value.shape();
            let at = |t: &Tensor, i: usize| if t.is_scalar() { t.data[0] } else { t.data[i] };
            let n = g.data.len();
            if nodes[*a].needs_grad {
                let data: Vec<f64> = (0..n)
                    .map(|i| {
                        let gi = g.data[i];
                        match kind {
                            BinaryKind::Add | BinaryKind::Sub => gi,
                            BinaryKind::Mul => gi * at(bv, i),
                            BinaryKind::Div => gi / at(bv, i),
                        }
                    })
                    .collect();
                let full = Tensor {
                    rows: out_shape.0,
                    cols: out_shape.1,
                    data,
                };
                accumulate(grads, *a, reduce_to(full, av));
            }
            if nodes[*b].needs_grad {
                let data: Vec<f64> = (0..n)
                    .map(|i| {
                        let gi = g.data[i];
                        match kind {
                            BinaryKind::Add => gi,
                            BinaryKind::Sub => -gi,
                            BinaryKind::Mul => gi * at(av, i),
                            BinaryKind::Div => {
                                let d = at(bv, i);
                                -gi * at(av, i) / (d * d)
                            }
                        }
                    })
                    .collect();
                let full = Tensor {
                    rows: out_shape.0,
                    cols: out_shape.1,
                    data,
                };
                accumulate(grads, *b, reduce_to(full, bv));
            }
        }
        Op::MatMul(a, b) => {
            if nodes[*a].needs_grad {
                accumulate(grads, *a, matmul_nt(g, &nodes[*b].value));
            }
            if nodes[*b].needs_grad {
                accumulate(grads, *b, matmul_tn(&nodes[*a].value, g));
            }
        }
        Op::AddBias(a, bias) => {
            if nodes[*a].needs_grad {
                accumulate(grads, *a, g.clone());
            }
            if nodes[*bias].needs_grad {
                let mut col_sums = vec![0.0; g.cols];
                for r in 0..g.rows {
                    for (s, v) in col_sums.iter_mut().zip(g.row_slice(r)) {
                        *s += v;
                    }
                }
                accumulate(grads, *bias, Tensor::row(col_sums));
            }
        }
        Op::Reduce(kind, a) => {
            let x = &nodes[*a].value;
            let scale = match kind {
                ReduceKind::Sum => 1.0,
                ReduceKind::Mean => 1.0 / x.len() as f64,
            };
            accumulate(grads, *a, Tensor::full(x.rows, x.cols, g.data[0] * scale));
        }
        Op::Concat(a, b, axis) => {
            let av = &nodes[*a].value;
            let (ga, gb) = match axis {
                Axis::Rows => (
                    g.slice_rows(0, av.rows).expect("concat grad"),
                    g.slice_rows(av.rows, g.rows).expect("concat grad"),
                ),
                Axis::Cols => {
                    let bc = g.cols - av.cols;
                    let mut da = Vec::with_capacity(g.rows * av.cols);
                    let mut db = Vec::with_capacity(g.rows * bc);
                    for r in 0..g.rows {
                        let row = g.row_slice(r);
                        da.extend_from_slice(&row[..av.cols]);
                        db.extend_from_slice(&row[av.cols..]);
                    }
                    (
                        Tensor {
                            rows: g.rows,
                            cols: av.cols,
                            data: da,
                        },
                        Tensor {
                            rows: g.rows,
                            cols: bc,
                            data: db,
                        },
                    )
                }
            };
            if nodes[*a].needs_grad {
                accumulate(grads, *a, ga);
            }
            if nodes[*b].needs_grad {
                accumulate(grads, *b, gb);
            }
        }
        Op::SliceRows(a, start) => {
            let x = &nodes[*a].value;
            let mut full = Tensor::zeros(x.rows, x.cols);
            let off = start * x.cols;
            full.data[off..off + g.data.len()].copy_from_slice(&g.data);
            accumulate(grads, *a, full);
        }
        Op::SliceCols(a, start) => {
            let x = &nodes[*a].value;
            let mut full = Tensor::zeros(x.rows, x.cols);
            for r in 0..g.rows {
                let off = r * x.cols + start;
                full.data[off..off + g.cols].copy_from_slice(g.row_slice(r));
            }
            accumulate(grads, *a, full);
        }
        Op::Median(inputs, picks) => {
            let (rows, cols) = node.value.shape();
            let mut per_input: Vec<Option<Vec<f64>>> = vec![None; inputs.len()];
            for (e, pick) in picks.iter().enumerate() {
                let weight = if pick[0] == pick[1] { 1.0 } else { 0.5 };
                let mut add = |which: usize| {
                    per_input[which].get_or_insert_with(|| vec![0.0; rows * cols])[e] +=
                        weight * g.data[e];
                };
                add(pick[0]);
                if pick[1] != pick[0] {
                    add(pick[1]);
                }
            }
            for (which, data) in per_input.into_iter().enumerate() {
                let id = inputs[which];
                if let (Some(data), true) = (data, nodes[id].needs_grad) {
                    accumulate(grads, id, Tensor { rows, cols, data });
                }
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<usize>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; zeros when `v` does not reach the loss.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match &self.grads[v.idx] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = v.shape();
                Tensor::zeros(r, c)
            }
        }
    }

    /// Gradients of every registered parameter, in registration order.
    pub fn params(&self) -> Vec<Option<&Tensor>> {
        self.params.iter().map(|&i| self.grads[i].as_ref()).collect()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.idx].value.clone()
    }

    /// Borrowed view of the recorded value.
    pub fn value_ref(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.idx].value)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.idx].value.shape()
    }

    pub fn item(&self) -> Result<f64> {
        self.value_ref().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.idx)
    }

    fn same_tape(&self, other: &Var<'_>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(shape_err(op, "operands recorded on different tapes"))
        }
    }

    pub fn unary(self, kind: UnaryKind) -> Result<Var<'t>> {
        let value = {
            let x = self.value_ref();
            if kind == UnaryKind::Log {
                if let Some((i, &v)) = x.data.iter().enumerate().find(|(_, v)| **v <= 0.0) {
                    return Err(TensorError::Domain {
                        op: kind.name(),
                        index: i,
                        value: v,
                    });
                }
            }
            x.map(|v| kind.apply(v))
        };
        Ok(self
            .tape
            .push(value, Op::Unary(kind, self.idx), self.requires_grad()))
    }

    fn infallible(self, kind: UnaryKind) -> Var<'t> {
        self.unary(kind).expect("infallible unary op")
    }

    pub fn neg(self) -> Var<'t> {
        self.infallible(UnaryKind::Neg)
    }

    pub fn square(self) -> Var<'t> {
        self.infallible(UnaryKind::Square)
    }

    pub fn abs(self) -> Var<'t> {
        self.infallible(UnaryKind::Abs)
    }

    pub fn exp(self) -> Var<'t> {
        self.infallible(UnaryKind::Exp)
    }

    pub fn tanh(self) -> Var<'t> {
        self.infallible(UnaryKind::Tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.infallible(UnaryKind::Sigmoid)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.infallible(UnaryKind::LeakyRelu(slope))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.infallible(UnaryKind::Clamp(lo, hi))
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Log)
    }

    pub fn binary(self, kind: BinaryKind, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other, kind.name())?;
        let value = {
            let a = self.value_ref();
            let b = other.value_ref();
            let (rows, cols) = if a.shape() == b.shape() || b.is_scalar() {
                a.shape()
            } else if a.is_scalar() {
                b.shape()
            } else {
                return Err(shape_err(
                    kind.name(),
                    format!("{:?} vs {:?}", a.shape(), b.shape()),
                ));
            };
            if kind == BinaryKind::Div {
                if let Some((i, &v)) = b.data.iter().enumerate().find(|(_, v)| v.abs() < DIV_GUARD)
                {
                    return Err(TensorError::Numeric {
                        op: "div",
                        detail: format!("divisor entry {i} = {v:e}"),
                    });
                }
            }
            let at = |t: &Tensor, i: usize| if t.is_scalar() { t.data[0] } else { t.data[i] };
            let data = (0..rows * cols)
                .map(|i| kind.apply(at(&a, i), at(&b, i)))
                .collect();
            Tensor { rows, cols, data }
        };
        let needs = self.requires_grad() || other.requires_grad();
        Ok(self
            .tape
            .push(value, Op::Binary(kind, self.idx, other.idx), needs))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Add, other)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Sub, other)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Mul, other)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Div, other)
    }

    /// Multiplies by a constant.
    pub fn scale(self, c: f64) -> Var<'t> {
        let s = self.tape.scalar(c);
        self.mul(s).expect("scalar broadcast")
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let s = self.tape.scalar(c);
        self.add(s).expect("scalar broadcast")
    }

    /// Computes `c - self` for a constant `c`.
    pub fn rsub_scalar(self, c: f64) -> Var<'t> {
        let s = self.tape.scalar(c);
        s.sub(self).expect("scalar broadcast")
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other, "matmul")?;
        let value = self.value_ref().matmul(&other.value_ref())?;
        let needs = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, Op::MatMul(self.idx, other.idx), needs))
    }

    /// Adds a 1×cols bias row to every row.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&bias, "add_bias")?;
        let value = {
            let x = self.value_ref();
            let b = bias.value_ref();
            if b.rows != 1 || b.cols != x.cols {
                return Err(shape_err(
                    "add_bias",
                    format!("bias {:?} for input {:?}", b.shape(), x.shape()),
                ));
            }
            let mut out = x.clone();
            for r in 0..out.rows {
                let cols = out.cols;
                for (o, bv) in out.data[r * cols..(r + 1) * cols].iter_mut().zip(&b.data) {
                    *o += bv;
                }
            }
            out
        };
        let needs = self.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(value, Op::AddBias(self.idx, bias.idx), needs))
    }

    pub fn reduce(self, kind: ReduceKind) -> Result<Var<'t>> {
        let value = {
            let x = self.value_ref();
            if x.is_empty() {
                return Err(shape_err("reduce", "empty tensor"));
            }
            Tensor::scalar(match kind {
                ReduceKind::Sum => x.sum(),
                ReduceKind::Mean => x.mean(),
            })
        };
        Ok(self
            .tape
            .push(value, Op::Reduce(kind, self.idx), self.requires_grad()))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Sum)
    }

    pub fn mean(self) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Mean)
    }

    pub fn concat(self, other: Var<'t>, axis: Axis) -> Result<Var<'t>> {
        self.same_tape(&other, "concat")?;
        let value = concat_values(&self.value_ref(), &other.value_ref(), axis)?;
        let needs = self.requires_grad() || other.requires_grad();
        Ok(self
            .tape
            .push(value, Op::Concat(self.idx, other.idx, axis), needs))
    }

    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t>> {
        let value = self.value_ref().slice_rows(start, end)?;
        Ok(self
            .tape
            .push(value, Op::SliceRows(self.idx, start), self.requires_grad()))
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let value = self.value_ref().slice_cols(start, end)?;
        Ok(self
            .tape
            .push(value, Op::SliceCols(self.idx, start), self.requires_grad()))
    }

    /// Same value, no gradient flows back through the result.
    pub fn gradient_stop(self) -> Var<'t> {
        let value = match &mut *self.tape.stops.borrow_mut() {
            StopLog::Off => self.value(),
            StopLog::Record(log) => {
                log.push(self.value());
                self.value()
            }
            StopLog::Replay(queue) => match queue.pop_front() {
                Some(v) => v,
                None => self.value(),
            },
        };
        self.tape.constant_owned(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx_eq(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn unary_examples() {
        let t = Tape::new();
        let a = t.constant(&Tensor::row(vec![2.0, -3.0]));
        assert_eq!(a.square().value().data(), &[4.0, 9.0]);
        let b = t.constant(&Tensor::row(vec![-1.0, 0.0, 5.0]));
        assert_eq!(b.abs().value().data(), &[1.0, 0.0, 5.0]);
        let c = t.constant(&Tensor::row(vec![-1.0, 2.0]));
        approx_eq(c.leaky_relu(0.2).value().data(), &[-0.2, 2.0]);
    }

    #[test]
    fn log_of_nonpositive_names_index() {
        let t = Tape::new();
        let a = t.constant(&Tensor::row(vec![1.0, 2.0, 0.0]));
        match a.log() {
            Err(TensorError::Domain { index, .. }) => assert_eq!(index, 2),
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn binary_examples() {
        let t = Tape::new();
        let a = t.constant(&Tensor::row(vec![1.0, 2.0]));
        let b = t.constant(&Tensor::row(vec![3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
        let c = t.constant(&Tensor::row(vec![2.0, 9.0]));
        let d = t.constant(&Tensor::row(vec![2.0, 3.0]));
        assert_eq!(c.div(d).unwrap().value().data(), &[1.0, 3.0]);
        let one = t.scalar(1.0);
        let q = t.constant(&Tensor::row(vec![0.25]));
        assert_eq!(one.sub(q).unwrap().value().data(), &[0.75]);
    }

    #[test]
    fn binary_errors() {
        let t = Tape::new();
        let a = t.constant(&Tensor::row(vec![1.0, 2.0]));
        let b = t.constant(&Tensor::row(vec![1.0, 2.0, 3.0]));
        assert!(matches!(a.add(b), Err(TensorError::Shape { .. })));
        let z = t.constant(&Tensor::row(vec![1.0, 1e-301]));
        assert!(matches!(a.div(z), Err(TensorError::Numeric { .. })));
    }

    #[test]
    fn matmul_examples() {
        let t = Tape::new();
        let i2 = t.constant(&Tensor::identity(2));
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let mv = t.constant(&m);
        assert_eq!(i2.matmul(mv).unwrap().value(), m);
        let r = t.constant(&Tensor::row(vec![1.0, 2.0]));
        let c = t.constant(&Tensor::col(vec![3.0, 4.0]));
        assert_eq!(r.matmul(c).unwrap().value().data(), &[11.0]);
        let z = t.constant(&Tensor::zeros(2, 3));
        let o = t.constant(&Tensor::ones(3, 1));
        assert_eq!(z.matmul(o).unwrap().value(), Tensor::zeros(2, 1));
        assert!(matches!(r.matmul(r), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn reduce_examples() {
        let t = Tape::new();
        let a = t.constant(&Tensor::row(vec![1.0, 2.0, 3.0]));
        assert_eq!(a.mean().unwrap().item().unwrap(), 2.0);
        assert_eq!(a.sum().unwrap().item().unwrap(), 6.0);
        let c = t.constant(&Tensor::full(1, 5, 0.3));
        assert!((c.mean().unwrap().item().unwrap() - 0.3).abs() < 1e-15);
        let e = t.constant(&Tensor::zeros(0, 3));
        assert!(matches!(e.mean(), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn concat_examples_and_gradient() {
        let t = Tape::new();
        let a = t.param(&Tensor::row(vec![1.0, 2.0]));
        let b = t.constant(&Tensor::row(vec![3.0]));
        let c = a.concat(b, Axis::Cols).unwrap();
        assert_eq!(c.value().data(), &[1.0, 2.0, 3.0]);
        let x = t.constant(&Tensor::zeros(2, 1));
        let y = t.constant(&Tensor::zeros(2, 2));
        assert_eq!(x.concat(y, Axis::Cols).unwrap().shape(), (2, 3));
        assert!(matches!(
            x.concat(t.constant(&Tensor::zeros(3, 1)), Axis::Cols),
            Err(TensorError::Shape { .. })
        ));
        let loss = c.sum().unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(a), Tensor::ones(1, 2));
    }

    #[test]
    fn stop_values_replay_in_order() {
        let rec = Tape::recording_stops();
        let a = rec.param(&Tensor::row(vec![1.0, 2.0]));
        let _ = a.gradient_stop();
        let _ = a.scale(3.0).gradient_stop();
        let log = rec.recorded_stops();
        assert_eq!(log.len(), 2);
        assert_eq!(log[1].data(), &[3.0, 6.0]);

        let rep = Tape::replaying_stops(log);
        let b = rep.param(&Tensor::row(vec![5.0, 5.0]));
        assert_eq!(b.gradient_stop().value().data(), &[1.0, 2.0]);
        assert_eq!(b.gradient_stop().value().data(), &[3.0, 6.0]);
        assert_eq!(b.gradient_stop().value().data(), &[5.0, 5.0]);
        assert!(Tape::new().recorded_stops().is_empty());
    }

    #[test]
    fn gradient_stop_examples() {
        let t = Tape::new();
        let a = t.param(&Tensor::row(vec![2.0]));
        let s = a.gradient_stop();
        assert_eq!(s.value(), a.value());
        let loss = s.mul(a).unwrap().sum().unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(a).data(), &[2.0]);

        let t = Tape::new();
        let a = t.param(&Tensor::row(vec![2.0, -1.0]));
        let loss = a.gradient_stop().sum().unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(a), Tensor::zeros(1, 2));
    }

    #[test]
    fn backward_examples() {
        let t = Tape::new();
        let w = t.param(&Tensor::row(vec![3.0]));
        let g = t.backward(w.square().sum().unwrap()).unwrap();
        assert_eq!(g.wrt(w).data(), &[6.0]);

        // mean((w·x − y)²) at w=0, x=1, y=1
        let t = Tape::new();
        let w = t.param(&Tensor::scalar(0.0));
        let x = t.constant(&Tensor::scalar(1.0));
        let y = t.constant(&Tensor::scalar(1.0));
        let loss = w.mul(x).unwrap().sub(y).unwrap().square().mean().unwrap();
        let unreachable = t.param(&Tensor::row(vec![1.0, 1.0]));
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(w).data(), &[-2.0]);
        assert_eq!(g.wrt(unreachable), Tensor::zeros(1, 2));
        assert_eq!(g.params().len(), 2);
        assert!(g.params()[1].is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let t = Tape::new();
        let w = t.param(&Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(t.backward(w), Err(TensorError::Shape { .. })));
        let t = Tape::new();
        let w = t.param(&Tensor::row(vec![1.0, 2.0]));
        let loss = w.sum().unwrap();
        t.backward(loss).unwrap();
        assert!(matches!(t.backward(loss), Err(TensorError::BackwardTwice)));
    }

    #[test]
    fn scalar_broadcast_gradient_sums() {
        let t = Tape::new();
        let s = t.param(&Tensor::scalar(2.0));
        let v = t.param(&Tensor::row(vec![1.0, 2.0, 3.0]));
        let loss = v.mul(s).unwrap().sum().unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(s).data(), &[6.0]);
        assert_eq!(g.wrt(v).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn median_odd_and_even() {
        let t = Tape::new();
        let a = t.param(&Tensor::row(vec![1.0, 5.0]));
        let b = t.param(&Tensor::row(vec![2.0, 4.0]));
        let c = t.param(&Tensor::row(vec![4.0, 3.0]));
        let m = t.median(&[a, b, c]).unwrap();
        assert_eq!(m.value().data(), &[2.0, 4.0]);
        let g = t.backward(m.sum().unwrap()).unwrap();
        assert_eq!(g.wrt(a).data(), &[0.0, 0.0]);
        assert_eq!(g.wrt(b).data(), &[1.0, 1.0]);
        assert_eq!(g.wrt(c).data(), &[0.0, 0.0]);

        let t = Tape::new();
        let a = t.param(&Tensor::row(vec![1.0]));
        let b = t.param(&Tensor::row(vec![3.0]));
        let m = t.median(&[a, b]).unwrap();
        assert_eq!(m.value().data(), &[2.0]);
        let g = t.backward(m.sum().unwrap()).unwrap();
        assert_eq!(g.wrt(a).data(), &[0.5]);
        assert_eq!(g.wrt(b).data(), &[0.5]);
    }

    #[test]
    fn slice_rows_gradient_scatters() {
        let t = Tape::new();
        let a = t.param(&Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap());
        let s = a.slice_rows(1, 3).unwrap();
        let g = t.backward(s.sum().unwrap()).unwrap();
        assert_eq!(g.wrt(a).data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn slice_cols_gradient_scatters() {
        let t = Tape::new();
        let a = t.param(&Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap());
        let s = a.slice_cols(1, 3).unwrap();
        assert_eq!(s.value().data(), &[2.0, 3.0, 5.0, 6.0]);
        let g = t.backward(s.sum().unwrap()).unwrap();
        assert_eq!(g.wrt(a).data(), &[0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn add_bias_gradient_sums_rows() {
        let t = Tape::new();
        let x = t.param(&Tensor::zeros(3, 2));
        let b = t.param(&Tensor::row(vec![1.0, -1.0]));
        let y = x.add_bias(b).unwrap();
        assert_eq!(y.value().row_slice(2), &[1.0, -1.0]);
        let g = t.backward(y.sum().unwrap()).unwrap();
        assert_eq!(g.wrt(b).data(), &[3.0, 3.0]);
    }
}
