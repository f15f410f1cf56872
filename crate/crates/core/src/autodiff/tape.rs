use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

use super::tensor::Tensor;
use super::TapeError;
use crate::fem::LinearOperator;

/// Linear operator shared between the tape and the code that assembled it.
pub type SharedOperator = Arc<dyn LinearOperator + Send + Sync>;

/// Sorted segment assignment for `segment_reduce`: row `r` of the input
/// belongs to output row `ids[r]`. Every output row must own at least one
/// input row.
#[derive(Debug, Clone, PartialEq)]
pub struct Segments {
    ids: Rc<[usize]>,
    starts: Vec<usize>,
    inv_count: Rc<[f64]>,
}

impl Segments {
    pub fn new(ids: Vec<usize>, count: usize) -> Result<Self, TapeError> {
        if ids.windows(2).any(|w| w[1] < w[0]) {
            return Err(TapeError::InvalidGraph("segment ids are not sorted".into()));
        }
        if let Some(&last) = ids.last() {
            if last >= count {
                return Err(TapeError::InvalidGraph(format!(
                    "segment id {last} out of range for {count} segments"
                )));
            }
        }
        let mut starts = vec![0; count + 1];
        for &s in &ids {
            starts[s + 1] += 1;
        }
        if let Some(empty) = (0..count).find(|&s| starts[s + 1] == 0) {
            return Err(TapeError::InvalidGraph(format!(
                "segment {empty} is empty (node without incoming edges)"
            )));
        }
        for s in 0..count {
            starts[s + 1] += starts[s];
        }
        let inv_count = ids
            .iter()
            .map(|&s| 1.0 / (starts[s + 1] - starts[s]) as f64)
            .collect();
        Ok(Segments {
            ids: ids.into(),
            starts,
            inv_count,
        })
    }

    pub fn ids(&self) -> &Rc<[usize]> {
        &self.ids
    }

    pub fn num_segments(&self) -> usize {
        self.starts.len() - 1
    }

    pub fn num_items(&self) -> usize {
        self.ids.len()
    }

    fn range(&self, s: usize) -> std::ops::Range<usize> {
        self.starts[s]..self.starts[s + 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Max,
    Mean,
}

#[derive(Clone)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul {
        a: usize,
        b: usize,
        trans_a: bool,
        trans_b: bool,
    },
    ConcatCols(Vec<usize>),
    SliceCols {
        src: usize,
        start: usize,
    },
    PadCols {
        src: usize,
        start: usize,
    },
    GatherRows {
        src: usize,
        index: Rc<[usize]>,
    },
    ScatterAddRows {
        src: usize,
        index: Rc<[usize]>,
    },
    SegmentMax {
        src: usize,
        segments: Rc<Segments>,
        mask: Rc<Tensor>,
    },
    SegmentMean {
        src: usize,
        segments: Rc<Segments>,
    },
    ScaleRows {
        src: usize,
        factors: Rc<[f64]>,
    },
    /// Elementwise product with a fixed tensor held by the op.
    Mask {
        src: usize,
        mask: Rc<Tensor>,
    },
    AddRow(usize, usize),
    Relu(usize),
    Tanh(usize),
    Square(usize),
    Abs(usize),
    Sum(usize),
    BroadcastScalar(usize),
    BroadcastRows(usize),
    SumRows(usize),
    External {
        src: usize,
        op: SharedOperator,
        adjoint: bool,
    },
}

impl Op {
    fn for_each_input(&self, mut f: impl FnMut(usize)) {
        match self {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                f(*a);
                f(*b);
            }
            Op::MatMul { a, b, .. } => {
                f(*a);
                f(*b);
            }
            Op::ConcatCols(parts) => parts.iter().copied().for_each(f),
            Op::Scale(s, _)
            | Op::AddScalar(s)
            | Op::Relu(s)
            | Op::Tanh(s)
            | Op::Square(s)
            | Op::Abs(s)
            | Op::Sum(s)
            | Op::BroadcastScalar(s)
            | Op::BroadcastRows(s)
            | Op::SumRows(s)
            | Op::SliceCols { src: s, .. }
            | Op::PadCols { src: s, .. }
            | Op::GatherRows { src: s, .. }
            | Op::ScatterAddRows { src: s, .. }
            | Op::SegmentMax { src: s, .. }
            | Op::SegmentMean { src: s, .. }
            | Op::ScaleRows { src: s, .. }
            | Op::Mask { src: s, .. }
            | Op::External { src: s, .. } => f(*s),
        }
    }
}

struct Node {
    op: Op,
    value: Rc<Tensor>,
    requires_grad: bool,
}

/// Append-only record of tensor operations.
///
/// Every backward rule is written with the same public operations, so a
/// backward pass run with `create_graph` lands on the tape as ordinary nodes
/// and can itself be differentiated.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

/// Handle to a tape node.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn check_same(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(), TapeError> {
    if a != b {
        return Err(TapeError::ShapeMismatch {
            op,
            left: a,
            right: b,
        });
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Constant, value, false)
    }

    fn push(&self, op: Op, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let (op, requires_grad) = match op {
            Op::Leaf => (Op::Leaf, requires_grad),
            _ if requires_grad => (op, true),
            _ => (Op::Constant, false),
        };
        nodes.push(Node {
            op,
            value: Rc::new(value),
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, op: Op, value: Tensor) -> Var<'_> {
        let requires = self.recording.get() && {
            let nodes = self.nodes.borrow();
            let mut any = false;
            op.for_each_input(|i| any |= nodes[i].requires_grad);
            any
        };
        self.push(op, value, requires)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    fn owns(&self, v: Var<'_>) -> Result<(), TapeError> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(TapeError::ForeignVariable)
        }
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>, TapeError> {
        let first = parts
            .first()
            .ok_or_else(|| TapeError::InvalidArgument("concat of zero tensors".into()))?;
        let rows = first.shape().0;
        let mut total = 0;
        for p in parts {
            self.owns(*p)?;
            check_same("concat_cols", (rows, 0), (p.shape().0, 0))?;
            total += p.shape().1;
        }
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                out.extend_from_slice(v.row(r));
            }
        }
        Ok(self.record(
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
            Tensor::new(rows, total, out),
        ))
    }

    /// Applies an assembled linear operator column-by-column; the backward
    /// rule is the operator's adjoint.
    pub fn external_linear<'t>(
        &'t self,
        op: &SharedOperator,
        u: Var<'t>,
        adjoint: bool,
    ) -> Result<Var<'t>, TapeError> {
        self.owns(u)?;
        let (in_dim, out_dim) = if adjoint {
            (op.rows(), op.cols())
        } else {
            (op.cols(), op.rows())
        };
        let x = u.value();
        if x.rows() != in_dim {
            return Err(TapeError::ShapeMismatch {
                op: "external_linear",
                left: (in_dim, x.cols()),
                right: x.shape(),
            });
        }
        let mut out = Tensor::zeros(out_dim, x.cols());
        for c in 0..x.cols() {
            let col: Vec<f64> = (0..x.rows()).map(|r| x.get(r, c)).collect();
            let y = if adjoint {
                op.apply_adjoint(&col)
            } else {
                op.apply(&col)
            };
            for (r, v) in y.into_iter().enumerate() {
                out.set(r, c, v);
            }
        }
        Ok(self.record(
            Op::External {
                src: u.id,
                op: Arc::clone(op),
                adjoint,
            },
            out,
        ))
    }

    /// Pattern of every non-smooth branch taken so far (relu/abs signs,
    /// segment-max winners) on nodes that depend on a differentiable input.
    /// Two evaluations with equal patterns lie on the same smooth piece.
    pub fn kink_pattern(&self) -> Vec<u8> {
        let nodes = self.nodes.borrow();
        let mut pattern = Vec::new();
        for node in nodes.iter() {
            match &node.op {
                Op::Relu(s) => pattern.extend(
                    nodes[*s]
                        .value
                        .data()
                        .iter()
                        .map(|&v| u8::from(v > 0.0) + u8::from(v == 0.0) * 2),
                ),
                Op::Abs(s) => pattern.extend(
                    nodes[*s]
                        .value
                        .data()
                        .iter()
                        .map(|&v| u8::from(v > 0.0) + u8::from(v == 0.0) * 2),
                ),
                Op::SegmentMax { mask, .. } => {
                    pattern.extend(mask.data().iter().map(|&v| u8::from(v != 0.0)))
                }
                _ => {}
            }
        }
        pattern
    }

    /// Reverse accumulation from a scalar `loss` to each of `wrt`.
    ///
    /// With `create_graph` the gradient computation is recorded on this tape
    /// and the returned variables are differentiable; otherwise they are
    /// constants. Leaves that `loss` does not depend on get a zero gradient.
    pub fn backward<'t>(
        &'t self,
        loss: Var<'t>,
        wrt: &[Var<'t>],
        create_graph: bool,
    ) -> Result<Vec<Var<'t>>, TapeError> {
        self.owns(loss)?;
        for w in wrt {
            self.owns(*w)?;
        }
        if loss.shape() != (1, 1) {
            return Err(TapeError::NotScalar(loss.shape()));
        }
        let end = loss.id + 1;

        // restrict the sweep to nodes on a path from some wrt leaf
        let mut depends = vec![false; end];
        {
            let nodes = self.nodes.borrow();
            for w in wrt {
                if w.id < end && nodes[w.id].requires_grad {
                    depends[w.id] = true;
                }
            }
            for i in 0..end {
                if depends[i] || !nodes[i].requires_grad {
                    continue;
                }
                let mut any = false;
                nodes[i].op.for_each_input(|j| any |= depends[j]);
                depends[i] = any;
            }
        }

        let saved = self.recording.replace(create_graph);
        let result = self.sweep(loss, &depends);
        self.recording.set(saved);
        let grads = result?;

        Ok(wrt
            .iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => self.var(g),
                None => {
                    let (r, c) = w.shape();
                    self.constant(Tensor::zeros(r, c))
                }
            })
            .collect())
    }

    fn sweep(&self, loss: Var<'_>, depends: &[bool]) -> Result<Vec<Option<usize>>, TapeError> {
        let end = loss.id + 1;
        let mut grads: Vec<Option<usize>> = vec![None; end];
        if !depends[loss.id] {
            return Ok(grads);
        }
        grads[loss.id] = Some(self.constant(Tensor::scalar(1.0)).id);

        for i in (0..end).rev() {
            let Some(g) = grads[i] else { continue };
            if !depends[i] {
                continue;
            }
            let op = self.nodes.borrow()[i].op.clone();
            let g = self.var(g);
            let mut push = |j: usize, contribution: Var<'_>| -> Result<(), TapeError> {
                if !depends[j] {
                    return Ok(());
                }
                grads[j] = Some(match grads[j] {
                    Some(prev) => self.var(prev).add(contribution)?.id,
                    None => contribution.id,
                });
                Ok(())
            };
            match op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    push(a, g)?;
                    push(b, g)?;
                }
                Op::Sub(a, b) => {
                    push(a, g)?;
                    if depends[b] {
                        push(b, g.scale(-1.0))?;
                    }
                }
                Op::Mul(a, b) => {
                    if depends[a] {
                        push(a, g.mul(self.var(b))?)?;
                    }
                    if depends[b] {
                        push(b, g.mul(self.var(a))?)?;
                    }
                }
                Op::Scale(a, c) => push(a, g.scale(c))?,
                Op::AddScalar(a) => push(a, g)?,
                Op::MatMul {
                    a,
                    b,
                    trans_a,
                    trans_b,
                } => {
                    let (va, vb) = (self.var(a), self.var(b));
                    if depends[a] {
                        let ga = if trans_a {
                            vb.matmul_t(g, trans_b, true)?
                        } else {
                            g.matmul_t(vb, false, !trans_b)?
                        };
                        push(a, ga)?;
                    }
                    if depends[b] {
                        let gb = if trans_b {
                            g.matmul_t(va, true, trans_a)?
                        } else {
                            va.matmul_t(g, !trans_a, false)?
                        };
                        push(b, gb)?;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let width = self.var(p).shape().1;
                        if depends[p] {
                            push(p, g.slice_cols(offset, offset + width)?)?;
                        }
                        offset += width;
                    }
                }
                Op::SliceCols { src, start } => {
                    let total = self.var(src).shape().1;
                    push(src, g.pad_cols(start, total)?)?;
                }
                Op::PadCols { src, start } => {
                    let width = self.var(src).shape().1;
                    push(src, g.slice_cols(start, start + width)?)?;
                }
                Op::GatherRows { src, index } => {
                    let rows = self.var(src).shape().0;
                    push(src, g.scatter_add_rows(&index, rows)?)?;
                }
                Op::ScatterAddRows { src, index } => push(src, g.gather_rows(&index)?)?,
                Op::SegmentMax { src, segments, mask } => {
                    let routed = g.gather_rows(segments.ids())?;
                    push(src, routed.masked(&mask)?)?;
                }
                Op::SegmentMean { src, segments } => {
                    let spread = g.gather_rows(segments.ids())?;
                    push(src, spread.scale_rows(&segments.inv_count)?)?;
                }
                Op::ScaleRows { src, factors } => push(src, g.scale_rows(&factors)?)?,
                Op::Mask { src, mask } => push(src, g.masked(&mask)?)?,
                Op::AddRow(a, bias) => {
                    push(a, g)?;
                    if depends[bias] {
                        push(bias, g.sum_rows())?;
                    }
                }
                Op::Relu(src) => {
                    let mask = self.var(src).value().map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    push(src, g.masked(&Rc::new(mask))?)?;
                }
                Op::Abs(src) => {
                    let sign = self.var(src).value().map(|v| {
                        if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    push(src, g.masked(&Rc::new(sign))?)?;
                }
                Op::Tanh(src) => {
                    // 1 - y^2 in terms of this node's own output
                    let y = self.var(i);
                    let slope = y.square().scale(-1.0).add_scalar(1.0);
                    push(src, g.mul(slope)?)?;
                }
                Op::Square(src) => {
                    let x = self.var(src);
                    push(src, g.mul(x.scale(2.0))?)?;
                }
                Op::Sum(src) => {
                    let (r, c) = self.var(src).shape();
                    push(src, g.broadcast_scalar(r, c)?)?;
                }
                Op::BroadcastScalar(src) => push(src, g.sum())?,
                Op::BroadcastRows(src) => push(src, g.sum_rows())?,
                Op::SumRows(src) => {
                    let rows = self.var(src).shape().0;
                    push(src, g.broadcast_rows(rows)?)?;
                }
                Op::External { src, op, adjoint } => {
                    push(src, self.external_linear(&op, g, !adjoint)?)?;
                }
            }
        }
        Ok(grads)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    /// Value of a 1x1 variable.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>, TapeError> {
        self.tape.owns(other)?;
        let (a, b) = (self.value(), other.value());
        check_same(name, a.shape(), b.shape())?;
        Ok(self.tape.record(op, a.zip_map(&b, f)))
    }

    fn unary(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let v = self.value().map(f);
        self.tape.record(op, v)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, TapeError> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, TapeError> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, TapeError> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(|v| c * v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(|v| v + c, Op::AddScalar(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|v| if v > 0.0 { v } else { 0.0 }, Op::Relu(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, Op::Tanh(self.id))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|v| v * v, Op::Square(self.id))
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, Op::Abs(self.id))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, TapeError> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) * op(other)` with optional transposes.
    pub fn matmul_t(self, other: Var<'t>, trans_a: bool, trans_b: bool) -> Result<Var<'t>, TapeError> {
        self.tape.owns(other)?;
        let (a, b) = (self.value(), other.value());
        let inner_a = if trans_a { a.rows() } else { a.cols() };
        let inner_b = if trans_b { b.cols() } else { b.rows() };
        if inner_a != inner_b {
            return Err(TapeError::ShapeMismatch {
                op: "matmul",
                left: a.shape(),
                right: b.shape(),
            });
        }
        let out = Tensor::matmul(&a, &b, trans_a, trans_b);
        Ok(self.tape.record(
            Op::MatMul {
                a: self.id,
                b: other.id,
                trans_a,
                trans_b,
            },
            out,
        ))
    }

    /// Columns `start..end`.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>, TapeError> {
        let x = self.value();
        if start > end || end > x.cols() {
            return Err(TapeError::InvalidArgument(format!(
                "column range {start}..{end} out of bounds for {} columns",
                x.cols()
            )));
        }
        let width = end - start;
        let mut out = Vec::with_capacity(x.rows() * width);
        for r in 0..x.rows() {
            out.extend_from_slice(&x.row(r)[start..end]);
        }
        Ok(self.tape.record(
            Op::SliceCols {
                src: self.id,
                start,
            },
            Tensor::new(x.rows(), width, out),
        ))
    }

    /// Embeds the columns at offset `start` of a zero tensor `total` wide.
    pub fn pad_cols(self, start: usize, total: usize) -> Result<Var<'t>, TapeError> {
        let x = self.value();
        if start + x.cols() > total {
            return Err(TapeError::InvalidArgument(format!(
                "padding {} columns at {start} exceeds width {total}",
                x.cols()
            )));
        }
        let mut out = Tensor::zeros(x.rows(), total);
        for r in 0..x.rows() {
            for c in 0..x.cols() {
                out.set(r, start + c, x.get(r, c));
            }
        }
        Ok(self.tape.record(
            Op::PadCols {
                src: self.id,
                start,
            },
            out,
        ))
    }

    /// Output row `k` is input row `index[k]`.
    pub fn gather_rows(self, index: &Rc<[usize]>) -> Result<Var<'t>, TapeError> {
        let x = self.value();
        let cols = x.cols();
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index.iter() {
            if i >= x.rows() {
                return Err(TapeError::InvalidArgument(format!(
                    "gather index {i} out of range for {} rows",
                    x.rows()
                )));
            }
            out.extend_from_slice(x.row(i));
        }
        Ok(self.tape.record(
            Op::GatherRows {
                src: self.id,
                index: Rc::clone(index),
            },
            Tensor::new(index.len(), cols, out),
        ))
    }

    /// Adds input row `k` into output row `index[k]` of a `rows`-row zero tensor.
    pub fn scatter_add_rows(self, index: &Rc<[usize]>, rows: usize) -> Result<Var<'t>, TapeError> {
        let x = self.value();
        if x.rows() != index.len() {
            return Err(TapeError::ShapeMismatch {
                op: "scatter_add_rows",
                left: (index.len(), x.cols()),
                right: x.shape(),
            });
        }
        let cols = x.cols();
        let mut out = Tensor::zeros(rows, cols);
        for (k, &i) in index.iter().enumerate() {
            if i >= rows {
                return Err(TapeError::InvalidArgument(format!(
                    "scatter index {i} out of range for {rows} rows"
                )));
            }
            let dst = &mut out.data_mut()[i * cols..(i + 1) * cols];
            for (d, s) in dst.iter_mut().zip(x.row(k)) {
                *d += s;
            }
        }
        Ok(self.tape.record(
            Op::ScatterAddRows {
                src: self.id,
                index: Rc::clone(index),
            },
            out,
        ))
    }

    /// Column-wise max or mean over each segment of rows. Max ties go to the
    /// first row of the segment holding the maximum.
    pub fn segment_reduce(self, reduce: Reduce, segments: &Rc<Segments>) -> Result<Var<'t>, TapeError> {
        let x = self.value();
        if x.rows() != segments.num_items() {
            return Err(TapeError::ShapeMismatch {
                op: "segment_reduce",
                left: (segments.num_items(), x.cols()),
                right: x.shape(),
            });
        }
        let cols = x.cols();
        let count = segments.num_segments();
        let mut out = Tensor::zeros(count, cols);
        match reduce {
            Reduce::Max => {
                let mut mask = Tensor::zeros(x.rows(), cols);
                let mut best = vec![0usize; cols];
                for s in 0..count {
                    let range = segments.range(s);
                    best.fill(range.start);
                    let top = &mut out.data_mut()[s * cols..(s + 1) * cols];
                    top.copy_from_slice(x.row(range.start));
                    for r in range.start + 1..range.end {
                        for (c, (&v, t)) in x.row(r).iter().zip(top.iter_mut()).enumerate() {
                            if v > *t {
                                *t = v;
                                best[c] = r;
                            }
                        }
                    }
                    for (c, &r) in best.iter().enumerate() {
                        mask.set(r, c, 1.0);
                    }
                }
                Ok(self.tape.record(
                    Op::SegmentMax {
                        src: self.id,
                        segments: Rc::clone(segments),
                        mask: Rc::new(mask),
                    },
                    out,
                ))
            }
            Reduce::Mean => {
                for s in 0..count {
                    let range = segments.range(s);
                    let inv = 1.0 / range.len() as f64;
                    for c in 0..cols {
                        let total: f64 = range.clone().map(|r| x.get(r, c)).sum();
                        out.set(s, c, total * inv);
                    }
                }
                Ok(self.tape.record(
                    Op::SegmentMean {
                        src: self.id,
                        segments: Rc::clone(segments),
                    },
                    out,
                ))
            }
        }
    }

    /// Multiplies row `r` by `factors[r]`.
    pub fn scale_rows(self, factors: &Rc<[f64]>) -> Result<Var<'t>, TapeError> {
        let x = self.value();
        if x.rows() != factors.len() {
            return Err(TapeError::ShapeMismatch {
                op: "scale_rows",
                left: (factors.len(), x.cols()),
                right: x.shape(),
            });
        }
        let mut out = (*x).clone();
        let cols = x.cols();
        for (r, f) in factors.iter().enumerate() {
            for v in &mut out.data_mut()[r * cols..(r + 1) * cols] {
                *v *= f;
            }
        }
        Ok(self.tape.record(
            Op::ScaleRows {
                src: self.id,
                factors: Rc::clone(factors),
            },
            out,
        ))
    }

    /// Sum of all entries, as a 1x1 variable.
    pub fn sum(self) -> Var<'t> {
        let s = self.value().sum();
        self.tape.record(Op::Sum(self.id), Tensor::scalar(s))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len();
        self.sum().scale(1.0 / n as f64)
    }

    /// Fills a `rows x cols` tensor with this 1x1 value.
    pub fn broadcast_scalar(self, rows: usize, cols: usize) -> Result<Var<'t>, TapeError> {
        let x = self.value();
        check_same("broadcast_scalar", x.shape(), (1, 1))?;
        Ok(self
            .tape
            .record(Op::BroadcastScalar(self.id), Tensor::full(rows, cols, x.item())))
    }

    /// Repeats this single row `rows` times.
    pub fn broadcast_rows(self, rows: usize) -> Result<Var<'t>, TapeError> {
        let x = self.value();
        if x.rows() != 1 {
            return Err(TapeError::ShapeMismatch {
                op: "broadcast_rows",
                left: (1, x.cols()),
                right: x.shape(),
            });
        }
        let data = x.data().repeat(rows);
        Ok(self
            .tape
            .record(Op::BroadcastRows(self.id), Tensor::new(rows, x.cols(), data)))
    }

    /// Column sums, as a single row.
    pub fn sum_rows(self) -> Var<'t> {
        let x = self.value();
        let mut out = vec![0.0; x.cols()];
        for r in 0..x.rows() {
            for (o, v) in out.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        let cols = x.cols();
        self.tape.record(Op::SumRows(self.id), Tensor::new(1, cols, out))
    }

    /// `self + bias` with a 1xC bias broadcast over rows.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>, TapeError> {
        self.tape.owns(bias)?;
        let (x, b) = (self.value(), bias.value());
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(TapeError::ShapeMismatch {
                op: "add_row",
                left: (1, x.cols()),
                right: b.shape(),
            });
        }
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(x.cols().max(1)) {
            for (o, v) in row.iter_mut().zip(b.data()) {
                *o += v;
            }
        }
        Ok(self.tape.record(Op::AddRow(self.id, bias.id), out))
    }

    /// Elementwise product with a fixed tensor, which is not differentiated.
    pub(crate) fn masked(self, mask: &Rc<Tensor>) -> Result<Var<'t>, TapeError> {
        let x = self.value();
        check_same("masked", x.shape(), mask.shape())?;
        Ok(self.tape.record(
            Op::Mask {
                src: self.id,
                mask: Rc::clone(mask),
            },
            x.zip_map(mask, |a, b| a * b),
        ))
    }
}
