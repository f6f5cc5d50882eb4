//! Reverse-mode differentiation over dense tensors.
//!
//! Every primitive applied through a [`Tape`] computes its forward value
//! eagerly and records enough state to run its adjoint later. Handles
//! ([`Var`]) are cheap copies; values live on the tape.
//!
//! ```
//! use gsina::tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).item(), 6.0);
//! ```

use std::sync::atomic::{AtomicU64, Ordering};

use super::dense::{matmul_raw, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Exp(Var),
    Log(Var),
    Neg(Var),
    Relu(Var),
    Sqrt(Var),
    /// `None` reduces everything to a scalar; `Some(Axis::Cols)` sums each row
    /// into an `[r,1]` column, `Some(Axis::Rows)` sums each column into `[1,c]`.
    Sum(Var, Option<Axis>),
    Mean(Var, Option<Axis>),
    Max(Var, Vec<usize>),
    SoftmaxRows(Var),
    Concat(Vec<Var>, Axis),
    GatherRows(Var, Vec<usize>),
    SegmentSum(Var, Vec<usize>),
    SegmentMax(Var, Vec<Option<usize>>),
    BroadcastRow(Var),
    BroadcastCol(Var),
    Clamp(Var, f64, f64),
    Reshape(Var),
    Transpose(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive applications in topological (creation) order.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

fn finite(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFiniteValue(op))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.index].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    fn check(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::DetachedTensor);
        }
        Ok(&self.nodes[v.index])
    }

    fn record(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        let value = finite(op_name, value)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (&self.check(a)?.value, &self.check(b)?.value);
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let out = ta.zip_map(tb, f);
        self.record(name, out, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.check(a)?.value.map(f);
        self.record(name, out, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.check(a)?.value, &self.check(b)?.value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(shape_err("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
        let out = Tensor::matrix(n, m, matmul_raw(ta.data(), tb.data(), n, k, m))?;
        self.record("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary("neg", a, |x| -x, Op::Neg(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    fn reduce(
        &mut self,
        name: &'static str,
        a: Var,
        axis: Option<Axis>,
        f: impl Fn(&[f64]) -> f64,
    ) -> Result<Tensor> {
        let t = &self.check(a)?.value;
        if t.is_empty() {
            return Err(shape_err(name, "empty input".into()));
        }
        let (r, c) = t.dims2();
        let shape_out: Vec<usize>;
        let mut out = Vec::new();
        match axis {
            None => {
                shape_out = vec![];
                out.push(f(t.data()));
            }
            Some(ax) => {
                if t.rank() != 2 {
                    return Err(shape_err(name, format!("axis reduction on {:?}", t.shape())));
                }
                match ax {
                    Axis::Cols => {
                        shape_out = vec![r, 1];
                        for i in 0..r {
                            out.push(f(t.row(i)));
                        }
                    }
                    Axis::Rows => {
                        shape_out = vec![1, c];
                        let mut col = vec![0.0; r];
                        for j in 0..c {
                            for (i, slot) in col.iter_mut().enumerate() {
                                *slot = t.at(i, j);
                            }
                            out.push(f(&col));
                        }
                    }
                }
            }
        }
        Tensor::new(shape_out, out)
    }

    pub fn sum(&mut self, a: Var, axis: Option<Axis>) -> Result<Var> {
        let value = self.reduce("sum", a, axis, |xs| xs.iter().sum())?;
        self.record("sum", value, Op::Sum(a, axis), &[a])
    }

    pub fn mean(&mut self, a: Var, axis: Option<Axis>) -> Result<Var> {
        let value =
            self.reduce("mean", a, axis, |xs| xs.iter().sum::<f64>() / xs.len() as f64)?;
        self.record("mean", value, Op::Mean(a, axis), &[a])
    }

    /// Max reduction; ties resolve to the first index.
    pub fn max(&mut self, a: Var, axis: Option<Axis>) -> Result<Var> {
        let value = self.reduce("max", a, axis, |xs| xs.iter().copied().fold(f64::NEG_INFINITY, f64::max))?;
        let t = &self.nodes[a.index].value;
        let (r, c) = t.dims2();
        let first = |it: &mut dyn Iterator<Item = (usize, f64)>| {
            let mut best = (usize::MAX, f64::NEG_INFINITY);
            for (i, v) in it {
                if best.0 == usize::MAX || v > best.1 {
                    best = (i, v);
                }
            }
            best.0
        };
        let argmax = match axis {
            None => vec![first(&mut t.data().iter().copied().enumerate())],
            Some(Axis::Cols) => (0..r)
                .map(|i| first(&mut (0..c).map(|j| (i * c + j, t.at(i, j)))))
                .collect(),
            Some(Axis::Rows) => (0..c)
                .map(|j| first(&mut (0..r).map(|i| (i * c + j, t.at(i, j)))))
                .collect(),
        };
        self.record("max", value, Op::Max(a, argmax), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = &self.check(a)?.value;
        if t.rank() != 2 {
            return Err(shape_err("softmax_rows", format!("{:?}", t.shape())));
        }
        let (r, c) = t.dims2();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = t.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            out.extend(e.into_iter().map(|v| v / z));
        }
        let value = Tensor::matrix(r, c, out)?;
        self.record("softmax_rows", value, Op::SoftmaxRows(a), &[a])
    }

    /// Concatenate rank-2 tensors (or rank-1 along rows).
    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs".into()));
        }
        for &p in parts {
            self.check(p)?;
        }
        let first = &self.nodes[parts[0].index].value;
        let rank1 = first.rank() == 1;
        let value = match axis {
            Axis::Rows => {
                let c = first.cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let t = &self.nodes[p.index].value;
                    if t.cols() != c || (t.rank() == 1) != rank1 {
                        return Err(shape_err("concat", format!("{:?} vs {:?}", first.shape(), t.shape())));
                    }
                    rows += t.rows();
                    data.extend_from_slice(t.data());
                }
                if rank1 {
                    Tensor::vector(data)
                } else {
                    Tensor::matrix(rows, c, data)?
                }
            }
            Axis::Cols => {
                let r = first.rows();
                let mut total = 0;
                for &p in parts {
                    let t = &self.nodes[p.index].value;
                    if t.rank() != 2 || t.rows() != r {
                        return Err(shape_err("concat", format!("{:?} vs {:?}", first.shape(), t.shape())));
                    }
                    total += t.cols();
                }
                let mut data = Vec::with_capacity(r * total);
                for i in 0..r {
                    for &p in parts {
                        data.extend_from_slice(self.nodes[p.index].value.row(i));
                    }
                }
                Tensor::matrix(r, total, data)?
            }
        };
        self.record("concat", value, Op::Concat(parts.to_vec(), axis), parts)
    }

    /// Select rows by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = &self.check(a)?.value;
        let (r, c) = t.dims2();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(Error::IndexOutOfRange { index: i, limit: r });
            }
            data.extend_from_slice(t.row(i));
        }
        let value = if t.rank() == 1 {
            Tensor::vector(data)
        } else {
            Tensor::matrix(index.len(), c, data)?
        };
        self.record("gather_rows", value, Op::GatherRows(a, index.to_vec()), &[a])
    }

    fn segment_shape(t: &Tensor, segments: usize) -> Vec<usize> {
        if t.rank() == 1 {
            vec![segments]
        } else {
            vec![segments, t.cols()]
        }
    }

    /// Row-wise sum into `num_segments` buckets; row `i` goes to `segment[i]`.
    pub fn segment_sum(&mut self, a: Var, segment: &[usize], num_segments: usize) -> Result<Var> {
        let t = &self.check(a)?.value;
        let (r, c) = t.dims2();
        if segment.len() != r {
            return Err(shape_err("segment_sum", format!("{} rows, {} segment ids", r, segment.len())));
        }
        let mut data = vec![0.0; num_segments * c];
        for (i, &s) in segment.iter().enumerate() {
            if s >= num_segments {
                return Err(Error::IndexOutOfRange { index: s, limit: num_segments });
            }
            for (o, v) in data[s * c..(s + 1) * c].iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        let value = Tensor::new(Self::segment_shape(t, num_segments), data)?;
        self.record("segment_sum", value, Op::SegmentSum(a, segment.to_vec()), &[a])
    }

    /// Row-wise max per segment, elementwise over columns. Empty segments
    /// yield 0; ties resolve to the first row.
    pub fn segment_max(&mut self, a: Var, segment: &[usize], num_segments: usize) -> Result<Var> {
        let t = &self.check(a)?.value;
        let (r, c) = t.dims2();
        if segment.len() != r {
            return Err(shape_err("segment_max", format!("{} rows, {} segment ids", r, segment.len())));
        }
        let mut arg: Vec<Option<usize>> = vec![None; num_segments * c];
        let mut data = vec![0.0; num_segments * c];
        for (i, &s) in segment.iter().enumerate() {
            if s >= num_segments {
                return Err(Error::IndexOutOfRange { index: s, limit: num_segments });
            }
            for j in 0..c {
                let v = t.at(i, j);
                let slot = s * c + j;
                if arg[slot].is_none() || v > data[slot] {
                    arg[slot] = Some(i * c + j);
                    data[slot] = v;
                }
            }
        }
        let value = Tensor::new(Self::segment_shape(t, num_segments), data)?;
        self.record("segment_max", value, Op::SegmentMax(a, arg), &[a])
    }

    /// Repeat a `[1,c]` row (or rank-1 `[c]`) `rows` times into `[rows,c]`.
    pub fn broadcast_row(&mut self, a: Var, rows: usize) -> Result<Var> {
        let t = &self.check(a)?.value;
        let c = match t.shape() {
            [c] => *c,
            [1, c] => *c,
            s => return Err(shape_err("broadcast_row", format!("{s:?}"))),
        };
        let mut data = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            data.extend_from_slice(t.data());
        }
        let value = Tensor::matrix(rows, c, data)?;
        self.record("broadcast_row", value, Op::BroadcastRow(a), &[a])
    }

    /// Repeat an `[r,1]` column (or rank-1 `[r]`) `cols` times into `[r,cols]`.
    pub fn broadcast_col(&mut self, a: Var, cols: usize) -> Result<Var> {
        let t = &self.check(a)?.value;
        let r = match t.shape() {
            [r] => *r,
            [r, 1] => *r,
            s => return Err(shape_err("broadcast_col", format!("{s:?}"))),
        };
        let mut data = Vec::with_capacity(r * cols);
        for &v in t.data() {
            data.extend(std::iter::repeat(v).take(cols));
        }
        let value = Tensor::matrix(r, cols, data)?;
        self.record("broadcast_col", value, Op::BroadcastCol(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.check(a)?.value.reshaped(shape)?;
        self.record("reshape", value, Op::Reshape(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = &self.check(a)?.value;
        if t.rank() != 2 {
            return Err(shape_err("transpose", format!("{:?}", t.shape())));
        }
        let value = t.transposed();
        self.record("transpose", value, Op::Transpose(a), &[a])
    }

    // Conveniences composed from primitives.

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let c = Tensor::full(self.check(a)?.value.shape(), factor);
        let c = self.constant(c);
        self.mul(a, c)
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Result<Var> {
        let c = Tensor::full(self.check(a)?.value.shape(), offset);
        let c = self.constant(c);
        self.add(a, c)
    }

    /// Reverse sweep from a scalar `loss`. Adjoints of shared
    /// subexpressions accumulate.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self.check(loss)?;
        if node.value.len() != 1 {
            return Err(Error::NotScalar(node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(Tensor::full(node.value.shape(), 1.0));

        for idx in (0..=loss.index).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            for (input, contrib) in self.adjoint(node, &g) {
                if !self.nodes[input.index].requires_grad {
                    continue;
                }
                match &mut grads[input.index] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        let mut out = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = grads
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros_like(&node.value));
                out.push((idx, g));
            }
        }
        Ok(Gradients { tape: self.id, leaves: out })
    }

    fn adjoint(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| &self.nodes[v.index].value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |gi, bi| gi * bi)),
                (*b, g.zip_map(val(*a), |gi, ai| gi * ai)),
            ],
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ga = g.zip_map(tb, |gi, bi| gi / bi);
                let mut gb = g.zip_map(ta, |gi, ai| -gi * ai);
                for (x, bi) in gb.data_mut().iter_mut().zip(tb.data()) {
                    *x /= bi * bi;
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                let bt = tb.transposed();
                let at = ta.transposed();
                let ga = matmul_raw(g.data(), bt.data(), n, m, k);
                let gb = matmul_raw(at.data(), g.data(), k, n, m);
                vec![
                    (*a, Tensor::matrix(n, k, ga).expect("shape")),
                    (*b, Tensor::matrix(k, m, gb).expect("shape")),
                ]
            }
            Op::Exp(a) => vec![(*a, g.zip_map(&node.value, |gi, y| gi * y))],
            Op::Log(a) => vec![(*a, g.zip_map(val(*a), |gi, x| gi / x))],
            Op::Neg(a) => vec![(*a, g.map(|x| -x))],
            // relu(x) = max(x, 0); at the tie x = 0 the first argument wins
            Op::Relu(a) => vec![(*a, g.zip_map(val(*a), |gi, x| if x >= 0.0 { gi } else { 0.0 }))],
            Op::Sqrt(a) => vec![(*a, g.zip_map(&node.value, |gi, y| 0.5 * gi / y))],
            Op::Clamp(a, lo, hi) => vec![(
                *a,
                g.zip_map(val(*a), |gi, x| if x >= *lo && x <= *hi { gi } else { 0.0 }),
            )],
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let t = val(*a);
                let (r, c) = t.dims2();
                let denom = match (&node.op, axis) {
                    (Op::Sum(..), _) => 1.0,
                    (_, None) => t.len() as f64,
                    (_, Some(Axis::Cols)) => c as f64,
                    (_, Some(Axis::Rows)) => r as f64,
                };
                let mut out = Tensor::zeros_like(t);
                let d = out.data_mut();
                for i in 0..r {
                    for j in 0..c {
                        let gi = match axis {
                            None => g.item(),
                            Some(Axis::Cols) => g.data()[i],
                            Some(Axis::Rows) => g.data()[j],
                        };
                        d[i * c + j] = gi / denom;
                    }
                }
                vec![(*a, out)]
            }
            Op::Max(a, argmax) => {
                let mut out = Tensor::zeros_like(val(*a));
                for (k, &flat) in argmax.iter().enumerate() {
                    out.data_mut()[flat] += g.data()[k];
                }
                vec![(*a, out)]
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let (r, c) = y.dims2();
                let mut out = Tensor::zeros_like(y);
                for i in 0..r {
                    let dot: f64 = (0..c).map(|j| g.at(i, j) * y.at(i, j)).sum();
                    for j in 0..c {
                        out.data_mut()[i * c + j] = y.at(i, j) * (g.at(i, j) - dot);
                    }
                }
                vec![(*a, out)]
            }
            Op::Concat(parts, axis) => {
                let mut res = Vec::with_capacity(parts.len());
                match axis {
                    Axis::Rows => {
                        let mut offset = 0;
                        for &p in parts {
                            let t = val(p);
                            let n = t.len();
                            let piece = Tensor::new(t.shape().to_vec(), g.data()[offset..offset + n].to_vec())
                                .expect("shape");
                            offset += n;
                            res.push((p, piece));
                        }
                    }
                    Axis::Cols => {
                        let total = g.cols();
                        let mut col0 = 0;
                        for &p in parts {
                            let t = val(p);
                            let (r, c) = t.dims2();
                            let mut data = Vec::with_capacity(r * c);
                            for i in 0..r {
                                data.extend_from_slice(&g.data()[i * total + col0..i * total + col0 + c]);
                            }
                            col0 += c;
                            res.push((p, Tensor::matrix(r, c, data).expect("shape")));
                        }
                    }
                }
                res
            }
            Op::GatherRows(a, index) => {
                let t = val(*a);
                let c = t.cols();
                let mut out = Tensor::zeros_like(t);
                let d = out.data_mut();
                for (k, &i) in index.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += g.data()[k * c + j];
                    }
                }
                vec![(*a, out)]
            }
            Op::SegmentSum(a, segment) => {
                let t = val(*a);
                let c = t.cols();
                let mut out = Tensor::zeros_like(t);
                let d = out.data_mut();
                for (i, &s) in segment.iter().enumerate() {
                    d[i * c..(i + 1) * c].copy_from_slice(&g.data()[s * c..(s + 1) * c]);
                }
                vec![(*a, out)]
            }
            Op::SegmentMax(a, arg) => {
                let mut out = Tensor::zeros_like(val(*a));
                for (slot, src) in arg.iter().enumerate() {
                    if let Some(flat) = src {
                        out.data_mut()[*flat] += g.data()[slot];
                    }
                }
                vec![(*a, out)]
            }
            Op::BroadcastRow(a) => {
                let t = val(*a);
                let (rows, c) = g.dims2();
                let mut data = vec![0.0; c];
                for i in 0..rows {
                    for (o, v) in data.iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                vec![(*a, Tensor::new(t.shape().to_vec(), data).expect("shape"))]
            }
            Op::BroadcastCol(a) => {
                let t = val(*a);
                let rows = g.rows();
                let data = (0..rows).map(|i| g.row(i).iter().sum()).collect();
                vec![(*a, Tensor::new(t.shape().to_vec(), data).expect("shape"))]
            }
            Op::Reshape(a) => {
                vec![(*a, g.reshaped(val(*a).shape()).expect("shape"))]
            }
            Op::Transpose(a) => vec![(*a, g.transposed())],
        }
    }
}

/// Gradients of a scalar with respect to every differentiable leaf.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    leaves: Vec<(usize, Tensor)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.leaves
            .binary_search_by_key(&v.index, |(i, _)| *i)
            .ok()
            .map(|k| &self.leaves[k].1)
    }

    /// Gradient for `v`, panicking if `v` is not a differentiable leaf of
    /// the tape these gradients came from.
    pub fn wrt(&self, v: Var) -> &Tensor {
        self.get(v).expect("not a differentiable leaf of this tape")
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}
