//! Reverse-mode differentiation over a linear (Wengert) tape.
//!
//! Every operation on a [`Var`] appends a node holding its value and enough
//! bookkeeping to push gradients back to its inputs. Nodes are appended in
//! evaluation order, so walking the tape backwards is a valid topological order.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::{gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows = 0,
    Cols = 1,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add { a: usize, b: usize, broadcast: bool },
    Mul { a: usize, b: usize, broadcast: bool },
    MulConst(usize, Rc<Tensor>),
    Affine(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Log(usize),
    Softmax(usize, Axis),
    Concat(Vec<usize>, Axis),
    Sum(usize, Axis),
    Mean(usize, Axis),
    SumAll(usize),
    Gather(usize, Rc<Vec<usize>>),
    SegmentSum(usize, Rc<Vec<usize>>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    Reshape(usize),
    Transpose(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass. Single-threaded; build one per worker.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value().shape())
            .finish()
    }
}

/// Gradient buffers produced by [`Tape::backward`], indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`, or `None` if it does not require grad
    /// or is unreachable from the loss.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that is treated as data.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: Axis) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let (r0, c0) = values[0].dims2()?;
        let mut out_rows = 0;
        let mut out_cols = 0;
        for v in &values {
            let (r, c) = v.dims2()?;
            match axis {
                Axis::Rows if c != c0 => return Err(Error::dim("concat", values[0].shape(), v.shape())),
                Axis::Cols if r != r0 => return Err(Error::dim("concat", values[0].shape(), v.shape())),
                _ => {}
            }
            out_rows += r;
            out_cols += c;
        }
        let value = match axis {
            Axis::Rows => {
                let mut data = Vec::with_capacity(out_rows * c0);
                for v in &values {
                    data.extend_from_slice(v.data());
                }
                Tensor::matrix(out_rows, c0, data)?
            }
            Axis::Cols => {
                let mut data = Vec::with_capacity(r0 * out_cols);
                for r in 0..r0 {
                    for v in &values {
                        data.extend_from_slice(v.row_slice(r));
                    }
                }
                Tensor::matrix(r0, out_cols, data)?
            }
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.rg(&ids);
        Ok(self.push(value, Op::Concat(ids, axis), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// The tape is left intact, so repeated calls yield identical gradients.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, &node.op, &node.value, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accum(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = &mut grads[id];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(nodes[id].value.shape()));
    }
    f(slot.as_mut().expect("initialised above").data_mut());
}

fn backprop(nodes: &[Node], op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let gd = g.data();
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k) = (av.rows(), av.cols());
            let n = bv.cols();
            accum(nodes, grads, *a, |ga| gemm_nt(gd, bv.data(), ga, m, n, k));
            accum(nodes, grads, *b, |gb| gemm_tn(av.data(), gd, gb, m, k, n));
        }
        Op::Add { a, b, broadcast } => {
            accum(nodes, grads, *a, |ga| add_into(ga, gd));
            accum(nodes, grads, *b, |gb| {
                if *broadcast {
                    column_sum_into(gb, gd);
                } else {
                    add_into(gb, gd);
                }
            });
        }
        Op::Mul { a, b, broadcast } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let n = bv.numel();
            accum(nodes, grads, *a, |ga| {
                for (i, x) in ga.iter_mut().enumerate() {
                    let bi = if *broadcast { i % n } else { i };
                    *x += gd[i] * bv.data()[bi];
                }
            });
            accum(nodes, grads, *b, |gb| {
                for (i, (&gi, &ai)) in gd.iter().zip(av.data()).enumerate() {
                    let bi = if *broadcast { i % n } else { i };
                    gb[bi] += gi * ai;
                }
            });
        }
        Op::MulConst(a, c) => accum(nodes, grads, *a, |ga| {
            for ((x, &gi), &ci) in ga.iter_mut().zip(gd).zip(c.data()) {
                *x += gi * ci;
            }
        }),
        Op::Affine(a, scale) => accum(nodes, grads, *a, |ga| {
            for (x, &gi) in ga.iter_mut().zip(gd) {
                *x += scale * gi;
            }
        }),
        Op::Tanh(a) => accum(nodes, grads, *a, |ga| {
            for ((x, &gi), &y) in ga.iter_mut().zip(gd).zip(out.data()) {
                *x += gi * (1.0 - y * y);
            }
        }),
        Op::Sigmoid(a) => accum(nodes, grads, *a, |ga| {
            for ((x, &gi), &y) in ga.iter_mut().zip(gd).zip(out.data()) {
                *x += gi * y * (1.0 - y);
            }
        }),
        Op::Log(a) => {
            let av = &nodes[*a].value;
            accum(nodes, grads, *a, |ga| {
                for ((x, &gi), &v) in ga.iter_mut().zip(gd).zip(av.data()) {
                    *x += gi / v;
                }
            })
        }
        Op::Softmax(a, axis) => {
            let (r, c) = (out.rows(), out.cols());
            let y = out.data();
            accum(nodes, grads, *a, |ga| match axis {
                Axis::Cols => {
                    for i in 0..r {
                        let s = i * c..(i + 1) * c;
                        let dot: f64 = gd[s.clone()].iter().zip(&y[s.clone()]).map(|(g, y)| g * y).sum();
                        for j in s {
                            ga[j] += y[j] * (gd[j] - dot);
                        }
                    }
                }
                Axis::Rows => {
                    for j in 0..c {
                        let dot: f64 = (0..r).map(|i| gd[i * c + j] * y[i * c + j]).sum();
                        for i in 0..r {
                            let k = i * c + j;
                            ga[k] += y[k] * (gd[k] - dot);
                        }
                    }
                }
            })
        }
        Op::Concat(ids, axis) => {
            let (_, out_cols) = (out.rows(), out.cols());
            let mut offset = 0;
            for &id in ids {
                let v = &nodes[id].value;
                let (r, c) = (v.rows(), v.cols());
                accum(nodes, grads, id, |gx| match axis {
                    Axis::Rows => add_into(gx, &gd[offset * c..(offset + r) * c]),
                    Axis::Cols => {
                        for i in 0..r {
                            add_into(&mut gx[i * c..(i + 1) * c], &gd[i * out_cols + offset..i * out_cols + offset + c]);
                        }
                    }
                });
                offset += match axis {
                    Axis::Rows => r,
                    Axis::Cols => c,
                };
            }
        }
        Op::Sum(a, axis) | Op::Mean(a, axis) => {
            let v = &nodes[*a].value;
            let (r, c) = (v.rows(), v.cols());
            let scale = match (op, axis) {
                (Op::Mean(..), Axis::Rows) => 1.0 / r as f64,
                (Op::Mean(..), Axis::Cols) => 1.0 / c as f64,
                _ => 1.0,
            };
            accum(nodes, grads, *a, |ga| {
                for i in 0..r {
                    for j in 0..c {
                        let gi = match axis {
                            Axis::Rows => gd[j],
                            Axis::Cols => gd[i],
                        };
                        ga[i * c + j] += scale * gi;
                    }
                }
            })
        }
        Op::SumAll(a) => accum(nodes, grads, *a, |ga| {
            for x in ga.iter_mut() {
                *x += gd[0];
            }
        }),
        Op::Gather(a, idx) => {
            let c = out.cols();
            accum(nodes, grads, *a, |ga| {
                for (r, &src) in idx.iter().enumerate() {
                    add_into(&mut ga[src * c..(src + 1) * c], &gd[r * c..(r + 1) * c]);
                }
            })
        }
        Op::SegmentSum(a, seg) => {
            let c = out.cols();
            accum(nodes, grads, *a, |ga| {
                for (r, &s) in seg.iter().enumerate() {
                    add_into(&mut ga[r * c..(r + 1) * c], &gd[s * c..(s + 1) * c]);
                }
            })
        }
        Op::SliceRows(a, start) => {
            let c = out.cols();
            accum(nodes, grads, *a, |ga| {
                add_into(&mut ga[start * c..start * c + gd.len()], gd);
            })
        }
        Op::SliceCols(a, start) => {
            let src_cols = nodes[*a].value.cols();
            let (r, c) = (out.rows(), out.cols());
            accum(nodes, grads, *a, |ga| {
                for i in 0..r {
                    add_into(&mut ga[i * src_cols + start..i * src_cols + start + c], &gd[i * c..(i + 1) * c]);
                }
            })
        }
        Op::Reshape(a) => accum(nodes, grads, *a, |ga| add_into(ga, gd)),
        Op::Transpose(a) => {
            let gt = g.transpose();
            accum(nodes, grads, *a, |ga| add_into(ga, gt.data()))
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn column_sum_into(dst: &mut [f64], src: &[f64]) {
    let n = dst.len();
    for (i, s) in src.iter().enumerate() {
        dst[i % n] += s;
    }
}

/// How a right-hand operand lines up with the left one.
fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<bool> {
    if a.shape() == b.shape() {
        return Ok(false);
    }
    if let ([_, c], [1, c2]) = (a.shape(), b.shape()) {
        if c == c2 {
            return Ok(true);
        }
    }
    Err(Error::dim(op, a.shape(), b.shape()))
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.value().matmul(&other.value())?;
        let rg = self.tape.rg(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), rg))
    }

    /// Elementwise sum; `other` may be a `1 x n` row broadcast over every row.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let broadcast = broadcast_kind("add", &a, &b)?;
        let n = b.numel();
        let mut out = (*a).clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x += b.data()[if broadcast { i % n } else { i }];
        }
        let rg = self.tape.rg(&[self.id, other.id]);
        Ok(self.tape.push(
            out,
            Op::Add {
                a: self.id,
                b: other.id,
                broadcast,
            },
            rg,
        ))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.add(other.scale(-1.0))
    }

    /// Hadamard product; `other` may be a broadcast row.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let broadcast = broadcast_kind("hadamard", &a, &b)?;
        let n = b.numel();
        let mut out = (*a).clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x *= b.data()[if broadcast { i % n } else { i }];
        }
        let rg = self.tape.rg(&[self.id, other.id]);
        Ok(self.tape.push(
            out,
            Op::Mul {
                a: self.id,
                b: other.id,
                broadcast,
            },
            rg,
        ))
    }

    /// Hadamard product with a fixed tensor (dropout masks, weights).
    pub fn mul_const(self, c: Rc<Tensor>) -> Result<Var<'t>> {
        let a = self.value();
        if a.shape() != c.shape() {
            return Err(Error::dim("mul_const", a.shape(), c.shape()));
        }
        let out = a.zip_map(&c, |x, y| x * y);
        Ok(self.unary(out, Op::MulConst(self.id, c)))
    }

    /// `scale * x + shift`
    pub fn affine(self, scale: f64, shift: f64) -> Var<'t> {
        let out = self.value().map(|x| scale * x + shift);
        self.unary(out, Op::Affine(self.id, scale))
    }

    pub fn scale(self, scale: f64) -> Var<'t> {
        self.affine(scale, 0.0)
    }

    pub fn tanh(self) -> Var<'t> {
        let out = self.value().map(f64::tanh);
        self.unary(out, Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let out = self.value().map(sigmoid);
        self.unary(out, Op::Sigmoid(self.id))
    }

    pub fn log(self) -> Result<Var<'t>> {
        let v = self.value();
        if let Some(bad) = v.data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive entry {bad}"),
            });
        }
        let out = v.map(f64::ln);
        Ok(self.unary(out, Op::Log(self.id)))
    }

    pub fn softmax(self, axis: Axis) -> Result<Var<'t>> {
        let v = self.value();
        let out = softmax(&v, axis)?;
        Ok(self.unary(out, Op::Softmax(self.id, axis)))
    }

    pub fn sum(self, axis: Axis) -> Result<Var<'t>> {
        let v = self.value();
        let out = reduce(&v, axis, 1.0)?;
        Ok(self.unary(out, Op::Sum(self.id, axis)))
    }

    pub fn mean(self, axis: Axis) -> Result<Var<'t>> {
        let v = self.value();
        let (r, c) = v.dims2()?;
        let n = match axis {
            Axis::Rows => r,
            Axis::Cols => c,
        };
        if n == 0 {
            return Err(Error::Contract("mean over an empty axis".into()));
        }
        let out = reduce(&v, axis, 1.0 / n as f64)?;
        Ok(self.unary(out, Op::Mean(self.id, axis)))
    }

    pub fn sum_all(self) -> Var<'t> {
        let out = Tensor::scalar(self.value().sum());
        self.unary(out, Op::SumAll(self.id))
    }

    /// Row `r` of the output is row `indices[r]` of `self`.
    pub fn gather_rows(self, indices: Rc<Vec<usize>>) -> Result<Var<'t>> {
        let v = self.value();
        let (r, c) = v.dims2()?;
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices.iter() {
            if i >= r {
                return Err(Error::Contract(format!("gather index {i} out of {r} rows")));
            }
            data.extend_from_slice(v.row_slice(i));
        }
        let out = Tensor::matrix(indices.len(), c, data)?;
        Ok(self.unary(out, Op::Gather(self.id, indices)))
    }

    /// Sums row `r` of `self` into output row `segments[r]`; output has
    /// `n_segments` rows, and segments receiving no rows are zero.
    pub fn segment_sum(self, segments: Rc<Vec<usize>>, n_segments: usize) -> Result<Var<'t>> {
        let v = self.value();
        let (r, c) = v.dims2()?;
        if segments.len() != r {
            return Err(Error::dim("segment_sum", v.shape(), &[segments.len()]));
        }
        let mut out = Tensor::zeros(&[n_segments, c]);
        for (row, &s) in segments.iter().enumerate() {
            if s >= n_segments {
                return Err(Error::Contract(format!("segment {s} out of {n_segments}")));
            }
            add_into(&mut out.data_mut()[s * c..(s + 1) * c], v.row_slice(row));
        }
        Ok(self.unary(out, Op::SegmentSum(self.id, segments)))
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        let (r, c) = v.dims2()?;
        if start + len > r {
            return Err(Error::dim("slice_rows", v.shape(), &[start, len]));
        }
        let out = Tensor::matrix(len, c, v.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.unary(out, Op::SliceRows(self.id, start)))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        let (r, c) = v.dims2()?;
        if start + len > c {
            return Err(Error::dim("slice_cols", v.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&v.row_slice(i)[start..start + len]);
        }
        let out = Tensor::matrix(r, len, data)?;
        Ok(self.unary(out, Op::SliceCols(self.id, start)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        Ok(self.unary(out, Op::Reshape(self.id)))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let v = self.value();
        v.dims2()?;
        let out = v.transpose();
        Ok(self.unary(out, Op::Transpose(self.id)))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax of a rank-2 tensor along `axis`.
pub fn softmax(v: &Tensor, axis: Axis) -> Result<Tensor> {
    let (r, c) = v.dims2()?;
    let mut out = v.clone();
    let d = out.data_mut();
    let (outer, inner, stride_o, stride_i) = match axis {
        Axis::Cols => (r, c, c, 1),
        Axis::Rows => (c, r, 1, c),
    };
    for o in 0..outer {
        let idx = |i: usize| o * stride_o + i * stride_i;
        let max = (0..inner).map(|i| d[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for i in 0..inner {
            let e = (d[idx(i)] - max).exp();
            d[idx(i)] = e;
            z += e;
        }
        for i in 0..inner {
            d[idx(i)] /= z;
        }
    }
    Ok(out)
}

fn reduce(v: &Tensor, axis: Axis, scale: f64) -> Result<Tensor> {
    let (r, c) = v.dims2()?;
    let out = match axis {
        Axis::Rows => {
            let mut acc = vec![0.0; c];
            for i in 0..r {
                add_into(&mut acc, v.row_slice(i));
            }
            Tensor::matrix(1, c, acc.into_iter().map(|x| x * scale).collect())?
        }
        Axis::Cols => Tensor::matrix(
            r,
            1,
            (0..r).map(|i| v.row_slice(i).iter().sum::<f64>() * scale).collect(),
        )?,
    };
    Ok(out)
}
