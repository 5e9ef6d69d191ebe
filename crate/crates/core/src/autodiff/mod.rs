//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles in
//! creation order, which is a topological order by construction. `backward`
//! walks the tape in exact reverse and accumulates gradients (summing over
//! fan-out) into the leaves that require them.
//!
//! A graph is single-use: after `backward` has run, a second call fails and a
//! fresh graph has to be built by re-running the forward pass.

mod conv;
mod lstm;
mod norm;

use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{axis_split, strides_of, Real, Tensor};

pub use conv::{ConvGeom, Padding2d};
pub use lstm::LstmWeights;
pub use norm::{BatchNormState, NormMode};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Sigmoid,
    Swish,
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Binary {
    Add,
    Sub,
    Mul,
}

pub(crate) enum Op<T> {
    Leaf,
    Activation {
        x: Var,
        kind: Activation,
    },
    Binary {
        a: Var,
        b: Var,
        kind: Binary,
    },
    Scale {
        x: Var,
        factor: T,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    AvgPool {
        x: Var,
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: norm::BnCache<T>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape {
        x: Var,
    },
    SwapAxes {
        x: Var,
        a1: usize,
        a2: usize,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    Sum {
        x: Var,
    },
    Lstm {
        x: Var,
        w: LstmWeights<Var>,
        reverse: bool,
        cache: lstm::LstmCache<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Activation { x, .. }
            | Op::Scale { x, .. }
            | Op::AvgPool { x, .. }
            | Op::MaxPool { x, .. }
            | Op::Upsample { x }
            | Op::Softmax { x, .. }
            | Op::Narrow { x, .. }
            | Op::Reshape { x }
            | Op::SwapAxes { x, .. }
            | Op::Mean { x, .. }
            | Op::Sum { x } => vec![*x],
            Op::Binary { a, b, .. } | Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Linear { x, w, b } | Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Lstm { x, w, .. } => vec![*x, w.w_ih, w.w_hh, w.bias],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let inputs = op.inputs();
        if cfg!(debug_assertions) && !value.all_finite() {
            let finite_inputs = inputs.iter().all(|v| self.value(*v).all_finite());
            debug_assert!(
                !finite_inputs,
                "non-finite output of {} from finite inputs",
                op_name(&op)
            );
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A leaf whose gradient `backward` will report.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Binds a parameter to this graph. Repeated calls return the same node.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(params.get(id).clone(), true);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ----- elementwise -------------------------------------------------

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let out = self.value(x).map(|v| activate(kind, v));
        Ok(self.push(out, Op::Activation { x, kind }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn swish(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Swish)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    /// Broadcasting addition (numpy rules, right-aligned).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    /// Broadcasting Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = if va.shape() == vb.shape() {
            let data = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| apply_binary(kind, x, y))
                .collect();
            Tensor::new(va.shape(), data)?
        } else {
            let bc = Broadcast::new(va.shape(), vb.shape())?;
            let (da, db) = (va.data(), vb.data());
            let mut data = Vec::with_capacity(bc.numel());
            bc.for_each(|_, ia, ib| data.push(apply_binary(kind, da[ia], db[ib])));
            Tensor::new(&bc.out_shape, data)?
        };
        Ok(self.push(out, Op::Binary { a, b, kind }))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        Ok(self.push(out, Op::Scale { x, factor }))
    }

    // ----- reductions and shape ----------------------------------------

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        Ok(self.push(out, Op::Sum { x }))
    }

    /// Mean along `axis`; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        check_axis(v.shape(), axis)?;
        let (outer, len, inner) = axis_split(v.shape(), axis);
        let scale = T::one() / T::from_usize(len).unwrap();
        let mut out = vec![T::zero(); outer * inner];
        let d = v.data();
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc = *acc + s;
                }
            }
        }
        out.iter_mut().for_each(|o| *o = *o * scale);
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::Mean { x, axis }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x }))
    }

    /// Exchanges two axes.
    pub fn swap_axes(&mut self, x: Var, a1: usize, a2: usize) -> Result<Var> {
        let v = self.value(x);
        check_axis(v.shape(), a1)?;
        check_axis(v.shape(), a2)?;
        let out = swap_axes(v, a1, a2);
        Ok(self.push(out, Op::SwapAxes { x, a1, a2 }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.value(*first).shape().to_vec();
        check_axis(&base, axis)?;
        let mut total = 0;
        for &v in xs {
            let s = self.value(v).shape();
            let side_ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !side_ok {
                return Err(shape_err!(
                    "concat along axis {axis}: {s:?} does not match {base:?} off-axis"
                ));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        ))
    }

    /// The slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        check_axis(v.shape(), axis)?;
        if len == 0 || start + len > v.shape()[axis] {
            return Err(shape_err!(
                "narrow [{start}, {}) out of range for axis {axis} of {:?}",
                start + len,
                v.shape()
            ));
        }
        let (outer, full, inner) = axis_split(v.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Narrow { x, axis, start }))
    }

    /// Splits along `axis` into consecutive pieces of the given lengths.
    pub fn split(&mut self, x: Var, axis: usize, lengths: &[usize]) -> Result<Vec<Var>> {
        let total: usize = lengths.iter().sum();
        check_axis(self.shape(x), axis)?;
        if total != self.shape(x)[axis] {
            return Err(shape_err!(
                "split lengths {lengths:?} do not cover axis {axis} of {:?}",
                self.shape(x)
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(lengths.len());
        for &len in lengths {
            out.push(self.narrow(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        check_axis(v.shape(), axis)?;
        let (outer, len, inner) = axis_split(v.shape(), axis);
        let mut out = v.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| out[idx(l)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for l in 0..len {
                    let e = (out[idx(l)] - max).exp();
                    out[idx(l)] = e;
                    total = total + e;
                }
                for l in 0..len {
                    out[idx(l)] = out[idx(l)] / total;
                }
            }
        }
        let out = Tensor::new(v.shape(), out)?;
        Ok(self.push(out, Op::Softmax { x, axis }))
    }

    // ----- linear algebra ----------------------------------------------

    /// Matrix product of rank-2 operands, or batched product of rank-3
    /// operands sharing the leading batch dimension. With `trans_b`, `b` is
    /// read transposed in its last two axes.
    pub fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let dims = matmul_dims(sa, sb, trans_b)?;
        let mut data = vec![T::zero(); dims.batch * dims.m * dims.n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for bi in 0..dims.batch {
            T::gemm(
                false,
                trans_b,
                dims.m,
                dims.n,
                dims.k,
                &da[bi * dims.m * dims.k..],
                &db[bi * dims.k * dims.n..],
                &mut data[bi * dims.m * dims.n..],
                false,
            );
        }
        let shape = if sa.len() == 3 {
            vec![dims.batch, dims.m, dims.n]
        } else {
            vec![dims.m, dims.n]
        };
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::MatMul { a, b, trans_b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    /// Affine map over the last axis: `x · wᵀ + b` with `w` of shape `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.value(x).shape();
        let sw = self.value(w).shape();
        if sw.len() != 2 || sx.is_empty() || sx[sx.len() - 1] != sw[1] {
            return Err(shape_err!(
                "linear: input {sx:?} incompatible with weight {sw:?}"
            ));
        }
        let (dout, din) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.value(b).shape() != [dout] {
                return Err(shape_err!(
                    "linear: bias {:?} does not match output width {dout}",
                    self.value(b).shape()
                ));
            }
        }
        let rows = self.value(x).len() / din;
        let mut data = vec![T::zero(); rows * dout];
        T::gemm(
            false,
            true,
            rows,
            dout,
            din,
            self.value(x).data(),
            self.value(w).data(),
            &mut data,
            false,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in data.chunks_mut(dout) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o = *o + bv;
                }
            }
        }
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = dout;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    // ----- losses ------------------------------------------------------

    /// Mean cross-entropy of `logits` `[N, K]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        if v.ndim() != 2 || v.shape()[0] != labels.len() {
            return Err(shape_err!(
                "cross_entropy: logits {:?} vs {} labels",
                v.shape(),
                labels.len()
            ));
        }
        let k = v.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut probs = Vec::with_capacity(v.len());
        let mut loss = T::zero();
        for (row, &label) in v.data().chunks(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            loss = loss + (lse - row[label]);
            probs.extend(row.iter().map(|&z| (z - lse).exp()));
        }
        let n = T::from_usize(labels.len()).unwrap();
        let out = Tensor::scalar(loss / n);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    // ----- backward ----------------------------------------------------

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Graph(
                "backward already ran on this graph; re-run the forward pass".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let mut sink = |v: Var, g: Tensor<T>| accumulate(&mut grads[v.0], g);
            self.backward_node(node, &gout, &mut sink);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, gout: &Tensor<T>, sink: &mut impl FnMut(Var, Tensor<T>)) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Activation { x, kind } => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(gout.data())
                    .map(|((&xi, &yi), &g)| g * activation_grad(*kind, xi, yi))
                    .collect();
                sink(*x, Tensor::new(xv.shape(), data).unwrap());
            }
            Op::Binary { a, b, kind } => self.backward_binary(*a, *b, *kind, gout, sink),
            Op::Scale { x, factor } => sink(*x, gout.map(|g| g * *factor)),
            Op::MatMul { a, b, trans_b } => self.backward_matmul(*a, *b, *trans_b, gout, sink),
            Op::Linear { x, w, b } => self.backward_linear(*x, *w, *b, gout, sink),
            Op::Conv2d { x, w, b, geom } => {
                conv::conv2d_backward(self, *x, *w, *b, geom, gout, sink)
            }
            Op::AvgPool { x, kernel, stride } => {
                sink(*x, conv::avg_pool_backward(self.value(*x).shape(), *kernel, *stride, gout))
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                let d = dx.data_mut();
                for (&src, &g) in argmax.iter().zip(gout.data()) {
                    d[src] = d[src] + g;
                }
                sink(*x, dx);
            }
            Op::Upsample { x } => sink(*x, conv::upsample_backward(self.value(*x).shape(), gout)),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
            } => norm::backward(self, *x, *gamma, *beta, cache, gout, sink),
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let (y, g) = (out.data(), gout.data());
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let dot: T = (0..len).map(|l| y[idx(l)] * g[idx(l)]).sum();
                        for l in 0..len {
                            dx[idx(l)] = y[idx(l)] * (g[idx(l)] - dot);
                        }
                    }
                }
                sink(*x, Tensor::new(out.shape(), dx).unwrap());
            }
            Op::Concat { xs, axis } => {
                let (outer, _, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let shape = self.value(v).shape();
                    let block = shape[*axis] * inner;
                    if self.needs(v) {
                        let full = out.shape()[*axis] * inner;
                        let mut data = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            let base = o * full + offset;
                            data.extend_from_slice(&gout.data()[base..base + block]);
                        }
                        sink(v, Tensor::new(shape, data).unwrap());
                    }
                    offset += block;
                }
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.value(*x).shape();
                let (outer, full, inner) = axis_split(shape, *axis);
                let len = out.shape()[*axis];
                let mut dx = Tensor::zeros(shape);
                let d = dx.data_mut();
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&gout.data()[src..src + len * inner]);
                }
                sink(*x, dx);
            }
            Op::Reshape { x } => {
                sink(*x, gout.clone().reshape(self.value(*x).shape()).unwrap());
            }
            Op::SwapAxes { x, a1, a2 } => sink(*x, swap_axes(gout, *a1, *a2)),
            Op::Mean { x, axis } => {
                let shape = self.value(*x).shape();
                let (outer, len, inner) = axis_split(shape, *axis);
                let scale = T::one() / T::from_usize(len).unwrap();
                let mut dx = Tensor::zeros(shape);
                let d = dx.data_mut();
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            d[(o * len + l) * inner + i] = gout.data()[o * inner + i] * scale;
                        }
                    }
                }
                sink(*x, dx);
            }
            Op::Sum { x } => sink(*x, Tensor::full(self.value(*x).shape(), gout.item())),
            Op::Lstm {
                x,
                w,
                reverse,
                cache,
            } => lstm::backward(self, *x, w, *reverse, cache, out, gout, sink),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let shape = self.value(*logits).shape();
                let k = shape[1];
                let scale = gout.item() / T::from_usize(labels.len()).unwrap();
                let mut d = probs.clone();
                for (n, &label) in labels.iter().enumerate() {
                    d[n * k + label] = d[n * k + label] - T::one();
                }
                d.iter_mut().for_each(|v| *v = *v * scale);
                sink(*logits, Tensor::new(shape, d).unwrap());
            }
        }
    }

    fn backward_binary(
        &self,
        a: Var,
        b: Var,
        kind: Binary,
        gout: &Tensor<T>,
        sink: &mut impl FnMut(Var, Tensor<T>),
    ) {
        let (va, vb) = (self.value(a), self.value(b));
        let g = gout.data();
        let grad_a = |ib: usize, gi: T| match kind {
            Binary::Add | Binary::Sub => gi,
            Binary::Mul => gi * vb.data()[ib],
        };
        let grad_b = |ia: usize, gi: T| match kind {
            Binary::Add => gi,
            Binary::Sub => -gi,
            Binary::Mul => gi * va.data()[ia],
        };
        if va.shape() == vb.shape() {
            if self.needs(a) {
                let d = (0..g.len()).map(|i| grad_a(i, g[i])).collect();
                sink(a, Tensor::new(va.shape(), d).unwrap());
            }
            if self.needs(b) {
                let d = (0..g.len()).map(|i| grad_b(i, g[i])).collect();
                sink(b, Tensor::new(vb.shape(), d).unwrap());
            }
            return;
        }
        let bc = Broadcast::new(va.shape(), vb.shape()).unwrap();
        let (need_a, need_b) = (self.needs(a), self.needs(b));
        let mut da = need_a.then(|| Tensor::zeros(va.shape()));
        let mut db = need_b.then(|| Tensor::zeros(vb.shape()));
        bc.for_each(|i, ia, ib| {
            if let Some(da) = da.as_mut() {
                let d = da.data_mut();
                d[ia] = d[ia] + grad_a(ib, g[i]);
            }
            if let Some(db) = db.as_mut() {
                let d = db.data_mut();
                d[ib] = d[ib] + grad_b(ia, g[i]);
            }
        });
        if let Some(da) = da {
            sink(a, da);
        }
        if let Some(db) = db {
            sink(b, db);
        }
    }

    fn backward_matmul(
        &self,
        a: Var,
        b: Var,
        trans_b: bool,
        gout: &Tensor<T>,
        sink: &mut impl FnMut(Var, Tensor<T>),
    ) {
        let (va, vb) = (self.value(a), self.value(b));
        let dims = matmul_dims(va.shape(), vb.shape(), trans_b).unwrap();
        let (m, n, k) = (dims.m, dims.n, dims.k);
        let g = gout.data();
        if self.needs(a) {
            let mut da = Tensor::zeros(va.shape());
            for bi in 0..dims.batch {
                // dA = dC · op(B)ᵀ
                T::gemm(
                    false,
                    !trans_b,
                    m,
                    k,
                    n,
                    &g[bi * m * n..],
                    &vb.data()[bi * k * n..],
                    &mut da.data_mut()[bi * m * k..],
                    false,
                );
            }
            sink(a, da);
        }
        if self.needs(b) {
            let mut db = Tensor::zeros(vb.shape());
            for bi in 0..dims.batch {
                let ga = &g[bi * m * n..];
                let av = &va.data()[bi * m * k..];
                let dst = &mut db.data_mut()[bi * k * n..];
                if trans_b {
                    // B stored n×k: dB = dCᵀ · A
                    T::gemm(true, false, n, k, m, ga, av, dst, false);
                } else {
                    // dB = Aᵀ · dC
                    T::gemm(true, false, k, n, m, av, ga, dst, false);
                }
            }
            sink(b, db);
        }
    }

    fn backward_linear(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        gout: &Tensor<T>,
        sink: &mut impl FnMut(Var, Tensor<T>),
    ) {
        let (vx, vw) = (self.value(x), self.value(w));
        let (dout, din) = (vw.shape()[0], vw.shape()[1]);
        let rows = vx.len() / din;
        if self.needs(x) {
            let mut dx = Tensor::zeros(vx.shape());
            T::gemm(false, false, rows, din, dout, gout.data(), vw.data(), dx.data_mut(), false);
            sink(x, dx);
        }
        if self.needs(w) {
            let mut dw = Tensor::zeros(vw.shape());
            T::gemm(true, false, dout, din, rows, gout.data(), vx.data(), dw.data_mut(), false);
            sink(w, dw);
        }
        if let Some(b) = b.filter(|b| self.needs(*b)) {
            let mut db = vec![T::zero(); dout];
            for row in gout.data().chunks(dout) {
                for (acc, &g) in db.iter_mut().zip(row) {
                    *acc = *acc + g;
                }
            }
            sink(b, Tensor::new(&[dout], db).unwrap());
        }
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Activation { .. } => "activation",
        Op::Binary { .. } => "binary",
        Op::Scale { .. } => "scale",
        Op::MatMul { .. } => "matmul",
        Op::Linear { .. } => "linear",
        Op::Conv2d { .. } => "conv2d",
        Op::AvgPool { .. } => "avg_pool2d",
        Op::MaxPool { .. } => "max_pool2d",
        Op::Upsample { .. } => "bilinear_upsample",
        Op::BatchNorm { .. } => "batchnorm2d",
        Op::Softmax { .. } => "softmax",
        Op::Concat { .. } => "concat",
        Op::Narrow { .. } => "narrow",
        Op::Reshape { .. } => "reshape",
        Op::SwapAxes { .. } => "swap_axes",
        Op::Mean { .. } => "mean",
        Op::Sum { .. } => "sum",
        Op::Lstm { .. } => "lstm",
        Op::CrossEntropy { .. } => "cross_entropy",
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf created with `variable` or `param`.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a bound parameter, if it took part in the loss.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|v| self.wrt(*v))
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            debug_assert_eq!(acc.shape(), g.shape());
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
        None => *slot = Some(g),
    }
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(shape_err!("axis {axis} out of range for shape {shape:?}"));
    }
    Ok(())
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn activate<T: Real>(kind: Activation, x: T) -> T {
    match kind {
        Activation::Sigmoid => sigmoid(x),
        Activation::Swish => x * sigmoid(x),
        Activation::Relu => x.max(T::zero()),
        Activation::Tanh => x.tanh(),
    }
}

fn activation_grad<T: Real>(kind: Activation, x: T, y: T) -> T {
    match kind {
        Activation::Sigmoid => y * (T::one() - y),
        Activation::Swish => {
            let s = sigmoid(x);
            s + x * s * (T::one() - s)
        }
        Activation::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Activation::Tanh => T::one() - y * y,
    }
}

fn apply_binary<T: Real>(kind: Binary, x: T, y: T) -> T {
    match kind {
        Binary::Add => x + y,
        Binary::Sub => x - y,
        Binary::Mul => x * y,
    }
}

/// Index mapping for a numpy-style broadcast of two shapes.
struct Broadcast {
    out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

impl Broadcast {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out_shape = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return Err(shape_err!("cannot broadcast {a:?} with {b:?}"));
            }
            out_shape.push(x.max(y));
        }
        let masked = |p: &[usize]| {
            strides_of(p)
                .into_iter()
                .zip(p)
                .map(|(s, &d)| if d == 1 { 0 } else { s })
                .collect::<Vec<_>>()
        };
        Ok(Self {
            a_strides: masked(&pa),
            b_strides: masked(&pb),
            out_shape,
        })
    }

    fn numel(&self) -> usize {
        self.out_shape.iter().product()
    }

    /// Calls `f(out_index, a_index, b_index)` in row-major output order.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let rank = self.out_shape.len();
        let total = self.numel();
        if rank == 0 {
            f(0, 0, 0);
            return;
        }
        let last = rank - 1;
        let inner = self.out_shape[last];
        let (sa, sb) = (self.a_strides[last], self.b_strides[last]);
        let mut idx = vec![0usize; rank];
        let mut flat = 0;
        while flat < total {
            let base_a: usize = (0..last).map(|d| idx[d] * self.a_strides[d]).sum();
            let base_b: usize = (0..last).map(|d| idx[d] * self.b_strides[d]).sum();
            for j in 0..inner {
                f(flat + j, base_a + j * sa, base_b + j * sb);
            }
            flat += inner;
            for d in (0..last).rev() {
                idx[d] += 1;
                if idx[d] < self.out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
    }
}

struct MatmulDims {
    batch: usize,
    m: usize,
    n: usize,
    k: usize,
}

fn matmul_dims(sa: &[usize], sb: &[usize], trans_b: bool) -> Result<MatmulDims> {
    let err = || {
        shape_err!(
            "matmul: cannot multiply {sa:?} by {sb:?}{}",
            if trans_b { " (transposed)" } else { "" }
        )
    };
    let (batch, a2, b2) = match (sa.len(), sb.len()) {
        (2, 2) => (1, sa, sb),
        (3, 3) if sa[0] == sb[0] => (sa[0], &sa[1..], &sb[1..]),
        _ => return Err(err()),
    };
    let (m, k) = (a2[0], a2[1]);
    let (kb, n) = if trans_b { (b2[1], b2[0]) } else { (b2[0], b2[1]) };
    if k != kb {
        return Err(err());
    }
    Ok(MatmulDims { batch, m, n, k })
}

pub(crate) fn swap_axes<T: Real>(t: &Tensor<T>, a1: usize, a2: usize) -> Tensor<T> {
    if a1 == a2 {
        return t.clone();
    }
    let mut shape = t.shape().to_vec();
    shape.swap(a1, a2);
    let in_strides = t.strides();
    let mut perm_strides = in_strides.clone();
    perm_strides.swap(a1, a2);
    let total = t.len();
    let mut data = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    let src = t.data();
    for _ in 0..total {
        let off: usize = idx.iter().zip(&perm_strides).map(|(i, s)| i * s).sum();
        data.push(src[off]);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(&shape, data).unwrap()
}
