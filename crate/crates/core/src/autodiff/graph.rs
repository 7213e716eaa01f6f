//! Append-only tape of tensor operations with reverse-mode gradients.
//!
//! Nodes are pushed in evaluation order, so iterating the tape backwards is a
//! valid reverse topological order. Binary elementwise ops accept equal shapes
//! or a one-element operand; anything else needs an explicit [`Graph::expand`].

use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
    HardSigmoid,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Affine { x: Var, scale: f64 },
    MatMul(Var, Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Expand(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Softmax(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    SquaredError(Var, Var),
    /// Elementwise map with local partials computed during the forward pass.
    Mapped { inputs: Vec<Var>, partials: Vec<Vec<f64>> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-threaded computation graph for one forward/backward step.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Gradients of one backward pass, keyed by leaf variable and by parameter.
#[derive(Debug)]
pub struct Grads {
    leaves: HashMap<Var, Tensor>,
    params: Gradients,
}

impl Grads {
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var)
    }

    pub fn params(&self) -> &Gradients {
        &self.params
    }

    pub fn into_params(self) -> Gradients {
        self.params
    }
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::shape(op, &[a.shape(), b.shape()]))
    }
}

#[inline]
fn at(data: &[f64], i: usize) -> f64 {
    if data.len() == 1 {
        data[0]
    } else {
        data[i]
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `outer * axis_len * inner` decomposition used by concat/slice/sum-axis.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            Op::Binary(_, a, b) | Op::MatMul(a, b) | Op::SquaredError(a, b) => {
                self.rg(*a) || self.rg(*b)
            }
            Op::Unary(_, x)
            | Op::Affine { x, .. }
            | Op::Slice { x, .. }
            | Op::Reshape(x)
            | Op::Expand(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumAxis { x, .. }
            | Op::Softmax(x) => self.rg(*x),
            Op::Embedding { table, .. } => self.rg(*table),
            Op::CrossEntropy { logits, .. } => self.rg(*logits),
            Op::Concat { inputs, .. } | Op::Mapped { inputs, .. } => {
                inputs.iter().any(|v| self.rg(*v))
            }
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Differentiable leaf whose gradient is reported by [`Grads::wrt`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a trainable parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
            Binary::Pow => "pow",
        };
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shape(name, ta, tb)?;
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let mut out = Vec::with_capacity(n);
        match kind {
            Binary::Add => out.extend((0..n).map(|i| at(da, i) + at(db, i))),
            Binary::Sub => out.extend((0..n).map(|i| at(da, i) - at(db, i))),
            Binary::Mul => out.extend((0..n).map(|i| at(da, i) * at(db, i))),
            Binary::Div => {
                if let Some(i) = (0..db.len()).find(|&i| db[i] == 0.0) {
                    return Err(Error::domain("div", format!("zero divisor at index {i}")));
                }
                out.extend((0..n).map(|i| at(da, i) / at(db, i)))
            }
            Binary::Pow => {
                if let Some(i) = (0..da.len()).find(|&i| da[i] <= 0.0) {
                    return Err(Error::domain(
                        "pow",
                        format!("base must be positive, got {} at index {i}", da[i]),
                    ));
                }
                out.extend((0..n).map(|i| at(da, i).powf(at(db, i))))
            }
        }
        self.push(name, Tensor::new(shape, out)?, Op::Binary(kind, a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    /// `base ^ exponent` elementwise, `base > 0`.
    pub fn pow(&mut self, base: Var, exponent: Var) -> Result<Var> {
        self.binary(Binary::Pow, base, exponent)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let name = match kind {
            Unary::Neg => "neg",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Softplus => "softplus",
            Unary::HardSigmoid => "hard_sigmoid",
        };
        if kind == Unary::Log {
            if let Some(v) = t.data().iter().find(|v| **v <= 0.0) {
                return Err(Error::domain("log", format!("non-positive input {v}")));
            }
        }
        let f: fn(f64) -> f64 = match kind {
            Unary::Neg => |v| -v,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => sigmoid,
            Unary::Softplus => softplus,
            Unary::HardSigmoid => |v| v.clamp(0.0, 1.0),
        };
        let out = t.data().iter().map(|v| f(*v)).collect();
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push(name, value, Op::Unary(kind, x))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Softplus, x)
    }

    /// `min(1, max(0, x))`. Local derivative is 1 on (0, 1) and 0 elsewhere,
    /// including the kinks at 0 and 1.
    pub fn hard_sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::HardSigmoid, x)
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let out = t.data().iter().map(|v| scale * v + shift).collect();
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("affine", value, Op::Affine { x, scale })
    }

    /// `1 - x`, a common enough special case.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape("matmul", &[ta.shape(), tb.shape()]));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .map(|v| self.nodes[v.0].value.shape().to_vec())
            .ok_or_else(|| Error::shape("concat", &[]))?;
        if axis >= first.len() {
            return Err(Error::shape("concat", &[&first]));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.nodes[v.0].value.shape();
            let same_rank = s.len() == first.len();
            let compatible =
                same_rank && (0..s.len()).all(|d| d == axis || s[d] == first[d]);
            if !compatible {
                let shapes: Vec<&[usize]> =
                    inputs.iter().map(|v| self.nodes[v.0].value.shape()).collect();
                return Err(Error::shape("concat", &shapes));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let t = &self.nodes[v.0].value;
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if axis >= t.shape().len() || start + len > t.shape()[axis] || len == 0 {
            return Err(Error::shape("slice", &[t.shape(), &[axis, start, len]]));
        }
        let (outer, dim, inner) = split_at_axis(t.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        self.push("slice", value, Op::Slice { x, axis, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(x))
    }

    /// Explicit broadcast: every input dimension must equal the target or be 1.
    /// A one-element input expands to any shape.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let n: usize = shape.iter().product();
        let out = if t.numel() == 1 {
            vec![t.data()[0]; n]
        } else {
            let s = t.shape();
            let ok = s.len() == shape.len()
                && s.iter().zip(shape).all(|(a, b)| *a == *b || *a == 1);
            if !ok {
                return Err(Error::shape("expand", &[s, shape]));
            }
            let mut out = Vec::with_capacity(n);
            for flat in 0..n {
                out.push(t.data()[broadcast_source(flat, shape, s)]);
            }
            out
        };
        let value = Tensor::new(shape.to_vec(), out)?;
        self.push("expand", value, Op::Expand(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.nodes[x.0].value.data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x))
    }

    /// Sums along `axis`, keeping it as a size-1 dimension.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if axis >= t.shape().len() {
            return Err(Error::shape("sum_axis", &[t.shape()]));
        }
        let (outer, dim, inner) = split_at_axis(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &t.data()[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let value = Tensor::new(shape, out)?;
        self.push("sum_axis", value, Op::SumAxis { x, axis })
    }

    /// Gathers rows of a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = &self.nodes[table.0].value;
        if t.shape().len() != 2 {
            return Err(Error::shape("embedding", &[t.shape()]));
        }
        let (vocab, dim) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::domain(
                    "embedding",
                    format!("token id {id} outside vocabulary of {vocab}"),
                ));
            }
            out.extend_from_slice(&t.data()[id * dim..(id + 1) * dim]);
        }
        let value = Tensor::new(vec![ids.len(), dim], out)?;
        self.push(
            "embedding",
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let cols = *t.shape().last().unwrap_or(&1);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols.max(1)) {
            softmax_in_place(row);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax(x))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = &self.nodes[logits.0].value;
        if t.shape().len() != 2 || t.shape()[0] != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                &[t.shape(), &[targets.len()]],
            ));
        }
        let classes = t.shape()[1];
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (row, (chunk, &y)) in probs.chunks_mut(classes).zip(targets).enumerate() {
            if y >= classes {
                return Err(Error::domain(
                    "cross_entropy",
                    format!("target {y} at row {row} outside {classes} classes"),
                ));
            }
            let m = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + chunk.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - chunk[y];
            softmax_in_place(chunk);
        }
        let value = Tensor::scalar(loss / targets.len() as f64);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Mean of `(a - b)^2`.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::shape("squared_error", &[ta.shape(), tb.shape()]));
        }
        let s = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / ta.numel() as f64;
        self.push("squared_error", Tensor::scalar(s), Op::SquaredError(a, b))
    }

    /// Elementwise op over same-shaped inputs whose value and per-input local
    /// partial derivatives were computed by the caller.
    pub fn mapped(
        &mut self,
        op_name: &'static str,
        inputs: &[Var],
        value: Vec<f64>,
        partials: Vec<Vec<f64>>,
    ) -> Result<Var> {
        let shape = self.nodes[inputs[0].0].value.shape().to_vec();
        let n = value.len();
        let bad_input = inputs
            .iter()
            .any(|v| self.nodes[v.0].value.shape() != shape.as_slice());
        if bad_input || partials.len() != inputs.len() || partials.iter().any(|p| p.len() != n) {
            let shapes: Vec<&[usize]> =
                inputs.iter().map(|v| self.nodes[v.0].value.shape()).collect();
            return Err(Error::shape(op_name, &shapes));
        }
        if partials.iter().flatten().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let value = Tensor::new(shape, value)?;
        self.push(
            op_name,
            value,
            Op::Mapped {
                inputs: inputs.to_vec(),
                partials,
            },
        )
    }

    /// Reverse pass from a scalar `loss`. Gradients are summed over all paths;
    /// the graph is not modified, so repeated calls return identical results.
    pub fn backward(&self, loss: Var, store_len: usize) -> Result<Grads> {
        let lt = &self.nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves = HashMap::new();
        let mut params = Gradients::zeros_like_len(store_len);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    leaves.insert(Var(idx), Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::Param(id) => {
                    params.accumulate(*id, node.value.shape(), &g);
                }
                op => self.propagate(op, &node.value, &g, &mut grads),
            }
        }
        Ok(Grads { leaves, params })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (da, db) = (ta.data(), tb.data());
                let n = g.len();
                if self.rg(*a) {
                    let local: Box<dyn Fn(usize) -> f64> = match kind {
                        Binary::Add => Box::new(|_| 1.0),
                        Binary::Sub => Box::new(|_| 1.0),
                        Binary::Mul => Box::new(|i| at(db, i)),
                        Binary::Div => Box::new(|i| 1.0 / at(db, i)),
                        Binary::Pow => {
                            Box::new(|i| at(db, i) * out.data()[i] / at(da, i))
                        }
                    };
                    accumulate_broadcast(grads, *a, ta.numel(), n, |i| g[i] * local(i));
                }
                if self.rg(*b) {
                    let local: Box<dyn Fn(usize) -> f64> = match kind {
                        Binary::Add => Box::new(|_| 1.0),
                        Binary::Sub => Box::new(|_| -1.0),
                        Binary::Mul => Box::new(|i| at(da, i)),
                        Binary::Div => Box::new(|i| -out.data()[i] / at(db, i)),
                        Binary::Pow => Box::new(|i| out.data()[i] * at(da, i).ln()),
                    };
                    accumulate_broadcast(grads, *b, tb.numel(), n, |i| g[i] * local(i));
                }
            }
            Op::Unary(kind, x) => {
                let xs = self.nodes[x.0].value.data();
                let ys = out.data();
                let buf = grad_buf(grads, *x, xs.len());
                for i in 0..xs.len() {
                    let d = match kind {
                        Unary::Neg => -1.0,
                        Unary::Exp => ys[i],
                        Unary::Log => 1.0 / xs[i],
                        Unary::Tanh => 1.0 - ys[i] * ys[i],
                        Unary::Sigmoid => ys[i] * (1.0 - ys[i]),
                        Unary::Softplus => sigmoid(xs[i]),
                        Unary::HardSigmoid => {
                            if xs[i] > 0.0 && xs[i] < 1.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    buf[i] += g[i] * d;
                }
            }
            Op::Affine { x, scale } => {
                let buf = grad_buf(grads, *x, g.len());
                for (b, gi) in buf.iter_mut().zip(g) {
                    *b += scale * gi;
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.rg(*a) {
                    // dA = G * B^T
                    let buf = grad_buf(grads, *a, m * k);
                    let bd = tb.data();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            buf[i * k + p] += dot(grow, brow);
                        }
                    }
                }
                if self.rg(*b) {
                    // dB = A^T * G
                    let buf = grad_buf(grads, *b, k * n);
                    let ad = ta.data();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (acc, gv) in buf[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *acc += aip * gv;
                            }
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_at_axis(out.shape(), *axis);
                let mut offset = 0;
                let total = out.shape()[*axis] * inner;
                for v in inputs {
                    let t = &self.nodes[v.0].value;
                    let chunk = t.shape()[*axis] * inner;
                    if self.rg(*v) {
                        let buf = grad_buf(grads, *v, t.numel());
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            for (acc, s) in buf[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *acc += s;
                            }
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let t = &self.nodes[x.0].value;
                let (outer, dim, inner) = split_at_axis(t.shape(), *axis);
                let len = out.shape()[*axis];
                let buf = grad_buf(grads, *x, t.numel());
                for o in 0..outer {
                    let base = o * dim * inner + start * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    for (acc, s) in buf[base..base + len * inner].iter_mut().zip(src) {
                        *acc += s;
                    }
                }
            }
            Op::Reshape(x) => {
                let buf = grad_buf(grads, *x, g.len());
                for (acc, s) in buf.iter_mut().zip(g) {
                    *acc += s;
                }
            }
            Op::Expand(x) => {
                let t = &self.nodes[x.0].value;
                let buf = grad_buf(grads, *x, t.numel());
                if t.numel() == 1 {
                    buf[0] += g.iter().sum::<f64>();
                } else {
                    for (flat, gv) in g.iter().enumerate() {
                        buf[broadcast_source(flat, out.shape(), t.shape())] += gv;
                    }
                }
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.numel();
                let buf = grad_buf(grads, *x, n);
                for acc in buf.iter_mut() {
                    *acc += g[0];
                }
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                let buf = grad_buf(grads, *x, n);
                let s = g[0] / n as f64;
                for acc in buf.iter_mut() {
                    *acc += s;
                }
            }
            Op::SumAxis { x, axis } => {
                let t = &self.nodes[x.0].value;
                let (outer, dim, inner) = split_at_axis(t.shape(), *axis);
                let buf = grad_buf(grads, *x, t.numel());
                for o in 0..outer {
                    for d in 0..dim {
                        let dst = &mut buf[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                        for (acc, s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *acc += s;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let t = &self.nodes[table.0].value;
                let dim = t.shape()[1];
                let buf = grad_buf(grads, *table, t.numel());
                for (row, &id) in ids.iter().enumerate() {
                    let src = &g[row * dim..(row + 1) * dim];
                    for (acc, s) in buf[id * dim..(id + 1) * dim].iter_mut().zip(src) {
                        *acc += s;
                    }
                }
            }
            Op::Softmax(x) => {
                let cols = *out.shape().last().unwrap_or(&1);
                let buf = grad_buf(grads, *x, g.len());
                for ((y, gr), acc) in out
                    .data()
                    .chunks(cols)
                    .zip(g.chunks(cols))
                    .zip(buf.chunks_mut(cols))
                {
                    let inner = dot(y, gr);
                    for j in 0..cols {
                        acc[j] += y[j] * (gr[j] - inner);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let classes = probs.len() / targets.len();
                let scale = g[0] / targets.len() as f64;
                let buf = grad_buf(grads, *logits, probs.len());
                for (r, &y) in targets.iter().enumerate() {
                    for c in 0..classes {
                        let ind = if c == y { 1.0 } else { 0.0 };
                        buf[r * classes + c] += scale * (probs[r * classes + c] - ind);
                    }
                }
            }
            Op::SquaredError(a, b) => {
                let (da, db) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                let scale = 2.0 * g[0] / da.len() as f64;
                if self.rg(*a) {
                    let buf = grad_buf(grads, *a, da.len());
                    for i in 0..da.len() {
                        buf[i] += scale * (da[i] - db[i]);
                    }
                }
                if self.rg(*b) {
                    let buf = grad_buf(grads, *b, db.len());
                    for i in 0..db.len() {
                        buf[i] -= scale * (da[i] - db[i]);
                    }
                }
            }
            Op::Mapped { inputs, partials } => {
                for (v, p) in inputs.iter().zip(partials) {
                    if !self.rg(*v) {
                        continue;
                    }
                    let buf = grad_buf(grads, *v, g.len());
                    for i in 0..g.len() {
                        buf[i] += g[i] * p[i];
                    }
                }
            }
        }
    }
}

fn grad_buf(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate_broadcast(
    grads: &mut [Option<Vec<f64>>],
    v: Var,
    numel: usize,
    n: usize,
    f: impl Fn(usize) -> f64,
) {
    let buf = grad_buf(grads, v, numel);
    if numel == 1 && n != 1 {
        buf[0] += (0..n).map(&f).sum::<f64>();
    } else {
        for (i, acc) in buf.iter_mut().enumerate() {
            *acc += f(i);
        }
    }
}

/// Flat index in the source tensor for output position `flat` of an expand.
fn broadcast_source(flat: usize, out_shape: &[usize], src_shape: &[usize]) -> usize {
    let mut rem = flat;
    let mut idx = 0;
    let mut stride = 1;
    for d in (0..out_shape.len()).rev() {
        let coord = rem % out_shape[d];
        rem /= out_shape[d];
        if src_shape[d] != 1 {
            idx += coord * stride;
        }
        stride *= src_shape[d];
    }
    idx
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
