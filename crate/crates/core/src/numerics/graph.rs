//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. Nodes are stored in creation order, which
//! is a topological order, so `backward` is a single reverse sweep that visits each node once.
//! Gradients flowing into the same node from several consumers are summed.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d { input: Var, weight: Var, stride: usize },
    StackChannels(Vec<Var>),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Sigmoid(Var),
    Gelu(Var),
    Log(Var),
    Pow(Var, T),
    ClampMin(Var, T),
    LayerNorm { x: Var, eps: T },
    SumAll(Var),
    MeanAll(Var),
    SumAxis { x: Var, axis: usize },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `(outer, n, inner)` decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{op}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn as_2d<T: Scalar>(t: &Tensor<T>, op: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(format!("{op}: expected 2-d tensor, got {s:?}"))),
    }
}

fn gelu_coeffs<T: Scalar>() -> (T, T) {
    (T::of((2.0 / std::f64::consts::PI).sqrt()), T::of(0.044715))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf bound to a stored parameter. Each parameter maps to one leaf per graph, so every
    /// use of it accumulates into the same gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, !store.is_frozen());
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    /// Parameters referenced by this graph, in id order.
    pub fn referenced_params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.params.keys().copied().collect();
        ids.sort();
        ids
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Free leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, name)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Ok((Tensor::new(x.shape().to_vec(), data)?, self.rg(&[a, b])))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T) -> (Tensor<T>, bool) {
        let x = self.value(a);
        let data = x.data().iter().map(|&p| f(p)).collect();
        (Tensor::new(x.shape().to_vec(), data).expect("same shape"), self.rg(&[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "add", |p, q| p + q)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "sub", |p, q| p - q)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "mul", |p, q| p * q)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "div", |p, q| p / q)?;
        Ok(self.push(t, Op::Div(a, b), rg))
    }

    fn row_broadcast(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let (x, row) = (self.value(a), self.value(b));
        let (_, cols) = x.rows_cols();
        if row.ndim() != 1 || row.len() != cols || x.ndim() == 0 {
            return Err(Error::shape(format!("{name}: {:?} with row {:?}", x.shape(), row.shape())));
        }
        let data = x.data().chunks(cols).flat_map(|r| r.iter().zip(row.data()).map(|(&p, &q)| f(p, q))).collect();
        Ok((Tensor::new(x.shape().to_vec(), data)?, self.rg(&[a, b])))
    }

    /// `a[.., n] + b[n]`, broadcasting `b` over every row.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.row_broadcast(a, b, "add_row", |p, q| p + q)?;
        Ok(self.push(t, Op::AddRow(a, b), rg))
    }

    /// `a[.., n] * b[n]`, broadcasting `b` over every row.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.row_broadcast(a, b, "mul_row", |p, q| p * q)?;
        Ok(self.push(t, Op::MulRow(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let (t, rg) = self.unary(a, |p| p * c);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let (t, rg) = self.unary(a, |p| p + c);
        self.push(t, Op::AddScalar(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (m, k) = as_2d(x, "matmul")?;
        let (k2, n) = as_2d(y, "matmul")?;
        if k != k2 {
            return Err(Error::shape(format!("matmul: {:?} x {:?}", x.shape(), y.shape())));
        }
        let out = matmul_raw(x.data(), y.data(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = as_2d(x, "transpose")?;
        let t = Tensor::new(vec![n, m], transpose_raw(x.data(), m, n))?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Cross-correlation of `input[n, c, h, w]` with `weight[j, c, kh, kw]` at the given stride,
    /// no padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize) -> Result<Var> {
        let (x, w) = (self.value(input), self.value(weight));
        let t = conv2d_forward(x, w, stride)?;
        let rg = self.rg(&[input, weight]);
        Ok(self.push(t, Op::Conv2d { input, weight, stride }, rg))
    }

    /// Stacks `c` slices of shape `[j, kh, kw]` into a `[j, c, kh, kw]` convolution weight.
    /// A slice may appear in several channel slots.
    pub fn stack_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("stack_channels: no slices"))?;
        let shape = self.value(*first).shape().to_vec();
        let [j, kh, kw] = shape[..] else {
            return Err(Error::shape(format!("stack_channels: slice shape {shape:?}")));
        };
        let c = parts.len();
        let plane = kh * kw;
        let mut out = vec![T::zero(); j * c * plane];
        for (ci, &p) in parts.iter().enumerate() {
            let v = self.value(p);
            if v.shape() != shape.as_slice() {
                return Err(Error::shape(format!("stack_channels: {:?} vs {shape:?}", v.shape())));
            }
            for jj in 0..j {
                let dst = (jj * c + ci) * plane;
                out[dst..dst + plane].copy_from_slice(&v.data()[jj * plane..(jj + 1) * plane]);
            }
        }
        let t = Tensor::new(vec![j, c, kh, kw], out)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::StackChannels(parts.to_vec()), rg))
    }

    fn check_axis(&self, a: Var, axis: usize, name: &str) -> Result<()> {
        if axis >= self.value(a).ndim() {
            return Err(Error::shape(format!("{name}: axis {axis} of {:?}", self.value(a).shape())));
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "softmax")?;
        let x = self.value(a);
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut out = x.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let mx = (0..n).map(|k| out[idx(k)]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for k in 0..n {
                    let e = (out[idx(k)] - mx).exp();
                    out[idx(k)] = e;
                    sum = sum + e;
                }
                for k in 0..n {
                    out[idx(k)] = out[idx(k)] / sum;
                }
            }
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Softmax { x: a, axis }, rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "log_softmax")?;
        let x = self.value(a);
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut out = x.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let mx = (0..n).map(|k| out[idx(k)]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for k in 0..n {
                    sum = sum + (out[idx(k)] - mx).exp();
                }
                let lse = mx + sum.ln();
                for k in 0..n {
                    out[idx(k)] = out[idx(k)] - lse;
                }
            }
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::LogSoftmax { x: a, axis }, rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (t, rg) = self.unary(a, |p| T::one() / (T::one() + (-p).exp()));
        self.push(t, Op::Sigmoid(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (k, c) = gelu_coeffs::<T>();
        let half = T::of(0.5);
        let (t, rg) = self.unary(a, |x| half * x * (T::one() + (k * (x + c * x * x * x)).tanh()));
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let (t, rg) = self.unary(a, |p| p.ln());
        self.push(t, Op::Log(a), rg)
    }

    pub fn pow(&mut self, a: Var, exponent: f64) -> Var {
        let e = T::of(exponent);
        let (t, rg) = self.unary(a, |p| if e == T::zero() { T::one() } else { p.powf(e) });
        self.push(t, Op::Pow(a, e), rg)
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let lo = T::of(lo);
        let (t, rg) = self.unary(a, |p| if p > lo { p } else { lo });
        self.push(t, Op::ClampMin(a, lo), rg)
    }

    /// Normalizes over the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        if x.ndim() == 0 {
            return Err(Error::shape("layer_norm: scalar input"));
        }
        let eps = T::of(eps);
        let (_, cols) = x.rows_cols();
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(cols) {
            let (mean, rstd) = row_stats(row, eps);
            out.extend(row.iter().map(|&v| (v - mean) * rstd));
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::LayerNorm { x: a, eps }, rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().fold(T::zero(), |acc, &v| acc + v) / T::of(x.len() as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::MeanAll(a), rg)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "sum_axis")?;
        let x = self.value(a);
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + x.data()[(o * n + k) * inner + i];
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::SumAxis { x: a, axis }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = as_2d(self.value(parts[0]), "concat_rows")?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = as_2d(self.value(p), "concat_rows")?;
            if c != cols {
                return Err(Error::shape(format!("concat_rows: {c} vs {cols} columns")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![rows, cols], out)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = as_2d(x, "slice_rows")?;
        if start + len > r {
            return Err(Error::shape(format!("slice_rows: {start}+{len} > {r}")));
        }
        let t = Tensor::new(vec![len, c], x.data()[start * c..(start + len) * c].to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::SliceRows { x: a, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = as_2d(self.value(parts[0]), "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = as_2d(self.value(p), "concat_cols")?;
            if r != rows {
                return Err(Error::shape(format!("concat_cols: {r} vs {rows} rows")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(vec![rows, total], out)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = as_2d(x, "slice_cols")?;
        if start + len > c {
            return Err(Error::shape(format!("slice_cols: {start}+{len} > {c}")));
        }
        let out = (0..r).flat_map(|i| x.data()[i * c + start..i * c + start + len].iter().copied()).collect();
        let t = Tensor::new(vec![r, len], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::SliceCols { x: a, start }, rg))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.item().is_finite() {
            return Err(Error::NonFiniteLoss { value: lv.item().as_f64(), context: "backward".into() });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }

        let mut leaves = Vec::new();
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
            if let Some(id) = node.param {
                if node.requires_grad {
                    leaves.push((id, Var(i)));
                }
            }
        }
        leaves.sort_by_key(|&(id, _)| id);
        Ok(Gradients { grads, params: leaves })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let zip = |a: &Tensor<T>, b: &Tensor<T>, f: &dyn Fn(T, T) -> T| {
            let d = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
            Tensor::new(a.shape().to_vec(), d).expect("same shape")
        };
        let map = |a: &Tensor<T>, f: &dyn Fn(T) -> T| {
            let d = a.data().iter().map(|&p| f(p)).collect();
            Tensor::new(a.shape().to_vec(), d).expect("same shape")
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, map(g, &|p| -p));
            }
            Op::Mul(a, b) => {
                acc(*a, zip(g, val(*b), &|p, q| p * q));
                acc(*b, zip(g, val(*a), &|p, q| p * q));
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                acc(*a, zip(g, bv, &|p, q| p / q));
                let t = zip(g, &node.value, &|p, y| p * y);
                acc(*b, zip(&t, bv, &|p, q| -p / q));
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                let cols = val(*b).len();
                let mut rb = vec![T::zero(); cols];
                for row in g.data().chunks(cols) {
                    for (r, &v) in rb.iter_mut().zip(row) {
                        *r = *r + v;
                    }
                }
                acc(*b, Tensor::new(vec![cols], rb)?);
            }
            Op::MulRow(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let cols = bv.len();
                let ga = g.data().chunks(cols).flat_map(|r| r.iter().zip(bv.data()).map(|(&p, &q)| p * q)).collect();
                acc(*a, Tensor::new(av.shape().to_vec(), ga)?);
                let mut rb = vec![T::zero(); cols];
                for (grow, arow) in g.data().chunks(cols).zip(av.data().chunks(cols)) {
                    for k in 0..cols {
                        rb[k] = rb[k] + grow[k] * arow[k];
                    }
                }
                acc(*b, Tensor::new(vec![cols], rb)?);
            }
            Op::Scale(a, c) => acc(*a, map(g, &|p| p * *c)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.nodes[a.0].requires_grad {
                    let bt = transpose_raw(bv.data(), k, n);
                    acc(*a, Tensor::new(vec![m, k], matmul_raw(g.data(), &bt, m, n, k))?);
                }
                if self.nodes[b.0].requires_grad {
                    let at = transpose_raw(av.data(), m, k);
                    acc(*b, Tensor::new(vec![k, n], matmul_raw(&at, g.data(), k, m, n))?);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                acc(*a, Tensor::new(vec![n, m], transpose_raw(g.data(), m, n))?);
            }
            Op::Reshape(a) => acc(*a, g.clone().reshaped(val(*a).shape())?),
            Op::Conv2d { input, weight, stride } => {
                let (gi, gw) = conv2d_backward(val(*input), val(*weight), g, *stride);
                if self.nodes[input.0].requires_grad {
                    acc(*input, gi);
                }
                if self.nodes[weight.0].requires_grad {
                    acc(*weight, gw);
                }
            }
            Op::StackChannels(parts) => {
                let s = node.value.shape();
                let (j, c, plane) = (s[0], s[1], s[2] * s[3]);
                for (ci, &p) in parts.iter().enumerate() {
                    if !self.nodes[p.0].requires_grad {
                        continue;
                    }
                    let mut d = vec![T::zero(); j * plane];
                    for jj in 0..j {
                        let src = (jj * c + ci) * plane;
                        d[jj * plane..(jj + 1) * plane].copy_from_slice(&g.data()[src..src + plane]);
                    }
                    acc(p, Tensor::new(vec![j, s[2], s[3]], d)?);
                }
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, n, inner) = split_axis(y.shape(), *axis);
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let dot = (0..n).fold(T::zero(), |s, k| s + g.data()[idx(k)] * y.data()[idx(k)]);
                        for k in 0..n {
                            d[idx(k)] = y.data()[idx(k)] * (g.data()[idx(k)] - dot);
                        }
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::LogSoftmax { x, axis } => {
                let y = &node.value;
                let (outer, n, inner) = split_axis(y.shape(), *axis);
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let gs = (0..n).fold(T::zero(), |s, k| s + g.data()[idx(k)]);
                        for k in 0..n {
                            d[idx(k)] = g.data()[idx(k)] - y.data()[idx(k)].exp() * gs;
                        }
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::Sigmoid(a) => acc(*a, zip(g, &node.value, &|p, y| p * y * (T::one() - y))),
            Op::Gelu(a) => {
                let (k, c) = gelu_coeffs::<T>();
                let half = T::of(0.5);
                let three = T::of(3.0);
                acc(
                    *a,
                    zip(g, val(*a), &|p, x| {
                        let t = (k * (x + c * x * x * x)).tanh();
                        let dt = (T::one() - t * t) * k * (T::one() + three * c * x * x);
                        p * (half * (T::one() + t) + half * x * dt)
                    }),
                );
            }
            Op::Log(a) => acc(*a, zip(g, val(*a), &|p, x| p / x)),
            Op::Pow(a, e) => {
                let e = *e;
                if e == T::zero() {
                    acc(*a, Tensor::zeros(g.shape()));
                } else {
                    acc(*a, zip(g, val(*a), &|p, x| p * e * x.powf(e - T::one())));
                }
            }
            Op::ClampMin(a, lo) => {
                let lo = *lo;
                acc(*a, zip(g, val(*a), &|p, x| if x > lo { p } else { T::zero() }));
            }
            Op::LayerNorm { x, eps } => {
                let xv = val(*x);
                let (_, cols) = xv.rows_cols();
                let n = T::of(cols as f64);
                let mut d = Vec::with_capacity(xv.len());
                for ((xr, yr), gr) in xv.data().chunks(cols).zip(node.value.data().chunks(cols)).zip(g.data().chunks(cols)) {
                    let (_, rstd) = row_stats(xr, *eps);
                    let mg = gr.iter().fold(T::zero(), |s, &v| s + v) / n;
                    let mgy = gr.iter().zip(yr).fold(T::zero(), |s, (&a, &b)| s + a * b) / n;
                    d.extend(gr.iter().zip(yr).map(|(&gv, &yv)| rstd * (gv - mg - yv * mgy)));
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::SumAll(a) => acc(*a, Tensor::full(val(*a).shape(), g.item())),
            Op::MeanAll(a) => {
                let n = T::of(val(*a).len() as f64);
                acc(*a, Tensor::full(val(*a).shape(), g.item() / n));
            }
            Op::SumAxis { x, axis } => {
                let xs = val(*x).shape();
                let (outer, n, inner) = split_axis(xs, *axis);
                let mut d = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            d[(o * n + k) * inner + i] = g.data()[o * inner + i];
                        }
                    }
                }
                acc(*x, Tensor::new(xs.to_vec(), d)?);
            }
            Op::ConcatRows(parts) => {
                let cols = node.value.shape()[1];
                let mut off = 0;
                for &p in parts {
                    let r = val(p).shape()[0];
                    acc(p, Tensor::new(vec![r, cols], g.data()[off * cols..(off + r) * cols].to_vec())?);
                    off += r;
                }
            }
            Op::SliceRows { x, start } => {
                let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                let mut d = vec![T::zero(); r * c];
                d[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(*x, Tensor::new(vec![r, c], d)?);
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (node.value.shape()[0], node.value.shape()[1]);
                let mut off = 0;
                for &p in parts {
                    let w = val(p).shape()[1];
                    let d = (0..rows).flat_map(|i| g.data()[i * total + off..i * total + off + w].iter().copied()).collect();
                    acc(p, Tensor::new(vec![rows, w], d)?);
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                let w = node.value.shape()[1];
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + w].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                acc(*x, Tensor::new(vec![r, c], d)?);
            }
        }
        Ok(())
    }
}

fn row_stats<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::of(row.len() as f64);
    let mean = row.iter().fold(T::zero(), |s, &v| s + v) / n;
    let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / n;
    (mean, T::one() / (var + eps).sqrt())
}

pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Output spatial size of a valid (unpadded) convolution.
pub fn conv_out(len: usize, kernel: usize, stride: usize) -> usize {
    (len - kernel) / stride + 1
}

fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let (&[n, c, h, wd], &[j, c2, kh, kw]) = (x.shape(), w.shape()) else {
        return Err(Error::shape(format!("conv2d: input {:?}, weight {:?}", x.shape(), w.shape())));
    };
    if c != c2 || kh > h || kw > wd || stride == 0 {
        return Err(Error::shape(format!("conv2d: input {:?}, weight {:?}, stride {stride}", x.shape(), w.shape())));
    }
    let (oh, ow) = (conv_out(h, kh, stride), conv_out(wd, kw, stride));
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![T::zero(); n * j * oh * ow];
    for b in 0..n {
        for jj in 0..j {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = T::zero();
                    for cc in 0..c {
                        let xb = ((b * c + cc) * h + oy * stride) * wd + ox * stride;
                        let wb = (jj * c + cc) * kh * kw;
                        for ky in 0..kh {
                            let xr = &xd[xb + ky * wd..xb + ky * wd + kw];
                            let wr = &wdat[wb + ky * kw..wb + (ky + 1) * kw];
                            for (&xv, &wv) in xr.iter().zip(wr) {
                                s = s + xv * wv;
                            }
                        }
                    }
                    out[((b * j + jj) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    Tensor::new(vec![n, j, oh, ow], out)
}

fn conv2d_backward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, g: &Tensor<T>, stride: usize) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, wd] = x.shape()[..] else { unreachable!() };
    let [j, _, kh, kw] = w.shape()[..] else { unreachable!() };
    let (oh, ow) = (g.shape()[2], g.shape()[3]);
    let (xd, wdat, gd) = (x.data(), w.data(), g.data());
    let mut gx = vec![T::zero(); xd.len()];
    let mut gw = vec![T::zero(); wdat.len()];
    for b in 0..n {
        for jj in 0..j {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = gd[((b * j + jj) * oh + oy) * ow + ox];
                    if gv == T::zero() {
                        continue;
                    }
                    for cc in 0..c {
                        let xb = ((b * c + cc) * h + oy * stride) * wd + ox * stride;
                        let wb = (jj * c + cc) * kh * kw;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let xi = xb + ky * wd + kx;
                                let wi = wb + ky * kw + kx;
                                gw[wi] = gw[wi] + gv * xd[xi];
                                gx[xi] = gx[xi] + gv * wdat[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    (Tensor::new(x.shape().to_vec(), gx).expect("input shape"), Tensor::new(w.shape().to_vec(), gw).expect("weight shape"))
}

/// Result of [`Graph::backward`]: gradients for every leaf that requires one.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf. `None` for constants and for nodes created after the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every trainable parameter the graph referenced, in id order.
    pub fn params(&self) -> Vec<(ParamId, &Tensor<T>)> {
        self.params.iter().filter_map(|&(id, v)| self.wrt(v).map(|g| (id, g))).collect()
    }

    pub fn into_params(mut self) -> Vec<(ParamId, Tensor<T>)> {
        let params = std::mem::take(&mut self.params);
        params.into_iter().filter_map(|(id, v)| self.grads[v.0].take().map(|g| (id, g))).collect()
    }
}
