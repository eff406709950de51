//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass. Nodes
//! are appended in evaluation order, so the tape is topologically sorted by
//! construction and [`Graph::backward`] is a single reverse sweep.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gelu, gelu_grad, gemm_nt, gemm_tn, moments, sigmoid, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

/// Named trainable tensors, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Accumulated parameter gradients, aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.values.iter().map(|v| Tensor::zeros(v.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flat_map(|g| g.data()).all(|v| v.is_finite())
    }
}

/// A fused operation with a hand-written backward pass.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, in input order.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    ScaleBy(Var, Var),
    Gather(Var, Vec<Option<u32>>),
    ConcatCols(Vec<Var>),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-leaf gradients produced by [`Graph::backward`].
pub struct LeafGrads {
    grads: Vec<Option<Tensor>>,
}

impl LeafGrads {
    /// Gradient of the loss with respect to a leaf, or zeros if the loss does
    /// not depend on it.
    pub fn get(&self, g: &Graph, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(store.get(id).clone(), Op::Leaf);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_with(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `x[.., n] + b[n]`, broadcasting `b` over every leading position.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rank() != 1 || bv.len() != xv.last_dim() {
            return Err(shape_err("add_row", xv, bv));
        }
        let n = bv.len();
        let mut out = xv.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv.data()[i % n];
        }
        Ok(self.push(out, Op::AddRow(x, b)))
    }

    /// `mul * x + add` with constant coefficients.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let out = self.value(x).map(|v| mul * v + add);
        self.push(out, Op::Affine(x, mul))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.affine(x, k, 0.0)
    }

    /// Multiplies every element of `x` by the single-element node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(shape_err("scale_by", self.value(x), sv));
        }
        let k = sv.item();
        let out = self.value(x).scale(k);
        Ok(self.push(out, Op::ScaleBy(x, s)))
    }

    /// `out[i] = x[map[i]]`, or zero where `map[i]` is `None`.
    pub fn gather(&mut self, x: Var, shape: Vec<usize>, map: Vec<Option<u32>>) -> Result<Var> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != map.len() || map.iter().flatten().any(|&i| i as usize >= xv.len()) {
            return Err(Error::Shape {
                op: "gather",
                lhs: xv.shape().to_vec(),
                rhs: shape,
            });
        }
        let data = map
            .iter()
            .map(|m| m.map_or(0.0, |i| xv.data()[i as usize]))
            .collect();
        Ok(self.push(Tensor::raw(shape, data), Op::Gather(x, map)))
    }

    /// Columns `[start, start + len)` of a 2-D node.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if xv.rank() != 2 || start + len > cols || len == 0 {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: xv.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let map = (0..rows)
            .flat_map(|r| (0..len).map(move |c| Some((r * cols + start + c) as u32)))
            .collect();
        self.gather(x, vec![rows, len], map)
    }

    /// Selected rows of a 2-D node, in the given order.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if rows.is_empty() || rows.iter().any(|&r| r >= xv.rows()) {
            return Err(Error::Shape {
                op: "select_rows",
                lhs: xv.shape().to_vec(),
                rhs: rows.to_vec(),
            });
        }
        let map = rows
            .iter()
            .flat_map(|&r| (0..cols).map(move |c| Some((r * cols + c) as u32)))
            .collect();
        self.gather(x, vec![rows.len(), cols], map)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: xv.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (xv.rows(), xv.cols());
        let map = (0..n)
            .flat_map(|j| (0..m).map(move |i| Some((i * n + j) as u32)))
            .collect();
        self.gather(x, vec![n, m], map)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let rows = first.rows();
        let mut cols = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() != 2 || pv.rows() != rows {
                return Err(shape_err("concat_cols", first, pv));
            }
            cols += pv.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(Tensor::raw(vec![rows, cols], data), Op::ConcatCols(parts.to_vec())))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).relu();
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::abs);
        self.push(out, Op::Abs(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp(x, lo, hi))
    }

    pub fn softmax(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let out = self.value(x).softmax_lastdim(mask.as_deref())?;
        Ok(self.push(out, Op::Softmax(x)))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let out = xv.layer_norm(self.value(gamma), self.value(beta), eps)?;
        let c = xv.last_dim();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.outer());
        for r in 0..xv.outer() {
            let row = xv.row(r);
            let (mean, is) = moments(row, eps);
            inv_std.push(is);
            xhat.extend(row.iter().map(|v| (v - mean) * is));
        }
        debug_assert_eq!(xhat.len(), xv.outer() * c);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Dense linear map `x W + b` over the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Appends a fused node whose value was computed by the caller.
    pub fn custom(&mut self, inputs: Vec<Var>, output: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(output, Op::Custom(inputs, op))
    }

    /// Reverse sweep from a scalar `loss`, returning gradients for every leaf.
    pub fn backward(&self, loss: Var) -> Result<LeafGrads> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::raw(lv.shape().to_vec(), vec![1.0]));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(LeafGrads { grads })
    }

    /// Runs [`Graph::backward`] and adds the parameter gradients into `acc`.
    pub fn backward_params(&self, loss: Var, acc: &mut Gradients) -> Result<()> {
        let leaf = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, &leaf.grads[i]) {
                acc.grads[id.0].add_assign(g);
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut send = |v: Var, d: Tensor| match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&d),
            slot @ None => *slot = Some(d),
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let mut da = vec![0.0; m * k];
                gemm_nt(g.data(), bv.data(), &mut da, m, n, k);
                let mut db = vec![0.0; k * n];
                gemm_tn(av.data(), g.data(), &mut db, k, m, n);
                send(*a, Tensor::raw(vec![m, k], da));
                send(*b, Tensor::raw(vec![k, n], db));
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                send(*a, g.zip_with(val(*b), "mul", |x, y| x * y).unwrap());
                send(*b, g.zip_with(val(*a), "mul", |x, y| x * y).unwrap());
            }
            Op::AddRow(x, b) => {
                let n = val(*b).len();
                let mut db = vec![0.0; n];
                for (i, v) in g.data().iter().enumerate() {
                    db[i % n] += v;
                }
                send(*x, g.clone());
                send(*b, Tensor::raw(vec![n], db));
            }
            Op::Affine(x, mul) => send(*x, g.scale(*mul)),
            Op::ScaleBy(x, s) => {
                let k = val(*s).item();
                let ds = g.dot(val(*x)).unwrap();
                send(*x, g.scale(k));
                send(*s, Tensor::raw(val(*s).shape().to_vec(), vec![ds]));
            }
            Op::Gather(x, map) => {
                let xv = val(*x);
                let mut dx = vec![0.0; xv.len()];
                for (o, m) in map.iter().enumerate() {
                    if let Some(i) = m {
                        dx[*i as usize] += g.data()[o];
                    }
                }
                send(*x, Tensor::raw(xv.shape().to_vec(), dx));
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).cols();
                    let mut d = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                    }
                    offset += c;
                    send(p, Tensor::raw(vec![rows, c], d));
                }
            }
            Op::Gelu(x) => send(*x, g.zip_with(val(*x), "gelu", |d, v| d * gelu_grad(v)).unwrap()),
            Op::Relu(x) => send(
                *x,
                g.zip_with(val(*x), "relu", |d, v| if v > 0.0 { d } else { 0.0 }).unwrap(),
            ),
            Op::Sigmoid(x) => send(
                *x,
                g.zip_with(&node.value, "sigmoid", |d, s| d * s * (1.0 - s)).unwrap(),
            ),
            Op::Abs(x) => send(*x, g.zip_with(val(*x), "abs", |d, v| d * v.signum()).unwrap()),
            Op::Clamp(x, lo, hi) => send(
                *x,
                g.zip_with(val(*x), "clamp", |d, v| if v > *lo && v < *hi { d } else { 0.0 })
                    .unwrap(),
            ),
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.last_dim();
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.outer() {
                    let span = r * c..(r + 1) * c;
                    let (yr, gr) = (&y.data()[span.clone()], &g.data()[span.clone()]);
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[span.start + j] = yr[j] * (gr[j] - inner);
                    }
                }
                send(*x, Tensor::raw(y.shape().to_vec(), dx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = val(*gamma).data();
                let c = gam.len();
                let rows = inv_std.len();
                let mut dx = vec![0.0; rows * c];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for r in 0..rows {
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let xh = &xhat[r * c..(r + 1) * c];
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..c {
                        dgamma[j] += gr[j] * xh[j];
                        dbeta[j] += gr[j];
                        let dxh = gr[j] * gam[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                    }
                    mean_dxh /= c as f64;
                    mean_dxh_xh /= c as f64;
                    for j in 0..c {
                        let dxh = gr[j] * gam[j];
                        dx[r * c + j] = inv_std[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                send(*x, Tensor::raw(val(*x).shape().to_vec(), dx));
                send(*gamma, Tensor::raw(vec![c], dgamma));
                send(*beta, Tensor::raw(vec![c], dbeta));
            }
            Op::Sum(x) => send(*x, Tensor::full(val(*x).shape(), g.item())),
            Op::Custom(inputs, op) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let outs = op.backward(&ins, &node.value, g);
                debug_assert_eq!(outs.len(), inputs.len(), "{}", op.name());
                for (&v, d) in inputs.iter().zip(outs) {
                    send(v, d);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let mut g = Graph::new();
        let pv = g.param(&store, p);
        let loss = g.sum(pv);
        let mut grads = Gradients::zeros_like(&store);
        g.backward_params(loss, &mut grads).unwrap();
        assert_eq!(grads.get(p), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn dot_gradient_is_twice_input_and_accumulates() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::new(vec![3], vec![1.0, -2.0, 0.25]).unwrap());
        let mut g = Graph::new();
        let a = g.param(&store, p);
        let sq = g.mul(a, a).unwrap();
        let loss = g.sum(sq);
        let mut grads = Gradients::zeros_like(&store);
        g.backward_params(loss, &mut grads).unwrap();
        assert_eq!(grads.get(p).data(), &[2.0, -4.0, 0.5]);
        g.backward_params(loss, &mut grads).unwrap();
        assert_eq!(grads.get(p).data(), &[4.0, -8.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]).unwrap());
        let a = g.slice_cols(x, 0, 1).unwrap();
        let b = g.slice_cols(x, 1, 2).unwrap();
        let y = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.value(x), g.value(y));
        let t = g.transpose(x).unwrap();
        assert_eq!(g.value(t), &g.value(x).transpose().unwrap());
    }
}
