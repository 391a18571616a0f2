//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so a node's parents always have smaller ids and the
//! reverse sweep in [`Graph::backward`] is a plain reverse iteration.
//!
//! Trainable tensors live in a [`ParamStore`]; [`Graph::param`] brings one onto
//! the tape as a leaf and [`Gradients::accumulate`] adds the sweep's result back
//! into the store.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Variance guard used by [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

pub type ParamId = usize;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
            trainable: true,
        });
        self.params.len() - 1
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id].value
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id];
        if p.value.shape() != value.shape() {
            return Err(Error::dim(
                "ParamStore::set_value",
                format!("{}: {:?} vs {:?}", p.name, p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Transpose(usize),
    Sum(usize),
    Mean(usize),
    Relu(usize),
    Tanh(usize),
    Softmax(usize, usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    AddRow(usize, usize),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn broadcast_pair(a: &Tensor, b: &Tensor, op: &'static str) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.is_scalar() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::dim(
            op,
            format!("cannot combine shapes {:?} and {:?}", a.shape(), b.shape()),
        ))
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let shape = broadcast_pair(a, b, op)?;
    let n: usize = shape.iter().product();
    let at = |t: &Tensor, i: usize| if t.is_scalar() { t.item() } else { t.data()[i] };
    let data = (0..n).map(|i| f(at(a, i), at(b, i))).collect();
    Tensor::new(shape, data)
}

fn op_parents(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf | Op::Param => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
            vec![*a, *b]
        }
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Scale(a, _)
        | Op::Transpose(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Relu(a)
        | Op::Tanh(a)
        | Op::Softmax(a, _)
        | Op::SliceRows(a, _)
        | Op::SliceCols(a, _)
        | Op::Reshape(a) => vec![*a],
        Op::ConcatRows(p) | Op::ConcatCols(p) => p.clone(),
    }
}

/// Reduces a gradient to the operand's shape (sums when the operand was a broadcast scalar).
fn reduce_to(grad: Tensor, target: &Tensor) -> Tensor {
    if grad.shape() == target.shape() {
        grad
    } else {
        Tensor::full(target.shape(), grad.sum())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Parent ids of a node (always smaller than the node's own id).
    pub fn parents(&self, v: Var) -> Vec<usize> {
        op_parents(&self.nodes[v.0].op)
    }

    fn push(&mut self, value: Tensor, op: Op, op_name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param => true,
            _ => op_parents(&op)
                .iter()
                .any(|&p| self.nodes[p].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input (never receives a gradient).
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, "constant")
    }

    /// Differentiable input that is not a stored parameter.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        let v = self.push(value, Op::Leaf, "input")?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    /// Brings parameter `id` onto the tape; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param, "param")?;
        self.nodes[v.0].requires_grad = p.trainable;
        self.param_vars.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Op::MatMul(a.0, b.0), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = zip_broadcast(self.value(a), self.value(b), "add", |x, y| x + y)?;
        self.push(v, Op::Add(a.0, b.0), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = zip_broadcast(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a.0, b.0), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = zip_broadcast(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a.0, b.0), "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a.0, s), "scale")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        self.push(v, Op::Transpose(a.0), "transpose")
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn reduce_sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a.0), "reduce_sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(v, Op::Mean(a.0), "mean")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a.0), "relu")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a.0), "tanh")
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a).softmax(axis)?;
        self.push(v, Op::Softmax(a.0, axis), "softmax")
    }

    /// Normalises every slice along the last axis to zero mean and unit
    /// variance, then applies the affine map `γ·x̂ + β` (`γ`, `β` are `[1 × n]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xt = self.value(x);
        let n = *xt.shape().last().unwrap_or(&1);
        let rows = xt.numel() / n;
        let gt = self.value(gamma);
        let bt = self.value(beta);
        if gt.numel() != n || bt.numel() != n {
            return Err(Error::dim(
                "layer_norm",
                format!("affine terms must have {n} entries"),
            ));
        }
        let mut xhat = vec![0.0; xt.numel()];
        let mut out = vec![0.0; xt.numel()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let s = &xt.data()[r * n..(r + 1) * n];
            let mu = s.iter().sum::<f64>() / n as f64;
            let var = s.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(inv);
            for j in 0..n {
                let h = (s[j] - mu) * inv;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gt.data()[j] + bt.data()[j];
            }
        }
        let shape = xt.shape().to_vec();
        let xhat = Tensor::new(shape.clone(), xhat)?;
        let v = Tensor::new(shape, out)?;
        self.push(
            v,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    /// Adds a `[1 × n]` row to every row of an `[m × n]` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let xt = self.value(x);
        let (m, n) = xt.dims2("add_row")?;
        let rt = self.value(row);
        if rt.shape() != [1, n] {
            return Err(Error::dim(
                "add_row",
                format!("row shape {:?} does not fit {m}x{n}", rt.shape()),
            ));
        }
        let mut data = xt.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += rt.data()[j];
            }
        }
        let v = Tensor::new(vec![m, n], data)?;
        self.push(v, Op::AddRow(x.0, row.0), "add_row")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).slice_rows(start, len)?;
        self.push(v, Op::SliceRows(a.0, start), "slice_rows")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).slice_cols(start, len)?;
        self.push(v, Op::SliceCols(a.0, start), "slice_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&ts)?;
        self.push(v, Op::ConcatRows(parts.iter().map(|p| p.0).collect()), "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&ts)?;
        self.push(v, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), "concat_cols")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        self.push(v, Op::Reshape(a.0), "reshape")
    }

    /// `Σ (a − b)²` as a one-element tensor.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.reduce_sum(sq)
    }

    /// Reverse sweep from a one-element, gradient-carrying `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        if !self.requires_grad(loss) {
            return Err(Error::Usage(
                "backward on a value that does not depend on any parameter".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lt.shape()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let contributions = self.local_grads(node, &g)?;
            for (p, pg) in contributions {
                if !self.nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[i] = Some(g);
        }

        Ok(Gradients {
            grads,
            params: self.param_vars.iter().map(|(&id, &v)| (id, v.0)).collect(),
        })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let val = |i: usize| &self.nodes[i].value;
        let need = |i: usize| self.nodes[i].requires_grad;
        Ok(match &node.op {
            Op::Leaf | Op::Param => vec![],
            Op::MatMul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if need(*a) {
                    out.push((*a, g.matmul_t(val(*b))?));
                }
                if need(*b) {
                    out.push((*b, val(*a).t_matmul(g)?));
                }
                out
            }
            Op::Add(a, b) => vec![
                (*a, reduce_to(g.clone(), val(*a))),
                (*b, reduce_to(g.clone(), val(*b))),
            ],
            Op::Sub(a, b) => vec![
                (*a, reduce_to(g.clone(), val(*a))),
                (*b, reduce_to(g.scale(-1.0), val(*b))),
            ],
            Op::Mul(a, b) => {
                let ga = zip_broadcast(g, val(*b), "mul'", |x, y| x * y)?;
                let gb = zip_broadcast(g, val(*a), "mul'", |x, y| x * y)?;
                vec![(*a, reduce_to(ga, val(*a))), (*b, reduce_to(gb, val(*b)))]
            }
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::Transpose(a) => vec![(*a, g.transpose()?)],
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::Mean(a) => {
                let n = val(*a).numel() as f64;
                vec![(*a, Tensor::full(val(*a).shape(), g.item() / n))]
            }
            Op::Relu(a) => {
                let x = val(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                vec![(*a, Tensor::new(x.shape().to_vec(), data)?)]
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&yv, &gv)| gv * (1.0 - yv * yv))
                    .collect();
                vec![(*a, Tensor::new(y.shape().to_vec(), data)?)]
            }
            Op::Softmax(a, axis) => {
                let y = &node.value;
                let (outer, len, inner) = y.axis_split(*axis, "softmax'")?;
                let mut dx = vec![0.0; y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g.data()[idx(k)] * y.data()[idx(k)]).sum();
                        for k in 0..len {
                            dx[idx(k)] = y.data()[idx(k)] * (g.data()[idx(k)] - dot);
                        }
                    }
                }
                vec![(*a, Tensor::new(y.shape().to_vec(), dx)?)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = *xhat.shape().last().unwrap_or(&1);
                let rows = xhat.numel() / n;
                let gm = val(*gamma).data();
                let mut dx = vec![0.0; xhat.numel()];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for r in 0..rows {
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let hr = &xhat.data()[r * n..(r + 1) * n];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..n {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let dh = gr[j] * gm[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                    }
                    let k = rstd[r] / n as f64;
                    for j in 0..n {
                        let dh = gr[j] * gm[j];
                        dx[r * n + j] = k * (n as f64 * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                vec![
                    (*x, Tensor::new(xhat.shape().to_vec(), dx)?),
                    (*gamma, Tensor::new(val(*gamma).shape().to_vec(), dgamma)?),
                    (*beta, Tensor::new(val(*beta).shape().to_vec(), dbeta)?),
                ]
            }
            Op::AddRow(x, row) => {
                let (m, n) = g.dims2("add_row'")?;
                let mut dr = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        dr[j] += g.data()[i * n + j];
                    }
                }
                vec![(*x, g.clone()), (*row, Tensor::new(vec![1, n], dr)?)]
            }
            Op::SliceRows(a, start) => {
                let src = val(*a);
                let (_, c) = src.dims2("slice_rows'")?;
                let mut full = Tensor::zeros(src.shape());
                let off = start * c;
                full.data_mut()[off..off + g.numel()].copy_from_slice(g.data());
                vec![(*a, full)]
            }
            Op::SliceCols(a, start) => {
                let src = val(*a);
                let (r, c) = src.dims2("slice_cols'")?;
                let (_, w) = g.dims2("slice_cols'")?;
                let mut full = Tensor::zeros(src.shape());
                for i in 0..r {
                    full.data_mut()[i * c + start..i * c + start + w]
                        .copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                vec![(*a, full)]
            }
            Op::ConcatRows(parts) => {
                let mut out = Vec::with_capacity(parts.len());
                let mut row = 0;
                for &p in parts {
                    let (r, _) = val(p).dims2("concat_rows'")?;
                    out.push((p, g.slice_rows(row, r)?));
                    row += r;
                }
                out
            }
            Op::ConcatCols(parts) => {
                let mut out = Vec::with_capacity(parts.len());
                let mut col = 0;
                for &p in parts {
                    let (_, c) = val(p).dims2("concat_cols'")?;
                    out.push((p, g.slice_cols(col, c)?));
                    col += c;
                }
                out
            }
            Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape())?)],
        })
    }
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to a node, if the node was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds every parameter gradient into `store` (unreached parameters are untouched).
    pub fn accumulate(&self, store: &mut ParamStore) -> Result<()> {
        let mut params = self.params.clone();
        params.sort_unstable();
        for (id, node) in params {
            if let Some(g) = &self.grads[node] {
                store.get_mut(id).grad.add_assign(g)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_parameter_has_unit_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.0, 1.5]).unwrap());
        let mut g = Graph::new();
        let wv = g.param(&store, w).unwrap();
        let loss = g.reduce_sum(wv).unwrap();
        g.backward(loss).unwrap().accumulate(&mut store).unwrap();
        assert_eq!(store.get(w).grad, Tensor::ones(&[2, 3]));
    }

    #[test]
    fn squared_norm_gradient_is_twice_value() {
        let mut store = ParamStore::new();
        let value = Tensor::new(vec![4], vec![1.0, -2.0, 0.25, 3.0]).unwrap();
        let w = store.add("w", value.clone());
        let mut g = Graph::new();
        let wv = g.param(&store, w).unwrap();
        let sq = g.mul(wv, wv).unwrap();
        let loss = g.reduce_sum(sq).unwrap();
        g.backward(loss).unwrap().accumulate(&mut store).unwrap();
        assert_eq!(store.get(w).grad, value.scale(2.0));
    }

    #[test]
    fn unused_parameter_keeps_zero_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::ones(&[2]));
        let b = store.add("b", Tensor::ones(&[3]));
        let mut g = Graph::new();
        let av = g.param(&store, a).unwrap();
        let _bv = g.param(&store, b).unwrap();
        let loss = g.reduce_sum(av).unwrap();
        g.backward(loss).unwrap().accumulate(&mut store).unwrap();
        assert_eq!(store.get(b).grad, Tensor::zeros(&[3]));
    }

    #[test]
    fn backward_on_matrix_is_usage_error() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::ones(&[2, 2]));
        let mut g = Graph::new();
        let av = g.param(&store, a).unwrap();
        assert!(matches!(g.backward(av), Err(Error::Usage(_))));
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[-1.0, 2.0])).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero_before_affine() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[3.0, 3.0, 3.0, 3.0])).unwrap();
        let gamma = g.constant(Tensor::ones(&[1, 4])).unwrap();
        let beta = g.constant(Tensor::zeros(&[1, 4])).unwrap();
        let y = g.layer_norm(x, gamma, beta).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn broadcasting_beyond_scalar_is_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[1, 3])).unwrap();
        assert!(matches!(g.add(a, b), Err(Error::Dimension { .. })));
        let s = g.constant(Tensor::scalar(2.0)).unwrap();
        assert!(g.mul(a, s).is_ok());
    }

    #[test]
    fn reduce_sum_gradient_is_ones_of_input_shape() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[3, 2])).unwrap();
        let s = g.reduce_sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &Tensor::ones(&[3, 2]));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(f64::MAX)).unwrap();
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn parents_precede_children() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::ones(&[2, 2]));
        let mut g = Graph::new();
        let x = g.constant(Tensor::eye(2)).unwrap();
        let wv = g.param(&store, w).unwrap();
        let y = g.matmul(x, wv).unwrap();
        let z = g.softmax(y, 1).unwrap();
        let s = g.reduce_sum(z).unwrap();
        for i in 0..g.len() {
            for p in g.parents(Var(i)) {
                assert!(p < i);
            }
        }
        assert!(g.requires_grad(s));
    }
}
