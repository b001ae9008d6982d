use std::collections::{BTreeMap, HashMap};

use super::tensor::{matmul_into, strides, transpose_last2};
use super::{NumericsError, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    /// Parameters, constants, and any result that does not need a gradient.
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>, usize),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Mean(Var, usize),
    Sum(Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        /// Normalized activations and inverse standard deviation per row.
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Transpose(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of named tunable parameters.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.map.get(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.map
    }
}

/// Append-only tape of tensor operations.
///
/// Nodes are recorded with their inputs only when some input requires a
/// gradient; otherwise the result is stored as a plain leaf.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    named: HashMap<String, Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn mismatch(op: &'static str, shapes: &[&[usize]]) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

fn broadcast_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>, NumericsError> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(mismatch(op, &[a, b])),
        };
    }
    Ok(out)
}

/// For every flat index of `out`, the flat index into a tensor of shape `input`
/// broadcast against it.
fn broadcast_map(out: &[usize], input: &[usize]) -> Vec<usize> {
    let total: usize = out.iter().product();
    // fast path: `input` (minus leading ones) is a suffix of `out`, as for biases
    let lead = input.iter().take_while(|&&d| d == 1).count();
    let core = &input[lead..];
    if out.ends_with(core) {
        let len = core.iter().product::<usize>();
        return (0..total / len).flat_map(|_| 0..len).collect();
    }
    let n = out.len();
    let in_strides = strides(input);
    let mut eff = vec![0; n];
    for i in 0..input.len() {
        let o = n - input.len() + i;
        eff[o] = if input[i] == 1 { 0 } else { in_strides[i] };
    }
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0; n];
    let mut pos = 0usize;
    for _ in 0..total {
        map.push(pos);
        for ax in (0..n).rev() {
            idx[ax] += 1;
            pos += eff[ax];
            if idx[ax] < out[ax] {
                break;
            }
            pos -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// Sums `grad` (shaped like the broadcast output) back down to `shape`.
fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let map = broadcast_map(grad.shape(), shape);
    let mut out = Tensor::zeros(shape);
    let o = out.data_mut();
    for (g, &i) in grad.data().iter().zip(&map) {
        o[i] += g;
    }
    out
}

/// Splits `shape` around `axis` into (outer, extent, inner) sizes.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_dim(shape: &[usize]) -> (usize, usize) {
    let d = *shape.last().unwrap();
    (shape.iter().product::<usize>() / d, d)
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Number of nodes holding a recorded operation (not leaves).
    pub fn recorded_ops(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .count()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Named leaf. Binding the same name twice returns the first leaf.
    pub fn param(&mut self, name: &str, value: &Tensor, requires_grad: bool) -> Var {
        if let Some(&v) = self.named.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, requires_grad);
        self.named.insert(name.to_string(), v);
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Matrix product. Accepts `[.., k] · [k, n]` (leading axes of the left
    /// operand are flattened) and batched `[b.., m, k] · [b.., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = matmul_values(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = binary(self.value(a), self.value(b), "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = binary(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, NumericsError> {
        let first = self.value(inputs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(NumericsError::Axis {
                op: "concat",
                axis,
                shape: first,
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                let shapes: Vec<&[usize]> = inputs.iter().map(|&v| self.shape(v)).collect();
                return Err(mismatch("concat", &shapes));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(inputs);
        Ok(self.push(out, Op::Concat(inputs.to_vec(), axis), rg))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(NumericsError::Axis {
                op: "slice",
                axis,
                shape,
            });
        }
        if start >= end || end > shape[axis] {
            return Err(mismatch("slice", &[&shape, &[start, end]]));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = end - start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let out = Tensor::new(&out_shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Slice { input: a, axis, start }, rg))
    }

    /// Mean over `axis`; the axis is removed (a 1-D input yields shape `[1]`).
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(NumericsError::Axis {
                op: "mean",
                axis,
                shape,
            });
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..extent {
                let row = &src[(o * extent + k) * inner..(o * extent + k + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let n = extent as f64;
        for d in &mut data {
            *d /= n;
        }
        let mut out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &d)| d)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out = Tensor::new(&out_shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Mean(a, axis), rg))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu_scalar);
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        let x = self.value(a);
        if !x.is_finite() {
            return Err(NumericsError::NonFinite { op: "softmax" });
        }
        let (rows, d) = last_dim(x.shape());
        let mut data = x.data().to_vec();
        for r in 0..rows {
            softmax_row(&mut data[r * d..(r + 1) * d]);
        }
        let out = Tensor::new(x.shape(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of
    /// shape `[d]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let (rows, d) = last_dim(xv.shape());
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(mismatch(
                "layer_norm",
                &[xv.shape(), self.shape(gamma), self.shape(beta)],
            ));
        }
        if !xv.is_finite() {
            return Err(NumericsError::NonFinite { op: "layer_norm" });
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let src = xv.data();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let (mean, inv) = layer_norm_stats(row, eps);
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Mean cross-entropy of `[n, c]` logits against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericsError> {
        let lv = self.value(logits);
        if lv.ndim() != 2 || lv.shape()[0] != targets.len() {
            return Err(mismatch("cross_entropy", &[lv.shape(), &[targets.len()]]));
        }
        if !lv.is_finite() {
            return Err(NumericsError::NonFinite {
                op: "cross_entropy",
            });
        }
        let (n, c) = (lv.shape()[0], lv.shape()[1]);
        let mut probs = lv.data().to_vec();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(NumericsError::Target {
                    target: t,
                    classes: c,
                });
            }
            let row = &lv.data()[r * c..(r + 1) * c];
            total += log_sum_exp(row) - row[t];
            softmax_row(&mut probs[r * c..(r + 1) * c]);
        }
        let out = Tensor::scalar(total / n as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Divides each last-axis row by its Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        if !xv.is_finite() {
            return Err(NumericsError::NonFinite { op: "l2_normalize" });
        }
        let (rows, d) = last_dim(xv.shape());
        let mut data = xv.data().to_vec();
        let mut norms = vec![0.0; rows];
        for r in 0..rows {
            let row = &mut data[r * d..(r + 1) * d];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(NumericsError::ZeroNorm { op: "l2_normalize" });
            }
            norms[r] = n;
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        let out = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::L2Normalize { x, norms }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(NumericsError::Axis {
                op: "transpose",
                axis: 1,
                shape,
            });
        }
        let n = shape.len();
        let (r, c) = (shape[n - 2], shape[n - 1]);
        let batch = shape[..n - 2].iter().product();
        let data = transpose_last2(self.value(a).data(), batch, r, c);
        let mut out_shape = shape;
        out_shape.swap(n - 2, n - 1);
        let out = Tensor::new(&out_shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Reverse pass from a scalar `loss`; returns gradients of every named
    /// parameter leaf that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut map = BTreeMap::new();
        for (name, &v) in &self.named {
            if v.0 <= loss.0 && self.nodes[v.0].requires_grad {
                let g = grads[v.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
                map.insert(name.clone(), g);
            }
        }
        Ok(Gradients { map })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.value(v).shape());
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (need_a, need_b) = (self.requires_grad(*a), self.requires_grad(*b));
                let (ga, gb) = matmul_backward(self.value(*a), self.value(*b), g, need_a, need_b);
                if let Some(ga) = ga {
                    self.accumulate(grads, *a, ga);
                }
                if let Some(gb) = gb {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, reduce_to(g, self.shape(*a)));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, reduce_to(g, self.shape(*b)));
                }
            }
            Op::Mul(a, b) => {
                let out_shape = g.shape();
                if self.requires_grad(*a) {
                    let bmap = broadcast_map(out_shape, self.shape(*b));
                    let bd = self.value(*b).data();
                    let prod: Vec<f64> = g.data().iter().zip(&bmap).map(|(x, &j)| x * bd[j]).collect();
                    let prod = Tensor::new(out_shape, prod).unwrap();
                    self.accumulate(grads, *a, reduce_to(&prod, self.shape(*a)));
                }
                if self.requires_grad(*b) {
                    let amap = broadcast_map(out_shape, self.shape(*a));
                    let ad = self.value(*a).data();
                    let prod: Vec<f64> = g.data().iter().zip(&amap).map(|(x, &j)| x * ad[j]).collect();
                    let prod = Tensor::new(out_shape, prod).unwrap();
                    self.accumulate(grads, *b, reduce_to(&prod, self.shape(*b)));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * c)),
            Op::Concat(inputs, axis) => {
                let (outer, _, inner) = split_axis(g.shape(), *axis);
                let total = g.shape()[*axis];
                let mut offset = 0;
                for &v in inputs {
                    let s = self.shape(v).to_vec();
                    let ext = s[*axis];
                    if self.requires_grad(v) {
                        let mut data = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            data.extend_from_slice(&g.data()[base..base + ext * inner]);
                        }
                        self.accumulate(grads, v, Tensor::new(&s, data).unwrap());
                    }
                    offset += ext;
                }
            }
            Op::Slice { input, axis, start } => {
                let s = self.shape(*input).to_vec();
                let (outer, extent, inner) = split_axis(&s, *axis);
                let len = g.shape()[*axis];
                let mut full = Tensor::zeros(&s);
                let fd = full.data_mut();
                for o in 0..outer {
                    let dst = (o * extent + start) * inner;
                    let src = o * len * inner;
                    fd[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accumulate(grads, *input, full);
            }
            Op::Mean(a, axis) => {
                let s = self.shape(*a).to_vec();
                let (outer, extent, inner) = split_axis(&s, *axis);
                let n = extent as f64;
                let mut full = Tensor::zeros(&s);
                let fd = full.data_mut();
                for o in 0..outer {
                    for k in 0..extent {
                        for j in 0..inner {
                            fd[(o * extent + k) * inner + j] = g.data()[o * inner + j] / n;
                        }
                    }
                }
                self.accumulate(grads, *a, full);
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let data = g
                    .data()
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape(), data).unwrap());
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let data = g.data().iter().zip(x).map(|(gv, &xv)| gv * gelu_grad(xv)).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape(), data).unwrap());
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let (rows, d) = last_dim(g.shape());
                let mut data = vec![0.0; rows * d];
                for r in 0..rows {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        data[r * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(g.shape(), data).unwrap());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (rows, d) = last_dim(g.shape());
                let gd = g.data();
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += gd[r * d + j] * xhat[r * d + j];
                            db[j] += gd[r * d + j];
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::new(&[d], dg).unwrap());
                    self.accumulate(grads, *beta, Tensor::new(&[d], db).unwrap());
                }
                if self.requires_grad(*x) {
                    let gam = self.value(*gamma).data();
                    let mut dx = vec![0.0; rows * d];
                    let n = d as f64;
                    for r in 0..rows {
                        let mut mean_dy = 0.0;
                        let mut mean_dy_xhat = 0.0;
                        for j in 0..d {
                            let dy = gd[r * d + j] * gam[j];
                            mean_dy += dy;
                            mean_dy_xhat += dy * xhat[r * d + j];
                        }
                        mean_dy /= n;
                        mean_dy_xhat /= n;
                        for j in 0..d {
                            let dy = gd[r * d + j] * gam[j];
                            dx[r * d + j] = inv_std[r] * (dy - mean_dy - xhat[r * d + j] * mean_dy_xhat);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(g.shape(), dx).unwrap());
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let s = self.shape(*logits).to_vec();
                let (n, c) = (s[0], s[1]);
                let scale = g.item() / n as f64;
                let mut data = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    data[r * c + t] -= 1.0;
                }
                for v in &mut data {
                    *v *= scale;
                }
                self.accumulate(grads, *logits, Tensor::new(&s, data).unwrap());
            }
            Op::L2Normalize { x, norms } => {
                let y = node.value.data();
                let (rows, d) = last_dim(g.shape());
                let mut data = vec![0.0; rows * d];
                for r in 0..rows {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        data[r * d + j] = (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(g.shape(), data).unwrap());
            }
            Op::Transpose(a) => {
                let s = g.shape();
                let n = s.len();
                let batch = s[..n - 2].iter().product();
                let data = transpose_last2(g.data(), batch, s[n - 2], s[n - 1]);
                self.accumulate(grads, *a, Tensor::new(self.shape(*a), data).unwrap());
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, g.reshape(self.shape(*a)).unwrap());
            }
        }
    }
}

/// Mean and inverse standard deviation of a row (biased variance).
pub(crate) fn layer_norm_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

pub(crate) fn softmax_row(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn binary(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, NumericsError> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape(), data);
    }
    let shape = broadcast_shape(a.shape(), b.shape(), op)?;
    if shape == a.shape() {
        // common case: `b` broadcasts along leading axes only
        let lead = b.shape().iter().take_while(|&&d| d == 1).count();
        if shape.ends_with(&b.shape()[lead..]) {
            let bd = b.data();
            let data = a.data().chunks(bd.len()).flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| f(x, y))).collect();
            return Tensor::new(&shape, data);
        }
    }
    let amap = broadcast_map(&shape, a.shape());
    let bmap = broadcast_map(&shape, b.shape());
    let (ad, bd) = (a.data(), b.data());
    let data = amap.iter().zip(&bmap).map(|(&i, &j)| f(ad[i], bd[j])).collect();
    Tensor::new(&shape, data)
}

/// Resolves matmul operands into (batch, m, k, n, rhs_shared) and the output shape.
fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize, bool, Vec<usize>), NumericsError> {
    if a.is_empty() || b.len() < 2 {
        return Err(mismatch("matmul", &[a, b]));
    }
    if b.len() == 2 {
        let k = *a.last().unwrap();
        if k != b[0] {
            return Err(mismatch("matmul", &[a, b]));
        }
        let m = a.iter().product::<usize>() / k;
        let mut out = a.to_vec();
        *out.last_mut().unwrap() = b[1];
        return Ok((1, m, k, b[1], true, out));
    }
    let n = a.len();
    if n != b.len() || a[..n - 2] != b[..n - 2] || a[n - 1] != b[n - 2] {
        return Err(mismatch("matmul", &[a, b]));
    }
    let batch = a[..n - 2].iter().product();
    let mut out = a.to_vec();
    out[n - 1] = b[n - 1];
    Ok((batch, a[n - 2], a[n - 1], b[n - 1], false, out))
}

fn matmul_values(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (batch, m, k, n, shared, shape) = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let ad = &a.data()[bi * m * k..(bi + 1) * m * k];
        let bd = if shared { b.data() } else { &b.data()[bi * k * n..(bi + 1) * k * n] };
        matmul_into(ad, bd, &mut out[bi * m * n..(bi + 1) * m * n], m, k, n);
    }
    Tensor::new(&shape, out)
}

fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    g: &Tensor,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (batch, m, k, n, shared, _) = matmul_dims(a.shape(), b.shape()).unwrap();
    let mut ga = vec![0.0; if need_a { a.len() } else { 0 }];
    let mut gb = vec![0.0; if need_b { b.len() } else { 0 }];
    for bi in 0..batch {
        let ad = &a.data()[bi * m * k..(bi + 1) * m * k];
        let bd = if shared { b.data() } else { &b.data()[bi * k * n..(bi + 1) * k * n] };
        let gd = &g.data()[bi * m * n..(bi + 1) * m * n];
        if need_a {
            // dA = G · Bᵀ
            let bt = transpose_last2(bd, 1, k, n);
            matmul_into(gd, &bt, &mut ga[bi * m * k..(bi + 1) * m * k], m, n, k);
        }
        if need_b {
            // dB = Aᵀ · G
            let at = transpose_last2(ad, 1, m, k);
            let slot = if shared { &mut gb[..] } else { &mut gb[bi * k * n..(bi + 1) * k * n] };
            matmul_into(&at, gd, slot, k, m, n);
        }
    }
    (
        need_a.then(|| Tensor::new(a.shape(), ga).unwrap()),
        need_b.then(|| Tensor::new(b.shape(), gb).unwrap()),
    )
}
