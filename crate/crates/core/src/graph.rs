//! Reverse-mode automatic differentiation on a tape of tensor operations.
//!
//! A [`Graph`] owns every intermediate value; [`Var`] is a handle into it.
//! Operations evaluate eagerly on insertion and record their parents, so the
//! tape order is already topological and `backward` is a single reverse sweep.
//! One graph is built and back-propagated by one thread at a time; the handles
//! and value snapshots are plain data.
//!
//! Broadcasting is deliberately narrow: scalar constants via [`Graph::scale`] /
//! [`Graph::add_const`], and a row bias via [`Graph::add_bias_row`]. Everything
//! else must be shaped explicitly.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Min(Var, Var),
    Max(Var, Var),
    AddBiasRow { x: Var, bias: Var },
    Scale { x: Var, c: f64 },
    AddConst { x: Var },
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    MatMul { a: Var, b: Var },
    Transpose(Var),
    Reshape(Var),
    Narrow { x: Var, axis: usize, start: usize, len: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    Sum(Var),
    Mean(Var),
}

struct Node {
    op: Op,
    dims: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Lane decomposition for iterating along one axis: element (o, i, j) of a
/// tensor sits at `(o * lane + i) * inner + j`.
fn lanes(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = dims[..axis].iter().product();
    let lane = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    (outer, lane, inner)
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

    fn push(&mut self, op: Op, dims: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.nodes.push(Node { op, dims, data, grad: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Constant leaf: no gradient is propagated into it.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.dims().to_vec(), t.data().to_vec(), false)
    }

    /// Trainable leaf: `backward` produces a gradient for it.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.dims().to_vec(), t.data().to_vec(), true)
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        &self.node(v).dims
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.node(v).data
    }

    /// Snapshot of the node's value as an owned tensor.
    pub fn value(&self, v: Var) -> Tensor {
        Tensor::from_vec(self.node(v).dims.clone(), self.node(v).data.clone())
            .expect("graph node holds a consistent shape")
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        let n = self.node(v);
        if n.data.len() != 1 {
            return Err(Error::Contract(format!(
                "expected a scalar node, got shape {:?}",
                n.dims
            )));
        }
        Ok(n.data[0])
    }

    /// Gradient of the last backward pass, if the node participated.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.node(a).dims != self.node(b).dims {
            return Err(Error::Dimension(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.node(a).dims,
                self.node(b).dims
            )));
        }
        Ok(())
    }

    fn zip_elementwise(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let dims = self.node(a).dims.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(op, dims, data, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise(a, b, Op::Div(a, b), "div", |x, y| x / y)
    }

    /// Elementwise minimum; gradient follows the winner, first input on ties.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise(a, b, Op::Min(a, b), "min", f64::min)
    }

    /// Elementwise maximum; gradient follows the winner, first input on ties.
    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise(a, b, Op::Max(a, b), "max", f64::max)
    }

    /// `[m x n] + [n]` row-broadcast bias.
    pub fn add_bias_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xd, bd) = (self.node(x).dims.clone(), self.node(bias).dims.clone());
        if xd.len() != 2 || bd.len() != 1 || bd[0] != xd[1] {
            return Err(Error::Dimension(format!(
                "add_bias_row: matrix {xd:?} with bias {bd:?}"
            )));
        }
        let (m, n) = (xd[0], xd[1]);
        let mut data = self.node(x).data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += self.node(bias).data[j];
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Op::AddBiasRow { x, bias }, xd, data, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.node(x).data.iter().map(|&v| v * c).collect();
        let dims = self.node(x).dims.clone();
        let rg = self.rg(x);
        self.push(Op::Scale { x, c }, dims, data, rg)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.node(x).data.iter().map(|&v| v + c).collect();
        let dims = self.node(x).dims.clone();
        let rg = self.rg(x);
        self.push(Op::AddConst { x }, dims, data, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.node(x).data.iter().map(|&v| v.max(0.0)).collect();
        let dims = self.node(x).dims.clone();
        let rg = self.rg(x);
        self.push(Op::Relu(x), dims, data, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self
            .node(x)
            .data
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let dims = self.node(x).dims.clone();
        let rg = self.rg(x);
        self.push(Op::Sigmoid(x), dims, data, rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.node(x).data.iter().map(|&v| v.abs()).collect();
        let dims = self.node(x).dims.clone();
        let rg = self.rg(x);
        self.push(Op::Abs(x), dims, data, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (&self.node(a).dims, &self.node(b).dims);
        if ad.len() != 2 || bd.len() != 2 || ad[1] != bd[0] {
            return Err(Error::Dimension(format!(
                "matmul: shapes {ad:?} and {bd:?} are incompatible"
            )));
        }
        let (m, k, n) = (ad[0], ad[1], bd[1]);
        let mut data = vec![0.0; m * n];
        {
            let av = &self.node(a).data;
            let bv = &self.node(b).data;
            for i in 0..m {
                let out_row = i * n;
                for p in 0..k {
                    let a_ip = av[i * k + p];
                    if a_ip == 0.0 {
                        continue;
                    }
                    let b_row = &bv[p * n..(p + 1) * n];
                    for (j, &bj) in b_row.iter().enumerate() {
                        data[out_row + j] += a_ip * bj;
                    }
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul { a, b }, vec![m, n], data, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let d = &self.node(x).dims;
        if d.len() != 2 {
            return Err(Error::Dimension(format!(
                "transpose: expected rank 2, got {d:?}"
            )));
        }
        let (m, n) = (d[0], d[1]);
        let src = &self.node(x).data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Op::Transpose(x), vec![n, m], data, rg))
    }

    pub fn reshape(&mut self, x: Var, dims: Vec<usize>) -> Result<Var> {
        let numel: usize = dims.iter().product();
        if numel != self.node(x).data.len() || dims.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "reshape: {:?} to {dims:?}",
                self.node(x).dims
            )));
        }
        let data = self.node(x).data.clone();
        let rg = self.rg(x);
        Ok(self.push(Op::Reshape(x), dims, data, rg))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let d = self.node(x).dims.clone();
        if axis >= d.len() {
            return Err(Error::Dimension(format!(
                "narrow: axis {axis} out of range for shape {d:?}"
            )));
        }
        if len == 0 || start + len > d[axis] {
            return Err(Error::Dimension(format!(
                "narrow: range {start}..{} exceeds extent {} on axis {axis}",
                start + len,
                d[axis]
            )));
        }
        let (outer, lane, inner) = lanes(&d, axis);
        let mut out_dims = d;
        out_dims[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        let src = &self.node(x).data;
        for o in 0..outer {
            let base = (o * lane + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let rg = self.rg(x);
        Ok(self.push(Op::Narrow { x, axis, start, len }, out_dims, data, rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat: no parts".into()));
        }
        let first = self.node(parts[0]).dims.clone();
        if axis >= first.len() {
            return Err(Error::Dimension(format!(
                "concat: axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut total = 0;
        for &p in parts {
            let d = &self.node(p).dims;
            if d.len() != first.len()
                || d.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::Dimension(format!(
                    "concat: shape {d:?} incompatible with {first:?} on axis {axis}"
                )));
            }
            total += d[axis];
        }
        let mut out_dims = first.clone();
        out_dims[axis] = total;
        let (outer, _, inner) = lanes(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let lane_p = self.node(p).dims[axis];
                let src = &self.node(p).data;
                let base = o * lane_p * inner;
                data.extend_from_slice(&src[base..base + lane_p * inner]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::Concat { parts: parts.to_vec(), axis }, out_dims, data, rg))
    }

    /// Stable softmax (max-subtracted) along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let d = self.node(x).dims.clone();
        if axis >= d.len() {
            return Err(Error::Dimension(format!(
                "softmax: axis {axis} out of range for shape {d:?}"
            )));
        }
        let (outer, lane, inner) = lanes(&d, axis);
        let mut data = self.node(x).data.clone();
        for o in 0..outer {
            for j in 0..inner {
                let base = o * lane * inner + j;
                let mut max = f64::NEG_INFINITY;
                for i in 0..lane {
                    max = max.max(data[base + i * inner]);
                }
                let mut sum = 0.0;
                for i in 0..lane {
                    let e = (data[base + i * inner] - max).exp();
                    data[base + i * inner] = e;
                    sum += e;
                }
                for i in 0..lane {
                    data[base + i * inner] /= sum;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Op::Softmax { x, axis }, d, data, rg))
    }

    /// Stable log-softmax along `axis` via the log-sum-exp identity.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let d = self.node(x).dims.clone();
        if axis >= d.len() {
            return Err(Error::Dimension(format!(
                "log_softmax: axis {axis} out of range for shape {d:?}"
            )));
        }
        let (outer, lane, inner) = lanes(&d, axis);
        let mut data = self.node(x).data.clone();
        for o in 0..outer {
            for j in 0..inner {
                let base = o * lane * inner + j;
                let mut max = f64::NEG_INFINITY;
                for i in 0..lane {
                    max = max.max(data[base + i * inner]);
                }
                let mut sum = 0.0;
                for i in 0..lane {
                    sum += (data[base + i * inner] - max).exp();
                }
                let lse = max + sum.ln();
                for i in 0..lane {
                    data[base + i * inner] -= lse;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Op::LogSoftmax { x, axis }, d, data, rg))
    }

    /// Row-wise layer normalization of a `[m x n]` matrix with affine params.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xd = self.node(x).dims.clone();
        let gd = self.node(gamma).dims.clone();
        let bd = self.node(beta).dims.clone();
        if xd.len() != 2 || gd != [xd[1]] || bd != [xd[1]] {
            return Err(Error::Dimension(format!(
                "layer_norm: x {xd:?}, gamma {gd:?}, beta {bd:?}"
            )));
        }
        let (m, n) = (xd[0], xd[1]);
        let mut data = vec![0.0; m * n];
        {
            let xs = &self.node(x).data;
            let gs = &self.node(gamma).data;
            let bs = &self.node(beta).data;
            for i in 0..m {
                let row = &xs[i * n..(i + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..n {
                    data[i * n + j] = (row[j] - mean) * inv * gs[j] + bs[j];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, xd, data, rg))
    }

    /// Full reduction to a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.node(x).data.iter().sum();
        let rg = self.rg(x);
        self.push(Op::Sum(x), vec![1], vec![s], rg)
    }

    /// Full mean reduction to a one-element tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.node(x).data.len();
        let s: f64 = self.node(x).data.iter().sum::<f64>() / n as f64;
        let rg = self.rg(x);
        self.push(Op::Mean(x), vec![1], vec![s], rg)
    }

    fn add_grad(&mut self, v: Var, delta: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let grad = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Back-propagates from a one-element `loss` node, accumulating gradients
    /// into every reachable node with `requires_grad`. Calling it again adds
    /// another full contribution; callers zero grads between steps.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a one-element loss, got shape {:?}",
                self.node(loss).dims
            )));
        }
        self.add_grad(loss, &[1.0]);
        if !self.node(loss).requires_grad {
            // Loss does not depend on any parameter; nothing to do.
            return Ok(());
        }
        for idx in (0..=loss.0).rev() {
            let v = Var(idx);
            if !self.node(v).requires_grad || self.node(v).grad.is_none() {
                continue;
            }
            let g = self.nodes[idx].grad.clone().expect("checked above");
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.add_grad(a, &g);
                    self.add_grad(b, &g);
                }
                Op::Sub(a, b) => {
                    self.add_grad(a, &g);
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    self.add_grad(b, &neg);
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> =
                        g.iter().zip(&self.node(b).data).map(|(x, y)| x * y).collect();
                    let db: Vec<f64> =
                        g.iter().zip(&self.node(a).data).map(|(x, y)| x * y).collect();
                    self.add_grad(a, &da);
                    self.add_grad(b, &db);
                }
                Op::Div(a, b) => {
                    // d(a/b) = dc/b ; -dc * (a/b) / b
                    let out = &self.nodes[idx].data;
                    let da: Vec<f64> =
                        g.iter().zip(&self.node(b).data).map(|(x, y)| x / y).collect();
                    let db: Vec<f64> = g
                        .iter()
                        .zip(out.iter().zip(&self.node(b).data))
                        .map(|(gi, (oi, bi))| -gi * oi / bi)
                        .collect();
                    self.add_grad(a, &da);
                    self.add_grad(b, &db);
                }
                Op::Min(a, b) | Op::Max(a, b) => {
                    let is_min = matches!(self.nodes[idx].op, Op::Min(..));
                    let av = &self.node(a).data;
                    let bv = &self.node(b).data;
                    let mut da = vec![0.0; g.len()];
                    let mut db = vec![0.0; g.len()];
                    for i in 0..g.len() {
                        let first_wins = if is_min { av[i] <= bv[i] } else { av[i] >= bv[i] };
                        if first_wins {
                            da[i] = g[i];
                        } else {
                            db[i] = g[i];
                        }
                    }
                    self.add_grad(a, &da);
                    self.add_grad(b, &db);
                }
                Op::AddBiasRow { x, bias } => {
                    self.add_grad(x, &g);
                    let n = self.node(bias).data.len();
                    let mut db = vec![0.0; n];
                    for (i, gi) in g.iter().enumerate() {
                        db[i % n] += gi;
                    }
                    self.add_grad(bias, &db);
                }
                Op::Scale { x, c } => {
                    let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                    self.add_grad(x, &dx);
                }
                Op::AddConst { x } => self.add_grad(x, &g),
                Op::Relu(x) => {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(&self.node(x).data)
                        .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                        .collect();
                    self.add_grad(x, &dx);
                }
                Op::Sigmoid(x) => {
                    let out = &self.nodes[idx].data;
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(out)
                        .map(|(gi, &oi)| gi * oi * (1.0 - oi))
                        .collect();
                    self.add_grad(x, &dx);
                }
                Op::Abs(x) => {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(&self.node(x).data)
                        .map(|(gi, &xi)| gi * if xi > 0.0 { 1.0 } else if xi < 0.0 { -1.0 } else { 0.0 })
                        .collect();
                    self.add_grad(x, &dx);
                }
                Op::MatMul { a, b } => {
                    let (m, k) = (self.node(a).dims[0], self.node(a).dims[1]);
                    let n = self.node(b).dims[1];
                    // dA = dC . B^T
                    let mut da = vec![0.0; m * k];
                    {
                        let bv = &self.node(b).data;
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                let g_row = &g[i * n..(i + 1) * n];
                                let b_row = &bv[p * n..(p + 1) * n];
                                for j in 0..n {
                                    s += g_row[j] * b_row[j];
                                }
                                da[i * k + p] = s;
                            }
                        }
                    }
                    // dB = A^T . dC
                    let mut db = vec![0.0; k * n];
                    {
                        let av = &self.node(a).data;
                        for i in 0..m {
                            let g_row = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let a_ip = av[i * k + p];
                                if a_ip == 0.0 {
                                    continue;
                                }
                                let db_row = &mut db[p * n..(p + 1) * n];
                                for j in 0..n {
                                    db_row[j] += a_ip * g_row[j];
                                }
                            }
                        }
                    }
                    self.add_grad(a, &da);
                    self.add_grad(b, &db);
                }
                Op::Transpose(x) => {
                    let (n, m) = (self.nodes[idx].dims[0], self.nodes[idx].dims[1]);
                    let mut dx = vec![0.0; m * n];
                    for i in 0..n {
                        for j in 0..m {
                            dx[j * n + i] = g[i * m + j];
                        }
                    }
                    self.add_grad(x, &dx);
                }
                Op::Reshape(x) => self.add_grad(x, &g),
                Op::Narrow { x, axis, start, len } => {
                    let xd = self.node(x).dims.clone();
                    let (outer, lane, inner) = lanes(&xd, axis);
                    let mut dx = vec![0.0; self.node(x).data.len()];
                    for o in 0..outer {
                        let dst = (o * lane + start) * inner;
                        let src = o * len * inner;
                        dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    self.add_grad(x, &dx);
                }
                Op::Concat { parts, axis } => {
                    let out_dims = self.nodes[idx].dims.clone();
                    let (outer, _, inner) = lanes(&out_dims, axis);
                    let mut offset = 0;
                    let total = out_dims[axis];
                    for &p in &parts {
                        let lane_p = self.node(p).dims[axis];
                        let mut dp = vec![0.0; self.node(p).data.len()];
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * lane_p * inner;
                            dp[dst..dst + lane_p * inner]
                                .copy_from_slice(&g[src..src + lane_p * inner]);
                        }
                        self.add_grad(p, &dp);
                        offset += lane_p;
                    }
                }
                Op::Softmax { x, axis } => {
                    let d = self.nodes[idx].dims.clone();
                    let (outer, lane, inner) = lanes(&d, axis);
                    let y = self.nodes[idx].data.clone();
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for j in 0..inner {
                            let base = o * lane * inner + j;
                            let mut dot = 0.0;
                            for i in 0..lane {
                                let k = base + i * inner;
                                dot += g[k] * y[k];
                            }
                            for i in 0..lane {
                                let k = base + i * inner;
                                dx[k] = y[k] * (g[k] - dot);
                            }
                        }
                    }
                    self.add_grad(x, &dx);
                }
                Op::LogSoftmax { x, axis } => {
                    let d = self.nodes[idx].dims.clone();
                    let (outer, lane, inner) = lanes(&d, axis);
                    let y = self.nodes[idx].data.clone(); // log-probs
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for j in 0..inner {
                            let base = o * lane * inner + j;
                            let mut gsum = 0.0;
                            for i in 0..lane {
                                gsum += g[base + i * inner];
                            }
                            for i in 0..lane {
                                let k = base + i * inner;
                                dx[k] = g[k] - y[k].exp() * gsum;
                            }
                        }
                    }
                    self.add_grad(x, &dx);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (m, n) = (self.node(x).dims[0], self.node(x).dims[1]);
                    let xs = self.node(x).data.clone();
                    let gs = self.node(gamma).data.clone();
                    let mut dx = vec![0.0; m * n];
                    let mut dgamma = vec![0.0; n];
                    let mut dbeta = vec![0.0; n];
                    for i in 0..m {
                        let row = &xs[i * n..(i + 1) * n];
                        let mean = row.iter().sum::<f64>() / n as f64;
                        let var =
                            row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let g_row = &g[i * n..(i + 1) * n];
                        // h = dL/dx_hat; dx = inv * (h - mean(h) - x_hat * mean(h*x_hat))
                        let mut h_mean = 0.0;
                        let mut hx_mean = 0.0;
                        for j in 0..n {
                            let xhat = (row[j] - mean) * inv;
                            let h = g_row[j] * gs[j];
                            h_mean += h;
                            hx_mean += h * xhat;
                            dgamma[j] += g_row[j] * xhat;
                            dbeta[j] += g_row[j];
                        }
                        h_mean /= n as f64;
                        hx_mean /= n as f64;
                        for j in 0..n {
                            let xhat = (row[j] - mean) * inv;
                            let h = g_row[j] * gs[j];
                            dx[i * n + j] = inv * (h - h_mean - xhat * hx_mean);
                        }
                    }
                    self.add_grad(x, &dx);
                    self.add_grad(gamma, &dgamma);
                    self.add_grad(beta, &dbeta);
                }
                Op::Sum(x) => {
                    let dx = vec![g[0]; self.node(x).data.len()];
                    self.add_grad(x, &dx);
                }
                Op::Mean(x) => {
                    let n = self.node(x).data.len();
                    let dx = vec![g[0] / n as f64; n];
                    self.add_grad(x, &dx);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i2 = g.input(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = g.input(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = g.matmul(i2, a).unwrap();
        assert_eq!(g.data(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,2],[3,4]] x [[5],[6]] = [[17],[39]]
        let mut g = Graph::new();
        let a = g.input(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.input(&t(&[2, 1], &[5.0, 6.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.dims(c), &[2, 1]);
        assert_eq!(g.data(c), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut g = Graph::new();
        let z = g.input(&Tensor::zeros(vec![2, 2]));
        let b = g.input(&t(&[2, 3], &[1.0, -2.0, 3.0, 4.0, 5.0, -6.0]));
        let c = g.matmul(z, b).unwrap();
        assert_eq!(g.dims(c), &[2, 3]);
        assert!(g.data(c).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_names_both() {
        let mut g = Graph::new();
        let a = g.input(&Tensor::zeros(vec![2, 3]));
        let b = g.input(&Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn softmax_symmetry_and_known_values() {
        let mut g = Graph::new();
        let x = g.input(&t(&[2], &[0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.data(y), &[0.5, 0.5]);

        // Direct exponentiation oracle for [1,2,3].
        let x = g.input(&t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.softmax(x, 0).unwrap();
        let e: Vec<f64> = [1.0_f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        for (got, want) in g.data(y).iter().zip(e.iter().map(|v| v / s)) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!((g.data(y)[0] - 0.090031).abs() < 1e-6);
        assert!((g.data(y)[1] - 0.244728).abs() < 1e-6);
        assert!((g.data(y)[2] - 0.665241).abs() < 1e-6);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut g = Graph::new();
        let x = g.input(&t(&[4], &[0.3, -1.2, 2.0, 0.7]));
        let y1 = g.softmax(x, 0).unwrap();
        let shifted = g.add_const(x, 123.456);
        let y2 = g.softmax(shifted, 0).unwrap();
        for (a, b) in g.data(y1).iter().zip(g.data(y2)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_axis_out_of_range() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::zeros(vec![2, 2]));
        assert!(matches!(g.softmax(x, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one_even_for_huge_inputs() {
        let mut r = crate::rng::SplitMix64::new(11);
        let mut g = Graph::new();
        for _ in 0..50 {
            let data: Vec<f64> = (0..12).map(|_| r.next_range(-1e4, 1e4)).collect();
            let x = g.input(&t(&[3, 4], &data));
            let y = g.softmax(x, 1).unwrap();
            for row in 0..3 {
                let s: f64 = g.data(y)[row * 4..(row + 1) * 4].iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
            }
        }
    }

    #[test]
    fn backward_square_rule() {
        // loss = sum(x * x), x = [3] -> grad 6
        let mut g = Graph::new();
        let x = g.param(&t(&[1], &[3.0]));
        let y = g.mul(x, x).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_softmax_sum_is_zero() {
        // sum(softmax(x)) is constant 1, so grads vanish.
        let mut g = Graph::new();
        let x = g.param(&t(&[3], &[0.2, -0.4, 1.1]));
        let y = g.softmax(x, 0).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        for &v in g.grad(x).unwrap() {
            assert!(v.abs() < 1e-12, "grad {v}");
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(&t(&[2], &[1.0, 2.0]));
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn backward_accumulates_reuse() {
        // loss = sum(x*x) + sum(x): grad = 2x + 1, x used in two places.
        let mut g = Graph::new();
        let x = g.param(&t(&[2], &[1.5, -0.5]));
        let sq = g.mul(x, x).unwrap();
        let s1 = g.sum(sq);
        let s2 = g.sum(x);
        let loss = g.add(s1, s2).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 0.0]);
    }

    #[test]
    fn determinism_bitwise() {
        let run = || {
            let mut g = Graph::new();
            let x = g.param(&t(&[2, 2], &[0.1, -0.7, 0.33, 2.5]));
            let w = g.param(&t(&[2, 2], &[1.0, 0.5, -0.25, 0.125]));
            let h = g.matmul(x, w).unwrap();
            let a = g.softmax(h, 1).unwrap();
            let loss = g.mean(a);
            g.backward(loss).unwrap();
            (
                g.data(a).to_vec(),
                g.grad(x).unwrap().to_vec(),
                g.grad(w).unwrap().to_vec(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn narrow_and_concat_roundtrip() {
        let mut g = Graph::new();
        let x = g.input(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let left = g.narrow(x, 1, 0, 1).unwrap();
        let right = g.narrow(x, 1, 1, 2).unwrap();
        let back = g.concat(&[left, right], 1).unwrap();
        assert_eq!(g.data(back), g.data(x));
        assert_eq!(g.data(left), &[1.0, 4.0]);
        assert_eq!(g.data(right), &[2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let mut g = Graph::new();
        let x = g.input(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let xt = g.transpose(x).unwrap();
        assert_eq!(g.dims(xt), &[3, 2]);
        assert_eq!(g.data(xt), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let xtt = g.transpose(xt).unwrap();
        assert_eq!(g.data(xtt), g.data(x));
    }

    #[test]
    fn layer_norm_rows_standardized() {
        let mut g = Graph::new();
        let x = g.input(&t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 2.0]));
        let gamma = g.input(&Tensor::full(vec![4], 1.0));
        let beta = g.input(&Tensor::zeros(vec![4]));
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        for row in 0..2 {
            let r = &g.data(y)[row * 4..(row + 1) * 4];
            let mean: f64 = r.iter().sum::<f64>() / 4.0;
            let var: f64 = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn no_grad_without_params() {
        let mut g = Graph::new();
        let x = g.input(&t(&[2], &[1.0, 2.0]));
        let y = g.mul(x, x).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert!(g.grad(x).is_none());
    }
}
