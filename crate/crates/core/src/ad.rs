//! Minimal reverse-mode automatic differentiation over dense n-d arrays.
//!
//! A [`Graph`] is a Wengert list built define-by-run: every operation computes
//! its output values eagerly and records itself on the tape, so topological
//! order equals append order and [`Graph::backward`] is a single reverse
//! sweep. All storage is flat row-major `f64`.
//!
//! Graphs are cheap and rebuilt every training step; nothing is shared
//! across threads.

use crate::error::{Error, Result};

/// Handle to a node inside one [`Graph`]. Only valid for the graph that
/// created it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

/// Values plus accumulated gradient of one node.
#[derive(Clone, Debug)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Value of a scalar tensor (shape `[]` or `[1]`).
    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.values.len(), 1);
        self.values[0]
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Matmul(Var, Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Pow(Var, f64),
    Scale(Var, f64),
    AddScalar(Var),
    MeanAxis(Var, usize),
    VarAxis(Var, usize),
    LogSoftmax(Var),
    Sum(Var),
    Broadcast(Var),
    Reshape(Var),
    Concat(Vec<Var>),
}

struct Node {
    op: Op,
    tensor: Tensor,
    requires_grad: bool,
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// (outer, extent, inner) decomposition for iterating along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let extent = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, extent, inner)
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

    /// Differentiable leaf; gradients accumulate here.
    pub fn var(&mut self, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        self.leaf(values, shape, true)
    }

    /// Non-differentiable leaf; backward leaves its grad untouched.
    pub fn constant(&mut self, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        self.leaf(values, shape, false)
    }

    /// Scalar constant, shape `[]`.
    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(vec![v], &[], false).expect("scalar leaf")
    }

    fn leaf(&mut self, values: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Var> {
        if numel(shape) != values.len() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                lhs: shape.to_vec(),
                rhs: vec![values.len()],
            });
        }
        self.push(Op::Leaf, shape.to_vec(), values, requires_grad)
    }

    fn push(
        &mut self,
        op: Op,
        shape: Vec<usize>,
        values: Vec<f64>,
        requires_grad: bool,
    ) -> Result<Var> {
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::Numerical(format!(
                "NaN produced in forward pass of {:?}",
                op_name(&op)
            )));
        }
        let n = values.len();
        self.nodes.push(Node {
            op,
            tensor: Tensor {
                shape,
                values,
                grad: vec![0.0; n],
            },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn tensor(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].tensor.values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].tensor.shape
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].tensor.grad
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ----- elementwise binary -----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let vals = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), self.shape(a).to_vec(), vals, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let vals = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Sub(a, b), self.shape(a).to_vec(), vals, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let vals = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Mul(a, b), self.shape(a).to_vec(), vals, rg)
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += aip * bv[p * n + j];
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Matmul(a, b), vec![m, n], out, rg)
    }

    // ----- elementwise unary -----

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let vals = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let rg = self.rg(a);
        self.push(Op::Relu(a), self.shape(a).to_vec(), vals, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let vals = self.value(a).iter().map(|&x| x.tanh()).collect();
        let rg = self.rg(a);
        self.push(Op::Tanh(a), self.shape(a).to_vec(), vals, rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let vals = self.value(a).iter().map(|&x| x.exp()).collect();
        let rg = self.rg(a);
        self.push(Op::Exp(a), self.shape(a).to_vec(), vals, rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let vals = self.value(a).iter().map(|&x| x.ln()).collect();
        let rg = self.rg(a);
        self.push(Op::Log(a), self.shape(a).to_vec(), vals, rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("non-positive input {bad}"),
            });
        }
        let vals = self.value(a).iter().map(|&x| x.sqrt()).collect();
        let rg = self.rg(a);
        self.push(Op::Sqrt(a), self.shape(a).to_vec(), vals, rg)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let vals = self.value(a).iter().map(|&x| x * x).collect();
        let rg = self.rg(a);
        self.push(Op::Square(a), self.shape(a).to_vec(), vals, rg)
    }

    /// Elementwise `x^p` for a fixed exponent. Non-integer `p` requires
    /// strictly positive inputs.
    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var> {
        if p.fract() != 0.0 {
            if let Some(&bad) = self.value(a).iter().find(|&&x| x <= 0.0) {
                return Err(Error::Domain {
                    op: "pow",
                    detail: format!("non-positive base {bad} with fractional exponent {p}"),
                });
            }
        }
        let vals = self.value(a).iter().map(|&x| x.powf(p)).collect();
        let rg = self.rg(a);
        self.push(Op::Pow(a, p), self.shape(a).to_vec(), vals, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let vals = self.value(a).iter().map(|&x| c * x).collect();
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), self.shape(a).to_vec(), vals, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let vals = self.value(a).iter().map(|&x| x + c).collect();
        let rg = self.rg(a);
        self.push(Op::AddScalar(a), self.shape(a).to_vec(), vals, rg)
    }

    // ----- reductions -----

    /// Mean along `axis`; the axis is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::ShapeMismatch {
                op: "mean_axis",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let (outer, extent, inner) = axis_split(&shape, axis);
        let av = self.value(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                for i in 0..inner {
                    out[o * inner + i] += av[(o * extent + e) * inner + i];
                }
            }
        }
        for v in &mut out {
            *v /= extent as f64;
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.rg(a);
        self.push(Op::MeanAxis(a, axis), out_shape, out, rg)
    }

    /// Population (biased) variance along `axis`; the axis is removed.
    pub fn var_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::ShapeMismatch {
                op: "var_axis",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let (outer, extent, inner) = axis_split(&shape, axis);
        let av = self.value(a);
        let mut mean = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                for i in 0..inner {
                    mean[o * inner + i] += av[(o * extent + e) * inner + i];
                }
            }
        }
        for v in &mut mean {
            *v /= extent as f64;
        }
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                for i in 0..inner {
                    let d = av[(o * extent + e) * inner + i] - mean[o * inner + i];
                    out[o * inner + i] += d * d;
                }
            }
        }
        for v in &mut out {
            *v /= extent as f64;
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.rg(a);
        self.push(Op::VarAxis(a, axis), out_shape, out, rg)
    }

    /// Full reduction to a scalar of shape `[]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(Op::Sum(a), vec![], vec![s], rg)
    }

    /// Sum along one axis, keeping the others. Composition of mean and scale.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let extent = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::ShapeMismatch {
                op: "sum_axis",
                lhs: self.shape(a).to_vec(),
                rhs: vec![axis],
            })?;
        let m = self.mean_axis(a, axis)?;
        self.scale(m, extent as f64)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.tensor(a).numel();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    // ----- softmax family (last axis) -----

    /// Numerically stable log-softmax along the last axis.
    pub fn log_softmax_lastaxis(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let last = *shape.last().ok_or_else(|| Error::ShapeMismatch {
            op: "log_softmax_lastaxis",
            lhs: shape.clone(),
            rhs: vec![],
        })?;
        if last == 0 {
            return Err(Error::ShapeMismatch {
                op: "log_softmax_lastaxis",
                lhs: shape,
                rhs: vec![0],
            });
        }
        let av = self.value(a);
        let mut out = vec![0.0; av.len()];
        for row in 0..av.len() / last {
            let xs = &av[row * last..(row + 1) * last];
            let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            for (j, &x) in xs.iter().enumerate() {
                out[row * last + j] = x - lse;
            }
        }
        let rg = self.rg(a);
        self.push(Op::LogSoftmax(a), shape, out, rg)
    }

    /// Softmax along the last axis, derived as `exp(log_softmax(x))`.
    pub fn softmax_lastaxis(&mut self, a: Var) -> Result<Var> {
        let ls = self.log_softmax_lastaxis(a)?;
        self.exp(ls)
    }

    // ----- shape manipulation -----

    /// Expand to `target` shape. The input shape, right-aligned against the
    /// target, must match per axis or be 1.
    pub fn broadcast(&mut self, a: Var, target: &[usize]) -> Result<Var> {
        let src = self.shape(a).to_vec();
        if src.len() > target.len() {
            return Err(Error::ShapeMismatch {
                op: "broadcast",
                lhs: src,
                rhs: target.to_vec(),
            });
        }
        let offset = target.len() - src.len();
        for (i, &s) in src.iter().enumerate() {
            if s != target[offset + i] && s != 1 {
                return Err(Error::ShapeMismatch {
                    op: "broadcast",
                    lhs: src,
                    rhs: target.to_vec(),
                });
            }
        }
        let out_n = numel(target);
        let av = self.value(a);
        let mut out = vec![0.0; out_n];
        for (idx, slot) in out.iter_mut().enumerate() {
            *slot = av[broadcast_source_index(idx, target, &src)];
        }
        let rg = self.rg(a);
        self.push(Op::Broadcast(a), target.to_vec(), out, rg)
    }

    pub fn reshape(&mut self, a: Var, new_shape: &[usize]) -> Result<Var> {
        if numel(new_shape) != self.tensor(a).numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: new_shape.to_vec(),
            });
        }
        let vals = self.value(a).to_vec();
        let rg = self.rg(a);
        self.push(Op::Reshape(a), new_shape.to_vec(), vals, rg)
    }

    /// Concatenate along axis 0. All inputs must share trailing dimensions.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Usage(
            "concat of zero tensors".into(),
        ))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0usize;
        let mut vals = Vec::new();
        let mut rg = false;
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
            vals.extend_from_slice(self.value(p));
            rg |= self.rg(p);
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        self.push(Op::Concat(parts.to_vec()), shape, vals, rg)
    }

    // ----- backward -----

    /// Reverse sweep from a scalar root. Accumulates `d root / d node` into
    /// every reachable node's grad; constants are left untouched.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_t = self.tensor(root);
        if root_t.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                root_t.shape
            )));
        }
        self.nodes[root.0].tensor.grad[0] = 1.0;
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let g = self.nodes[i].tensor.grad.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(a, |_, k| g[k]);
                    self.accumulate(b, |_, k| g[k]);
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, |_, k| g[k]);
                    self.accumulate(b, |_, k| -g[k]);
                }
                Op::Mul(a, b) => {
                    let bv = self.nodes[b.0].tensor.values.clone();
                    let av = self.nodes[a.0].tensor.values.clone();
                    self.accumulate(a, |_, k| g[k] * bv[k]);
                    self.accumulate(b, |_, k| g[k] * av[k]);
                }
                Op::Matmul(a, b) => {
                    let (m, k) = {
                        let s = self.shape(a);
                        (s[0], s[1])
                    };
                    let n = self.shape(b)[1];
                    let av = self.nodes[a.0].tensor.values.clone();
                    let bv = self.nodes[b.0].tensor.values.clone();
                    if self.rg(a) {
                        let ga = &mut self.nodes[a.0].tensor.grad;
                        for i2 in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[i2 * n + j] * bv[p * n + j];
                                }
                                ga[i2 * k + p] += s;
                            }
                        }
                    }
                    if self.rg(b) {
                        let gb = &mut self.nodes[b.0].tensor.grad;
                        for p in 0..k {
                            for j in 0..n {
                                let mut s = 0.0;
                                for i2 in 0..m {
                                    s += av[i2 * k + p] * g[i2 * n + j];
                                }
                                gb[p * n + j] += s;
                            }
                        }
                    }
                }
                Op::Relu(a) => {
                    let xv = self.nodes[a.0].tensor.values.clone();
                    self.accumulate(a, |_, k| if xv[k] > 0.0 { g[k] } else { 0.0 });
                }
                Op::Tanh(a) => {
                    let out = self.nodes[i].tensor.values.clone();
                    self.accumulate(a, |_, k| g[k] * (1.0 - out[k] * out[k]));
                }
                Op::Exp(a) => {
                    let out = self.nodes[i].tensor.values.clone();
                    self.accumulate(a, |_, k| g[k] * out[k]);
                }
                Op::Log(a) => {
                    let xv = self.nodes[a.0].tensor.values.clone();
                    self.accumulate(a, |_, k| g[k] / xv[k]);
                }
                Op::Sqrt(a) => {
                    let out = self.nodes[i].tensor.values.clone();
                    self.accumulate(a, |_, k| g[k] / (2.0 * out[k]));
                }
                Op::Square(a) => {
                    let xv = self.nodes[a.0].tensor.values.clone();
                    self.accumulate(a, |_, k| 2.0 * xv[k] * g[k]);
                }
                Op::Pow(a, p) => {
                    let xv = self.nodes[a.0].tensor.values.clone();
                    self.accumulate(a, |_, k| p * xv[k].powf(p - 1.0) * g[k]);
                }
                Op::Scale(a, c) => {
                    self.accumulate(a, |_, k| c * g[k]);
                }
                Op::AddScalar(a) => {
                    self.accumulate(a, |_, k| g[k]);
                }
                Op::MeanAxis(a, axis) => {
                    let shape = self.shape(a).to_vec();
                    let (_, extent, inner) = axis_split(&shape, axis);
                    let inv = 1.0 / extent as f64;
                    self.accumulate(a, |_, k| {
                        let o = k / (extent * inner);
                        let i2 = k % inner;
                        g[o * inner + i2] * inv
                    });
                }
                Op::VarAxis(a, axis) => {
                    let shape = self.shape(a).to_vec();
                    let (outer, extent, inner) = axis_split(&shape, axis);
                    let xv = self.nodes[a.0].tensor.values.clone();
                    // recompute the per-slice mean
                    let mut mean = vec![0.0; outer * inner];
                    for o in 0..outer {
                        for e in 0..extent {
                            for i2 in 0..inner {
                                mean[o * inner + i2] += xv[(o * extent + e) * inner + i2];
                            }
                        }
                    }
                    for v in &mut mean {
                        *v /= extent as f64;
                    }
                    let scale = 2.0 / extent as f64;
                    self.accumulate(a, |_, k| {
                        let o = k / (extent * inner);
                        let i2 = k % inner;
                        scale * (xv[k] - mean[o * inner + i2]) * g[o * inner + i2]
                    });
                }
                Op::LogSoftmax(a) => {
                    let shape = self.shape(i_var(i)).to_vec();
                    let last = *shape.last().unwrap();
                    let out = self.nodes[i].tensor.values.clone();
                    let rows = out.len() / last;
                    let mut gin = vec![0.0; out.len()];
                    for r in 0..rows {
                        let gsum: f64 = g[r * last..(r + 1) * last].iter().sum();
                        for j in 0..last {
                            let k = r * last + j;
                            gin[k] = g[k] - out[k].exp() * gsum;
                        }
                    }
                    self.accumulate(a, |_, k| gin[k]);
                }
                Op::Sum(a) => {
                    self.accumulate(a, |_, _| g[0]);
                }
                Op::Broadcast(a) => {
                    let target = self.shape(i_var(i)).to_vec();
                    let src = self.shape(a).to_vec();
                    let mut gin = vec![0.0; numel(&src)];
                    for (idx, &gv) in g.iter().enumerate() {
                        gin[broadcast_source_index(idx, &target, &src)] += gv;
                    }
                    self.accumulate(a, |_, k| gin[k]);
                }
                Op::Reshape(a) => {
                    self.accumulate(a, |_, k| g[k]);
                }
                Op::Concat(parts) => {
                    let mut offset = 0usize;
                    for p in parts {
                        let n = self.tensor(p).numel();
                        let base = offset;
                        self.accumulate(p, |_, k| g[base + k]);
                        offset += n;
                    }
                }
            }
        }
        for node in &self.nodes {
            if node.tensor.grad.iter().any(|v| v.is_nan()) {
                return Err(Error::Numerical(format!(
                    "NaN produced in backward pass of {:?}",
                    op_name(&node.op)
                )));
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, target: Var, f: impl Fn(&Tensor, usize) -> f64) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let node = &mut self.nodes[target.0];
        let n = node.tensor.grad.len();
        for k in 0..n {
            let add = f(&node.tensor, k);
            node.tensor.grad[k] += add;
        }
    }
}

fn i_var(i: usize) -> Var {
    Var(i)
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Matmul(..) => "matmul",
        Op::Relu(..) => "relu",
        Op::Tanh(..) => "tanh",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Sqrt(..) => "sqrt",
        Op::Square(..) => "square",
        Op::Pow(..) => "pow",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::MeanAxis(..) => "mean_axis",
        Op::VarAxis(..) => "var_axis",
        Op::LogSoftmax(..) => "log_softmax",
        Op::Sum(..) => "sum",
        Op::Broadcast(..) => "broadcast",
        Op::Reshape(..) => "reshape",
        Op::Concat(..) => "concat",
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

/// Map a flat index in `target` shape back to the flat index in the
/// right-aligned `src` shape (axes of extent 1 clamp to 0).
fn broadcast_source_index(flat: usize, target: &[usize], src: &[usize]) -> usize {
    let offset = target.len() - src.len();
    let mut rem = flat;
    let mut coords = vec![0usize; target.len()];
    for d in (0..target.len()).rev() {
        coords[d] = rem % target[d];
        rem /= target[d];
    }
    let mut idx = 0usize;
    let mut stride = 1usize;
    for d in (0..src.len()).rev() {
        let c = if src[d] == 1 { 0 } else { coords[offset + d] };
        idx += c * stride;
        stride *= src[d];
    }
    idx
}

/// Max relative error between the analytic gradient and a central finite
/// difference, taken over all coordinates of `x0`.
///
/// `build` constructs the scalar objective on a fresh graph from the flat
/// input vector; it is invoked once for the analytic gradient and twice per
/// coordinate for the differences. Any NaN encountered is propagated as a
/// check failure.
pub fn fd_check<F>(build: F, x0: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Usage("fd_check requires h > 0".into()));
    }
    let eval = |xs: &[f64]| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.var(xs.to_vec(), &[xs.len()])?;
        let root = build(&mut g, x)?;
        let t = g.tensor(root);
        if t.numel() != 1 {
            return Err(Error::Usage(format!(
                "fd_check objective must be scalar, got shape {:?}",
                t.shape
            )));
        }
        Ok(t.scalar())
    };

    // analytic gradient at x0
    let mut g = Graph::new();
    let x = g.var(x0.to_vec(), &[x0.len()])?;
    let root = build(&mut g, x)?;
    if g.tensor(root).numel() != 1 {
        return Err(Error::Usage(format!(
            "fd_check objective must be scalar, got shape {:?}",
            g.tensor(root).shape
        )));
    }
    g.backward(root)?;
    let analytic = g.grad(x).to_vec();

    let mut worst = 0.0f64;
    let mut probe = x0.to_vec();
    for k in 0..x0.len() {
        probe[k] = x0[k] + h;
        let fp = eval(&probe)?;
        probe[k] = x0[k] - h;
        let fm = eval(&probe)?;
        probe[k] = x0[k];
        if fp.is_nan() || fm.is_nan() {
            return Err(Error::Numerical(
                "fd_check: objective returned NaN".into(),
            ));
        }
        let central = (fp - fm) / (2.0 * h);
        let err = (analytic[k] - central).abs() / central.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
