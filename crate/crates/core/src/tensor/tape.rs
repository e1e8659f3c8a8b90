//! Wengert-list reverse-mode autodiff.
//!
//! Every op appends a node holding its forward value; `backward` walks the
//! list once in reverse, so its cost is linear in the number of recorded ops.
//! Parameters are borrowed rather than copied onto the tape, which is why the
//! tape carries the lifetime of the model it differentiates.

use super::kernels::gemm;
use super::nn::{Gradients, Parameter};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value<'p> {
    Owned(Vec<f64>),
    Borrowed(&'p [f64]),
}

impl Value<'_> {
    fn as_slice(&self) -> &[f64] {
        match self {
            Value::Owned(v) => v,
            Value::Borrowed(v) => v,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Tanh(Var),
    Square(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, normed: Vec<f64>, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    RowScale(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
}

struct Node<'p> {
    shape: Vec<usize>,
    value: Value<'p>,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Vec<f64>>,
}

/// Recording of a forward computation.
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    params: Vec<(&'p Parameter, Var)>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
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

fn add_into(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node { shape, value: Value::Owned(data), op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a tensor as a leaf. It receives gradients iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Leaf, rg)
    }

    /// Records plain data that never receives gradients.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(t))
    }

    /// Borrows a trainable parameter onto the tape.
    pub fn param(&mut self, p: &'p Parameter) -> Var {
        self.nodes.push(Node {
            shape: p.tensor.shape().to_vec(),
            value: Value::Borrowed(p.tensor.data()),
            op: Op::Leaf,
            requires_grad: true,
            grad: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push((p, v));
        v
    }

    /// Borrows a parameter as a constant (frozen weights).
    pub fn frozen(&mut self, p: &'p Parameter) -> Var {
        self.nodes.push(Node {
            shape: p.tensor.shape().to_vec(),
            value: Value::Borrowed(p.tensor.data()),
            op: Op::Leaf,
            requires_grad: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.as_slice()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Accumulated gradient of a leaf after [`backward`](Self::backward).
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Snapshot of a recorded value as a tensor, including its gradient.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        let mut t = Tensor::new(n.shape.clone(), n.value.as_slice().to_vec())
            .expect("tape nodes always hold consistent shapes")
            .with_requires_grad(n.requires_grad);
        if let Some(g) = &n.grad {
            t.accumulate_grad(g).expect("gradient length matches value");
        }
        t
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        match self.value(v) {
            [x] => Ok(*x),
            _ => Err(Error::contract(format!("expected scalar, got shape {:?}", self.shape(v)))),
        }
    }

    /// Clears every leaf gradient.
    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    /// Gradients of all parameters registered with [`param`](Self::param),
    /// keyed by parameter name.
    pub fn gradients(&self) -> Gradients {
        let mut g = Gradients::default();
        for (p, v) in &self.params {
            if let Some(grad) = &self.nodes[v.0].grad {
                g.add(&p.name, grad);
            }
        }
        g
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(format!("{what}: expected a matrix, got shape {s:?}"))),
        }
    }

    // ---- ops -------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.value(a), false, self.value(b), false, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// `x · w + b` with `x: [B, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(x, "linear input")?;
        let (k2, n) = self.dims2(w, "linear weight")?;
        if k != k2 || numel(self.shape(b)) != n {
            return Err(Error::dim(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            )));
        }
        let bias = self.value(b);
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bias);
        }
        gemm(m, k, n, 1.0, self.value(x), false, self.value(w), false, 1.0, &mut out);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::Linear { x, w, b }, rg))
    }

    fn broadcast_shape(&self, a: Var, b: Var, what: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(sa.to_vec())
        } else if numel(sa) == 1 {
            Ok(sb.to_vec())
        } else if numel(sb) == 1 {
            Ok(sa.to_vec())
        } else {
            Err(Error::dim(format!("{what}: incompatible shapes {sa:?} and {sb:?}")))
        }
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (va, vb) = (self.value(a), self.value(b));
        match (va.len(), vb.len()) {
            (x, y) if x == y => va.iter().zip(vb).map(|(p, q)| f(*p, *q)).collect(),
            (1, _) => vb.iter().map(|q| f(va[0], *q)).collect(),
            _ => va.iter().map(|p| f(*p, vb[0])).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, Op::Scale(a, c), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x * sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, Op::Silu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, Op::Tanh(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x * x).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, Op::Square(a), rg)
    }

    /// Row-wise layer normalization followed by a per-column affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2(x, "layer_norm input")?;
        if numel(self.shape(gain)) != n || numel(self.shape(bias)) != n {
            return Err(Error::dim(format!(
                "layer_norm: input {:?}, gain {:?}, bias {:?}",
                self.shape(x),
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut normed = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..n {
                let h = (row[c] - mean) * inv;
                normed[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(vec![m, n], out, Op::LayerNorm { x, gain, bias, normed, inv_std }, rg))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::input("concat_cols of nothing"))?;
        let (m, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != m {
                return Err(Error::dim(format!(
                    "concat_cols: row counts {m} and {r} ({:?})",
                    self.shape(p)
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![m, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Selects rows `idx` of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x, "gather_rows")?;
        if idx.is_empty() {
            return Err(Error::input("gather_rows with no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::dim(format!("gather_rows: index {bad} out of {m} rows")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&xv[i * n..(i + 1) * n]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![idx.len(), n], out, Op::GatherRows(x, idx.to_vec()), rg))
    }

    /// Places row `i` of `x` at row `rows[i]` of a zero `[total, n]` matrix.
    pub fn scatter_rows(&mut self, x: Var, rows: &[usize], total: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "scatter_rows")?;
        if rows.len() != m {
            return Err(Error::dim(format!("scatter_rows: {} targets for {m} rows", rows.len())));
        }
        let mut seen = vec![false; total];
        for &r in rows {
            if r >= total || std::mem::replace(&mut seen[r], true) {
                return Err(Error::input(format!("scatter_rows: bad or repeated target {r}")));
            }
        }
        let xv = self.value(x);
        let mut out = vec![0.0; total * n];
        for (i, &r) in rows.iter().enumerate() {
            out[r * n..(r + 1) * n].copy_from_slice(&xv[i * n..(i + 1) * n]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![total, n], out, Op::ScatterRows(x, rows.to_vec()), rg))
    }

    /// Multiplies row `i` by the constant `weights[i]`.
    pub fn row_scale(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let (m, n) = self.dims2(x, "row_scale")?;
        if weights.len() != m {
            return Err(Error::dim(format!("row_scale: {} weights for {m} rows", weights.len())));
        }
        let xv = self.value(x);
        let out = xv.iter().enumerate().map(|(i, v)| v * weights[i / n]).collect();
        let rg = self.rg(x);
        Ok(self.push(vec![m, n], out, Op::RowScale(x, weights.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Mean(a), rg)
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::dim(format!(
                "mse: {:?} vs {:?}",
                self.shape(pred),
                self.shape(target)
            )));
        }
        let (p, t) = (self.value(pred), self.value(target));
        let s = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(vec![1], vec![s], Op::Mse(pred, target), rg))
    }

    // ---- backward --------------------------------------------------------

    /// Back-propagates from a scalar `loss`, adding into leaf gradients.
    /// Calling it twice without [`zero_grad`](Self::zero_grad) accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::contract(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                add_into(&mut self.nodes[i].grad, g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn reduce_broadcast(&self, target: Var, full: Vec<f64>) -> Vec<f64> {
        if numel(self.shape(target)) == 1 && full.len() != 1 {
            vec![full.iter().sum()]
        } else {
            full
        }
    }

    fn expand(&self, v: Var, len: usize) -> Vec<f64> {
        let x = self.value(v);
        if x.len() == len {
            x.to_vec()
        } else {
            vec![x[0]; len]
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => unreachable!("leaves handled by caller"),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, g, false, self.value(*b), true, 0.0, &mut da);
                    add_into(&mut grads[a.0], da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, self.value(*a), true, g, false, 0.0, &mut db);
                    add_into(&mut grads[b.0], db);
                }
            }
            Op::Linear { x, w, b } => {
                let (m, k) = (self.shape(*x)[0], self.shape(*x)[1]);
                let n = self.shape(*w)[1];
                if self.rg(*x) {
                    let mut dx = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, g, false, self.value(*w), true, 0.0, &mut dx);
                    add_into(&mut grads[x.0], dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, self.value(*x), true, g, false, 0.0, &mut dw);
                    add_into(&mut grads[w.0], dw);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; n];
                    for r in 0..m {
                        db.iter_mut().zip(&g[r * n..(r + 1) * n]).for_each(|(d, v)| *d += v);
                    }
                    add_into(&mut grads[b.0], db);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.rg(*a) {
                    let da = self.reduce_broadcast(*a, g.to_vec());
                    add_into(&mut grads[a.0], da);
                }
                if self.rg(*b) {
                    let db = self.reduce_broadcast(*b, g.iter().map(|v| sign * v).collect());
                    add_into(&mut grads[b.0], db);
                }
            }
            Op::Mul(a, b) => {
                let len = g.len();
                if self.rg(*a) {
                    let bv = self.expand(*b, len);
                    let da = g.iter().zip(&bv).map(|(x, y)| x * y).collect();
                    let da = self.reduce_broadcast(*a, da);
                    add_into(&mut grads[a.0], da);
                }
                if self.rg(*b) {
                    let av = self.expand(*a, len);
                    let db = g.iter().zip(&av).map(|(x, y)| x * y).collect();
                    let db = self.reduce_broadcast(*b, db);
                    add_into(&mut grads[b.0], db);
                }
            }
            Op::Scale(a, c) => {
                add_into(&mut grads[a.0], g.iter().map(|v| v * c).collect());
            }
            Op::Silu(a) => {
                let d = self
                    .value(*a)
                    .iter()
                    .zip(g)
                    .map(|(&x, gv)| {
                        let s = sigmoid(x);
                        gv * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                add_into(&mut grads[a.0], d);
            }
            Op::Tanh(a) => {
                let y = node.value.as_slice();
                let d = y.iter().zip(g).map(|(t, gv)| gv * (1.0 - t * t)).collect();
                add_into(&mut grads[a.0], d);
            }
            Op::Square(a) => {
                let d = self.value(*a).iter().zip(g).map(|(x, gv)| 2.0 * x * gv).collect();
                add_into(&mut grads[a.0], d);
            }
            Op::LayerNorm { x, gain, bias, normed, inv_std } => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let gv = self.value(*gain);
                if self.rg(*gain) {
                    let mut dg = vec![0.0; n];
                    for (j, (gg, h)) in g.iter().zip(normed).enumerate() {
                        dg[j % n] += gg * h;
                    }
                    add_into(&mut grads[gain.0], dg);
                }
                if self.rg(*bias) {
                    let mut db = vec![0.0; n];
                    for (j, gg) in g.iter().enumerate() {
                        db[j % n] += gg;
                    }
                    add_into(&mut grads[bias.0], db);
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; m * n];
                    let nf = n as f64;
                    for r in 0..m {
                        let row = r * n..(r + 1) * n;
                        let dh: Vec<f64> =
                            g[row.clone()].iter().zip(gv).map(|(a, b)| a * b).collect();
                        let h = &normed[row.clone()];
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(h).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            dx[r * n + c] =
                                inv_std[r] / nf * (nf * dh[c] - sum_dh - h[c] * sum_dh_h);
                        }
                    }
                    add_into(&mut grads[x.0], dx);
                }
            }
            Op::ConcatCols(parts) => {
                let m = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for p in parts {
                    let w = self.shape(*p)[1];
                    if self.rg(*p) {
                        let mut d = Vec::with_capacity(m * w);
                        for r in 0..m {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        add_into(&mut grads[p.0], d);
                    }
                    offset += w;
                }
            }
            Op::GatherRows(x, idx) => {
                let n = node.shape[1];
                let mut d = vec![0.0; numel(self.shape(*x))];
                for (k, &r) in idx.iter().enumerate() {
                    d[r * n..(r + 1) * n]
                        .iter_mut()
                        .zip(&g[k * n..(k + 1) * n])
                        .for_each(|(a, b)| *a += b);
                }
                add_into(&mut grads[x.0], d);
            }
            Op::ScatterRows(x, rows) => {
                let n = node.shape[1];
                let mut d = Vec::with_capacity(rows.len() * n);
                for &r in rows {
                    d.extend_from_slice(&g[r * n..(r + 1) * n]);
                }
                add_into(&mut grads[x.0], d);
            }
            Op::RowScale(x, w) => {
                let n = node.shape[1];
                let d = g.iter().enumerate().map(|(j, v)| v * w[j / n]).collect();
                add_into(&mut grads[x.0], d);
            }
            Op::Sum(a) => {
                let n = numel(self.shape(*a));
                add_into(&mut grads[a.0], vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = numel(self.shape(*a));
                add_into(&mut grads[a.0], vec![g[0] / n as f64; n]);
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (self.value(*p), self.value(*t));
                let c = 2.0 * g[0] / pv.len() as f64;
                let dp: Vec<f64> = pv.iter().zip(tv).map(|(a, b)| c * (a - b)).collect();
                if self.rg(*t) {
                    add_into(&mut grads[t.0], dp.iter().map(|v| -v).collect());
                }
                if self.rg(*p) {
                    add_into(&mut grads[p.0], dp);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: Vec<usize>, data: Vec<f64>) -> Var {
        tape.leaf(Tensor::new(shape, data).unwrap().with_requires_grad(true))
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut tape = Tape::new();
        let i = tape.leaf(Tensor::identity(2));
        let a = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0]);

        let r = tape.constant(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let s = tape.constant(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let p = tape.matmul(r, s).unwrap();
        assert_eq!(tape.value(p), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] x [2, 3]"), "{err}");
    }

    #[test]
    fn elementwise_values_and_derivatives() {
        let mut tape = Tape::new();
        let z = leaf(&mut tape, vec![1], vec![0.0]);
        let s = tape.silu(z);
        assert_eq!(tape.value(s), &[0.0]);
        let t = tape.tanh(z);
        assert_eq!(tape.value(t), &[0.0]);
        tape.backward(t).unwrap();
        assert!((tape.grad(z).unwrap()[0] - 1.0).abs() < 1e-15);

        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1], vec![3.0]);
        let y = tape.square(x);
        assert_eq!(tape.value(y), &[9.0]);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn incompatible_broadcast_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2], vec![1.0, 2.0]).unwrap();
        let b = tape.constant(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(tape.add(a, b), Err(Error::Dimension(_))));
        let s = tape.constant(vec![1], vec![2.0]).unwrap();
        let m = tape.mul(a, s).unwrap();
        assert_eq!(tape.value(m), &[2.0, 4.0]);
    }

    #[test]
    fn mse_values_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let same = tape.mse(x, x).unwrap();
        assert_eq!(tape.value(same), &[0.0]);

        let p = tape.constant(vec![2], vec![0.0, 0.0]).unwrap();
        let t = tape.constant(vec![2], vec![2.0, 0.0]).unwrap();
        let l = tape.mse(p, t).unwrap();
        assert_eq!(tape.value(l), &[2.0]);

        let mut tape = Tape::new();
        let p = leaf(&mut tape, vec![1], vec![1.0]);
        let t = tape.constant(vec![1], vec![0.0]).unwrap();
        let l = tape.mse(p, t).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(p).unwrap(), &[2.0]);

        let bad = tape.constant(vec![2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(tape.mse(p, bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn backward_requires_scalar_and_accumulates() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        let y = tape.square(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));

        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 8.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn scatter_rejects_duplicate_targets() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 1], vec![1.0, 2.0]).unwrap();
        assert!(tape.scatter_rows(x, &[0, 0], 3).is_err());
        let y = tape.scatter_rows(x, &[2, 0], 3).unwrap();
        assert_eq!(tape.value(y), &[2.0, 0.0, 1.0]);
    }
}
