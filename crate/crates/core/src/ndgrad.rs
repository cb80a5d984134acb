//! Dense `f64` tensors with define-by-run reverse-mode differentiation.
//!
//! Values are recorded on a [`Tape`] as operations execute. A [`Var`] is a
//! handle into the tape. Gradients can be requested for any leaf, which lets
//! the same machinery differentiate with respect to model parameters and with
//! respect to input feature points.
//!
//! Broadcasting is limited to the leading-batch rule: in `add`, `sub` and
//! `mul` the right operand may have a shape equal to the trailing dimensions
//! of the left operand, and is repeated over the leading ones.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!("shape {:?} needs {} values, got {}", shape, n, data.len()));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(shape_err!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn rows_cols(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            s => Err(shape_err!("expected a matrix, got shape {:?}", s)),
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

/// Plain (untracked) matrix product of `[n,k]` by `[k,m]`.
pub fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Log(Var),
    Pow(Var, f64),
    Sum(Var),
    Mean(Var),
    Max(Var, usize),
    LeakyRelu(Var, f64),
    Reshape(Var),
    SliceRows(Var, usize),
    Concat(Vec<Var>),
    Clamp(Var, f64, f64),
    Gather(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Computation record for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf value. `requires_grad` leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf"));
        }
        Ok(self.push(value, requires_grad, Op::Leaf))
    }

    /// A leaf that will not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Drop accumulated gradients so `backward` may run again.
    pub fn zero_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn record(&mut self, value: Tensor, inputs: &[Var], op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(value, requires_grad, op))
    }

    /// `[n,k] x [k,m] -> [n,m]`; a rank-1 left operand is treated as `[1,k]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).rows_cols()?;
        let (k2, m) = self.value(b).rows_cols()?;
        if k != k2 || self.value(b).shape.len() != 2 {
            return Err(shape_err!(
                "matmul {:?} x {:?}",
                self.value(a).shape,
                self.value(b).shape
            ));
        }
        let data = matmul_raw(&self.value(a).data, &self.value(b).data, n, k, m);
        let out = Tensor { shape: vec![n, m], data };
        self.record(out, &[a, b], Op::MatMul(a, b), "matmul")
    }

    fn broadcast_check(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let sa = &self.value(a).shape;
        let sb = &self.value(b).shape;
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(shape_err!("{op} {:?} with {:?}", sa, sb));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, name: &'static str) -> Result<Tensor> {
        self.broadcast_check(a, b, name)?;
        let va = self.value(a);
        let vb = self.value(b);
        let inner = vb.data.len().max(1);
        let data = va.data.iter().enumerate().map(|(i, &x)| f(x, vb.data[i % inner])).collect();
        Ok(Tensor { shape: va.shape.clone(), data })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x + y, "add")?;
        self.record(out, &[a, b], Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x - y, "sub")?;
        self.record(out, &[a, b], Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x * y, "mul")?;
        self.record(out, &[a, b], Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * k);
        self.record(out, &[a], Op::Scale(a, k), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + k);
        self.record(out, &[a], Op::AddScalar(a), "add_scalar")
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let neg = self.scale(a, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.record(out, &[a], Op::Sigmoid(a), "sigmoid")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(libm::log);
        self.record(out, &[a], Op::Log(a), "log")
    }

    pub fn pow(&mut self, a: Var, exponent: f64) -> Result<Var> {
        let out = self.value(a).map(|x| libm::pow(x, exponent));
        self.record(out, &[a], Op::Pow(a, exponent), "pow")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        self.record(Tensor::scalar(s), &[a], Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.data.is_empty() {
            return Err(shape_err!("mean of empty tensor"));
        }
        let m = v.data.iter().sum::<f64>() / v.data.len() as f64;
        self.record(Tensor::scalar(m), &[a], Op::Mean(a), "mean")
    }

    /// Maximum over all elements. The gradient goes to the first maximal
    /// element.
    pub fn max(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.data.is_empty() {
            return Err(shape_err!("max of empty tensor"));
        }
        let mut idx = 0;
        for (i, &x) in v.data.iter().enumerate() {
            if x > v.data[idx] {
                idx = i;
            }
        }
        let out = Tensor::scalar(v.data[idx]);
        self.record(out, &[a], Op::Max(a, idx), "max")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.leaky_relu(a, 0.0)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.record(out, &[a], Op::LeakyRelu(a, slope), "leaky_relu")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let out = Tensor::new(shape, v.data.clone())?;
        self.record(out, &[a], Op::Reshape(a), "reshape")
    }

    /// Rows `start..end` along the first axis.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a);
        let rows = *v.shape.first().ok_or_else(|| shape_err!("slice of scalar"))?;
        if start > end || end > rows {
            return Err(shape_err!("slice {start}..{end} of {rows} rows"));
        }
        let inner: usize = v.shape[1..].iter().product();
        let mut shape = v.shape.clone();
        shape[0] = end - start;
        let data = v.data[start * inner..end * inner].to_vec();
        self.record(Tensor { shape, data }, &[a], Op::SliceRows(a, start), "slice")
    }

    /// Concatenate along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let tail = self.value(*first).shape.get(1..).unwrap_or(&[]).to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape.is_empty() || v.shape[1..] != tail[..] {
                return Err(shape_err!("concat {:?} with trailing {:?}", v.shape, tail));
            }
            rows += v.shape[0];
            data.extend_from_slice(&v.data);
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        self.record(Tensor { shape, data }, parts, Op::Concat(parts.to_vec()), "concat")
    }

    /// Elementwise clamp; gradient passes only where the input is inside
    /// `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.record(out, &[a], Op::Clamp(a, lo, hi), "clamp")
    }

    /// Select elements by flat index into a rank-1 tensor.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let mut data = Vec::with_capacity(indices.len());
        for &i in indices {
            data.push(*v.data.get(i).ok_or_else(|| shape_err!("gather index {i} of {}", v.data.len()))?);
        }
        let out = Tensor { shape: vec![indices.len()], data };
        self.record(out, &[a], Op::Gather(a, indices.to_vec()), "gather")
    }

    /// Populate gradients of the scalar `loss` with respect to every
    /// `requires_grad` value it depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward("called twice without zero_grads"));
        }
        if self.value(loss).data.len() != 1 {
            return Err(Error::Backward("loss must be a scalar"));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Tensor::filled(&self.value(loss).shape.clone(), 1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else { continue };
            self.propagate(idx, &g)?;
            self.grads[idx] = Some(g);
        }
        self.backward_done = true;
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, b) in g.data.iter_mut().zip(delta.data) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    /// Reduce a gradient shaped like `a` to the (trailing) shape of `b`.
    fn unbroadcast(&self, g: Vec<f64>, b: Var) -> Tensor {
        let sb = self.value(b).shape.clone();
        let inner = self.value(b).data.len().max(1);
        if inner == g.len() {
            return Tensor { shape: sb, data: g };
        }
        let mut out = vec![0.0; inner];
        for (i, v) in g.into_iter().enumerate() {
            out[i % inner] += v;
        }
        Tensor { shape: sb, data: out }
    }

    fn propagate(&mut self, idx: usize, g: &Tensor) -> Result<()> {
        let op = self.nodes[idx].op.clone();
        let like = |t: &Tensor, data: Vec<f64>| Tensor { shape: t.shape.clone(), data };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.value(a).rows_cols()?;
                let (_, m) = self.value(b).rows_cols()?;
                if self.rg(a) {
                    let bt = transpose_raw(&self.value(b).data, k, m);
                    let da = matmul_raw(&g.data, &bt, n, m, k);
                    let t = like(self.value(a), da);
                    self.accumulate(a, t);
                }
                if self.rg(b) {
                    let at = transpose_raw(&self.value(a).data, n, k);
                    let db = matmul_raw(&at, &g.data, k, n, m);
                    let t = like(self.value(b), db);
                    self.accumulate(b, t);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.nodes[idx].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.rg(a) {
                    self.accumulate(a, g.clone());
                }
                if self.rg(b) {
                    let db = self.unbroadcast(g.data.iter().map(|v| sign * v).collect(), b);
                    self.accumulate(b, db);
                }
            }
            Op::Mul(a, b) => {
                let va = self.value(a).data.clone();
                let vb = self.value(b).data.clone();
                let inner = vb.len().max(1);
                if self.rg(a) {
                    let da = g.data.iter().enumerate().map(|(i, gv)| gv * vb[i % inner]).collect();
                    let t = like(self.value(a), da);
                    self.accumulate(a, t);
                }
                if self.rg(b) {
                    let db = g.data.iter().zip(&va).map(|(gv, av)| gv * av).collect();
                    let t = self.unbroadcast(db, b);
                    self.accumulate(b, t);
                }
            }
            Op::Scale(a, k) => {
                self.accumulate(a, g.map(|v| v * k));
            }
            Op::AddScalar(a) => self.accumulate(a, g.clone()),
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value.data;
                let d = g.data.iter().zip(y).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect();
                self.accumulate(a, like(g, d));
            }
            Op::Log(a) => {
                let x = &self.value(a).data;
                let d = g.data.iter().zip(x).map(|(gv, xv)| gv / xv).collect();
                self.accumulate(a, like(g, d));
            }
            Op::Pow(a, e) => {
                let x = &self.value(a).data;
                let d = g
                    .data
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| if e == 0.0 { 0.0 } else { gv * e * libm::pow(xv, e - 1.0) })
                    .collect();
                self.accumulate(a, like(g, d));
            }
            Op::Sum(a) => {
                let t = Tensor::filled(&self.value(a).shape.clone(), g.data[0]);
                self.accumulate(a, t);
            }
            Op::Mean(a) => {
                let n = self.value(a).data.len() as f64;
                let t = Tensor::filled(&self.value(a).shape.clone(), g.data[0] / n);
                self.accumulate(a, t);
            }
            Op::Max(a, i) => {
                let mut t = Tensor::zeros(&self.value(a).shape.clone());
                t.data[i] = g.data[0];
                self.accumulate(a, t);
            }
            Op::LeakyRelu(a, slope) => {
                let x = &self.value(a).data;
                let d = g.data.iter().zip(x).map(|(gv, &xv)| if xv > 0.0 { *gv } else { slope * gv }).collect();
                self.accumulate(a, like(g, d));
            }
            Op::Reshape(a) => {
                let t = like(self.value(a), g.data.clone());
                self.accumulate(a, t);
            }
            Op::SliceRows(a, start) => {
                let src = self.value(a);
                let inner: usize = src.shape[1..].iter().product();
                let mut t = Tensor::zeros(&src.shape.clone());
                t.data[start * inner..start * inner + g.data.len()].copy_from_slice(&g.data);
                self.accumulate(a, t);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(p).data.len();
                    if self.rg(p) {
                        let t = like(self.value(p), g.data[offset..offset + n].to_vec());
                        self.accumulate(p, t);
                    }
                    offset += n;
                }
            }
            Op::Clamp(a, lo, hi) => {
                let x = &self.value(a).data;
                let d = g
                    .data
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| if xv >= lo && xv <= hi { *gv } else { 0.0 })
                    .collect();
                self.accumulate(a, like(g, d));
            }
            Op::Gather(a, indices) => {
                let mut t = Tensor::zeros(&self.value(a).shape.clone());
                for (gv, i) in g.data.iter().zip(indices) {
                    t.data[i] += gv;
                }
                self.accumulate(a, t);
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Adam optimizer state for a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[&Tensor], lr: f64) -> Self {
        Self::with_betas(params, lr, (0.9, 0.999), 1e-8)
    }

    pub fn with_betas(params: &[&Tensor], lr: f64, betas: (f64, f64), eps: f64) -> Self {
        let zeros = |p: &&Tensor| Tensor::zeros(p.shape());
        Self {
            lr,
            betas,
            eps,
            step: 0,
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update. `grads[i]` must have the shape of `params[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(shape_err!("adam state holds {} tensors, got {}", self.first.len(), params.len()));
        }
        for (p, g) in params.iter().zip(grads) {
            let g = g.ok_or(Error::Backward("missing gradient for parameter"))?;
            if g.shape() != p.shape() {
                return Err(shape_err!("grad {:?} for param {:?}", g.shape(), p.shape()));
            }
        }
        self.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - libm::pow(b1, self.step as f64);
        let c2 = 1.0 - libm::pow(b2, self.step as f64);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].unwrap();
            let m = &mut self.first[i].data;
            let v = &mut self.second[i].data;
            let mut next = p.data.clone();
            for j in 0..next.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g.data[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g.data[j] * g.data[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                next[j] -= self.lr * mh / (libm::sqrt(vh) + self.eps);
            }
            if next.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("adam update"));
            }
            p.data = next;
        }
        Ok(())
    }
}
