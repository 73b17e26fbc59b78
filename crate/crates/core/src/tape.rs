//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node whose parents precede it, so the node
//! order is already topological and `backward` is a single reverse sweep.
//! Build a fresh [`Tape`] (or call [`Tape::clear`]) for every step.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Tanh(Var),
    Embedding(Var, Vec<usize>),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Pick(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
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

    /// Accumulated gradient of a leaf, if any flowed into it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor shaped like the value, zeros when none flowed.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let value = &self.nodes[v.0].value;
        match &self.nodes[v.0].grad {
            Some(g) => Tensor::new(value.shape().to_vec(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(value.shape()),
        }
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("shape");
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// `x[..., n] + bias[n]`, broadcasting over leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        if self.shape(bias) != [n] {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let vx = self.value(x);
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        tensor::gemm_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Matrix product over the last two axes with identical leading axes.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
            return Err(Error::dim("batch_matmul", &sa, &sb));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            tensor::gemm_acc(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::BatchMatMul(a, b), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..shape.len()).collect::<Vec<_>>() {
            return Err(Error::Contract(format!(
                "permutation {perm:?} invalid for rank {}",
                shape.len()
            )));
        }
        let (data, out_shape) = tensor::permute_data(self.value(x).data(), shape, perm);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Permute(x, perm.to_vec()),
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::Contract("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    fn check_axis(&self, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::Contract(format!(
                "axis {axis} out of range for shape {:?}",
                self.shape(x)
            )));
        }
        if !self.value(x).is_finite() {
            return Err(Error::Numeric("non-finite input to softmax".into()));
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let vx = self.value(x);
        let data = tensor::softmax_axis(vx.data(), vx.shape(), axis);
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax(x, axis), rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let vx = self.value(x);
        let data = tensor::log_softmax_axis(vx.data(), vx.shape(), axis);
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::LogSoftmax(x, axis), rg))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let vx = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = vx.numel() / n;
        let mut normed = vec![0.0; vx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                normed[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(tensor::gelu);
        let rg = self.rg(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        let rg = self.rg(&[x]);
        self.push(value, Op::Tanh(x), rg)
    }

    /// Gathers rows of a `[rows, dim]` table; output is `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::Contract("embedding table must be 2-D".into()));
        }
        let (rows, dim) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Input(format!(
                "id {bad} out of range for {rows} rows"
            )));
        }
        if ids.is_empty() {
            return Err(Error::Contract("embedding lookup with no ids".into()));
        }
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            data.extend_from_slice(&t[i * dim..(i + 1) * dim]);
        }
        let value = Tensor::new(vec![ids.len(), dim], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(value, Op::Embedding(table, ids.to_vec()), rg))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Contract(format!(
                "narrow({axis}, {start}, {len}) out of range for {shape:?}"
            )));
        }
        let (outer, n, inner) = tensor::axis_extents(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Narrow { x, axis, start },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean over all elements of `(a - b)^2`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let s = va
            .iter()
            .zip(vb)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / va.len() as f64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), rg))
    }

    /// Picks `x[r, idx[r]]` from a `[rows, cols]` matrix.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 || shape[0] != idx.len() {
            return Err(Error::dim("pick", shape, &[idx.len()]));
        }
        let cols = shape[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(Error::Input(format!("class index {bad} >= {cols}")));
        }
        let d = self.value(x).data();
        let data = idx
            .iter()
            .enumerate()
            .map(|(r, &c)| d[r * cols + c])
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::vector(data), Op::Pick(x, idx.to_vec()), rg))
    }

    /// Fills every upstream gradient of the scalar `loss`.
    ///
    /// Leaf gradients accumulate across calls; interior gradients are
    /// consumed by the sweep.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.accumulate(loss, vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            for (parent, contrib) in self.vjp(idx, &g) {
                self.accumulate(parent, contrib);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
            None => node.grad = Some(contrib),
        }
    }

    /// Vector-Jacobian products of node `idx` for upstream gradient `g`.
    fn vjp(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|x| -x).collect()));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    out.push((*a, g.iter().zip(val(*b)).map(|(x, y)| x * y).collect()));
                }
                if wants(*b) {
                    out.push((*b, g.iter().zip(val(*a)).map(|(x, y)| x * y).collect()));
                }
            }
            Op::AddBias(x, bias) => {
                out.push((*x, g.to_vec()));
                if wants(*bias) {
                    let n = val(*bias).len();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    out.push((*bias, db));
                }
            }
            Op::Scale(x, c) => out.push((*x, g.iter().map(|v| v * c).collect())),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    tensor::gemm_nt_acc(g, val(*b), &mut da, m, n, k);
                    out.push((*a, da));
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    tensor::gemm_tn_acc(val(*a), g, &mut db, k, m, n);
                    out.push((*b, db));
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let r = sa.len();
                let batch: usize = sa[..r - 2].iter().product();
                let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
                let (va, vb) = (val(*a), val(*b));
                if wants(*a) {
                    let mut da = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        tensor::gemm_nt_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &vb[i * k * n..(i + 1) * k * n],
                            &mut da[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    out.push((*a, da));
                }
                if wants(*b) {
                    let mut db = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        tensor::gemm_tn_acc(
                            &va[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut db[i * k * n..(i + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    out.push((*b, db));
                }
            }
            Op::Permute(x, perm) => {
                let inv = tensor::inverse_perm(perm);
                let (dx, _) = tensor::permute_data(g, node.value.shape(), &inv);
                out.push((*x, dx));
            }
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Softmax(x, axis) => {
                let y = node.value.data();
                let (outer, n, inner) = tensor::axis_extents(node.value.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * n * inner + k * inner + i;
                        let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..n {
                            dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::LogSoftmax(x, axis) => {
                let y = node.value.data();
                let (outer, n, inner) = tensor::axis_extents(node.value.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * n * inner + k * inner + i;
                        let gs: f64 = (0..n).map(|k| g[at(k)]).sum();
                        for k in 0..n {
                            dx[at(k)] = g[at(k)] - y[at(k)].exp() * gs;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            } => {
                let gv = val(*gain);
                let n = gv.len();
                if wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let span = r * n..(r + 1) * n;
                        let (gr, hr) = (&g[span.clone()], &normed[span.clone()]);
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dx[r * n + j] =
                                rs / n as f64 * (n as f64 * dh[j] - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                    out.push((*x, dx));
                }
                if wants(*gain) {
                    let mut dg = vec![0.0; n];
                    for (gr, hr) in g.chunks(n).zip(normed.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    out.push((*gain, dg));
                }
                if wants(*bias) {
                    let mut db = vec![0.0; n];
                    for gr in g.chunks(n) {
                        db.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                    out.push((*bias, db));
                }
            }
            Op::Gelu(x) => {
                let dx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(gg, &xx)| gg * tensor::gelu_grad(xx))
                    .collect();
                out.push((*x, dx));
            }
            Op::Tanh(x) => {
                let dx = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(gg, y)| gg * (1.0 - y * y))
                    .collect();
                out.push((*x, dx));
            }
            Op::Embedding(table, ids) => {
                let shape = self.shape(*table);
                let dim = shape[1];
                let mut dt = vec![0.0; shape[0] * dim];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..dim {
                        dt[i * dim + j] += g[r * dim + j];
                    }
                }
                out.push((*table, dt));
            }
            Op::Narrow { x, axis, start } => {
                let in_shape = self.shape(*x);
                let (outer, n, inner) = tensor::axis_extents(in_shape, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    dx[base..base + len * inner].copy_from_slice(src);
                }
                out.push((*x, dx));
            }
            Op::Sum(x) => out.push((*x, vec![g[0]; val(*x).len()])),
            Op::Mean(x) => {
                let n = val(*x).len();
                out.push((*x, vec![g[0] / n as f64; n]));
            }
            Op::Mse(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let c = 2.0 * g[0] / va.len() as f64;
                let d: Vec<f64> = va.iter().zip(vb).map(|(x, y)| c * (x - y)).collect();
                if wants(*b) {
                    out.push((*b, d.iter().map(|v| -v).collect()));
                }
                out.push((*a, d));
            }
            Op::Pick(x, idx) => {
                let cols = self.shape(*x)[1];
                let mut dx = vec![0.0; val(*x).len()];
                for (r, &c) in idx.iter().enumerate() {
                    dx[r * cols + c] = g[r];
                }
                out.push((*x, dx));
            }
        }
        out
    }
}
