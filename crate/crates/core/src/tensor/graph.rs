//! Append-only autodiff tape.
//!
//! Operands must exist before the ops that consume them, so reverse index
//! order is reverse topological order: backward walks the node vector once,
//! back to front. Gradients are only allocated and propagated for nodes
//! reachable from a parameter, which keeps frozen-weight forward passes
//! cheap to differentiate through.

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Tensor};

const RMS_EPS: f32 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Logistic(Var),
    Abs(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    GatherRows(Var, Vec<usize>),
    ReplaceRow(Var, usize, Var),
    RowSlice(Var, usize, usize),
    ColSlice(Var, usize, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    RowSoftmax(Var),
    RmsNorm(Var, Var),
    SoftmaxCrossEntropy(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Reverse-mode autodiff tape over [`Tensor`] values.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; gradients are not tracked through it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Trainable input; receives a gradient after [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ── Op constructors ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(out, rg, Op::MatMul(a, b)))
    }

    fn elementwise_shapes(&self, a: Var, b: Var, name: &str) -> Result<Vec<usize>> {
        let sa = self.nodes[a.0].value.shape();
        let sb = self.nodes[b.0].value.shape();
        if sa == sb {
            Ok(sa.to_vec())
        } else if self.nodes[a.0].value.is_scalar() {
            Ok(sb.to_vec())
        } else if self.nodes[b.0].value.is_scalar() {
            Ok(sa.to_vec())
        } else {
            Err(Error::shape(format!(
                "{name}: incompatible shapes {sa:?} and {sb:?}"
            )))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.elementwise_shapes(a, b, "add")?;
        let out = binary_map(&self.nodes[a.0].value, &self.nodes[b.0].value, shape, |x, y| x + y);
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.elementwise_shapes(a, b, "sub")?;
        let out = binary_map(&self.nodes[a.0].value, &self.nodes[b.0].value, shape, |x, y| x - y);
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(out, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.elementwise_shapes(a, b, "mul")?;
        let out = binary_map(&self.nodes[a.0].value, &self.nodes[b.0].value, shape, |x, y| x * y);
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        for x in out.data_mut() {
            *x *= c;
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(out, rg, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        for x in out.data_mut() {
            *x = x.max(0.0);
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(out, rg, Op::Relu(a))
    }

    pub fn logistic(&mut self, a: Var) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        for x in out.data_mut() {
            *x = logistic(*x);
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(out, rg, Op::Logistic(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        for x in out.data_mut() {
            *x = x.abs();
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(out, rg, Op::Abs(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.transpose();
        let rg = self.nodes[a.0].requires_grad;
        self.push(out, rg, Op::Transpose(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().map(|&x| x as f64).sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor::scalar(s as f32), rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel() as f64;
        let s: f64 = self.nodes[a.0].value.data().iter().map(|&x| x as f64).sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor::scalar((s / n) as f32), rg, Op::Mean(a))
    }

    /// Select rows of a `[V x d]` table; used for embedding lookups and for
    /// picking the loss positions out of packed logits.
    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (v, d) = (t.rows(), t.cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::Index(format!("gather_rows: row {bad} >= {v}")));
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in &indices {
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::new(vec![indices.len(), d], data)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(out, rg, Op::GatherRows(a, indices)))
    }

    /// Copy of `x` with row `row` replaced by the `[1 x d]` tensor `v`.
    pub fn replace_row(&mut self, x: Var, row: usize, v: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (r, d) = (t.rows(), t.cols());
        if row >= r {
            return Err(Error::Index(format!("replace_row: row {row} >= {r}")));
        }
        if self.nodes[v.0].value.numel() != d {
            return Err(Error::shape(format!(
                "replace_row: row width {} != {d}",
                self.nodes[v.0].value.numel()
            )));
        }
        let mut out = t.clone();
        out.row_slice_mut(row)
            .copy_from_slice(self.nodes[v.0].value.data());
        let rg = self.any_requires(&[x, v]);
        Ok(self.push(out, rg, Op::ReplaceRow(x, row, v)))
    }

    pub fn row_slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (r, d) = (t.rows(), t.cols());
        if start + len > r {
            return Err(Error::Index(format!(
                "row_slice: {start}+{len} > {r} rows"
            )));
        }
        let data = t.data()[start * d..(start + len) * d].to_vec();
        let out = Tensor::new(vec![len, d], data)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(out, rg, Op::RowSlice(a, start, len)))
    }

    pub fn col_slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (r, d) = (t.rows(), t.cols());
        if start + len > d {
            return Err(Error::Index(format!(
                "col_slice: {start}+{len} > {d} cols"
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.row_slice(i)[start..start + len]);
        }
        let out = Tensor::new(vec![r, len], data)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(out, rg, Op::ColSlice(a, start, len)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows: no inputs"));
        }
        let d = self.nodes[parts[0].0].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.cols() != d {
                return Err(Error::shape("concat_rows: column widths differ"));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, d], data)?;
        let rg = self.any_requires(parts);
        Ok(self.push(out, rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols: no inputs"));
        }
        let r = self.nodes[parts[0].0].value.rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| self.nodes[p.0].value.cols())
            .collect();
        for &p in parts {
            if self.nodes[p.0].value.rows() != r {
                return Err(Error::shape("concat_cols: row counts differ"));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row_slice(i));
            }
        }
        let out = Tensor::new(vec![r, total], data)?;
        let rg = self.any_requires(parts);
        Ok(self.push(out, rg, Op::ConcatCols(parts.to_vec())))
    }

    /// Numerically stabilized softmax over each row.
    pub fn row_softmax(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let (r, d) = (t.rows(), t.cols());
        let mut out = Tensor::zeros(vec![r, d]);
        for i in 0..r {
            softmax_row(t.row_slice(i), out.row_slice_mut(i));
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(out, rg, Op::RowSoftmax(a))
    }

    /// RMS normalization of each row of `x`, scaled by `gain` (`[1 x d]`).
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (r, d) = (t.rows(), t.cols());
        if self.nodes[gain.0].value.numel() != d {
            return Err(Error::shape(format!(
                "rms_norm: gain width {} != {d}",
                self.nodes[gain.0].value.numel()
            )));
        }
        let mut out = Tensor::zeros(vec![r, d]);
        {
            let g = self.nodes[gain.0].value.data();
            for i in 0..r {
                rms_norm_row(t.row_slice(i), g, out.row_slice_mut(i));
            }
        }
        let rg = self.any_requires(&[x, gain]);
        Ok(self.push(out, rg, Op::RmsNorm(x, gain)))
    }

    /// Mean negative log-softmax probability of the target classes.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let t = &self.nodes[logits.0].value;
        let (n, v) = (t.rows(), t.cols());
        if targets.len() != n {
            return Err(Error::shape(format!(
                "cross_entropy: {} targets for {n} rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= v) {
            return Err(Error::Index(format!("cross_entropy: target {bad} >= {v}")));
        }
        let mut total = 0.0f64;
        for (i, &c) in targets.iter().enumerate() {
            let row = t.row_slice(i);
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let lse: f64 = row.iter().map(|&x| ((x - m) as f64).exp()).sum();
            total += lse.ln() + m as f64 - row[c] as f64;
        }
        let loss = (total / n as f64) as f32;
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxCrossEntropy(logits, targets),
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Accumulate gradients of `loss` into every `requires_grad` node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let gout = grads[idx].take().unwrap();
            self.accumulate_inputs(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }

        for (idx, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if self.nodes[idx].requires_grad {
                    let shape = self.nodes[idx].value.shape().to_vec();
                    match &mut self.nodes[idx].grad {
                        Some(existing) => {
                            for (e, v) in existing.data_mut().iter_mut().zip(&g) {
                                *e += v;
                            }
                        }
                        None => self.nodes[idx].grad = Some(Tensor::new(shape, g)?),
                    }
                }
            }
        }
        Ok(())
    }

    fn grad_buf<'a>(
        &self,
        grads: &'a mut [Option<Vec<f32>>],
        v: Var,
    ) -> Option<&'a mut Vec<f32>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        if grads[v.0].is_none() {
            grads[v.0] = Some(vec![0.0; self.nodes[v.0].value.numel()]);
        }
        grads[v.0].as_mut()
    }

    fn accumulate_inputs(&self, idx: usize, gout: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let nn = self.nodes[b.0].value.cols();
                if self.nodes[a.0].requires_grad {
                    let bt = self.nodes[b.0].value.transpose();
                    let mut da = vec![0.0; m * k];
                    matmul_into(gout, bt.data(), m, nn, k, &mut da);
                    add_into(self.grad_buf(grads, a).unwrap(), &da);
                }
                if self.nodes[b.0].requires_grad {
                    let at = self.nodes[a.0].value.transpose();
                    let mut db = vec![0.0; k * nn];
                    matmul_into(at.data(), gout, k, m, nn, &mut db);
                    add_into(self.grad_buf(grads, b).unwrap(), &db);
                }
            }
            Op::Add(a, b) => {
                self.acc_broadcast(grads, a, gout, 1.0);
                self.acc_broadcast(grads, b, gout, 1.0);
            }
            Op::Sub(a, b) => {
                self.acc_broadcast(grads, a, gout, 1.0);
                self.acc_broadcast(grads, b, gout, -1.0);
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let bv = &self.nodes[b.0].value;
                    let scaled = mul_for_grad(gout, bv, self.nodes[a.0].value.numel());
                    add_into(self.grad_buf(grads, a).unwrap(), &scaled);
                }
                if self.nodes[b.0].requires_grad {
                    let av = &self.nodes[a.0].value;
                    let scaled = mul_for_grad(gout, av, self.nodes[b.0].value.numel());
                    add_into(self.grad_buf(grads, b).unwrap(), &scaled);
                }
            }
            Op::Scale(a, c) => {
                if let Some(buf) = self.grad_buf(grads, a) {
                    for (g, &o) in buf.iter_mut().zip(gout) {
                        *g += c * o;
                    }
                }
            }
            Op::Relu(a) => {
                if self.nodes[a.0].requires_grad {
                    let x = self.nodes[a.0].value.data().to_vec();
                    let buf = self.grad_buf(grads, a).unwrap();
                    for ((g, &o), &xv) in buf.iter_mut().zip(gout).zip(&x) {
                        if xv > 0.0 {
                            *g += o;
                        }
                    }
                }
            }
            Op::Logistic(a) => {
                if self.nodes[a.0].requires_grad {
                    let y = self.nodes[idx].value.data().to_vec();
                    let buf = self.grad_buf(grads, a).unwrap();
                    for ((g, &o), &yv) in buf.iter_mut().zip(gout).zip(&y) {
                        *g += o * yv * (1.0 - yv);
                    }
                }
            }
            Op::Abs(a) => {
                if self.nodes[a.0].requires_grad {
                    let x = self.nodes[a.0].value.data().to_vec();
                    let buf = self.grad_buf(grads, a).unwrap();
                    for ((g, &o), &xv) in buf.iter_mut().zip(gout).zip(&x) {
                        *g += o * xv.signum() * if xv == 0.0 { 0.0 } else { 1.0 };
                    }
                }
            }
            Op::Transpose(a) => {
                if self.nodes[a.0].requires_grad {
                    let (m, nn) = (
                        self.nodes[a.0].value.rows(),
                        self.nodes[a.0].value.cols(),
                    );
                    let buf = self.grad_buf(grads, a).unwrap();
                    for i in 0..nn {
                        for j in 0..m {
                            buf[j * nn + i] += gout[i * m + j];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(buf) = self.grad_buf(grads, a) {
                    for g in buf.iter_mut() {
                        *g += gout[0];
                    }
                }
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel() as f32;
                if let Some(buf) = self.grad_buf(grads, a) {
                    for g in buf.iter_mut() {
                        *g += gout[0] / n;
                    }
                }
            }
            Op::GatherRows(a, indices) => {
                if self.nodes[a.0].requires_grad {
                    let d = self.nodes[a.0].value.cols();
                    let buf = self.grad_buf(grads, a).unwrap();
                    for (r, &i) in indices.iter().enumerate() {
                        for c in 0..d {
                            buf[i * d + c] += gout[r * d + c];
                        }
                    }
                }
            }
            Op::ReplaceRow(x, row, v) => {
                let d = self.nodes[x.0].value.cols();
                if self.nodes[x.0].requires_grad {
                    let buf = self.grad_buf(grads, x).unwrap();
                    for (i, chunk) in gout.chunks(d).enumerate() {
                        if i == row {
                            continue;
                        }
                        for (c, &g) in chunk.iter().enumerate() {
                            buf[i * d + c] += g;
                        }
                    }
                }
                if self.nodes[v.0].requires_grad {
                    let buf = self.grad_buf(grads, v).unwrap();
                    add_into(buf, &gout[row * d..(row + 1) * d]);
                }
            }
            Op::RowSlice(a, start, _len) => {
                if self.nodes[a.0].requires_grad {
                    let d = self.nodes[a.0].value.cols();
                    let buf = self.grad_buf(grads, a).unwrap();
                    add_into(&mut buf[start * d..start * d + gout.len()], gout);
                }
            }
            Op::ColSlice(a, start, len) => {
                if self.nodes[a.0].requires_grad {
                    let d = self.nodes[a.0].value.cols();
                    let r = self.nodes[a.0].value.rows();
                    let buf = self.grad_buf(grads, a).unwrap();
                    for i in 0..r {
                        for c in 0..len {
                            buf[i * d + start + c] += gout[i * len + c];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let sz = self.nodes[p.0].value.numel();
                    if self.nodes[p.0].requires_grad {
                        let buf = self.grad_buf(grads, p).unwrap();
                        add_into(buf, &gout[offset..offset + sz]);
                    }
                    offset += sz;
                }
            }
            Op::ConcatCols(parts) => {
                let r = self.nodes[parts[0].0].value.rows();
                let total: usize = parts
                    .iter()
                    .map(|&p| self.nodes[p.0].value.cols())
                    .sum();
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.cols();
                    if self.nodes[p.0].requires_grad {
                        let buf = self.grad_buf(grads, p).unwrap();
                        for i in 0..r {
                            for c in 0..w {
                                buf[i * w + c] += gout[i * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::RowSoftmax(a) => {
                if self.nodes[a.0].requires_grad {
                    let y = self.nodes[idx].value.clone();
                    let (r, d) = (y.rows(), y.cols());
                    let buf = self.grad_buf(grads, a).unwrap();
                    for i in 0..r {
                        let yr = y.row_slice(i);
                        let go = &gout[i * d..(i + 1) * d];
                        let dot: f32 = yr.iter().zip(go).map(|(&a, &b)| a * b).sum();
                        for c in 0..d {
                            buf[i * d + c] += yr[c] * (go[c] - dot);
                        }
                    }
                }
            }
            Op::RmsNorm(x, gain) => {
                let xv = self.nodes[x.0].value.clone();
                let gv = self.nodes[gain.0].value.clone();
                let (r, d) = (xv.rows(), xv.cols());
                if self.nodes[x.0].requires_grad {
                    let buf = self.grad_buf(grads, x).unwrap();
                    for i in 0..r {
                        let xr = xv.row_slice(i);
                        let go = &gout[i * d..(i + 1) * d];
                        let ms: f32 =
                            xr.iter().map(|&v| v * v).sum::<f32>() / d as f32 + RMS_EPS;
                        let rms = ms.sqrt();
                        let h: Vec<f32> =
                            go.iter().zip(gv.data()).map(|(&o, &g)| o * g).collect();
                        let hx: f32 = h.iter().zip(xr).map(|(&a, &b)| a * b).sum();
                        for c in 0..d {
                            buf[i * d + c] +=
                                h[c] / rms - xr[c] * hx / (d as f32 * rms * rms * rms);
                        }
                    }
                }
                if self.nodes[gain.0].requires_grad {
                    let buf = self.grad_buf(grads, gain).unwrap();
                    for i in 0..r {
                        let xr = xv.row_slice(i);
                        let go = &gout[i * d..(i + 1) * d];
                        let ms: f32 =
                            xr.iter().map(|&v| v * v).sum::<f32>() / d as f32 + RMS_EPS;
                        let rms = ms.sqrt();
                        for c in 0..d {
                            buf[c] += go[c] * xr[c] / rms;
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy(logits, targets) => {
                if self.nodes[logits.0].requires_grad {
                    let lv = self.nodes[logits.0].value.clone();
                    let (n, v) = (lv.rows(), lv.cols());
                    let buf = self.grad_buf(grads, logits).unwrap();
                    let upstream = gout[0] / n as f32;
                    let mut probs = vec![0.0f32; v];
                    for (i, &c) in targets.iter().enumerate() {
                        softmax_row(lv.row_slice(i), &mut probs);
                        for (j, &p) in probs.iter().enumerate() {
                            let onehot = if j == c { 1.0 } else { 0.0 };
                            buf[i * v + j] += upstream * (p - onehot);
                        }
                    }
                }
            }
        }
    }

    /// Scatter `gout * sign` into the gradient of `v`, reducing to a scalar
    /// if `v` is the scalar side of a broadcast.
    fn acc_broadcast(&self, grads: &mut [Option<Vec<f32>>], v: Var, gout: &[f32], sign: f32) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let numel = self.nodes[v.0].value.numel();
        let buf = self.grad_buf(grads, v).unwrap();
        if numel == gout.len() {
            for (g, &o) in buf.iter_mut().zip(gout) {
                *g += sign * o;
            }
        } else {
            debug_assert_eq!(numel, 1);
            buf[0] += sign * gout.iter().sum::<f32>();
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Elementwise combine with scalar-with-tensor broadcast.
fn binary_map(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f32> = (0..numel)
        .map(|i| {
            let x = if a.numel() == 1 { a.data()[0] } else { a.data()[i] };
            let y = if b.numel() == 1 { b.data()[0] } else { b.data()[i] };
            f(x, y)
        })
        .collect();
    Tensor { shape, data }
}

/// gout * other, shaped for the gradient of a possibly-scalar operand.
fn mul_for_grad(gout: &[f32], other: &Tensor, target_numel: usize) -> Vec<f32> {
    if target_numel == 1 {
        // Scalar operand: reduce.
        let s: f32 = if other.numel() == 1 {
            gout.iter().sum::<f32>() * other.data()[0]
        } else {
            gout.iter().zip(other.data()).map(|(&g, &o)| g * o).sum()
        };
        vec![s]
    } else if other.numel() == 1 {
        let o = other.data()[0];
        gout.iter().map(|&g| g * o).collect()
    } else {
        gout.iter().zip(other.data()).map(|(&g, &o)| g * o).collect()
    }
}

pub(crate) fn logistic(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_row(row: &[f32], out: &mut [f32]) {
    let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    let mut sum = 0.0f32;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - m).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn rms_norm_row(x: &[f32], gain: &[f32], out: &mut [f32]) {
    let d = x.len();
    let ms: f32 = x.iter().map(|&v| v * v).sum::<f32>() / d as f32 + RMS_EPS;
    let rms = ms.sqrt();
    for ((o, &xv), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = xv / rms * g;
    }
}
