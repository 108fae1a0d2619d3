//! Dense f32 tensors and the reverse-mode autodiff graph built on them.
//!
//! Everything is row-major `Vec<f32>`. The graph ([`Graph`]) is an append-only
//! tape: operands are created before the ops that consume them, so reverse
//! index order is reverse topological order and backward visits each node
//! exactly once. Rank-1 vectors and rank-2 matrices cover every use in this
//! crate; there is no broadcasting beyond scalar-with-tensor and equal shapes.

mod graph;
mod optim;

pub use graph::{Graph, Op, Var};
pub(crate) use graph::{rms_norm_row, softmax_row};
pub use optim::Adam;

use rand::Rng;

use crate::error::{Error, Result};

/// Dense row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn filled(shape: Vec<usize>, v: f32) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; numel],
        }
    }

    /// Row vector `[1 x d]` from a slice.
    pub fn row(values: &[f32]) -> Self {
        Tensor {
            shape: vec![1, values.len()],
            data: values.to_vec(),
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Seeded uniform init on (-bound, bound).
    pub fn uniform(shape: Vec<usize>, bound: f32, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows of a rank-2 tensor (rank-1 counts as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn row_slice(&self, r: usize) -> &[f32] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_slice_mut(&mut self, r: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols() + c]
    }

    /// Plain matrix product (no autodiff).
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul: {:?} x {:?} inner dims differ",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0f32; m * n];
        matmul_into(&self.data, &other.data, m, k, n, &mut out);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n, m],
            data: out,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// `out +=`-free C = A[m x k] * B[k x n]; i-k-j loop order so the inner
/// update runs over contiguous rows and autovectorizes.
pub(crate) fn matmul_into(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &a_ik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if a_ik == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ik * bv;
            }
        }
    }
}

/// Row-wise orthonormalization of `w` (k x n, k <= n) by modified
/// Gram-Schmidt. Accumulates in f64 so the orthonormality defect stays
/// well under 1e-5 at the ranks used here. Deterministic: rows are
/// processed in order.
pub fn qr_orthonormalize(w: &Tensor) -> Result<Tensor> {
    let (k, n) = (w.rows(), w.cols());
    if k > n {
        return Err(Error::shape(format!(
            "qr_orthonormalize: {k} rows exceed dimension {n}"
        )));
    }
    let mut rows: Vec<Vec<f64>> = (0..k)
        .map(|i| w.row_slice(i).iter().map(|&x| x as f64).collect())
        .collect();
    for i in 0..k {
        for j in 0..i {
            let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            let (prev, cur) = rows.split_at_mut(i);
            for (x, &p) in cur[0].iter_mut().zip(&prev[j]) {
                *x -= dot * p;
            }
        }
        let norm: f64 = rows[i].iter().map(|x| x * x).sum::<f64>().sqrt();
        let orig_norm: f64 = w
            .row_slice(i)
            .iter()
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt();
        if norm <= 1e-7 * orig_norm.max(1.0) {
            return Err(Error::Degenerate(format!(
                "qr_orthonormalize: row {i} is linearly dependent on earlier rows"
            )));
        }
        for x in rows[i].iter_mut() {
            *x /= norm;
        }
    }
    let data: Vec<f32> = rows.into_iter().flatten().map(|x| x as f32).collect();
    Tensor::new(vec![k, n], data)
}

/// Extend orthonormal rows `w` (k x n) to a full n x n orthonormal basis.
/// Candidates are the standard basis vectors taken in index order, so the
/// completion is deterministic.
pub fn complete_basis(w: &Tensor) -> Result<Tensor> {
    let (k, n) = (w.rows(), w.cols());
    let mut rows: Vec<Vec<f64>> = (0..k)
        .map(|i| w.row_slice(i).iter().map(|&x| x as f64).collect())
        .collect();
    let mut cand = 0usize;
    while rows.len() < n {
        if cand >= n {
            return Err(Error::Degenerate(
                "complete_basis: ran out of candidate directions".into(),
            ));
        }
        let mut v = vec![0.0f64; n];
        v[cand] = 1.0;
        cand += 1;
        for row in &rows {
            let dot: f64 = v.iter().zip(row).map(|(a, b)| a * b).sum();
            for (x, &r) in v.iter_mut().zip(row) {
                *x -= dot * r;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for x in v.iter_mut() {
                *x /= norm;
            }
            rows.push(v);
        }
    }
    let data: Vec<f32> = rows.into_iter().flatten().map(|x| x as f32).collect();
    Tensor::new(vec![n, n], data)
}

/// `max |W W^T - I|` over the rows of `w`; the orthonormality defect.
pub fn orthonormality_defect(w: &Tensor) -> f32 {
    let k = w.rows();
    let mut worst = 0.0f32;
    for i in 0..k {
        for j in 0..k {
            let dot: f64 = w
                .row_slice(i)
                .iter()
                .zip(w.row_slice(j))
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs() as f32);
        }
    }
    worst
}
