//! f64 reference implementations used as finite-difference oracles.
//!
//! These deliberately do not call into the crate's tensor engine: every
//! forward rule is re-derived here in f64 so gradient checks compare two
//! independent computation paths.

#![allow(dead_code)]

pub type Mat = (Vec<f64>, usize, usize); // data, rows, cols

pub fn matmul64(a: &Mat, b: &Mat) -> Mat {
    let (ad, m, k) = (&a.0, a.1, a.2);
    let (bd, k2, n) = (&b.0, b.1, b.2);
    assert_eq!(k, k2);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = ad[i * k + p];
            for j in 0..n {
                out[i * n + j] += aip * bd[p * n + j];
            }
        }
    }
    (out, m, n)
}

pub fn relu64(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn logistic64(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect()
}

pub fn abs64(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.abs()).collect()
}

pub fn row_softmax64(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        for c in 0..cols {
            out[r * cols + c] = exps[c] / s;
        }
    }
    out
}

pub fn rms_norm64(x: &[f64], gain: &[f64], rows: usize, cols: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let ms = row.iter().map(|&v| v * v).sum::<f64>() / cols as f64 + eps;
        let rms = ms.sqrt();
        for c in 0..cols {
            out[r * cols + c] = row[c] / rms * gain[c];
        }
    }
    out
}

/// Mean negative log-softmax probability, via explicit log-sum-exp.
pub fn cross_entropy64(logits: &[f64], rows: usize, cols: usize, targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = &logits[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse: f64 = row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln() + m;
        total += lse - row[t];
    }
    total / rows as f64
}

/// Central finite differences of `f` with respect to `x`, step `h`.
pub fn finite_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut xs = x.to_vec();
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let up = f(&xs);
        xs[i] = orig - h;
        let down = f(&xs);
        xs[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Relative error with an absolute floor for near-zero gradients.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

pub fn assert_grads_close(analytic: &[f32], numeric: &[f64], tol: f64, what: &str) {
    assert_eq!(analytic.len(), numeric.len(), "{what}: length mismatch");
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = rel_err(a as f64, n);
        assert!(
            e < tol,
            "{what}: grad[{i}] analytic {a} vs numeric {n} (rel err {e:.2e})"
        );
    }
}
