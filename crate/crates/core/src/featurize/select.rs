//! L1 feature selection: multinomial logistic regression trained by
//! proximal gradient descent; selected dimensions are those whose
//! largest-magnitude class weight exceeds the threshold.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct L1Selection {
    /// `[n_classes x d]` weight matrix after soft thresholding.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub selected: Vec<usize>,
    pub iterations: usize,
}

/// Train an L1-penalized softmax classifier on featurized samples and
/// return the dimensions with any |weight| > `eps`. `c` is the inverse
/// penalty strength (sklearn's convention): the L1 weight is 1/c.
pub fn select_features_l1(
    features: &[Vec<f32>],
    labels: &[usize],
    c: f64,
    eps: f64,
) -> Result<L1Selection> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::contract(format!(
            "select_features_l1: {} samples vs {} labels",
            features.len(),
            labels.len()
        )));
    }
    let n = features.len();
    let d = features[0].len();
    let n_classes = labels.iter().max().unwrap() + 1;
    if labels.iter().collect::<std::collections::BTreeSet<_>>().len() < 2 {
        return Err(Error::contract(
            "select_features_l1: need at least 2 classes".to_string(),
        ));
    }
    if c <= 0.0 {
        return Err(Error::contract("select_features_l1: c must be positive"));
    }
    let alpha = 1.0 / c / n as f64; // per-sample penalty

    let x: Vec<Vec<f64>> = features
        .iter()
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect();

    // Lipschitz bound for the softmax loss gradient: 0.5 * max row norm^2
    // is a safe scale at our sizes; use a conservative fixed step from it.
    let max_sq: f64 = x
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>())
        .fold(0.0, f64::max)
        .max(1e-12);
    let step = 1.0 / max_sq;

    let mut w = vec![vec![0.0f64; d]; n_classes];
    let mut b = vec![0.0f64; n_classes];
    let max_iters = 1000;
    let tol = 1e-6;
    let mut iterations = 0;
    for it in 0..max_iters {
        iterations = it + 1;
        // Gradient of mean CE.
        let mut gw = vec![vec![0.0f64; d]; n_classes];
        let mut gb = vec![0.0f64; n_classes];
        for (xi, &yi) in x.iter().zip(labels) {
            let mut logits: Vec<f64> = (0..n_classes)
                .map(|k| b[k] + w[k].iter().zip(xi).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - m).exp();
                z += *l;
            }
            for k in 0..n_classes {
                let p = logits[k] / z - if k == yi { 1.0 } else { 0.0 };
                gb[k] += p / n as f64;
                for (g, &xv) in gw[k].iter_mut().zip(xi) {
                    *g += p * xv / n as f64;
                }
            }
        }
        // Proximal step: gradient then soft threshold; bias unpenalized.
        let mut max_delta = 0.0f64;
        for k in 0..n_classes {
            b[k] -= step * gb[k];
            for j in 0..d {
                let old = w[k][j];
                let raw = old - step * gw[k][j];
                let thr = step * alpha;
                w[k][j] = raw.signum() * (raw.abs() - thr).max(0.0);
                max_delta = max_delta.max((w[k][j] - old).abs());
            }
        }
        if max_delta < tol {
            break;
        }
    }

    let selected: Vec<usize> = (0..d)
        .filter(|&j| (0..n_classes).any(|k| w[k][j].abs() > eps))
        .collect();
    Ok(L1Selection {
        weights: w,
        bias: b,
        selected,
        iterations,
    })
}
