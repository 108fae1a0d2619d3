//! Relaxed linear adversarial probe: a min-max game where a linear probe
//! reads the attribute from rank-k-erased activations while the erasure
//! subspace ascends the probe's loss. The learned rowspace is the feature;
//! the featurizer basis is the rowspace completed to a full orthonormal
//! basis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intervene::Featurizer;
use crate::rng;
use crate::tensor::{complete_basis, qr_orthonormalize, Adam, Graph, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlapConfig {
    /// Outer iterations (epochs over the data); one probe step per
    /// subspace step on each minibatch.
    pub iterations: usize,
    pub batch_size: usize,
    pub probe_lr: f32,
    /// Plain gradient-ascent step for the subspace player, decayed
    /// geometrically over the iterations.
    pub subspace_lr: f32,
    /// Cap on each probe row's L2 norm. Keeps the probe's softmax from
    /// saturating, which would starve the subspace player of gradient.
    pub probe_norm_cap: f32,
    pub seed: u64,
}

impl Default for RlapConfig {
    fn default() -> Self {
        RlapConfig {
            iterations: 100,
            batch_size: 64,
            probe_lr: 5e-2,
            subspace_lr: 0.5,
            probe_norm_cap: 2.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RlapFeaturizer {
    /// Adversarial rowspace, `[k x n]`, orthonormal rows.
    pub w: Tensor,
    /// Rowspace completed to an `[n x n]` orthonormal basis.
    pub basis: Tensor,
    /// Final probe weights `[n_classes x n]` (reporting only).
    pub probe: Vec<Vec<f32>>,
}

impl RlapFeaturizer {
    pub fn featurizer(&self) -> Featurizer {
        Featurizer::Linear {
            basis: self.basis.clone(),
            mean: None,
            scale: None,
        }
    }

    /// The designated feature indices: the first k basis rows.
    pub fn indices(&self) -> Vec<usize> {
        (0..self.w.rows()).collect()
    }
}

/// Alternating min-max fit of the rank-k erasure subspace.
pub fn fit_rlap(
    activations: &[Vec<f32>],
    labels: &[usize],
    k: usize,
    cfg: &RlapConfig,
) -> Result<RlapFeaturizer> {
    if activations.is_empty() || activations.len() != labels.len() {
        return Err(Error::contract("fit_rlap: empty or mismatched data".to_string()));
    }
    let n = activations[0].len();
    if k >= n {
        return Err(Error::contract(format!("fit_rlap: rank {k} must be < dim {n}")));
    }
    let n_classes = labels.iter().max().unwrap() + 1;
    if labels.iter().collect::<std::collections::BTreeSet<_>>().len() < 2 {
        return Err(Error::contract("fit_rlap: need at least 2 classes".to_string()));
    }

    let mut r = rng::stream(cfg.seed, "rlap-fit");
    let bound = 1.0 / (n as f32).sqrt();
    let mut w = qr_orthonormalize(&Tensor::uniform(vec![k, n], bound, &mut r))?;
    let mut theta = Tensor::uniform(vec![n_classes, n], bound, &mut r);
    let mut bias = Tensor::zeros(vec![1, n_classes]);
    let mut probe_opt = Adam::new(cfg.probe_lr);
    let mut subspace_lr = cfg.subspace_lr;

    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..activations.len()).collect();

    let mut run_batch = |w: &mut Tensor,
                         theta: &mut Tensor,
                         bias: &mut Tensor,
                         probe_opt: &mut Adam,
                         subspace_lr: Option<f32>,
                         chunk: &[usize]|
     -> Result<()> {
        let b = chunk.len();
        let x_data: Vec<f32> = chunk
            .iter()
            .flat_map(|&i| activations[i].iter().copied())
            .collect();
        let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();

        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![b, n], x_data)?);
        let ones = g.leaf(Tensor::filled(vec![b, 1], 1.0));
        let wv = g.param(w.clone());
        let tv = g.param(theta.clone());
        let bv = g.param(bias.clone());
        // Erased representation f = n - (n W^T) W.
        let wt = g.transpose(wv);
        let coords = g.matmul(x, wt)?;
        let proj = g.matmul(coords, wv)?;
        let erased = g.sub(x, proj)?;
        let tt = g.transpose(tv);
        let logits = g.matmul(erased, tt)?;
        let bias_rows = g.matmul(ones, bv)?;
        let logits = g.add(logits, bias_rows)?;
        let loss = g.softmax_cross_entropy(logits, y)?;
        g.backward(loss)?;

        let gt = g.grad(tv).cloned().unwrap();
        let gb = g.grad(bv).cloned().unwrap();
        // Probe descends, subspace (when playing) ascends, on the same
        // minibatch.
        probe_opt.step(&mut [theta, bias], &[&gt, &gb]);
        for c in 0..n_classes {
            let row = theta.row_slice_mut(c);
            let norm: f32 = row.iter().map(|x| x * x).sum::<f32>().sqrt();
            if norm > cfg.probe_norm_cap {
                let s = cfg.probe_norm_cap / norm;
                for x in row.iter_mut() {
                    *x *= s;
                }
            }
        }
        if let Some(lr) = subspace_lr {
            let gw = g.grad(wv).cloned().unwrap();
            for (x, &gv) in w.data_mut().iter_mut().zip(gw.data()) {
                *x += lr * gv;
            }
            *w = qr_orthonormalize(w)?;
        }
        Ok(())
    };

    // Warm up the probe against the initial random erasure so the subspace
    // player faces an informed opponent from its first step.
    let warmup = (cfg.iterations / 4).max(5);
    for _ in 0..warmup {
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.batch_size) {
            run_batch(&mut w, &mut theta, &mut bias, &mut probe_opt, None, chunk)?;
        }
    }
    // Alternation, with the subspace step size decaying so the min-max
    // settles instead of orbiting the saddle.
    let decay = (1e-4f32).powf(1.0 / cfg.iterations.max(2) as f32);
    for _epoch in 0..cfg.iterations {
        subspace_lr *= decay;
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.batch_size) {
            run_batch(
                &mut w,
                &mut theta,
                &mut bias,
                &mut probe_opt,
                Some(subspace_lr),
                chunk,
            )?;
        }
    }

    let basis = complete_basis(&w)?;
    Ok(RlapFeaturizer {
        w,
        basis,
        probe: (0..n_classes)
            .map(|c| theta.row_slice(c).to_vec())
            .collect(),
    })
}

/// Accuracy of a freshly trained (effectively unpenalized) linear probe,
/// used to verify erasure: train on one set, evaluate on another.
pub fn probe_accuracy(
    train_x: &[Vec<f32>],
    train_y: &[usize],
    eval_x: &[Vec<f32>],
    eval_y: &[usize],
) -> Result<f64> {
    let sel = super::select_features_l1(train_x, train_y, 1e6, f64::INFINITY)?;
    let n_classes = sel.weights.len();
    let mut correct = 0usize;
    for (x, &y) in eval_x.iter().zip(eval_y) {
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for c in 0..n_classes {
            let s: f64 = sel.bias[c]
                + sel.weights[c]
                    .iter()
                    .zip(x)
                    .map(|(&wv, &xv)| wv * xv as f64)
                    .sum::<f64>();
            if s > best_v {
                best_v = s;
                best = c;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / eval_x.len().max(1) as f64)
}

/// Apply the erasure (I - W^T W) to a set of activations.
pub fn erase(w: &Tensor, activations: &[Vec<f32>]) -> Vec<Vec<f32>> {
    activations
        .iter()
        .map(|x| {
            let mut out = x.clone();
            for i in 0..w.rows() {
                let row = w.row_slice(i);
                let c: f32 = row.iter().zip(x).map(|(&a, &b)| a * b).sum();
                for (o, &rv) in out.iter_mut().zip(row) {
                    *o -= c * rv;
                }
            }
            out
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Labels depend linearly on dims {0,1} of R^6; the rest is noise.
    fn planted(n: usize, seed: u64) -> (Vec<Vec<f32>>, Vec<usize>) {
        let mut r = crate::rng::stream(seed, "rlap-planted");
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..n {
            let mut x: Vec<f32> = (0..6).map(|_| r.gen_range(-1.0f32..1.0)).collect();
            let cls = r.gen_range(0..4usize);
            // Strong class signal in the first two dims.
            x[0] = if cls & 1 == 1 { 1.0 } else { -1.0 } + r.gen_range(-0.1..0.1);
            x[1] = if cls & 2 == 2 { 1.0 } else { -1.0 } + r.gen_range(-0.1..0.1);
            xs.push(x);
            ys.push(cls);
        }
        (xs, ys)
    }

    #[test]
    fn recovers_the_planted_subspace_and_erases_it() {
        let (xs, ys) = planted(2400, 51);
        let cfg = RlapConfig {
            iterations: 100,
            seed: 3,
            ..Default::default()
        };
        let rlap = fit_rlap(&xs, &ys, 2, &cfg).unwrap();
        assert!(crate::tensor::orthonormality_defect(&rlap.w) < 1e-4);
        assert!(crate::tensor::orthonormality_defect(&rlap.basis) < 1e-4);

        // Projector distance to span(e0, e1).
        let mut dist2 = 0.0f64;
        let n = 6;
        for i in 0..n {
            for j in 0..n {
                let mut p = 0.0f64;
                for row in 0..2 {
                    p += rlap.w.at(row, i) as f64 * rlap.w.at(row, j) as f64;
                }
                let target = if i == j && i < 2 { 1.0 } else { 0.0 };
                dist2 += (p - target).powi(2);
            }
        }
        assert!(dist2.sqrt() < 0.1, "projector distance {}", dist2.sqrt());

        // A fresh probe on erased representations is near chance.
        let (ex, ey) = planted(400, 52);
        let erased_train = erase(&rlap.w, &xs);
        let erased_eval = erase(&rlap.w, &ex);
        let acc = probe_accuracy(&erased_train, &ys, &erased_eval, &ey).unwrap();
        assert!(acc <= 0.25 + 0.10, "post-erasure accuracy {acc}");
    }

    #[test]
    fn full_rank_request_is_rejected() {
        let (xs, ys) = planted(50, 53);
        assert!(fit_rlap(&xs, &ys, 6, &RlapConfig::default()).is_err());
    }
}
