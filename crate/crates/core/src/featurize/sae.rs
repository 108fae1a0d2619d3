//! Sparse autoencoder featurizer: overcomplete ReLU encoder with an L2
//! reconstruction plus L1 sparsity objective. The decoder bias doubles as
//! the encoder's pre-centering, and the measured reconstruction error is
//! carried on the featurizer since the map is only approximately invertible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intervene::Featurizer;
use crate::rng;
use crate::tensor::{Adam, Graph, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaeConfig {
    /// Latent dimension as a multiple of the input dimension.
    pub latent_mult: usize,
    pub l1_weight: f32,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl Default for SaeConfig {
    fn default() -> Self {
        SaeConfig {
            latent_mult: 4,
            l1_weight: 3e-2,
            steps: 4000,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SaeFeaturizer {
    pub w1: Tensor,
    pub b1: Vec<f32>,
    pub w2: Tensor,
    pub b2: Vec<f32>,
    /// Mean relative L2 reconstruction error over the training set.
    pub recon_error: f64,
    /// Mean fraction of active latents over the training set.
    pub active_fraction: f64,
}

impl SaeFeaturizer {
    pub fn featurizer(&self, raw_edit: bool) -> Featurizer {
        Featurizer::Sae {
            w1: self.w1.clone(),
            b1: self.b1.clone(),
            w2: self.w2.clone(),
            b2: self.b2.clone(),
            recon_error: self.recon_error,
            raw_edit,
        }
    }
}

/// Train on site activations. `m` overrides the latent dimension
/// (default `latent_mult * n`).
pub fn fit_sae(
    activations: &[Vec<f32>],
    m: Option<usize>,
    cfg: &SaeConfig,
) -> Result<SaeFeaturizer> {
    if activations.is_empty() {
        return Err(Error::contract("fit_sae: no samples"));
    }
    let n = activations[0].len();
    let m = m.unwrap_or(cfg.latent_mult * n);
    if m < n {
        return Err(Error::contract(format!(
            "fit_sae: latent dim {m} must be >= input dim {n}"
        )));
    }
    let mut r = rng::stream(cfg.seed, "sae-fit");
    let bound = 1.0 / (n as f32).sqrt();
    let mut w1 = Tensor::uniform(vec![m, n], bound, &mut r);
    // Tied transpose init for the decoder.
    let mut w2 = w1.transpose();
    let mut b1 = Tensor::zeros(vec![1, m]);
    let mut b2 = Tensor::zeros(vec![1, n]);
    let mut opt = Adam::new(cfg.learning_rate);

    use rand::Rng;
    let mut last_loss = f64::NAN;
    for step in 0..cfg.steps {
        let batch: Vec<&Vec<f32>> = (0..cfg.batch_size)
            .map(|_| &activations[r.gen_range(0..activations.len())])
            .collect();
        let b = batch.len();
        let x_data: Vec<f32> = batch.iter().flat_map(|v| v.iter().copied()).collect();

        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![b, n], x_data)?);
        let ones = g.leaf(Tensor::filled(vec![b, 1], 1.0));
        let w1v = g.param(w1.clone());
        let w2v = g.param(w2.clone());
        let b1v = g.param(b1.clone());
        let b2v = g.param(b2.clone());

        let b2_rows = g.matmul(ones, b2v)?;
        let centered = g.sub(x, b2_rows)?;
        let w1t = g.transpose(w1v);
        let pre = g.matmul(centered, w1t)?;
        let b1_rows = g.matmul(ones, b1v)?;
        let pre = g.add(pre, b1_rows)?;
        let f = g.relu(pre);
        let w2t = g.transpose(w2v);
        let recon = g.matmul(f, w2t)?;
        let recon = g.add(recon, b2_rows)?;
        let diff = g.sub(x, recon)?;
        let sq = g.mul(diff, diff)?;
        let sq_sum = g.sum(sq);
        let recon_loss = g.scale(sq_sum, 1.0 / b as f32);
        // f is non-negative, so its L1 norm is its sum.
        let f_sum = g.sum(f);
        let l1 = g.scale(f_sum, cfg.l1_weight / b as f32);
        let loss = g.add(recon_loss, l1)?;

        let lv = g.value(loss).data()[0] as f64;
        if !lv.is_finite() {
            return Err(Error::Divergence {
                step,
                message: format!("sae loss {lv}"),
            });
        }
        last_loss = lv;
        g.backward(loss)?;
        let grads = [
            g.grad(w1v).cloned().unwrap(),
            g.grad(w2v).cloned().unwrap(),
            g.grad(b1v).cloned().unwrap(),
            g.grad(b2v).cloned().unwrap(),
        ];
        opt.step(
            &mut [&mut w1, &mut w2, &mut b1, &mut b2],
            &grads.iter().collect::<Vec<_>>(),
        );
    }
    let _ = last_loss;

    // Measure faithfulness on the full training set.
    let fz = Featurizer::Sae {
        w1: w1.clone(),
        b1: b1.data().to_vec(),
        w2: w2.clone(),
        b2: b2.data().to_vec(),
        recon_error: 0.0,
        raw_edit: false,
    };
    let mut rel_err = 0.0f64;
    let mut active = 0.0f64;
    for x in activations {
        let f = fz.forward(x);
        let xhat = fz.invert(&f);
        let num: f64 = x
            .iter()
            .zip(&xhat)
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        let den: f64 = x.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
        rel_err += num / den.max(1e-12);
        active += f.iter().filter(|&&v| v > 0.0).count() as f64 / m as f64;
    }
    Ok(SaeFeaturizer {
        w1,
        b1: b1.into_data(),
        w2,
        b2: b2.into_data(),
        recon_error: rel_err / activations.len() as f64,
        active_fraction: active / activations.len() as f64,
    })
}
