//! Differential binary masking: a learnable per-dimension gate interpolates
//! between base and source activations, with the temperature of the gate
//! sigmoid annealed geometrically so the mask hardens over training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::objective::{grouped_loss, sample_step};
use crate::featurize::CachedTuple;
use crate::intervene::{Featurizer, InterventionModel};
use crate::rng;
use crate::tensor::{Adam, Graph, Tensor};
use crate::world::TupleKind;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DbmConfig {
    /// Sparsity coefficient. The recommended single-task value is 1e-3;
    /// multi-task runs usually work best with 0.
    pub lambda: f32,
    pub temp_start: f32,
    pub temp_end: f32,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    /// Threshold: selected dims are those with 1 - sigma(m/T) < eps.
    pub eps: f32,
    /// Penalize |m| itself instead of the gate values.
    pub l1_on_logits: bool,
    pub multi_task: bool,
    pub seed: u64,
}

impl Default for DbmConfig {
    fn default() -> Self {
        DbmConfig {
            lambda: 1e-3,
            temp_start: 1e-2,
            temp_end: 1e-7,
            steps: 400,
            batch_size: 8,
            learning_rate: 1e-2,
            eps: 0.1,
            l1_on_logits: false,
            multi_task: false,
            seed: 0,
        }
    }
}

impl DbmConfig {
    pub fn multi() -> Self {
        DbmConfig {
            multi_task: true,
            lambda: 0.0,
            ..Default::default()
        }
    }
}

/// Fitted mask. The featurizer is the identity; the feature set is the
/// thresholded gate, recomputed from the current logits and temperature.
#[derive(Debug, Clone)]
pub struct MaskFeaturizer {
    pub logits: Vec<f32>,
    pub temperature: f32,
    pub eps: f32,
}

impl MaskFeaturizer {
    pub fn gates(&self) -> Vec<f32> {
        self.logits
            .iter()
            .map(|&m| sigmoid(m / self.temperature))
            .collect()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.gates()
            .iter()
            .enumerate()
            .filter(|&(_, &g)| 1.0 - g < self.eps)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn featurizer(&self) -> Featurizer {
        Featurizer::Identity {
            dim: self.logits.len(),
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Train mask logits against interchange outcomes through the frozen model.
pub fn fit_dbm<M: InterventionModel>(
    model: &M,
    cached: &[CachedTuple],
    cfg: &DbmConfig,
) -> Result<MaskFeaturizer> {
    if !cached.iter().any(|t| t.kind == TupleKind::Cause) {
        return Err(Error::contract("fit_dbm: no cause tuples".to_string()));
    }
    let d = model.site_dim();
    let mut m_logits = Tensor::zeros(vec![1, d]);
    let mut opt = Adam::new(cfg.learning_rate);
    let mut r = rng::stream(cfg.seed, "dbm-fit");
    let anneal = (cfg.temp_end / cfg.temp_start).powf(1.0 / (cfg.steps.max(2) - 1) as f32);

    let mut temp = cfg.temp_start;
    for step in 0..cfg.steps {
        temp = cfg.temp_start * anneal.powi(step as i32);
        let (cause_batch, iso_batch) = sample_step(cached, cfg.batch_size, cfg.multi_task, &mut r);

        let mut g = Graph::new();
        let weights = model.graph_begin(&mut g);
        let mv = g.param(m_logits.clone());
        let scaled = g.scale(mv, 1.0 / temp);
        let gates = g.logistic(scaled);

        let splice = |g: &mut Graph, t: &CachedTuple| -> Result<crate::tensor::Var> {
            let base = g.leaf(Tensor::row(t.prep.resid.row_slice(t.prep.t_e)));
            let source = g.leaf(Tensor::row(&t.source_vals));
            let diff = g.sub(source, base)?;
            let gated = g.mul(gates, diff)?;
            let spliced = g.add(base, gated)?;
            model.graph_logits(g, &weights, &t.prep, spliced)
        };
        let mut cause_rows = Vec::new();
        for t in &cause_batch {
            let row = splice(&mut g, t)?;
            cause_rows.push((row, t.label as usize));
        }
        let mut iso_rows = Vec::new();
        for t in &iso_batch {
            let row = splice(&mut g, t)?;
            iso_rows.push((t.a_star.clone(), row, t.label as usize));
        }
        let mut loss = grouped_loss(&mut g, cause_rows, iso_rows)?;
        if cfg.lambda > 0.0 {
            let penalty = if cfg.l1_on_logits {
                let a = g.abs(mv);
                g.sum(a)
            } else {
                g.sum(gates)
            };
            let scaled_penalty = g.scale(penalty, cfg.lambda);
            loss = g.add(loss, scaled_penalty)?;
        }
        let lv = g.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::Divergence {
                step,
                message: format!("dbm loss {lv}"),
            });
        }
        g.backward(loss)?;
        let grad = g.grad(mv).cloned().unwrap();
        opt.step(&mut [&mut m_logits], &[&grad]);
    }

    Ok(MaskFeaturizer {
        logits: m_logits.into_data(),
        temperature: temp.max(cfg.temp_end),
        eps: cfg.eps,
    })
}
