//! Featurizer fitting: PCA with L1 feature selection, sparse autoencoders,
//! relaxed linear adversarial probes, differential binary masking, and
//! learned orthogonal subspaces, plus the multi-task variants of the last
//! two.

mod das;
mod objective;
mod mask;
mod pca;
mod rlap;
mod sae;
mod select;

pub use das::{fit_das, DasConfig};
pub use mask::{fit_dbm, DbmConfig, MaskFeaturizer};
pub use pca::{fit_pca, PcaFeaturizer};
pub use rlap::{erase, fit_rlap, probe_accuracy, RlapConfig, RlapFeaturizer};
pub use sae::{fit_sae, SaeConfig, SaeFeaturizer};
pub use select::{select_features_l1, L1Selection};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::intervene::{encode_prompt, EncodedPrompt, InterventionModel, ResolvedTuple};
use crate::world::{Part, SplitMode, World};

/// Sidecar metadata stored next to every featurizer checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeaturizerSidecar {
    pub method: String,
    pub attribute: String,
    pub layer: usize,
    pub k_or_eps: String,
    pub hyperparameters: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recon_error: Option<f64>,
    pub indices: Vec<usize>,
    pub seed: u64,
}

/// Site activations plus the entity's attribute values, the training set
/// for the unsupervised/probing featurizers.
pub struct ActivationSet {
    /// Row-major `[n_samples x d]`.
    pub activations: Vec<Vec<f32>>,
    /// Per attribute name: value index per sample.
    pub labels: std::collections::BTreeMap<String, Vec<usize>>,
}

/// Collect site activations over a split part's prompts (attribute and
/// entity prompts alike), labeled with the prompted entity's attribute
/// values.
pub fn collect_activations<M: InterventionModel>(
    model: &M,
    world: &World,
    tokenizer: &crate::lm::Tokenizer,
    mode: SplitMode,
    part: Part,
    layer: usize,
    cap: usize,
) -> Result<ActivationSet> {
    use rayon::prelude::*;
    let entities: Vec<usize> = match mode {
        SplitMode::Entity => world.split(mode).part(part).to_vec(),
        SplitMode::Context => (0..world.entities.len()).collect(),
    };
    let template_ok = |id: usize| match mode {
        SplitMode::Entity => true,
        SplitMode::Context => world.split(mode).part(part).contains(&id),
    };
    let mut cases: Vec<(usize, usize)> = Vec::new();
    for &e in &entities {
        for t in &world.templates {
            if template_ok(t.id) {
                cases.push((e, t.id));
            }
        }
    }
    // Deterministic cap: stride so every entity keeps coverage.
    if cases.len() > cap && cap > 0 {
        let stride = cases.len() as f64 / cap as f64;
        cases = (0..cap)
            .map(|i| cases[(i as f64 * stride) as usize])
            .collect();
    }
    let rows: Vec<(usize, Vec<f32>)> = cases
        .par_iter()
        .map(|&(e, tid)| -> Result<(usize, Vec<f32>)> {
            let rendered = world.render_prompt(&world.templates[tid], e)?;
            let p = encode_prompt(tokenizer, &rendered.text, &rendered.entity)?;
            Ok((e, model.site_vals(&p, layer)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut labels = std::collections::BTreeMap::new();
    for a in &world.attributes {
        let per_sample: Vec<usize> = rows
            .iter()
            .map(|&(e, _)| {
                let v = world.getattr(&a.name, e).expect("complete table");
                a.values.iter().position(|x| x == v).expect("known value")
            })
            .collect();
        labels.insert(a.name.clone(), per_sample);
    }
    Ok(ActivationSet {
        activations: rows.into_iter().map(|(_, v)| v).collect(),
        labels,
    })
}

/// Group resolved tuples by kind, preserving order.
pub fn split_tuples(tuples: &[ResolvedTuple]) -> (Vec<&ResolvedTuple>, Vec<&ResolvedTuple>) {
    let cause = tuples
        .iter()
        .filter(|t| t.kind == crate::world::TupleKind::Cause)
        .collect();
    let iso = tuples
        .iter()
        .filter(|t| t.kind == crate::world::TupleKind::Iso)
        .collect();
    (cause, iso)
}

/// Per-tuple cache for intervention training: the prepared base prompt plus
/// the source site vector.
pub struct CachedTuple {
    pub prep: crate::intervene::PreparedPrompt,
    pub source_vals: Vec<f32>,
    pub label: crate::lm::TokenId,
    pub a_star: String,
    pub kind: crate::world::TupleKind,
}

pub fn cache_tuples<M: InterventionModel>(
    model: &M,
    tuples: &[ResolvedTuple],
    layer: usize,
) -> Result<Vec<CachedTuple>> {
    use rayon::prelude::*;
    tuples
        .par_iter()
        .map(|t| -> Result<CachedTuple> {
            Ok(CachedTuple {
                prep: model.prepare(&t.base, layer)?,
                source_vals: model.site_vals(&t.source, layer)?,
                label: t.label[0],
                a_star: t.a_star.clone(),
                kind: t.kind,
            })
        })
        .collect()
}

/// The multi-task disentangle objective: mean cause loss plus the uniform
/// average of per-distractor iso means.
pub fn multitask_loss(cause_losses: &[f64], iso_losses_per_distractor: &[(String, Vec<f64>)]) -> f64 {
    let cause = mean(cause_losses);
    if iso_losses_per_distractor.is_empty() {
        return cause;
    }
    let non_empty: Vec<f64> = iso_losses_per_distractor
        .iter()
        .filter(|(_, l)| !l.is_empty())
        .map(|(_, l)| mean(l))
        .collect();
    if non_empty.is_empty() {
        return cause;
    }
    cause + non_empty.iter().sum::<f64>() / non_empty.len() as f64
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Helper used by prompts that don't come from a world (planted models):
/// wraps raw tokens as an encoded prompt whose "entity" is position 0.
pub fn raw_prompt(tokens: Vec<crate::lm::TokenId>) -> EncodedPrompt {
    EncodedPrompt {
        tokens,
        entity_span: (0, 1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multitask_loss_arithmetic() {
        // No distractors: equals the cause loss.
        assert_eq!(multitask_loss(&[0.7], &[]), 0.7);
        // cause 1.0, iso means {0.5, 1.5} -> 1.0 + 1.0.
        let iso = vec![
            ("a".to_string(), vec![0.5]),
            ("b".to_string(), vec![1.5]),
        ];
        assert_eq!(multitask_loss(&[1.0], &iso), 2.0);
        // Empty iso batches collapse to the single-task loss.
        let empty = vec![("a".to_string(), Vec::new())];
        assert_eq!(multitask_loss(&[0.4, 0.6], &empty), 0.5);
    }
}
