//! Shared machinery for interchange-supervised training (binary masks and
//! learned subspaces): batch sampling and the grouped cause/iso objective.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::featurize::CachedTuple;
use crate::tensor::{Graph, Var};
use crate::world::TupleKind;

/// Sample up to `n` tuples of each kind for one step. Iso tuples are only
/// drawn in multi-task mode.
pub(super) fn sample_step<'a>(
    cached: &'a [CachedTuple],
    n: usize,
    multi_task: bool,
    rng: &mut ChaCha8Rng,
) -> (Vec<&'a CachedTuple>, Vec<&'a CachedTuple>) {
    let cause: Vec<&CachedTuple> = cached
        .iter()
        .filter(|t| t.kind == TupleKind::Cause)
        .collect();
    let iso: Vec<&CachedTuple> = cached
        .iter()
        .filter(|t| t.kind == TupleKind::Iso)
        .collect();
    let pick = |pool: &[&'a CachedTuple], rng: &mut ChaCha8Rng| -> Vec<&'a CachedTuple> {
        if pool.is_empty() {
            return Vec::new();
        }
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        idx.shuffle(rng);
        idx.into_iter().take(n).map(|i| pool[i]).collect()
    };
    let cause_batch = pick(&cause, rng);
    let iso_batch = if multi_task { pick(&iso, rng) } else { Vec::new() };
    (cause_batch, iso_batch)
}

/// Cause CE plus the uniform average of per-distractor iso CEs, matching
/// the multi-task objective with coefficient 1 on the cause term.
pub(super) fn grouped_loss(
    g: &mut Graph,
    cause: Vec<(Var, usize)>,
    iso: Vec<(String, Var, usize)>,
) -> Result<Var> {
    let (cause_rows, cause_labels): (Vec<Var>, Vec<usize>) = cause.into_iter().unzip();
    let stacked = g.concat_rows(&cause_rows)?;
    let mut loss = g.softmax_cross_entropy(stacked, cause_labels)?;
    if !iso.is_empty() {
        let mut groups: BTreeMap<String, (Vec<Var>, Vec<usize>)> = BTreeMap::new();
        for (a_star, row, label) in iso {
            let entry = groups.entry(a_star).or_default();
            entry.0.push(row);
            entry.1.push(label);
        }
        let n_groups = groups.len() as f32;
        for (_, (rows, labels)) in groups {
            let stacked = g.concat_rows(&rows)?;
            let ce = g.softmax_cross_entropy(stacked, labels)?;
            let scaled = g.scale(ce, 1.0 / n_groups);
            loss = g.add(loss, scaled)?;
        }
    }
    Ok(loss)
}
