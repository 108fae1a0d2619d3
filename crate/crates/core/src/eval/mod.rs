//! Cause / Iso / Disentangle scoring, cross-attribute matrices, and grid
//! sweeps with dev-based selection.

pub mod planted;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intervene::{FeatureHandle, InterventionModel, ResolvedTuple};
use crate::world::TupleKind;

/// How a prediction is compared against the gold label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MatchRule {
    /// First generated token vs first gold token.
    #[default]
    FirstToken,
    /// Full gold continuation, token for token.
    Exact,
}

/// One scores.csv row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreTable {
    pub method: String,
    pub split_mode: String,
    pub attribute: String,
    pub layer: usize,
    pub k_or_eps: String,
    pub cause: f64,
    pub iso: f64,
    pub disentangle: f64,
    pub n_cause: usize,
    pub n_iso: usize,
    pub recon_error: Option<f64>,
}

fn tuple_matches<M: InterventionModel>(
    model: &M,
    handle: &FeatureHandle,
    t: &ResolvedTuple,
    rule: MatchRule,
) -> Result<bool> {
    match rule {
        MatchRule::FirstToken => {
            let pred =
                crate::intervene::interchange_first_token(model, handle, &t.base, &t.source)?;
            Ok(pred == t.label[0])
        }
        MatchRule::Exact => {
            let pred = crate::intervene::interchange_intervene(
                model,
                handle,
                &t.base,
                &t.source,
                t.label.len(),
            )?;
            Ok(pred == t.label)
        }
    }
}

/// Fraction of cause tuples whose intervened prediction flips to the
/// source entity's value.
pub fn score_cause<M: InterventionModel>(
    model: &M,
    handle: &FeatureHandle,
    tuples: &[ResolvedTuple],
    rule: MatchRule,
) -> Result<f64> {
    let cause: Vec<&ResolvedTuple> = tuples.iter().filter(|t| t.kind == TupleKind::Cause).collect();
    if cause.is_empty() {
        return Err(Error::contract("score_cause: no cause tuples".to_string()));
    }
    let matches: Vec<bool> = cause
        .par_iter()
        .map(|t| tuple_matches(model, handle, t, rule))
        .collect::<Result<Vec<_>>>()?;
    Ok(matches.iter().filter(|&&m| m).count() as f64 / matches.len() as f64)
}

/// Per-distractor match fractions averaged uniformly.
pub fn score_iso<M: InterventionModel>(
    model: &M,
    handle: &FeatureHandle,
    tuples: &[ResolvedTuple],
    rule: MatchRule,
) -> Result<f64> {
    let iso: Vec<&ResolvedTuple> = tuples.iter().filter(|t| t.kind == TupleKind::Iso).collect();
    if iso.is_empty() {
        return Err(Error::contract("score_iso: no iso tuples".to_string()));
    }
    let matches: Vec<(String, bool)> = iso
        .par_iter()
        .map(|t| Ok((t.a_star.clone(), tuple_matches(model, handle, t, rule)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut per: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (a, m) in &matches {
        let e = per.entry(a).or_default();
        e.1 += 1;
        if *m {
            e.0 += 1;
        }
    }
    let sum: f64 = per.values().map(|&(ok, n)| ok as f64 / n as f64).sum();
    Ok(sum / per.len() as f64)
}

/// Arithmetic mean of cause and iso.
pub fn score_disentangle(cause: f64, iso: f64) -> f64 {
    (cause + iso) / 2.0
}

/// Both scores over a mixed tuple list, as one table row.
#[allow(clippy::too_many_arguments)]
pub fn score_table<M: InterventionModel>(
    model: &M,
    handle: &FeatureHandle,
    tuples: &[ResolvedTuple],
    rule: MatchRule,
    method: &str,
    split_mode: &str,
    attribute: &str,
    k_or_eps: &str,
    recon_error: Option<f64>,
) -> Result<ScoreTable> {
    let cause = score_cause(model, handle, tuples, rule)?;
    let iso = score_iso(model, handle, tuples, rule)?;
    Ok(ScoreTable {
        method: method.to_string(),
        split_mode: split_mode.to_string(),
        attribute: attribute.to_string(),
        layer: handle.site.layer,
        k_or_eps: k_or_eps.to_string(),
        cause,
        iso,
        disentangle: score_disentangle(cause, iso),
        n_cause: tuples.iter().filter(|t| t.kind == TupleKind::Cause).count(),
        n_iso: tuples.iter().filter(|t| t.kind == TupleKind::Iso).count(),
        recon_error,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossMatrix {
    /// Row/column attribute order.
    pub attributes: Vec<String>,
    /// `values[i][j]`: intervening with attribute i's feature on prompts
    /// querying attribute j, the rate of flipping to the source's value.
    pub values: Vec<Vec<f64>>,
}

/// Cause-style flip rates for every (intervened, measured) attribute pair.
/// `cause_tuples[b]` holds cause tuples whose target attribute is `b`.
pub fn cross_attribute_matrix<M: InterventionModel>(
    model: &M,
    handles: &BTreeMap<String, FeatureHandle>,
    cause_tuples: &BTreeMap<String, Vec<ResolvedTuple>>,
    rule: MatchRule,
) -> Result<CrossMatrix> {
    let attributes: Vec<String> = cause_tuples.keys().cloned().collect();
    for a in &attributes {
        if !handles.contains_key(a) {
            return Err(Error::contract(format!(
                "cross_attribute_matrix: missing handle for '{a}'"
            )));
        }
    }
    let mut values = Vec::new();
    for a in &attributes {
        let handle = &handles[a];
        let mut row = Vec::new();
        for b in &attributes {
            row.push(score_cause(model, handle, &cause_tuples[b], rule)?);
        }
        values.push(row);
    }
    Ok(CrossMatrix { attributes, values })
}

// ── Sweeps ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub layer: usize,
    pub k: usize,
    pub dev: ScoreTable,
    pub test: ScoreTable,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    /// Index into `cells` of the dev-selected cell.
    pub best: usize,
    /// Test scores of the dev-best k at each layer (the layer curve).
    pub layer_curve: Vec<SweepCell>,
}

/// Fit and score every (layer, k) cell, then select the cell with the best
/// dev Disentangle (ties toward smaller k, then lower layer). Cells run in
/// parallel; each cell must be internally deterministic.
pub fn sweep<F>(layers: &[usize], ks: &[usize], fit_and_score: F) -> Result<SweepResult>
where
    F: Fn(usize, usize) -> Result<(ScoreTable, ScoreTable)> + Sync,
{
    if layers.is_empty() || ks.is_empty() {
        return Err(Error::contract("sweep: empty grid".to_string()));
    }
    let grid: Vec<(usize, usize)> = layers
        .iter()
        .flat_map(|&l| ks.iter().map(move |&k| (l, k)))
        .collect();
    let cells: Vec<SweepCell> = grid
        .par_iter()
        .map(|&(layer, k)| -> Result<SweepCell> {
            let (dev, test) = fit_and_score(layer, k)?;
            Ok(SweepCell {
                layer,
                k,
                dev,
                test,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = select_best(&cells);
    let mut layer_curve = Vec::new();
    for &l in layers {
        let layer_cells: Vec<SweepCell> =
            cells.iter().filter(|c| c.layer == l).cloned().collect();
        let b = select_best(&layer_cells);
        layer_curve.push(layer_cells[b].clone());
    }
    Ok(SweepResult {
        cells,
        best,
        layer_curve,
    })
}

/// Argmax dev Disentangle; ties prefer smaller k, then lower layer.
pub fn select_best(cells: &[SweepCell]) -> usize {
    let mut best = 0;
    for (i, c) in cells.iter().enumerate() {
        let b = &cells[best];
        let better = c.dev.disentangle > b.dev.disentangle
            || (c.dev.disentangle == b.dev.disentangle
                && (c.k < b.k || (c.k == b.k && c.layer < b.layer)));
        if better {
            best = i;
        }
    }
    best
}

/// Count adjacent violations of the expected k-trend (cause non-decreasing,
/// iso non-increasing) along a fixed layer. Returns (checked, violations).
pub fn k_trend_violations(cells: &[SweepCell]) -> (usize, usize) {
    let mut sorted: Vec<&SweepCell> = cells.iter().collect();
    sorted.sort_by_key(|c| c.k);
    let mut checked = 0;
    let mut violations = 0;
    for w in sorted.windows(2) {
        checked += 2;
        if w[1].test.cause < w[0].test.cause {
            violations += 1;
        }
        if w[1].test.iso > w[0].test.iso {
            violations += 1;
        }
    }
    (checked, violations)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(d: f64) -> ScoreTable {
        ScoreTable {
            method: "m".into(),
            split_mode: "entity".into(),
            attribute: "a".into(),
            layer: 0,
            k_or_eps: "1".into(),
            cause: d,
            iso: d,
            disentangle: d,
            n_cause: 1,
            n_iso: 1,
            recon_error: None,
        }
    }

    #[test]
    fn disentangle_is_the_mean() {
        assert_eq!(score_disentangle(1.0, 1.0), 1.0);
        assert_eq!(score_disentangle(0.0, 1.0), 0.5);
        // Rounded-score convention: 0.731 and 0.513 average to exactly 0.622.
        assert_eq!(score_disentangle(0.731, 0.513), 0.622);
    }

    #[test]
    fn selection_takes_the_dev_argmax() {
        let cells: Vec<SweepCell> = [0.4, 0.7, 0.6]
            .iter()
            .enumerate()
            .map(|(i, &d)| SweepCell {
                layer: 0,
                k: i,
                dev: table(d),
                test: table(d),
            })
            .collect();
        assert_eq!(select_best(&cells), 1);
    }

    #[test]
    fn selection_ties_prefer_smaller_k() {
        let cells: Vec<SweepCell> = [(3usize, 0.7), (1, 0.7), (2, 0.7)]
            .iter()
            .map(|&(k, d)| SweepCell {
                layer: 0,
                k,
                dev: table(d),
                test: table(d),
            })
            .collect();
        assert_eq!(cells[select_best(&cells)].k, 1);
    }

    #[test]
    fn singleton_grid_gives_one_cell() {
        let result = sweep(&[2], &[4], |layer, k| {
            let mut t = table(0.5);
            t.layer = layer;
            t.k_or_eps = k.to_string();
            Ok((t.clone(), t))
        })
        .unwrap();
        assert_eq!(result.cells.len(), 1);
        assert_eq!(result.best, 0);
    }

    #[test]
    fn empty_grid_is_an_error() {
        assert!(sweep(&[], &[1], |_, _| Ok((table(0.0), table(0.0)))).is_err());
    }

    #[test]
    fn trend_counter_counts_violations() {
        let mk = |k: usize, cause: f64, iso: f64| SweepCell {
            layer: 0,
            k,
            dev: table(0.0),
            test: ScoreTable {
                cause,
                iso,
                ..table(0.0)
            },
        };
        let cells = vec![
            mk(2, 0.1, 0.9),
            mk(4, 0.3, 0.8),
            mk(8, 0.2, 0.7), // cause dipped: one violation
            mk(16, 0.6, 0.75), // iso rose: one violation
        ];
        let (checked, violations) = k_trend_violations(&cells);
        assert_eq!(checked, 6);
        assert_eq!(violations, 2);
    }
}
