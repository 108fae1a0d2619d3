//! Interchange interventions: reading site values, featurizing them, and
//! splicing source features into a base forward pass.
//!
//! Edits are computed in delta form, `n_base + delta`, where the delta is
//! confined to the selected feature coordinates. An empty feature set or a
//! self-interchange therefore reproduces the clean activation bit for bit.
//! When the selected features cover an exactly invertible featurizer's whole
//! space, the edit short-circuits to a wholesale replacement, which is the
//! same map without the redundant round trip.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{argmax_lowest, Hook, HookAction, LanguageModel, TokenId, Tokenizer};
use crate::tensor::{Graph, Tensor, Var};
use crate::world::{InterventionTuple, TupleKind};

/// Residual-stream intervention site. The position rule is always "last
/// token of the entity", resolved per prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationSite {
    pub layer: usize,
}

// ── Featurizers ─────────────────────────────────────────────────────────

/// A fitted forward/inverse map from site activations to feature space.
#[derive(Debug, Clone)]
pub enum Featurizer {
    /// Feature space is the activation space itself (binary masks, full-rep).
    Identity { dim: usize },
    /// Full orthonormal basis (rows), with optional mean/scale normalization
    /// applied before projecting and undone after projecting back.
    Linear {
        basis: Tensor,
        mean: Option<Vec<f32>>,
        scale: Option<Vec<f32>>,
    },
    /// Reduced parameterization: only the k orthonormal rows spanning the
    /// feature subspace are materialized.
    Subspace { rows: Tensor },
    /// Sparse autoencoder. `raw_edit` bypasses the reconstruction-residual
    /// restoration and decodes the edited features directly.
    Sae {
        w1: Tensor,
        b1: Vec<f32>,
        w2: Tensor,
        b2: Vec<f32>,
        recon_error: f64,
        raw_edit: bool,
    },
}

impl Featurizer {
    pub fn input_dim(&self) -> usize {
        match self {
            Featurizer::Identity { dim } => *dim,
            Featurizer::Linear { basis, .. } => basis.cols(),
            Featurizer::Subspace { rows } => rows.cols(),
            Featurizer::Sae { w1, .. } => w1.cols(),
        }
    }

    /// Dimensionality of the featurized space.
    pub fn feature_dim(&self) -> usize {
        match self {
            Featurizer::Identity { dim } => *dim,
            Featurizer::Linear { basis, .. } => basis.rows(),
            Featurizer::Subspace { rows } => rows.rows(),
            Featurizer::Sae { w1, .. } => w1.rows(),
        }
    }

    fn normalized(&self, n: &[f32]) -> Vec<f32> {
        match self {
            Featurizer::Linear { mean, scale, .. } => {
                let mut z = n.to_vec();
                if let Some(m) = mean {
                    for (zv, mv) in z.iter_mut().zip(m) {
                        *zv -= mv;
                    }
                }
                if let Some(s) = scale {
                    for (zv, sv) in z.iter_mut().zip(s) {
                        *zv /= sv;
                    }
                }
                z
            }
            _ => n.to_vec(),
        }
    }

    /// Full featurized vector.
    pub fn forward(&self, n: &[f32]) -> Vec<f32> {
        match self {
            Featurizer::Identity { .. } => n.to_vec(),
            Featurizer::Linear { basis, .. } => {
                let z = self.normalized(n);
                (0..basis.rows()).map(|i| dot(basis.row_slice(i), &z)).collect()
            }
            Featurizer::Subspace { rows } => {
                (0..rows.rows()).map(|i| dot(rows.row_slice(i), n)).collect()
            }
            Featurizer::Sae { w1, b1, b2, .. } => {
                let centered: Vec<f32> = n.iter().zip(b2).map(|(&x, &b)| x - b).collect();
                (0..w1.rows())
                    .map(|i| (dot(w1.row_slice(i), &centered) + b1[i]).max(0.0))
                    .collect()
            }
        }
    }

    /// Map a featurized vector back to activation space. For the reduced
    /// subspace family this reconstructs only the in-subspace component.
    pub fn invert(&self, f: &[f32]) -> Vec<f32> {
        match self {
            Featurizer::Identity { .. } => f.to_vec(),
            Featurizer::Linear { basis, mean, scale } => {
                let d = basis.cols();
                let mut n = vec![0.0f32; d];
                for (i, &fv) in f.iter().enumerate() {
                    for (nv, &bv) in n.iter_mut().zip(basis.row_slice(i)) {
                        *nv += fv * bv;
                    }
                }
                if let Some(s) = scale {
                    for (nv, sv) in n.iter_mut().zip(s) {
                        *nv *= sv;
                    }
                }
                if let Some(m) = mean {
                    for (nv, mv) in n.iter_mut().zip(m) {
                        *nv += mv;
                    }
                }
                n
            }
            Featurizer::Subspace { rows } => {
                let d = rows.cols();
                let mut n = vec![0.0f32; d];
                for (i, &fv) in f.iter().enumerate() {
                    for (nv, &bv) in n.iter_mut().zip(rows.row_slice(i)) {
                        *nv += fv * bv;
                    }
                }
                n
            }
            Featurizer::Sae { w2, b2, .. } => {
                let d = w2.rows();
                let mut n = b2.clone();
                debug_assert_eq!(n.len(), d);
                for (j, &fv) in f.iter().enumerate() {
                    if fv == 0.0 {
                        continue;
                    }
                    for i in 0..d {
                        n[i] += w2.at(i, j) * fv;
                    }
                }
                n
            }
        }
    }

    /// True when editing `sel` rewrites the entire featurized space of an
    /// exactly invertible map, i.e. the edit equals a wholesale swap.
    fn full_cover(&self, sel: &[usize]) -> bool {
        match self {
            Featurizer::Identity { dim } => sel.len() == *dim,
            Featurizer::Linear { basis, .. } => sel.len() == basis.rows(),
            Featurizer::Subspace { rows } => {
                sel.len() == rows.rows() && rows.rows() == rows.cols()
            }
            Featurizer::Sae { .. } => false,
        }
    }

    /// Splice the selected source feature values into the base activation.
    pub fn edit(&self, base: &[f32], source: &[f32], sel: &[usize]) -> Vec<f32> {
        if sel.is_empty() {
            return base.to_vec();
        }
        if self.full_cover(sel) {
            return source.to_vec();
        }
        match self {
            Featurizer::Identity { .. } => {
                let mut out = base.to_vec();
                for &i in sel {
                    out[i] = source[i];
                }
                out
            }
            Featurizer::Linear { basis, scale, .. } => {
                let zb = self.normalized(base);
                let zs = self.normalized(source);
                let mut out = base.to_vec();
                for &i in sel {
                    let row = basis.row_slice(i);
                    let delta = dot(row, &zs) - dot(row, &zb);
                    match scale {
                        Some(s) => {
                            for ((o, &bv), &sv) in out.iter_mut().zip(row).zip(s) {
                                *o += delta * bv * sv;
                            }
                        }
                        None => {
                            for (o, &bv) in out.iter_mut().zip(row) {
                                *o += delta * bv;
                            }
                        }
                    }
                }
                out
            }
            Featurizer::Subspace { rows } => {
                let mut out = base.to_vec();
                for &i in sel {
                    let row = rows.row_slice(i);
                    let delta: f32 = row
                        .iter()
                        .zip(source.iter().zip(base))
                        .map(|(&r, (&s, &b))| r * (s - b))
                        .sum();
                    for (o, &rv) in out.iter_mut().zip(row) {
                        *o += delta * rv;
                    }
                }
                out
            }
            Featurizer::Sae { w2, raw_edit, .. } => {
                let fb = self.forward(base);
                let fs = self.forward(source);
                if *raw_edit {
                    let mut fe = fb;
                    for &i in sel {
                        fe[i] = fs[i];
                    }
                    self.invert(&fe)
                } else {
                    // Keep the base reconstruction residual: add only the
                    // decoded feature delta.
                    let mut out = base.to_vec();
                    for &i in sel {
                        let delta = fs[i] - fb[i];
                        if delta == 0.0 {
                            continue;
                        }
                        for (r, o) in out.iter_mut().enumerate() {
                            *o += w2.at(r, i) * delta;
                        }
                    }
                    out
                }
            }
        }
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// A fitted featurizer with its designated feature index set and site.
#[derive(Debug, Clone)]
pub struct FeatureHandle {
    pub featurizer: Featurizer,
    pub indices: Vec<usize>,
    pub site: ActivationSite,
}

impl FeatureHandle {
    pub fn new(featurizer: Featurizer, indices: Vec<usize>, site: ActivationSite) -> Result<Self> {
        let dim = featurizer.feature_dim();
        let mut seen = std::collections::BTreeSet::new();
        for &i in &indices {
            if i >= dim {
                return Err(Error::Index(format!(
                    "feature index {i} >= featurized dim {dim}"
                )));
            }
            if !seen.insert(i) {
                return Err(Error::contract(format!("duplicate feature index {i}")));
            }
        }
        Ok(FeatureHandle {
            featurizer,
            indices,
            site,
        })
    }

    /// Wholesale replacement of the site vector.
    pub fn full_rep(dim: usize, site: ActivationSite) -> Self {
        FeatureHandle {
            featurizer: Featurizer::Identity { dim },
            indices: (0..dim).collect(),
            site,
        }
    }

    pub fn edit(&self, base: &[f32], source: &[f32]) -> Vec<f32> {
        self.featurizer.edit(base, source, &self.indices)
    }
}

// ── Prompt resolution ───────────────────────────────────────────────────

/// A prompt tokenized for the model: BOS-prefixed tokens plus the entity's
/// token span.
#[derive(Debug, Clone)]
pub struct EncodedPrompt {
    pub tokens: Vec<TokenId>,
    pub entity_span: (usize, usize),
}

impl EncodedPrompt {
    pub fn t_entity(&self) -> usize {
        self.entity_span.1 - 1
    }
}

/// Locate `entity` in `text` (the query mention is the last occurrence) and
/// tokenize with a BOS prefix.
pub fn encode_prompt(tok: &Tokenizer, text: &str, entity: &str) -> Result<EncodedPrompt> {
    let start = text
        .rfind(entity)
        .ok_or_else(|| Error::contract(format!("prompt does not mention entity '{entity}'")))?;
    let (mut tokens, span) = tok.encode_with_span(text, (start, start + entity.len()))?;
    tokens.insert(0, tok.bos);
    Ok(EncodedPrompt {
        tokens,
        entity_span: (span.0 + 1, span.1 + 1),
    })
}

/// Continuation tokens of `label` in the context of `prompt` (a space is
/// inserted unless the prompt ends mid-string in a JSON quote).
pub fn label_tokens(tok: &Tokenizer, prompt: &str, label: &str) -> Result<Vec<TokenId>> {
    let join = if prompt.ends_with('"') { "" } else { " " };
    let full = format!("{prompt}{join}{label}");
    let prompt_len = tok.encode(prompt)?.len();
    let full_tokens = tok.encode(&full)?;
    if full_tokens.len() <= prompt_len {
        return Err(Error::contract(format!("label '{label}' adds no tokens")));
    }
    Ok(full_tokens[prompt_len..].to_vec())
}

/// An intervention tuple resolved to model-ready token sequences.
#[derive(Debug, Clone)]
pub struct ResolvedTuple {
    pub base: EncodedPrompt,
    pub source: EncodedPrompt,
    /// Gold continuation; first token is the match target.
    pub label: Vec<TokenId>,
    pub a_star: String,
    pub kind: TupleKind,
}

pub fn resolve_tuple(tok: &Tokenizer, t: &InterventionTuple) -> Result<ResolvedTuple> {
    Ok(ResolvedTuple {
        base: encode_prompt(tok, &t.x, &t.e_base)?,
        source: encode_prompt(tok, &t.x_source, &t.e_source)?,
        label: label_tokens(tok, &t.x, &t.y)?,
        a_star: t.a_star.clone(),
        kind: t.kind,
    })
}

pub fn resolve_tuples(tok: &Tokenizer, ts: &[InterventionTuple]) -> Result<Vec<ResolvedTuple>> {
    ts.iter().map(|t| resolve_tuple(tok, t)).collect()
}

// ── Model abstraction ───────────────────────────────────────────────────

/// Residual state entering the site layer, ready to splice and continue.
pub struct PreparedPrompt {
    /// `[T x d]` residual matrix entering `layer`.
    pub resid: Tensor,
    pub t_e: usize,
    pub layer: usize,
    /// Model-specific routing (the queried attribute for linear-readout
    /// models; unused by the LM).
    pub query_tag: u32,
}

pub type EditFn<'a> = dyn Fn(&[f32]) -> Vec<f32> + Sync + 'a;

/// Anything the intervention machinery can drive: the micro-LM and the
/// planted oracle model.
pub trait InterventionModel: Sync {
    /// Weight handles registered on a tape (as constants).
    type GraphRef;

    fn site_dim(&self) -> usize;
    fn vocab_size(&self) -> usize;
    fn num_layers(&self) -> usize;

    /// GetVals: the site vector under a clean forward pass.
    fn site_vals(&self, p: &EncodedPrompt, layer: usize) -> Result<Vec<f32>>;

    /// Greedy first predicted token, optionally rewriting the site vector.
    fn predict_first(
        &self,
        p: &EncodedPrompt,
        layer: usize,
        edit: Option<&EditFn<'_>>,
    ) -> Result<TokenId>;

    /// Greedy continuation of up to `max_new` tokens under the edit.
    fn decode_with_edit(
        &self,
        p: &EncodedPrompt,
        layer: usize,
        edit: Option<&EditFn<'_>>,
        max_new: usize,
    ) -> Result<Vec<TokenId>>;

    fn prepare(&self, p: &EncodedPrompt, layer: usize) -> Result<PreparedPrompt>;

    fn graph_begin(&self, g: &mut Graph) -> Self::GraphRef;

    /// Splice `spliced` into the prepared prompt's site row and continue to
    /// the final position's `[1 x V]` logits.
    fn graph_logits(
        &self,
        g: &mut Graph,
        r: &Self::GraphRef,
        prep: &PreparedPrompt,
        spliced: Var,
    ) -> Result<Var>;
}

impl InterventionModel for LanguageModel {
    type GraphRef = crate::lm::GraphWeights;

    fn site_dim(&self) -> usize {
        self.d_model()
    }

    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn num_layers(&self) -> usize {
        self.n_layers()
    }

    fn site_vals(&self, p: &EncodedPrompt, layer: usize) -> Result<Vec<f32>> {
        let resid = self.resid_at(&p.tokens, layer)?;
        Ok(resid.row_slice(p.t_entity()).to_vec())
    }

    fn predict_first(
        &self,
        p: &EncodedPrompt,
        layer: usize,
        edit: Option<&EditFn<'_>>,
    ) -> Result<TokenId> {
        let logits = match edit {
            None => self.forward(&p.tokens, &mut [])?,
            Some(f) => {
                let mut hook = Hook {
                    layer,
                    pos: p.t_entity(),
                    action: HookAction::Replace(f),
                };
                self.forward(&p.tokens, std::slice::from_mut(&mut hook))?
            }
        };
        Ok(argmax_lowest(logits.row_slice(logits.rows() - 1)))
    }

    fn decode_with_edit(
        &self,
        p: &EncodedPrompt,
        layer: usize,
        edit: Option<&EditFn<'_>>,
        max_new: usize,
    ) -> Result<Vec<TokenId>> {
        match edit {
            None => self.decode_greedy(&p.tokens, max_new),
            Some(f) => {
                let mut hook = Hook {
                    layer,
                    pos: p.t_entity(),
                    action: HookAction::Replace(f),
                };
                self.decode_greedy_hooked(&p.tokens, max_new, std::slice::from_mut(&mut hook))
            }
        }
    }

    fn prepare(&self, p: &EncodedPrompt, layer: usize) -> Result<PreparedPrompt> {
        Ok(PreparedPrompt {
            resid: self.resid_at(&p.tokens, layer)?,
            t_e: p.t_entity(),
            layer,
            query_tag: 0,
        })
    }

    fn graph_begin(&self, g: &mut Graph) -> Self::GraphRef {
        self.register(g, false)
    }

    fn graph_logits(
        &self,
        g: &mut Graph,
        weights: &Self::GraphRef,
        prep: &PreparedPrompt,
        spliced: Var,
    ) -> Result<Var> {
        let resid = g.leaf(prep.resid.clone());
        let replaced = g.replace_row(resid, prep.t_e, spliced)?;
        self.graph_continue(g, weights, replaced, prep.layer)
    }
}

// ── Intervention operations ─────────────────────────────────────────────

fn check_site<M: InterventionModel>(model: &M, site: ActivationSite) -> Result<()> {
    if site.layer >= model.num_layers() {
        return Err(Error::Site(format!(
            "layer {} out of range (n_layers {})",
            site.layer,
            model.num_layers()
        )));
    }
    Ok(())
}

/// GetVals at the handle's site convention.
pub fn get_vals<M: InterventionModel>(
    model: &M,
    p: &EncodedPrompt,
    site: ActivationSite,
) -> Result<Vec<f32>> {
    check_site(model, site)?;
    model.site_vals(p, site.layer)
}

/// GetFeature: featurized site values restricted to the handle's indices.
pub fn get_feature<M: InterventionModel>(
    model: &M,
    p: &EncodedPrompt,
    handle: &FeatureHandle,
) -> Result<Vec<f32>> {
    let vals = get_vals(model, p, handle.site)?;
    if vals.len() != handle.featurizer.input_dim() {
        return Err(Error::shape(format!(
            "featurizer expects dim {}, site has {}",
            handle.featurizer.input_dim(),
            vals.len()
        )));
    }
    let f = handle.featurizer.forward(&vals);
    Ok(handle.indices.iter().map(|&i| f[i]).collect())
}

/// The interchange intervention: fix the handle's features to their values
/// under the source prompt, run the base prompt, and decode greedily.
pub fn interchange_intervene<M: InterventionModel>(
    model: &M,
    handle: &FeatureHandle,
    base: &EncodedPrompt,
    source: &EncodedPrompt,
    max_new: usize,
) -> Result<Vec<TokenId>> {
    check_site(model, handle.site)?;
    if handle.featurizer.input_dim() != model.site_dim() {
        return Err(Error::shape(format!(
            "featurizer dim {} != site dim {}",
            handle.featurizer.input_dim(),
            model.site_dim()
        )));
    }
    let n_source = model.site_vals(source, handle.site.layer)?;
    let edit = |n_base: &[f32]| handle.edit(n_base, &n_source);
    model.decode_with_edit(base, handle.site.layer, Some(&edit), max_new)
}

/// First token only; the common scoring path.
pub fn interchange_first_token<M: InterventionModel>(
    model: &M,
    handle: &FeatureHandle,
    base: &EncodedPrompt,
    source: &EncodedPrompt,
) -> Result<TokenId> {
    check_site(model, handle.site)?;
    let n_source = model.site_vals(source, handle.site.layer)?;
    let edit = |n_base: &[f32]| handle.edit(n_base, &n_source);
    model.predict_first(base, handle.site.layer, Some(&edit))
}

/// Wholesale replacement of the site vector, the untrained baseline.
pub fn full_rep_intervene<M: InterventionModel>(
    model: &M,
    site: ActivationSite,
    base: &EncodedPrompt,
    source: &EncodedPrompt,
    max_new: usize,
) -> Result<Vec<TokenId>> {
    let handle = FeatureHandle::full_rep(model.site_dim(), site);
    interchange_intervene(model, &handle, base, source, max_new)
}
