//! Training loop for the micro-LM.
//!
//! The model plays the role of an externally pretrained LM, so its corpus
//! covers every entity and template: attribute prompts with their gold
//! answers appended plus plain entity sentences. The Entity/Context splits
//! constrain featurizer fitting, not this pretraining. Dev attribute
//! accuracy (on Entity-split dev entities) gates early stopping and is
//! reported for filtering.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::intervene::{encode_prompt, label_tokens};
use crate::lm::{argmax_lowest, LanguageModel, LmConfig, TokenId};
use crate::rng;
use crate::tensor::{Adam, Graph};
use crate::world::World;

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub steps: usize,
    pub final_loss: f64,
    pub dev_accuracy: f64,
    pub dev_prompts: usize,
}

/// Train a fresh model on the world. Deterministic given `cfg.seed`.
pub fn train_lm(world: &World, cfg: &LmConfig) -> Result<(LanguageModel, TrainReport)> {
    if world.entity_split.train.is_empty() {
        return Err(Error::contract("train split is empty".to_string()));
    }
    let tokenizer = world.tokenizer();
    let mut model = LanguageModel::new(cfg.clone(), tokenizer)?;

    // Corpus: every attribute prompt with its answer, every entity sentence.
    let mut seqs: Vec<Vec<TokenId>> = Vec::new();
    for t in &world.templates {
        for e in 0..world.entities.len() {
            let text = match &t.attribute {
                Some(attr) => {
                    t.render_with_answer(&world.entities[e].name, world.getattr(attr, e)?)
                }
                None => t.render(&world.entities[e].name).text,
            };
            let mut ids = model.tokenizer.encode(&text)?;
            ids.insert(0, model.tokenizer.bos);
            if ids.len() > cfg.max_seq_len {
                return Err(Error::spec(format!(
                    "rendered sequence of {} tokens exceeds max_seq_len {}",
                    ids.len(),
                    cfg.max_seq_len
                )));
            }
            seqs.push(ids);
        }
    }

    // Length buckets so batches need no padding.
    let mut buckets: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, s) in seqs.iter().enumerate() {
        buckets.entry(s.len()).or_default().push(i);
    }
    let bucket_lens: Vec<usize> = buckets.keys().copied().collect();
    let bucket_weights: Vec<usize> = bucket_lens.iter().map(|l| buckets[l].len()).collect();
    let total_weight: usize = bucket_weights.iter().sum();

    let mut r = rng::stream(cfg.seed, "lm-train");
    let mut opt = Adam::new(cfg.train.learning_rate);
    let dev_eval = DevEval::new(world, cfg.train.eval_sample, cfg.seed)?;

    let mut last_loss = f64::NAN;
    let mut steps_run = 0;
    for step in 0..cfg.train.max_steps {
        // Weighted bucket choice, then a batch within it.
        let mut pick = r.gen_range(0..total_weight);
        let mut bucket_idx = 0;
        for (i, &w) in bucket_weights.iter().enumerate() {
            if pick < w {
                bucket_idx = i;
                break;
            }
            pick -= w;
        }
        let ids = &buckets[&bucket_lens[bucket_idx]];
        let batch: Vec<Vec<TokenId>> = (0..cfg.train.batch_size)
            .map(|_| seqs[ids[r.gen_range(0..ids.len())]].clone())
            .collect();
        let t_len = batch[0].len();

        let mut g = Graph::new();
        let weights = model.register(&mut g, true);
        let logits = model.graph_forward(&mut g, &weights, &batch, t_len)?;
        // Next-token loss at every position.
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (b, seq) in batch.iter().enumerate() {
            for t in 0..seq.len() - 1 {
                rows.push(b * t_len + t);
                targets.push(seq[t + 1] as usize);
            }
        }
        let picked = g.gather_rows(logits, rows)?;
        let loss = g.softmax_cross_entropy(picked, targets)?;
        let loss_val = g.value(loss).data()[0] as f64;
        if !loss_val.is_finite() {
            return Err(Error::Divergence {
                step,
                message: format!("loss {loss_val}"),
            });
        }
        last_loss = loss_val;
        g.backward(loss)?;

        let grads: Vec<crate::tensor::Tensor> = collect_grads(&g, &weights);
        {
            let mut params = model.params_mut();
            let grad_refs: Vec<&crate::tensor::Tensor> = grads.iter().collect();
            opt.step(&mut params, &grad_refs);
        }
        steps_run = step + 1;

        if steps_run % cfg.train.eval_every == 0 {
            let acc = dev_eval.accuracy(&model)?;
            if acc >= cfg.train.stop_dev_accuracy {
                break;
            }
        }
    }

    let (dev_accuracy, dev_prompts) = dev_attribute_accuracy(&model, world, None)?;
    Ok((
        model,
        TrainReport {
            steps: steps_run,
            final_loss: last_loss,
            dev_accuracy,
            dev_prompts,
        },
    ))
}

fn collect_grads(g: &Graph, weights: &crate::lm::GraphWeights) -> Vec<crate::tensor::Tensor> {
    let mut order = vec![weights.emb, weights.pos];
    for b in &weights.blocks {
        order.extend([b.wq, b.wk, b.wv, b.wo, b.w1, b.w2, b.norm1, b.norm2]);
    }
    order.push(weights.final_norm);
    order
        .into_iter()
        .map(|v| {
            g.grad(v).cloned().unwrap_or_else(|| {
                crate::tensor::Tensor::zeros(g.value(v).shape().to_vec())
            })
        })
        .collect()
}

/// Fixed subsample of dev attribute prompts for in-training evaluation.
struct DevEval {
    /// (prompt text, entity surface, gold label string)
    prompts: Vec<(String, String, String)>,
}

impl DevEval {
    fn new(world: &World, sample: usize, seed: u64) -> Result<Self> {
        let mut pairs = Vec::new();
        for &e in &world.entity_split.dev {
            for t in world.templates.iter().filter(|t| t.attribute.is_some()) {
                pairs.push((e, t.id));
            }
        }
        let mut r = rng::stream(seed, "lm-dev-sample");
        pairs.shuffle(&mut r);
        pairs.truncate(sample.max(1));
        let mut prompts = Vec::new();
        for (e, tid) in pairs {
            let t = &world.templates[tid];
            let attr = t.attribute.as_deref().unwrap();
            let rendered = world.render_prompt(t, e)?;
            prompts.push((
                rendered.text,
                rendered.entity,
                world.getattr(attr, e)?.to_string(),
            ));
        }
        Ok(DevEval { prompts })
    }

    fn accuracy(&self, model: &LanguageModel) -> Result<f64> {
        use rayon::prelude::*;
        let correct: usize = self
            .prompts
            .par_iter()
            .map(|(text, entity, label)| -> Result<bool> {
                let p = encode_prompt(&model.tokenizer, text, entity)?;
                let gold = label_tokens(&model.tokenizer, text, label)?;
                let logits = model.forward(&p.tokens, &mut [])?;
                Ok(argmax_lowest(logits.row_slice(logits.rows() - 1)) == gold[0])
            })
            .collect::<Result<Vec<bool>>>()?
            .into_iter()
            .filter(|&c| c)
            .count();
        Ok(correct as f64 / self.prompts.len() as f64)
    }
}

/// Attribute-prompt accuracy on the Entity-split dev entities. `sample`
/// limits the number of prompts (None = all).
pub fn dev_attribute_accuracy(
    model: &LanguageModel,
    world: &World,
    sample: Option<usize>,
) -> Result<(f64, usize)> {
    use rayon::prelude::*;
    let mut cases = Vec::new();
    for &e in &world.entity_split.dev {
        for t in world.templates.iter().filter(|t| t.attribute.is_some()) {
            cases.push((e, t.id));
        }
    }
    if let Some(n) = sample {
        let mut r = rng::stream(world.spec.seed, "lm-dev-sample");
        cases.shuffle(&mut r);
        cases.truncate(n);
    }
    if cases.is_empty() {
        return Err(Error::contract("no dev prompts to evaluate".to_string()));
    }
    let correct: usize = cases
        .par_iter()
        .map(|&(e, tid)| -> Result<bool> {
            let t = &world.templates[tid];
            let attr = t.attribute.as_deref().unwrap();
            let rendered = world.render_prompt(t, e)?;
            let p = encode_prompt(&model.tokenizer, &rendered.text, &rendered.entity)?;
            let gold = label_tokens(&model.tokenizer, &rendered.text, world.getattr(attr, e)?)?;
            let logits = model.forward(&p.tokens, &mut [])?;
            Ok(argmax_lowest(logits.row_slice(logits.rows() - 1)) == gold[0])
        })
        .collect::<Result<Vec<bool>>>()?
        .into_iter()
        .filter(|&c| c)
        .count();
    Ok((correct as f64 / cases.len() as f64, cases.len()))
}
