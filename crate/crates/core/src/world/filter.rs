//! Model-accuracy filtering: keep the entities and attribute templates the
//! trained model answers correctly.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::intervene::{encode_prompt, label_tokens};
use crate::lm::LanguageModel;
use crate::world::World;

#[derive(Debug, Clone, Serialize)]
pub struct FilterReport {
    pub threshold: f64,
    pub entities_before: usize,
    pub entities_after: usize,
    pub attr_templates_before: usize,
    pub attr_templates_after: usize,
    /// Per retained entity: accuracy per attribute, in world attribute order.
    pub accuracy_matrix: Vec<EntityAccuracy>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EntityAccuracy {
    pub entity: String,
    pub per_attribute: Vec<f64>,
    pub overall: f64,
}

/// First-token accuracy of one (entity, template) cell.
fn cell_correct(world: &World, model: &LanguageModel, entity: usize, template: usize) -> Result<bool> {
    let t = &world.templates[template];
    let attr = t.attribute.as_deref().expect("attribute template");
    let rendered = world.render_prompt(t, entity)?;
    let p = encode_prompt(&model.tokenizer, &rendered.text, &rendered.entity)?;
    let gold = label_tokens(&model.tokenizer, &rendered.text, world.getattr(attr, entity)?)?;
    let logits = model.forward(&p.tokens, &mut [])?;
    let pred = crate::lm::argmax_lowest(logits.row_slice(logits.rows() - 1));
    Ok(pred == gold[0])
}

/// Retain templates whose accuracy over all entities meets `threshold`, then
/// entities whose accuracy over the surviving templates does. Returns the
/// pruned world (splits preserved and pruned) plus the accuracy matrix.
pub fn filter_instance(
    world: &World,
    model: &LanguageModel,
    threshold: f64,
) -> Result<(World, FilterReport)> {
    let attr_template_ids: Vec<usize> = world
        .templates
        .iter()
        .filter(|t| t.attribute.is_some())
        .map(|t| t.id)
        .collect();
    let n_entities = world.entities.len();

    // Full (entity x template) correctness table, template-major.
    let table: Vec<Vec<bool>> = attr_template_ids
        .par_iter()
        .map(|&tid| {
            (0..n_entities)
                .map(|e| cell_correct(world, model, e, tid))
                .collect::<Result<Vec<bool>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let template_acc: Vec<f64> = table
        .iter()
        .map(|col| col.iter().filter(|&&c| c).count() as f64 / n_entities as f64)
        .collect();
    let kept_templates: Vec<usize> = attr_template_ids
        .iter()
        .enumerate()
        .filter(|&(i, _)| template_acc[i] >= threshold)
        .map(|(i, _)| i)
        .collect();
    if kept_templates.is_empty() {
        return Err(Error::EmptyInstance(format!(
            "no attribute template reaches accuracy {threshold}; best is {:.3}",
            template_acc.iter().cloned().fold(0.0, f64::max)
        )));
    }
    // Every attribute must keep at least one template.
    for a in &world.attributes {
        let any = kept_templates.iter().any(|&i| {
            world.templates[attr_template_ids[i]].attribute.as_deref() == Some(a.name.as_str())
        });
        if !any {
            return Err(Error::EmptyInstance(format!(
                "attribute '{}' lost all templates at threshold {threshold}",
                a.name
            )));
        }
    }

    let entity_acc: Vec<f64> = (0..n_entities)
        .map(|e| {
            let correct = kept_templates.iter().filter(|&&i| table[i][e]).count();
            correct as f64 / kept_templates.len() as f64
        })
        .collect();
    let kept_entities: Vec<usize> = (0..n_entities)
        .filter(|&e| entity_acc[e] >= threshold)
        .collect();
    if kept_entities.len() < 4 {
        return Err(Error::EmptyInstance(format!(
            "only {} entities reach accuracy {threshold} (mean accuracy {:.3})",
            kept_entities.len(),
            entity_acc.iter().sum::<f64>() / n_entities.max(1) as f64
        )));
    }

    // Accuracy matrix for the report: per entity x attribute over kept
    // templates.
    let mut matrix = Vec::new();
    for &e in &kept_entities {
        let mut per_attribute = Vec::new();
        for a in &world.attributes {
            let cols: Vec<usize> = kept_templates
                .iter()
                .copied()
                .filter(|&i| {
                    world.templates[attr_template_ids[i]].attribute.as_deref()
                        == Some(a.name.as_str())
                })
                .collect();
            let correct = cols.iter().filter(|&&i| table[i][e]).count();
            per_attribute.push(correct as f64 / cols.len() as f64);
        }
        matrix.push(EntityAccuracy {
            entity: world.entities[e].name.clone(),
            overall: entity_acc[e],
            per_attribute,
        });
    }

    // Rebuild the world with retained entities and templates. Split
    // membership is preserved, then pruned and reindexed.
    let kept_template_ids: std::collections::BTreeSet<usize> = kept_templates
        .iter()
        .map(|&i| attr_template_ids[i])
        .chain(world.templates.iter().filter(|t| t.attribute.is_none()).map(|t| t.id))
        .collect();
    let mut new_world = world.clone();
    let entity_remap: std::collections::BTreeMap<usize, usize> = kept_entities
        .iter()
        .enumerate()
        .map(|(new, &old)| (old, new))
        .collect();
    new_world.entities = kept_entities
        .iter()
        .map(|&e| world.entities[e].clone())
        .collect();
    let template_remap: std::collections::BTreeMap<usize, usize> = kept_template_ids
        .iter()
        .enumerate()
        .map(|(new, &old)| (old, new))
        .collect();
    new_world.templates = kept_template_ids
        .iter()
        .map(|&tid| {
            let mut t = world.templates[tid].clone();
            t.id = template_remap[&tid];
            t
        })
        .collect();
    let prune_entities = |ids: &[usize]| -> Vec<usize> {
        ids.iter().filter_map(|i| entity_remap.get(i).copied()).collect()
    };
    let prune_templates = |ids: &[usize]| -> Vec<usize> {
        ids.iter().filter_map(|i| template_remap.get(i).copied()).collect()
    };
    new_world.entity_split.train = prune_entities(&world.entity_split.train);
    new_world.entity_split.dev = prune_entities(&world.entity_split.dev);
    new_world.entity_split.test = prune_entities(&world.entity_split.test);
    new_world.context_split.train = prune_templates(&world.context_split.train);
    new_world.context_split.dev = prune_templates(&world.context_split.dev);
    new_world.context_split.test = prune_templates(&world.context_split.test);

    let report = FilterReport {
        threshold,
        entities_before: n_entities,
        entities_after: new_world.entities.len(),
        attr_templates_before: attr_template_ids.len(),
        attr_templates_after: kept_templates.len(),
        accuracy_matrix: matrix,
    };
    Ok((new_world, report))
}
