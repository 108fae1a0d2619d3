//! Intervention tuples: the evaluation unit pairing a base prompt with a
//! counterfactual source prompt.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::world::{Part, SplitMode, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TupleKind {
    Cause,
    Iso,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterventionTuple {
    /// Base prompt x, querying the target attribute of the base entity.
    pub x: String,
    /// Source prompt x', mentioning the source entity.
    pub x_source: String,
    /// Target attribute A*: the fitted attribute for cause tuples, a
    /// distractor for iso tuples.
    pub a_star: String,
    /// Gold label: getattr(A*, source) for cause, getattr(A*, base) for iso.
    pub y: String,
    pub kind: TupleKind,
    pub e_base: String,
    pub e_source: String,
}

/// Sample `n` tuples (half cause, half iso; iso balanced over distractor
/// attributes) for featurizer attribute `attribute` from one split part.
///
/// Base and source entities always differ, and differ on the target
/// attribute's value, so a successful intervention is always observable.
/// Source prompts are drawn from attribute prompts and entity prompts with
/// equal probability.
pub fn pair_interventions(
    world: &World,
    mode: SplitMode,
    part: Part,
    attribute: &str,
    n: usize,
    seed: u64,
) -> Result<Vec<InterventionTuple>> {
    world.attribute(attribute)?;
    let mut r = rng::stream(seed, &format!("tuples-{mode:?}-{part:?}-{attribute}"));

    let entities: Vec<usize> = match mode {
        SplitMode::Entity => world.split(mode).part(part).to_vec(),
        SplitMode::Context => (0..world.entities.len()).collect(),
    };
    if entities.len() < 2 {
        return Err(Error::spec(format!(
            "need at least 2 entities in {mode:?}/{part:?}, have {}",
            entities.len()
        )));
    }
    let template_ok = |id: usize| -> bool {
        match mode {
            SplitMode::Entity => true,
            SplitMode::Context => world.split(mode).part(part).contains(&id),
        }
    };
    let attr_template_ids = |attr: &str| -> Vec<usize> {
        world
            .attr_templates(attr)
            .iter()
            .map(|t| t.id)
            .filter(|&id| template_ok(id))
            .collect()
    };
    let entity_template_ids: Vec<usize> = world
        .entity_templates()
        .iter()
        .map(|t| t.id)
        .filter(|&id| template_ok(id))
        .collect();
    let all_attrs = world.attribute_names();
    for a in &all_attrs {
        if attr_template_ids(a).is_empty() {
            return Err(Error::spec(format!(
                "no templates for attribute '{a}' in {mode:?}/{part:?}"
            )));
        }
    }
    if entity_template_ids.is_empty() {
        return Err(Error::spec(format!(
            "no entity templates in {mode:?}/{part:?}"
        )));
    }

    let distractors: Vec<String> = all_attrs
        .iter()
        .filter(|a| a.as_str() != attribute)
        .cloned()
        .collect();
    let n_cause = if distractors.is_empty() { n } else { n / 2 };
    let n_iso = n - n_cause;

    let sample_source = |r: &mut rand_chacha::ChaCha8Rng, source: usize| -> Result<String> {
        let tid = if r.gen_bool(0.5) {
            let a = &all_attrs[r.gen_range(0..all_attrs.len())];
            let ids = attr_template_ids(a);
            ids[r.gen_range(0..ids.len())]
        } else {
            entity_template_ids[r.gen_range(0..entity_template_ids.len())]
        };
        Ok(world.render_prompt(&world.templates[tid], source)?.text)
    };

    // Sample a source entity whose target-attribute value differs from the
    // base entity's.
    let pick_pair = |r: &mut rand_chacha::ChaCha8Rng,
                     target_attr: &str|
     -> Result<(usize, usize)> {
        for _ in 0..10_000 {
            let base = entities[r.gen_range(0..entities.len())];
            let source = entities[r.gen_range(0..entities.len())];
            if base == source {
                continue;
            }
            if world.getattr(target_attr, base)? != world.getattr(target_attr, source)? {
                return Ok((base, source));
            }
        }
        Err(Error::Degenerate(format!(
            "attribute '{target_attr}' has no value variation in {mode:?}/{part:?}"
        )))
    };

    let mut tuples = Vec::with_capacity(n);
    for _ in 0..n_cause {
        let (base, source) = pick_pair(&mut r, attribute)?;
        let base_ids = attr_template_ids(attribute);
        let tid = base_ids[r.gen_range(0..base_ids.len())];
        let x = world.render_prompt(&world.templates[tid], base)?.text;
        let x_source = sample_source(&mut r, source)?;
        tuples.push(InterventionTuple {
            x,
            x_source,
            a_star: attribute.to_string(),
            y: world.getattr(attribute, source)?.to_string(),
            kind: TupleKind::Cause,
            e_base: world.entities[base].name.clone(),
            e_source: world.entities[source].name.clone(),
        });
    }
    // Iso tuples balanced round-robin over distractor attributes.
    for i in 0..n_iso {
        let a_star = &distractors[i % distractors.len()];
        let (base, source) = pick_pair(&mut r, a_star)?;
        let base_ids = attr_template_ids(a_star);
        let tid = base_ids[r.gen_range(0..base_ids.len())];
        let x = world.render_prompt(&world.templates[tid], base)?.text;
        let x_source = sample_source(&mut r, source)?;
        tuples.push(InterventionTuple {
            x,
            x_source,
            a_star: a_star.clone(),
            y: world.getattr(a_star, base)?.to_string(),
            kind: TupleKind::Iso,
            e_base: world.entities[base].name.clone(),
            e_source: world.entities[source].name.clone(),
        });
    }
    let mut order: Vec<usize> = (0..tuples.len()).collect();
    order.shuffle(&mut r);
    Ok(order.into_iter().map(|i| tuples[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_world, WorldSpec};

    fn world() -> World {
        generate_world(&WorldSpec {
            n_entities: 40,
            seed: 3,
            ..WorldSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_tuples_is_empty() {
        let w = world();
        let t = pair_interventions(&w, SplitMode::Entity, Part::Train, "region", 0, 1).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn labels_are_consistent_with_the_attribute_table() {
        let w = world();
        for mode in [SplitMode::Entity, SplitMode::Context] {
            let tuples =
                pair_interventions(&w, mode, Part::Train, "region", 60, 1).unwrap();
            assert_eq!(tuples.len(), 60);
            for t in &tuples {
                let base = w.entity_index(&t.e_base).unwrap();
                let source = w.entity_index(&t.e_source).unwrap();
                match t.kind {
                    TupleKind::Cause => {
                        assert_eq!(t.a_star, "region");
                        assert_eq!(t.y, w.getattr("region", source).unwrap());
                    }
                    TupleKind::Iso => {
                        assert_ne!(t.a_star, "region");
                        assert_eq!(t.y, w.getattr(&t.a_star, base).unwrap());
                    }
                }
                // Target attribute values differ between base and source.
                assert_ne!(
                    w.getattr(&t.a_star, base).unwrap(),
                    w.getattr(&t.a_star, source).unwrap()
                );
                assert!(t.x.contains(&t.e_base));
                assert!(t.x_source.contains(&t.e_source));
            }
        }
    }

    #[test]
    fn iso_tuples_are_balanced_over_distractors() {
        let w = world();
        let tuples = pair_interventions(&w, SplitMode::Entity, Part::Dev, "region", 120, 2).unwrap();
        let mut counts = std::collections::BTreeMap::new();
        for t in tuples.iter().filter(|t| t.kind == TupleKind::Iso) {
            *counts.entry(t.a_star.clone()).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 3);
        let (min, max) = (
            counts.values().min().unwrap(),
            counts.values().max().unwrap(),
        );
        assert_eq!(*min, 20);
        assert_eq!(*max, 20);
    }

    #[test]
    fn entity_mode_test_tuples_avoid_training_entities() {
        let w = world();
        let train: std::collections::BTreeSet<&str> = w
            .entity_split
            .train
            .iter()
            .map(|&i| w.entities[i].name.as_str())
            .collect();
        let tuples = pair_interventions(&w, SplitMode::Entity, Part::Test, "climate", 50, 7).unwrap();
        for t in &tuples {
            assert!(!train.contains(t.e_base.as_str()));
            assert!(!train.contains(t.e_source.as_str()));
        }
    }

    #[test]
    fn context_mode_test_tuples_avoid_training_templates() {
        let w = world();
        let mut train_texts: Vec<String> = Vec::new();
        for &id in &w.context_split.train {
            for e in &w.entities {
                train_texts.push(w.templates[id].render(&e.name).text);
            }
        }
        let tuples = pair_interventions(&w, SplitMode::Context, Part::Test, "region", 30, 5).unwrap();
        for t in &tuples {
            assert!(
                !train_texts.contains(&t.x),
                "test tuple uses a training template: {}",
                t.x
            );
        }
    }

    #[test]
    fn too_few_entities_is_an_error() {
        let w = world();
        let mut w2 = w.clone();
        w2.entity_split.test = vec![w.entity_split.test[0]];
        assert!(pair_interventions(&w2, SplitMode::Entity, Part::Test, "region", 10, 1).is_err());
    }
}
