//! World persistence: JSONL files plus a splits/metadata JSON.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::world::{
    AttributeInfo, Entity, InterventionTuple, Part, Split, SplitMode, Template, World, WorldSpec,
};

#[derive(Serialize, Deserialize)]
struct SplitsFile {
    spec: WorldSpec,
    attributes: Vec<AttributeInfo>,
    syllables: Vec<String>,
    entity_split: Split,
    context_split: Split,
    meta: serde_json::Value,
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, &item).map_err(|e| Error::Parse(e.to_string()))?;
        buf.write_all(b"\n")?;
    }
    Ok(buf)
}

pub fn save_world(world: &World, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    crate::pipeline::atomic_write(&dir.join("entities.jsonl"), &jsonl(&world.entities)?)?;
    crate::pipeline::atomic_write(&dir.join("templates.jsonl"), &jsonl(&world.templates)?)?;
    let splits = SplitsFile {
        spec: world.spec.clone(),
        attributes: world.attributes.clone(),
        syllables: world.syllables.clone(),
        entity_split: world.entity_split.clone(),
        context_split: world.context_split.clone(),
        meta: json!({ "cause_iso_ratio": "1:1" }),
    };
    let body = serde_json::to_string_pretty(&splits).map_err(|e| Error::Parse(e.to_string()))?;
    crate::pipeline::atomic_write(&dir.join("splits.json"), body.as_bytes())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let body = std::fs::read_to_string(path)?;
    body.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
        })
        .collect()
}

pub fn load_world(dir: &Path) -> Result<World> {
    let splits_path = dir.join("splits.json");
    if !splits_path.exists() {
        return Err(Error::MissingArtifact(splits_path));
    }
    let splits: SplitsFile = serde_json::from_str(&std::fs::read_to_string(&splits_path)?)
        .map_err(|e| Error::Parse(format!("splits.json: {e}")))?;
    let entities: Vec<Entity> = read_jsonl(&dir.join("entities.jsonl"))?;
    let templates: Vec<Template> = read_jsonl(&dir.join("templates.jsonl"))?;
    Ok(World {
        spec: splits.spec,
        entities,
        attributes: splits.attributes,
        templates,
        syllables: splits.syllables,
        entity_split: splits.entity_split,
        context_split: splits.context_split,
    })
}

/// One line per tuple, tagged with the (mode, part, fitted attribute) batch
/// it belongs to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TupleRecord {
    pub mode: SplitMode,
    pub part: Part,
    pub attr: String,
    #[serde(flatten)]
    pub tuple: InterventionTuple,
}

pub fn save_tuples(records: &[TupleRecord], path: &Path) -> Result<()> {
    crate::pipeline::atomic_write(path, &jsonl(records)?)
}

pub fn load_tuples(path: &Path) -> Result<Vec<TupleRecord>> {
    read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_world, pair_interventions, WorldSpec};

    #[test]
    fn world_round_trip_is_lossless() {
        let w = generate_world(&WorldSpec {
            n_entities: 30,
            seed: 17,
            ..WorldSpec::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_world(&w, dir.path()).unwrap();
        let back = load_world(dir.path()).unwrap();
        assert_eq!(
            serde_json::to_string(&w).unwrap(),
            serde_json::to_string(&back).unwrap()
        );
    }

    #[test]
    fn tuple_files_round_trip() {
        let w = generate_world(&WorldSpec {
            n_entities: 30,
            seed: 17,
            ..WorldSpec::default()
        })
        .unwrap();
        let tuples = pair_interventions(&w, SplitMode::Entity, Part::Dev, "region", 20, 4).unwrap();
        let records: Vec<TupleRecord> = tuples
            .into_iter()
            .map(|t| TupleRecord {
                mode: SplitMode::Entity,
                part: Part::Dev,
                attr: "region".into(),
                tuple: t,
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tuples.jsonl");
        save_tuples(&records, &path).unwrap();
        let back = load_tuples(&path).unwrap();
        assert_eq!(back.len(), records.len());
        assert_eq!(back[3].tuple.x, records[3].tuple.x);
        assert_eq!(back[3].tuple.y, records[3].tuple.y);
    }

    #[test]
    fn missing_world_is_a_missing_artifact() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_world(dir.path()),
            Err(Error::MissingArtifact(_))
        ));
    }
}
