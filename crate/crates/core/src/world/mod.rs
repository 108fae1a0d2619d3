//! Synthetic entity-attribute world: entities with (possibly dependent)
//! attributes, prompt templates in natural-language and JSON formats,
//! Entity/Context splits, and intervention tuples.
//!
//! Entity names are 2-3 syllables drawn from a fixed inventory so the last
//! entity token differs from the first; attribute values are capitalized
//! pseudo-words that tokenize to a single token.

mod filter;
mod serialize;
mod tuples;

pub use filter::{filter_instance, FilterReport};
pub use serialize::{load_tuples, load_world, save_tuples, save_world};
pub use tuples::{pair_interventions, InterventionTuple, TupleKind};

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::Tokenizer;
use crate::rng;

// ── Specs ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AttributeSpec {
    pub name: String,
    pub n_values: usize,
    #[serde(default)]
    pub dependency: Dependency,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Dependency {
    #[default]
    Independent,
    FunctionOf {
        parent: String,
    },
    NoisyFunctionOf {
        parent: String,
        noise_rate: f64,
    },
}

impl Dependency {
    pub fn parent(&self) -> Option<&str> {
        match self {
            Dependency::Independent => None,
            Dependency::FunctionOf { parent } => Some(parent),
            Dependency::NoisyFunctionOf { parent, .. } => Some(parent),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub n_entities: usize,
    pub attributes: Vec<AttributeSpec>,
    pub n_attribute_templates: usize,
    pub n_entity_templates: usize,
    /// Few-shot examples prefixed to rendered prompts (0 = zero-shot).
    pub few_shot: usize,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            n_entities: 200,
            attributes: vec![
                AttributeSpec {
                    name: "region".into(),
                    n_values: 12,
                    dependency: Dependency::Independent,
                },
                AttributeSpec {
                    name: "climate".into(),
                    n_values: 5,
                    dependency: Dependency::FunctionOf {
                        parent: "region".into(),
                    },
                },
                AttributeSpec {
                    name: "tongue".into(),
                    n_values: 8,
                    dependency: Dependency::NoisyFunctionOf {
                        parent: "region".into(),
                        noise_rate: 0.2,
                    },
                },
                AttributeSpec {
                    name: "stone".into(),
                    n_values: 6,
                    dependency: Dependency::Independent,
                },
            ],
            n_attribute_templates: 8,
            n_entity_templates: 8,
            few_shot: 0,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_entities < 2 {
            return Err(Error::spec("need at least 2 entities"));
        }
        if self.attributes.is_empty() {
            return Err(Error::spec("need at least one attribute"));
        }
        let names: BTreeSet<&str> = self.attributes.iter().map(|a| a.name.as_str()).collect();
        if names.len() != self.attributes.len() {
            return Err(Error::spec("duplicate attribute names"));
        }
        for a in &self.attributes {
            if a.n_values < 2 {
                return Err(Error::spec(format!(
                    "attribute '{}' needs at least 2 values",
                    a.name
                )));
            }
            if let Some(p) = a.dependency.parent() {
                if !names.contains(p) {
                    return Err(Error::spec(format!(
                        "attribute '{}' depends on unknown '{p}'",
                        a.name
                    )));
                }
            }
            if let Dependency::NoisyFunctionOf { noise_rate, .. } = a.dependency {
                if !(0.0..1.0).contains(&noise_rate) {
                    return Err(Error::spec("noise_rate must be in [0, 1)"));
                }
            }
        }
        toposort_attributes(&self.attributes)?;
        if self.n_attribute_templates == 0 || self.n_attribute_templates > NL_ATTR_BANK.len() + JSON_ATTR_BANK.len() {
            return Err(Error::spec(format!(
                "n_attribute_templates must be 1..={}",
                NL_ATTR_BANK.len() + JSON_ATTR_BANK.len()
            )));
        }
        if self.n_entity_templates == 0 || self.n_entity_templates > ENTITY_BANK.len() {
            return Err(Error::spec(format!(
                "n_entity_templates must be 1..={}",
                ENTITY_BANK.len()
            )));
        }
        Ok(())
    }
}

/// Attribute names in dependency order; errors on cycles.
fn toposort_attributes(attrs: &[AttributeSpec]) -> Result<Vec<usize>> {
    let index: BTreeMap<&str, usize> = attrs
        .iter()
        .enumerate()
        .map(|(i, a)| (a.name.as_str(), i))
        .collect();
    let mut order = Vec::new();
    let mut state = vec![0u8; attrs.len()]; // 0 new, 1 visiting, 2 done
    fn visit(
        i: usize,
        attrs: &[AttributeSpec],
        index: &BTreeMap<&str, usize>,
        state: &mut [u8],
        order: &mut Vec<usize>,
    ) -> Result<()> {
        match state[i] {
            2 => return Ok(()),
            1 => {
                return Err(Error::spec(format!(
                    "cyclic attribute dependency through '{}'",
                    attrs[i].name
                )))
            }
            _ => {}
        }
        state[i] = 1;
        if let Some(p) = attrs[i].dependency.parent() {
            visit(index[p], attrs, index, state, order)?;
        }
        state[i] = 2;
        order.push(i);
        Ok(())
    }
    for i in 0..attrs.len() {
        visit(i, attrs, &index, &mut state, &mut order)?;
    }
    Ok(order)
}

// ── World ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Entity {
    pub name: String,
    pub attrs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributeInfo {
    pub name: String,
    pub values: Vec<String>,
    pub dependency: Dependency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateFormat {
    Nl,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerJoin {
    /// Continuation begins with a space (prose templates).
    Space,
    /// Continuation abuts the prompt (JSON templates ending in a quote).
    Bare,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Template {
    pub id: usize,
    /// None for entity templates that query nothing.
    pub attribute: Option<String>,
    pub format: TemplateFormat,
    pub pre: String,
    pub post: String,
    pub join: AnswerJoin,
}

#[derive(Debug, Clone)]
pub struct RenderedPrompt {
    pub text: String,
    pub entity: String,
    /// Byte span of the entity inside `text`.
    pub char_span: (usize, usize),
}

impl Template {
    pub fn render(&self, entity: &str) -> RenderedPrompt {
        let text = format!("{}{}{}", self.pre, entity, self.post);
        RenderedPrompt {
            char_span: (self.pre.len(), self.pre.len() + entity.len()),
            entity: entity.to_string(),
            text,
        }
    }

    pub fn join_str(&self) -> &'static str {
        match self.join {
            AnswerJoin::Space => " ",
            AnswerJoin::Bare => "",
        }
    }

    /// Prompt plus gold continuation, as used for LM training.
    pub fn render_with_answer(&self, entity: &str, value: &str) -> String {
        format!("{}{}{}{}{}", self.pre, entity, self.post, self.join_str(), value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    Entity,
    Context,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Train,
    Dev,
    Test,
}

/// Membership lists: entity indices in Entity mode, template ids in
/// Context mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Split {
    pub mode: SplitMode,
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn part(&self, p: Part) -> &[usize] {
        match p {
            Part::Train => &self.train,
            Part::Dev => &self.dev,
            Part::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct World {
    pub spec: WorldSpec,
    pub entities: Vec<Entity>,
    pub attributes: Vec<AttributeInfo>,
    pub templates: Vec<Template>,
    pub syllables: Vec<String>,
    pub entity_split: Split,
    pub context_split: Split,
}

// Template banks; `{A}` is replaced by the attribute name.
const NL_ATTR_BANK: &[(&str, &str)] = &[
    ("the {A} of ", " is"),
    ("", " has a {A} of"),
    ("everyone knows the {A} of ", " is"),
    ("records give the {A} of ", " as"),
    ("", " was catalogued with {A}"),
    ("the atlas lists the {A} of ", " as"),
    ("ask about ", " and the {A} is"),
    ("in the ledger the {A} of ", " reads"),
    ("", " is known for a {A} of"),
    ("scholars say the {A} of ", " is"),
    ("surveys report the {A} of ", " to be"),
    ("the survey maps the {A} of ", " onto"),
];

const JSON_ATTR_BANK: &[(&str, &str)] = &[
    ("{\"entity\": \"", "\", \"{A}\": \""),
    ("{\"name\": \"", "\", \"{A}\": \""),
    ("[{\"entity\": \"", "\"}, {\"{A}\": \""),
    ("{\"record\": \"", "\", \"{A}\": \""),
];

const ENTITY_BANK: &[(&str, &str, TemplateFormat)] = &[
    ("", " appeared in the story", TemplateFormat::Nl),
    ("a traveler wrote about ", "", TemplateFormat::Nl),
    ("", " is mentioned in the archive", TemplateFormat::Nl),
    ("the guide describes ", " in detail", TemplateFormat::Nl),
    ("", " was sketched in the margins", TemplateFormat::Nl),
    ("people often talk about ", "", TemplateFormat::Nl),
    ("{\"entity\": \"", "\"}", TemplateFormat::Json),
    ("", " shows up in many tales", TemplateFormat::Nl),
    ("an old song mentions ", "", TemplateFormat::Nl),
    ("merchants trade stories about ", "", TemplateFormat::Nl),
    ("", " stands near the crossroads", TemplateFormat::Nl),
    ("the crowd gathered around ", "", TemplateFormat::Nl),
];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Generate the world deterministically from its spec.
pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let mut r = rng::stream(spec.seed, "world-gen");

    // Syllable inventory: fixed-length CVC chunks, so greedy longest-match
    // segmentation recovers name boundaries.
    let mut syllables: Vec<String> = Vec::new();
    let mut syl_set = BTreeSet::new();
    while syllables.len() < 64 {
        let s = format!(
            "{}{}{}",
            CONSONANTS[r.gen_range(0..CONSONANTS.len())] as char,
            VOWELS[r.gen_range(0..VOWELS.len())] as char,
            CONSONANTS[r.gen_range(0..CONSONANTS.len())] as char
        );
        if syl_set.insert(s.clone()) {
            syllables.push(s);
        }
    }

    // Every surface word the templates can produce, used to veto colliding
    // entity names and to sanity-check segmentation.
    let template_words = template_word_set(&spec.attributes);

    // Attribute value vocabularies: capitalized pseudo-words, one token each,
    // globally unique.
    let mut used_values: BTreeSet<String> = BTreeSet::new();
    let mut attributes = Vec::new();
    for a in &spec.attributes {
        let mut values = Vec::new();
        let mut guard = 0;
        while values.len() < a.n_values {
            guard += 1;
            if guard > 100_000 {
                return Err(Error::spec("could not generate distinct attribute values"));
            }
            let len = r.gen_range(0..2);
            let mut v = String::new();
            v.push((CONSONANTS[r.gen_range(0..CONSONANTS.len())] as char).to_ascii_uppercase());
            v.push(VOWELS[r.gen_range(0..VOWELS.len())] as char);
            v.push(CONSONANTS[r.gen_range(0..CONSONANTS.len())] as char);
            v.push(VOWELS[r.gen_range(0..VOWELS.len())] as char);
            if len == 1 {
                v.push(CONSONANTS[r.gen_range(0..CONSONANTS.len())] as char);
            }
            if used_values.insert(v.clone()) {
                values.push(v);
            }
        }
        attributes.push(AttributeInfo {
            name: a.name.clone(),
            values,
            dependency: a.dependency.clone(),
        });
    }

    // Entity names: 2-3 syllables, unique, and segmentable back into their
    // syllables by the tokenizer's greedy longest match.
    let trial_tokenizer = {
        let mut words: Vec<String> = template_words.iter().cloned().collect();
        words.extend(syllables.iter().cloned());
        words.extend(used_values.iter().cloned());
        Tokenizer::build(words)
    };
    let mut names: Vec<String> = Vec::new();
    let mut name_set = BTreeSet::new();
    let mut guard = 0;
    while names.len() < spec.n_entities {
        guard += 1;
        if guard > 1_000_000 {
            return Err(Error::spec("could not generate distinct entity names"));
        }
        let k = r.gen_range(2..=3);
        let name: String = (0..k)
            .map(|_| syllables[r.gen_range(0..syllables.len())].as_str())
            .collect();
        if name_set.contains(&name) || template_words.contains(&name) {
            continue;
        }
        if template_words.iter().any(|w| w.contains(&name)) {
            continue;
        }
        match trial_tokenizer.encode(&name) {
            Ok(ids) if ids.len() == k => {}
            _ => continue,
        }
        name_set.insert(name.clone());
        names.push(name);
    }

    // Attribute tables in dependency order. Dependent attributes apply a
    // seeded value map from the parent's vocabulary; noisy dependencies flip
    // to a random *other* value at the stated rate.
    let order = toposort_attributes(&spec.attributes)?;
    let attr_index: BTreeMap<String, usize> = attributes
        .iter()
        .enumerate()
        .map(|(i, a)| (a.name.clone(), i))
        .collect();
    let mut value_idx: Vec<Vec<usize>> = vec![vec![0; spec.n_entities]; attributes.len()];
    for &ai in &order {
        let n_vals = attributes[ai].values.len();
        match &attributes[ai].dependency {
            Dependency::Independent => {
                for e in 0..spec.n_entities {
                    value_idx[ai][e] = r.gen_range(0..n_vals);
                }
            }
            Dependency::FunctionOf { parent } => {
                let p = attr_index[parent];
                let map = seeded_value_map(attributes[p].values.len(), n_vals, &mut r);
                for e in 0..spec.n_entities {
                    value_idx[ai][e] = map[value_idx[p][e]];
                }
            }
            Dependency::NoisyFunctionOf { parent, noise_rate } => {
                let p = attr_index[parent];
                let map = seeded_value_map(attributes[p].values.len(), n_vals, &mut r);
                for e in 0..spec.n_entities {
                    let base = map[value_idx[p][e]];
                    value_idx[ai][e] = if r.gen_bool(*noise_rate) {
                        let mut other = r.gen_range(0..n_vals - 1);
                        if other >= base {
                            other += 1;
                        }
                        other
                    } else {
                        base
                    };
                }
            }
        }
    }
    let entities: Vec<Entity> = names
        .into_iter()
        .enumerate()
        .map(|(e, name)| Entity {
            name,
            attrs: attributes
                .iter()
                .enumerate()
                .map(|(ai, a)| (a.name.clone(), a.values[value_idx[ai][e]].clone()))
                .collect(),
        })
        .collect();

    // Templates: per attribute a seeded mix of prose and JSON formats, then
    // the entity templates. Ids are global.
    let mut templates = Vec::new();
    for a in &attributes {
        let n_json = if spec.n_attribute_templates >= 2 {
            (spec.n_attribute_templates / 4).max(1).min(JSON_ATTR_BANK.len())
        } else {
            0
        };
        let n_nl = (spec.n_attribute_templates - n_json).min(NL_ATTR_BANK.len());
        let n_json = spec.n_attribute_templates - n_nl;
        let mut nl_idx: Vec<usize> = (0..NL_ATTR_BANK.len()).collect();
        nl_idx.shuffle(&mut r);
        let mut json_idx: Vec<usize> = (0..JSON_ATTR_BANK.len()).collect();
        json_idx.shuffle(&mut r);
        for &i in nl_idx.iter().take(n_nl) {
            let (pre, post) = NL_ATTR_BANK[i];
            templates.push(Template {
                id: templates.len(),
                attribute: Some(a.name.clone()),
                format: TemplateFormat::Nl,
                pre: pre.replace("{A}", &a.name),
                post: post.replace("{A}", &a.name),
                join: AnswerJoin::Space,
            });
        }
        for &i in json_idx.iter().take(n_json) {
            let (pre, post) = JSON_ATTR_BANK[i];
            templates.push(Template {
                id: templates.len(),
                attribute: Some(a.name.clone()),
                format: TemplateFormat::Json,
                pre: pre.replace("{A}", &a.name),
                post: post.replace("{A}", &a.name),
                join: AnswerJoin::Bare,
            });
        }
    }
    let mut ent_idx: Vec<usize> = (0..ENTITY_BANK.len()).collect();
    ent_idx.shuffle(&mut r);
    for &i in ent_idx.iter().take(spec.n_entity_templates) {
        let (pre, post, format) = ENTITY_BANK[i];
        templates.push(Template {
            id: templates.len(),
            attribute: None,
            format,
            pre: pre.to_string(),
            post: post.to_string(),
            join: AnswerJoin::Space,
        });
    }

    let mut world = World {
        spec: spec.clone(),
        entities,
        attributes,
        templates,
        syllables,
        entity_split: Split {
            mode: SplitMode::Entity,
            train: vec![],
            dev: vec![],
            test: vec![],
        },
        context_split: Split {
            mode: SplitMode::Context,
            train: vec![],
            dev: vec![],
            test: vec![],
        },
    };
    world.entity_split = make_splits(&world, SplitMode::Entity)?;
    world.context_split = make_splits(&world, SplitMode::Context)?;
    Ok(world)
}

/// Seeded map from parent value indices onto child value indices, covering
/// the child vocabulary as evenly as possible.
fn seeded_value_map(n_parent: usize, n_child: usize, r: &mut impl Rng) -> Vec<usize> {
    let mut child: Vec<usize> = (0..n_child).collect();
    child.shuffle(r);
    (0..n_parent).map(|i| child[i % n_child]).collect()
}

fn template_word_set(attrs: &[AttributeSpec]) -> BTreeSet<String> {
    let mut words = BTreeSet::new();
    let mut add_segment = |seg: &str| {
        for piece in seg.split(' ') {
            let mut run = String::new();
            for ch in piece.chars() {
                if ch.is_ascii_alphanumeric() {
                    run.push(ch);
                } else {
                    if !run.is_empty() {
                        words.insert(std::mem::take(&mut run));
                    }
                    words.insert(ch.to_string());
                }
            }
            if !run.is_empty() {
                words.insert(run);
            }
        }
    };
    for a in attrs {
        add_segment(&a.name);
    }
    for (pre, post) in NL_ATTR_BANK {
        add_segment(pre);
        add_segment(post);
    }
    for (pre, post) in JSON_ATTR_BANK {
        add_segment(pre);
        add_segment(post);
    }
    for (pre, post, _) in ENTITY_BANK {
        add_segment(pre);
        add_segment(post);
    }
    words.remove("");
    words.remove("A");
    words
}

/// 50/25/25 partition; dev and test each get floor(0.25 n) and train the
/// remainder.
pub fn make_splits(world: &World, mode: SplitMode) -> Result<Split> {
    let mut r = rng::stream(world.spec.seed, &format!("splits-{mode:?}"));
    let partition = |ids: &mut Vec<usize>, r: &mut rand_chacha::ChaCha8Rng| -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
        if ids.len() < 4 {
            return Err(Error::spec(format!(
                "cannot split {} items 50/25/25",
                ids.len()
            )));
        }
        ids.shuffle(r);
        let quarter = ids.len() / 4;
        let test = ids.split_off(ids.len() - quarter);
        let dev = ids.split_off(ids.len() - quarter);
        Ok((ids.clone(), dev, test))
    };
    match mode {
        SplitMode::Entity => {
            let mut ids: Vec<usize> = (0..world.entities.len()).collect();
            let (train, dev, test) = partition(&mut ids, &mut r)?;
            Ok(Split {
                mode,
                train,
                dev,
                test,
            })
        }
        SplitMode::Context => {
            // Partition each attribute's templates and the entity templates
            // independently so every part queries every attribute.
            let mut train = Vec::new();
            let mut dev = Vec::new();
            let mut test = Vec::new();
            let mut groups: Vec<Vec<usize>> = Vec::new();
            for a in &world.attributes {
                groups.push(
                    world
                        .templates
                        .iter()
                        .filter(|t| t.attribute.as_deref() == Some(a.name.as_str()))
                        .map(|t| t.id)
                        .collect(),
                );
            }
            groups.push(
                world
                    .templates
                    .iter()
                    .filter(|t| t.attribute.is_none())
                    .map(|t| t.id)
                    .collect(),
            );
            for mut g in groups {
                let (tr, dv, te) = partition(&mut g, &mut r)?;
                train.extend(tr);
                dev.extend(dv);
                test.extend(te);
            }
            train.sort_unstable();
            dev.sort_unstable();
            test.sort_unstable();
            Ok(Split {
                mode,
                train,
                dev,
                test,
            })
        }
    }
}

impl World {
    pub fn split(&self, mode: SplitMode) -> &Split {
        match mode {
            SplitMode::Entity => &self.entity_split,
            SplitMode::Context => &self.context_split,
        }
    }

    pub fn attribute(&self, name: &str) -> Result<&AttributeInfo> {
        self.attributes
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::spec(format!("unknown attribute '{name}'")))
    }

    pub fn attribute_names(&self) -> Vec<String> {
        self.attributes.iter().map(|a| a.name.clone()).collect()
    }

    pub fn getattr(&self, attr: &str, entity_idx: usize) -> Result<&str> {
        self.entities[entity_idx]
            .attrs
            .get(attr)
            .map(String::as_str)
            .ok_or_else(|| Error::spec(format!("entity missing attribute '{attr}'")))
    }

    pub fn entity_index(&self, name: &str) -> Option<usize> {
        self.entities.iter().position(|e| e.name == name)
    }

    pub fn attr_templates(&self, attr: &str) -> Vec<&Template> {
        self.templates
            .iter()
            .filter(|t| t.attribute.as_deref() == Some(attr))
            .collect()
    }

    pub fn entity_templates(&self) -> Vec<&Template> {
        self.templates.iter().filter(|t| t.attribute.is_none()).collect()
    }

    /// All surface words for the tokenizer (template words, syllables,
    /// attribute values).
    pub fn vocab_words(&self) -> Vec<String> {
        let mut words = template_word_set(&self.spec.attributes);
        for a in &self.attributes {
            words.insert(a.name.clone());
            for v in &a.values {
                words.insert(v.clone());
            }
        }
        for s in &self.syllables {
            words.insert(s.clone());
        }
        words.into_iter().collect()
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::build(self.vocab_words())
    }

    /// Render a prompt, honoring the spec's few-shot setting. Demo entities
    /// come from the Entity-split training entities only.
    pub fn render_prompt(&self, template: &Template, entity_idx: usize) -> Result<RenderedPrompt> {
        let entity = &self.entities[entity_idx].name;
        let mut rendered = template.render(entity);
        if self.spec.few_shot == 0 {
            return Ok(rendered);
        }
        let mut prefix = String::new();
        let mut used = 0;
        for &demo in &self.entity_split.train {
            if demo == entity_idx {
                continue;
            }
            if used == self.spec.few_shot {
                break;
            }
            let demo_name = &self.entities[demo].name;
            match &template.attribute {
                Some(attr) => {
                    let value = self.getattr(attr, demo)?;
                    prefix.push_str(&template.render_with_answer(demo_name, value));
                }
                None => prefix.push_str(&template.render(demo_name).text),
            }
            prefix.push('\n');
            used += 1;
        }
        rendered.char_span = (
            rendered.char_span.0 + prefix.len(),
            rendered.char_span.1 + prefix.len(),
        );
        rendered.text = format!("{prefix}{}", rendered.text);
        Ok(rendered)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> WorldSpec {
        WorldSpec {
            n_entities: 40,
            seed: 9,
            ..WorldSpec::default()
        }
    }

    #[test]
    fn default_world_has_complete_attribute_table() {
        let w = generate_world(&WorldSpec::default()).unwrap();
        assert_eq!(w.entities.len(), 200);
        assert_eq!(w.attributes.len(), 4);
        for e in &w.entities {
            for a in &w.attributes {
                assert!(e.attrs.contains_key(&a.name), "{} missing {}", e.name, a.name);
            }
        }
    }

    #[test]
    fn functional_dependency_holds_everywhere() {
        let w = generate_world(&small_spec()).unwrap();
        // climate = g(region): equal regions imply equal climates.
        let mut by_region: BTreeMap<&str, &str> = BTreeMap::new();
        for e in &w.entities {
            let r = e.attrs["region"].as_str();
            let c = e.attrs["climate"].as_str();
            if let Some(prev) = by_region.insert(r, c) {
                assert_eq!(prev, c, "climate not a function of region");
            }
        }
    }

    #[test]
    fn noisy_dependency_violation_rate_near_nominal() {
        let w = generate_world(&WorldSpec::default()).unwrap();
        // Recover the majority map region -> tongue, then count violations.
        let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for e in &w.entities {
            *counts
                .entry((e.attrs["region"].as_str(), e.attrs["tongue"].as_str()))
                .or_default() += 1;
        }
        let mut majority: BTreeMap<&str, (&str, usize)> = BTreeMap::new();
        for (&(r, t), &c) in &counts {
            let entry = majority.entry(r).or_insert((t, 0));
            if c > entry.1 {
                *entry = (t, c);
            }
        }
        let violations: usize = w
            .entities
            .iter()
            .filter(|e| majority[e.attrs["region"].as_str()].0 != e.attrs["tongue"])
            .count();
        let rate = violations as f64 / w.entities.len() as f64;
        assert!(
            (rate - 0.2).abs() < 0.05,
            "violation rate {rate} not within 0.05 of 0.2"
        );
    }

    #[test]
    fn entity_mode_split_is_50_25_25() {
        let w = generate_world(&WorldSpec::default()).unwrap();
        let s = &w.entity_split;
        assert_eq!(s.train.len(), 100);
        assert_eq!(s.dev.len(), 50);
        assert_eq!(s.test.len(), 50);
    }

    #[test]
    fn splits_are_disjoint_and_exhaustive() {
        let w = generate_world(&small_spec()).unwrap();
        for s in [&w.entity_split, &w.context_split] {
            let all: BTreeSet<usize> = s
                .train
                .iter()
                .chain(&s.dev)
                .chain(&s.test)
                .copied()
                .collect();
            assert_eq!(
                all.len(),
                s.train.len() + s.dev.len() + s.test.len(),
                "overlapping split parts"
            );
        }
        let ctx = &w.context_split;
        let all_ids: BTreeSet<usize> = ctx.train.iter().chain(&ctx.dev).chain(&ctx.test).copied().collect();
        assert_eq!(all_ids.len(), w.templates.len());
    }

    #[test]
    fn split_rounding_gives_train_the_remainder() {
        // 7 items -> dev and test get floor(1.75) = 1 each, train gets 5.
        let mut ids: Vec<usize> = (0..7).collect();
        let quarter = ids.len() / 4;
        let test = ids.split_off(ids.len() - quarter);
        let dev = ids.split_off(ids.len() - quarter);
        assert_eq!((ids.len(), dev.len(), test.len()), (5, 1, 1));
    }

    #[test]
    fn cyclic_dependency_rejected() {
        let mut spec = WorldSpec::default();
        spec.attributes[0].dependency = Dependency::FunctionOf {
            parent: "climate".into(),
        };
        assert!(matches!(generate_world(&spec), Err(Error::Spec(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_world(&small_spec()).unwrap();
        let b = generate_world(&small_spec()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn templates_have_both_formats_and_render_round_trips() {
        let w = generate_world(&small_spec()).unwrap();
        let tok = w.tokenizer();
        for a in &w.attributes {
            let templates = w.attr_templates(&a.name);
            assert_eq!(templates.len(), w.spec.n_attribute_templates);
            assert!(templates.iter().any(|t| t.format == TemplateFormat::Json));
            assert!(templates.iter().any(|t| t.format == TemplateFormat::Nl));
        }
        for t in &w.templates {
            for e in [0usize, 7, 23] {
                let p = t.render(&w.entities[e].name);
                let ids = tok.encode(&p.text).unwrap();
                assert_eq!(tok.decode(&ids), p.text, "round trip for {:?}", p.text);
                let (ids2, span) = tok.encode_with_span(&p.text, p.char_span).unwrap();
                assert_eq!(ids, ids2);
                let n_toks = span.1 - span.0;
                assert!((1..=3).contains(&n_toks), "entity tokens {n_toks}");
            }
        }
    }

    #[test]
    fn answers_render_to_known_tokens() {
        let w = generate_world(&small_spec()).unwrap();
        let tok = w.tokenizer();
        for a in &w.attributes {
            for t in w.attr_templates(&a.name) {
                let full = t.render_with_answer(&w.entities[0].name, &a.values[0]);
                let ids = tok.encode(&full).unwrap();
                assert_eq!(tok.decode(&ids), full);
            }
        }
    }

    #[test]
    fn few_shot_prefixes_use_training_entities() {
        let mut spec = small_spec();
        spec.few_shot = 2;
        let w = generate_world(&spec).unwrap();
        let t = w.attr_templates("region")[0];
        let query = w.entity_split.dev[0];
        let p = w.render_prompt(t, query).unwrap();
        assert_eq!(p.text.matches('\n').count(), 2);
        let demo_count = w
            .entity_split
            .train
            .iter()
            .filter(|&&e| p.text.contains(&w.entities[e].name))
            .count();
        assert!(demo_count >= 2);
        // The query entity's span still points at the query entity.
        assert_eq!(
            &p.text[p.char_span.0..p.char_span.1],
            w.entities[query].name
        );
    }
}
