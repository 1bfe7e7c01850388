//! Toy task: each variable hides an integer; questions ask whether it is in
//! a list of integers.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::split::{assign_subsets, make_inconsistent_assignment};
use super::strings::{final_field, gen_surface_strings_excluding, render_definition, DEFAULT_ALPHABET, SURFACE_LEN};
use super::{
    Alias, BundleHeader, DatasetBundle, DefineTag, Definition, DocKind, Document, EntityRecord, ForgeConfig, Split,
    Stage, SubsetAssignment, SubsetSpec, TagKind, Variant,
};
use crate::error::{CoreError, Result};
use crate::rng::{entity_stream, keys, stream, Rng};

pub const VALUE_KEY: &str = "value";
pub const MEMBERSHIP_KIND: &str = "membership";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SetInclusionSpec {
    pub variables: usize,
    pub list_length: usize,
    pub value_range: u32,
    /// Training QA per variable in QA-bearing subsets (half "Yes").
    pub train_qa_per_variable: usize,
    /// Validation questions per first-stage variable (half "Yes").
    pub val_questions_per_variable: usize,
    /// Test questions per second-stage variable (half "Yes").
    pub test_questions_per_variable: usize,
}

impl Default for SetInclusionSpec {
    fn default() -> Self {
        Self {
            variables: 8000,
            list_length: 8,
            value_range: 100,
            train_qa_per_variable: 12,
            val_questions_per_variable: 4,
            test_questions_per_variable: 12,
        }
    }
}

impl SetInclusionSpec {
    pub fn validate(&self) -> Result<()> {
        if (self.value_range as usize) < self.list_length + 1 {
            return Err(CoreError::Generation(format!(
                "value range {} too small for lists of {} that must also exclude the hidden value",
                self.value_range, self.list_length
            )));
        }
        for (name, n) in [
            ("train_qa_per_variable", self.train_qa_per_variable),
            ("val_questions_per_variable", self.val_questions_per_variable),
            ("test_questions_per_variable", self.test_questions_per_variable),
        ] {
            if n % 2 != 0 {
                return Err(CoreError::Generation(format!("{name} must be even for Yes/No balance, got {n}")));
            }
        }
        if self.variables < 2 {
            return Err(CoreError::Generation("need at least 2 variables".into()));
        }
        Ok(())
    }
}

/// "Yes" iff `value` occurs in `list`.
pub fn membership_answer(value: u32, list: &[u32]) -> &'static str {
    if list.contains(&value) {
        "Yes"
    } else {
        "No"
    }
}

/// A list of distinct integers that contains `value` (at a uniform
/// position) iff `include`.
fn membership_list(rng: &mut Rng, value: u32, include: bool, len: usize, range: u32) -> Vec<u32> {
    if include {
        let mut list: Vec<u32> = loop {
            let cand: Vec<u32> = sample(rng, range as usize, len).into_iter().map(|v| v as u32).collect();
            if !cand.contains(&value) {
                break cand;
            }
        };
        let pos = rng.random_range(0..len);
        list[pos] = value;
        list
    } else {
        loop {
            let cand: Vec<u32> = sample(rng, range as usize, len).into_iter().map(|v| v as u32).collect();
            if !cand.contains(&value) {
                return cand;
            }
        }
    }
}

fn render_question(alias: &str, list: &[u32]) -> String {
    let nums: Vec<String> = list.iter().map(u32::to_string).collect();
    format!("{} {}?", alias, nums.join(" "))
}

/// Balanced question set for one variable: `count/2` "Yes" then `count/2`
/// "No", as `(prompt, answer)`.
fn questions(rng: &mut Rng, alias: &str, value: u32, count: usize, spec: &SetInclusionSpec) -> Vec<(String, &'static str)> {
    (0..count)
        .map(|i| {
            let include = i < count / 2;
            let list = membership_list(rng, value, include, spec.list_length, spec.value_range);
            (render_question(alias, &list), membership_answer(value, &list))
        })
        .collect()
}

pub(crate) fn make_tags(layout: &[SubsetSpec], surfaces: Vec<String>) -> Vec<DefineTag> {
    let kinds: BTreeSet<TagKind> = layout.iter().filter_map(|s| s.tag_kind).collect();
    kinds.into_iter().zip(surfaces).map(|(kind, surface)| DefineTag { kind, surface }).collect()
}

pub(crate) fn tag_kind_count(layout: &[SubsetSpec]) -> usize {
    layout.iter().filter_map(|s| s.tag_kind).collect::<BTreeSet<_>>().len()
}

/// Generate a complete set-inclusion bundle.
pub fn gen_set_inclusion(config: &ForgeConfig, seed: u64) -> Result<DatasetBundle> {
    let spec = &config.set_inclusion;
    spec.validate()?;
    config.variant.validate()?;
    let order = config.variant.word_order();
    let in_context = matches!(config.variant, Variant::InContext);

    let n = spec.variables;
    let values: Vec<u32> = (0..n as u32)
        .map(|id| entity_stream(seed, id).random_range(0..spec.value_range))
        .collect();
    let entities: Vec<EntityRecord> = values
        .iter()
        .enumerate()
        .map(|(id, v)| EntityRecord {
            id: id as u32,
            name: v.to_string(),
            attributes: BTreeMap::from([(VALUE_KEY.to_string(), v.to_string())]),
            popularity_rank: None,
        })
        .collect();

    let base = SubsetSpec::set_inclusion_layout();
    let ids: Vec<u32> = (0..n as u32).collect();
    let subsets: Vec<SubsetAssignment> = assign_subsets(&ids, &base, &config.variant, &mut stream(seed, keys::SPLIT))?;

    let mut surface_rng = stream(seed, keys::SURFACES);
    let n_tags = tag_kind_count(&base);
    let surfaces = gen_surface_strings_excluding(&mut surface_rng, n_tags + n, SURFACE_LEN, DEFAULT_ALPHABET, &BTreeSet::new())?;
    let tags = make_tags(&base, surfaces[..n_tags].to_vec());
    let aliases: Vec<Alias> = (0..n)
        .map(|id| Alias { surface: surfaces[n_tags + id].clone(), entity_id: id as u32 })
        .collect();

    let mut derange_rng = stream(seed, keys::DERANGE);
    let mut stated: BTreeMap<u32, u32> = BTreeMap::new();
    for sub in subsets.iter().filter(|s| s.spec.consistent == Some(false) && !s.entity_ids.is_empty()) {
        let pairs = make_inconsistent_assignment(
            &sub.entity_ids,
            |a, b| values[a as usize] == values[b as usize],
            &mut derange_rng,
        )?;
        stated.extend(pairs);
    }

    let mut definitions = Vec::new();
    let mut documents = Vec::new();
    for sub in &subsets {
        let s = &sub.spec;
        for &id in &sub.entity_ids {
            let alias = &aliases[id as usize].surface;
            let mut rng = entity_stream(seed, id);
            // Skip the draw that produced the hidden value.
            let _: u32 = rng.random_range(0..spec.value_range);
            let value = values[id as usize];
            let doc = |text: String, split, kind, gold: Vec<String>, qk: Option<&str>| Document {
                text,
                subset: s.id,
                split,
                stage: s.stage,
                entity_id: id,
                alias: Some(alias.clone()),
                gold_answers: Some(gold),
                question_kind: qk.map(str::to_string),
                kind,
            };

            let mut def_text = None;
            if s.has_defs {
                let kind = s.tag_kind.expect("defined subsets carry a tag");
                let tag = &tags.iter().find(|t| t.kind == kind).expect("tag generated").surface;
                let stated_id = stated.get(&id).copied().unwrap_or(id);
                let stated_value = values[stated_id as usize].to_string();
                let rendered = render_definition(tag, alias, &stated_value, order);
                definitions.push(Definition {
                    tag: kind,
                    alias: alias.clone(),
                    entity_id: id,
                    stated_entity_id: stated_id,
                    word_order: order,
                    rendered: rendered.clone(),
                });
                if in_context {
                    def_text = Some(rendered);
                } else {
                    let answer = final_field(tag, alias, &stated_value, order).to_string();
                    documents.push(doc(rendered, Split::Train, DocKind::Definition, vec![answer], None));
                }
            }
            let prefix = |t: String| match &def_text {
                Some(d) => format!("{d} {t}"),
                None => t,
            };
            if s.has_qa {
                for (prompt, ans) in questions(&mut rng, alias, value, spec.train_qa_per_variable, spec) {
                    let text = prefix(format!("{prompt} {ans}"));
                    documents.push(doc(text, Split::Train, DocKind::Qa, vec![ans.to_string()], Some(MEMBERSHIP_KIND)));
                }
            }
            let (split, count) = match s.stage {
                Stage::X1 => (Split::Val, spec.val_questions_per_variable),
                Stage::X2 => (Split::Test, spec.test_questions_per_variable),
            };
            for (prompt, ans) in questions(&mut rng, alias, value, count, spec) {
                documents.push(doc(prefix(prompt), split, DocKind::Question, vec![ans.to_string()], Some(MEMBERSHIP_KIND)));
            }
        }
    }

    Ok(DatasetBundle {
        header: BundleHeader {
            source: config.source,
            variant: config.variant,
            seed,
            spec_hash: config.spec_hash(seed),
            toolkit_version: crate::VERSION.to_string(),
        },
        entities,
        aliases,
        tags,
        subsets,
        definitions,
        documents,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forge::SubsetId;

    fn small(variables: usize) -> ForgeConfig {
        ForgeConfig::set_inclusion(SetInclusionSpec { variables, ..Default::default() })
    }

    #[test]
    fn worked_examples_of_membership() {
        assert_eq!(membership_answer(42, &[2, 31, 95, 42, 8, 27, 6, 74]), "Yes");
        assert_eq!(membership_answer(42, &[2, 1, 7, 9, 5, 8, 0, 3]), "No");
        assert_eq!(render_question("xyz", &[2, 31, 95, 42, 8, 27, 6, 74]), "xyz 2 31 95 42 8 27 6 74?");
    }

    #[test]
    fn lists_are_distinct_and_honor_inclusion() {
        let mut rng = stream(1, 1);
        for i in 0..200 {
            let v = i % 100;
            let include = i % 2 == 0;
            let l = membership_list(&mut rng, v, include, 8, 100);
            assert_eq!(l.len(), 8);
            assert_eq!(l.iter().collect::<BTreeSet<_>>().len(), 8);
            assert_eq!(l.contains(&v), include);
        }
    }

    #[test]
    fn per_variable_train_qa_is_balanced() {
        let b = gen_set_inclusion(&small(100), 3).unwrap();
        let mut per: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
        for d in b.documents.iter().filter(|d| d.kind == DocKind::Qa) {
            let e = per.entry(d.entity_id).or_default();
            e.0 += 1;
            if d.text.ends_with("? Yes") {
                e.1 += 1;
            }
        }
        assert_eq!(per.len(), 80);
        assert!(per.values().all(|&(n, y)| n == 12 && y == 6));
    }

    #[test]
    fn inconsistent_values_differ() {
        let b = gen_set_inclusion(&small(200), 11).unwrap();
        let incons: Vec<_> = b.definitions.iter().filter(|d| d.tag == TagKind::Bar && d.entity_id != d.stated_entity_id).collect();
        assert_eq!(incons.len(), b.subset(SubsetId::D2inconsQA2).unwrap().entity_ids.len());
        for d in incons {
            assert_ne!(b.entities[d.entity_id as usize].name, b.entities[d.stated_entity_id as usize].name);
        }
    }

    #[test]
    fn rejects_small_value_range() {
        let mut c = small(10);
        c.set_inclusion.value_range = 5;
        assert!(gen_set_inclusion(&c, 1).is_err());
    }

    #[test]
    fn in_context_prefixes_definitions() {
        let mut c = small(50);
        c.variant = Variant::InContext;
        let b = gen_set_inclusion(&c, 2).unwrap();
        assert!(b.documents.iter().all(|d| d.kind != DocKind::Definition));
        let d1 = b.documents.iter().find(|d| d.subset == SubsetId::D1consQA1 && d.kind == DocKind::Qa).unwrap();
        let def = b.definitions.iter().find(|x| x.entity_id == d1.entity_id).unwrap();
        assert!(d1.text.starts_with(&format!("{} ", def.rendered)));
    }
}
