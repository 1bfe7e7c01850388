//! Natural-language corpora built from ingested CVDB or T-REx entities.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::set_inclusion::{make_tags, tag_kind_count};
use super::sources::trex_template;
use super::split::{assign_qa_splits, assign_subsets, make_inconsistent_assignment_lenient};
use super::strings::{final_field, gen_surface_strings_excluding, render_definition, render_template, DEFAULT_ALPHABET, SURFACE_LEN};
use super::{
    Alias, BundleHeader, DatasetBundle, Definition, DocKind, Document, EntityRecord, ForgeConfig, Source, Split, Stage,
    SubsetSpec, Variant,
};
use crate::error::{CoreError, Result};
use crate::rng::{entity_stream, keys, stream};

/// Entity-attribution prompt templates; `{alias}` marks the variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionTemplates {
    pub templates: Vec<(String, String)>,
}

impl Default for AttributionTemplates {
    fn default() -> Self {
        let t = |k: &str, q: &str| (k.to_string(), q.to_string());
        Self {
            templates: vec![
                t("name", "Q: What is the name of {alias}? A:"),
                t("meaning", "Q: What is the meaning of {alias}? A:"),
                t("stands_for", "Q: What does {alias} stand for? A:"),
                t("who_is", "Q: Who is {alias}? A:"),
            ],
        }
    }
}

/// Question text for one attribute of `subject`.
pub(crate) fn question_text(source: Source, kind: &str, subject: &str) -> Result<String> {
    let q = match (source, kind) {
        (Source::Cvdb, "gender") => format!("What was the gender of {subject}?"),
        (Source::Cvdb, "birth") => format!("When was {subject} born?"),
        (Source::Cvdb, "death") => format!("When did {subject} die?"),
        (Source::Cvdb, "region") => format!("In which region did {subject} live?"),
        (Source::Cvdb, "occupation") => format!("What did {subject} do?"),
        (Source::Cvdb, "nationality") => format!("What was the nationality of {subject}?"),
        (Source::Trex, key) => match trex_template(key) {
            Some(t) => t.replace("[X]", subject),
            None => return Err(CoreError::Generation(format!("no question template for predicate {key}"))),
        },
        _ => return Err(CoreError::Generation(format!("no {} question for `{kind}`", source.as_str()))),
    };
    Ok(q)
}

/// Accepted answers: the full answer, plus each `;`-separated part.
fn gold_set(answer: &str) -> Vec<String> {
    let mut gold = vec![answer.to_string()];
    if answer.contains(';') {
        gold.extend(answer.split(';').map(str::to_string).filter(|p| !p.is_empty()));
    }
    gold
}

/// Per-alias entity-attribution prompts for every alias-replaced subset.
///
/// Gold is the entity named by the alias's definition (the true entity for
/// subsets without definitions). Inconsistent subsets additionally get
/// prompts of kind [`DocKind::AttributionQa`] keyed to the QA entity.
pub fn make_entity_attribution_set(bundle: &DatasetBundle, templates: &AttributionTemplates) -> Vec<Document> {
    let stated: BTreeMap<u32, u32> = bundle.definitions.iter().map(|d| (d.entity_id, d.stated_entity_id)).collect();
    let alias_of: BTreeMap<u32, &str> = bundle.aliases.iter().map(|a| (a.entity_id, a.surface.as_str())).collect();
    let name = |id: u32| bundle.entity(id).map(|e| e.name.clone()).unwrap_or_default();
    let mut out = Vec::new();
    for sub in bundle.subsets.iter().filter(|s| s.spec.alias_replaced) {
        let split = match sub.spec.stage {
            Stage::X1 => Split::Val,
            Stage::X2 => Split::Test,
        };
        for &id in &sub.entity_ids {
            let Some(alias) = alias_of.get(&id) else { continue };
            let stated_id = stated.get(&id).copied().unwrap_or(id);
            let mut kinds = vec![(DocKind::Attribution, stated_id)];
            if stated_id != id {
                kinds.push((DocKind::AttributionQa, id));
            }
            for (kind, gold_id) in kinds {
                for (qk, template) in &templates.templates {
                    out.push(Document {
                        text: template.replace("{alias}", alias),
                        subset: sub.spec.id,
                        split,
                        stage: sub.spec.stage,
                        entity_id: id,
                        alias: Some(alias.to_string()),
                        gold_answers: Some(vec![name(gold_id)]),
                        question_kind: Some(qk.clone()),
                        kind,
                    });
                }
            }
        }
    }
    out
}

/// Generate a CVDB- or T-REx-style bundle from ingested entities.
pub fn build_natural_bundle(config: &ForgeConfig, mut entities: Vec<EntityRecord>, seed: u64) -> Result<DatasetBundle> {
    config.variant.validate()?;
    entities.sort_by_key(|e| e.id);
    let n = entities.len();
    for (i, e) in entities.iter().enumerate() {
        if e.id as usize != i {
            return Err(CoreError::Generation(format!("entity ids must be 0..{n}, found {} at {i}", e.id)));
        }
    }
    let order = config.variant.word_order();
    let in_context = matches!(config.variant, Variant::InContext);

    let base = SubsetSpec::cvdb_layout();
    let ids: Vec<u32> = (0..n as u32).collect();
    let subsets = assign_subsets(&ids, &base, &config.variant, &mut stream(seed, keys::SPLIT))?;

    let names: BTreeSet<String> = entities.iter().map(|e| e.name.clone()).collect();
    let n_tags = tag_kind_count(&base);
    let surfaces =
        gen_surface_strings_excluding(&mut stream(seed, keys::SURFACES), n_tags + n, SURFACE_LEN, DEFAULT_ALPHABET, &names)?;
    let tags = make_tags(&base, surfaces[..n_tags].to_vec());
    let aliases: Vec<Alias> =
        (0..n).map(|id| Alias { surface: surfaces[n_tags + id].clone(), entity_id: id as u32 }).collect();

    let attr = |id: u32| &entities[id as usize].attributes;
    let mut derange_rng = stream(seed, keys::DERANGE);
    let mut stated: BTreeMap<u32, u32> = BTreeMap::new();
    for sub in subsets.iter().filter(|s| s.spec.consistent == Some(false) && !s.entity_ids.is_empty()) {
        let conflict = |a: u32, b: u32| attr(a).iter().any(|(k, v)| attr(b).get(k) == Some(v));
        let (pairs, _) = make_inconsistent_assignment_lenient(&sub.entity_ids, conflict, &mut derange_rng)?;
        stated.extend(pairs);
    }

    let mut definitions = Vec::new();
    let mut documents = Vec::new();
    for sub in &subsets {
        let s = &sub.spec;
        for &id in &sub.entity_ids {
            let entity = &entities[id as usize];
            let alias = &aliases[id as usize].surface;
            let subject = if s.alias_replaced { alias.as_str() } else { entity.name.as_str() };
            let doc_alias = s.alias_replaced.then(|| alias.clone());
            let mut def_text = None;
            if s.has_defs {
                let kind = s.tag_kind.expect("defined subsets carry a tag");
                let tag = &tags.iter().find(|t| t.kind == kind).expect("tag generated").surface;
                let stated_id = stated.get(&id).copied().unwrap_or(id);
                let stated_name = &entities[stated_id as usize].name;
                let (rendered, last) = match &config.definition_template {
                    Some(t) => (render_template(t, tag, alias, stated_name), stated_name.as_str()),
                    None => (render_definition(tag, alias, stated_name, order), final_field(tag, alias, stated_name, order)),
                };
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
                    documents.push(Document {
                        text: rendered,
                        subset: s.id,
                        split: Split::Train,
                        stage: s.stage,
                        entity_id: id,
                        alias: doc_alias.clone(),
                        gold_answers: Some(vec![last.to_string()]),
                        question_kind: None,
                        kind: DocKind::Definition,
                    });
                }
            }

            let mut qa = Vec::new();
            for (kind, answer) in &entity.attributes {
                qa.push((kind.clone(), question_text(config.source, kind, subject)?, answer.clone()));
            }
            let labeled = if s.has_qa || s.stage == Stage::X2 {
                assign_qa_splits(qa, s.stage, &mut entity_stream(seed, id))
            } else {
                Vec::new()
            };
            for ((kind, question, answer), split) in labeled {
                let prompt = match &def_text {
                    Some(d) => format!("{d} Q: {question} A:"),
                    None => format!("Q: {question} A:"),
                };
                let (text, gold, doc_kind) = match split {
                    Split::Train => (format!("{prompt} {answer}"), vec![answer], DocKind::Qa),
                    _ => (prompt, gold_set(&answer), DocKind::Question),
                };
                documents.push(Document {
                    text,
                    subset: s.id,
                    split,
                    stage: s.stage,
                    entity_id: id,
                    alias: doc_alias.clone(),
                    gold_answers: Some(gold),
                    question_kind: Some(kind),
                    kind: doc_kind,
                });
            }
        }
    }

    let mut bundle = DatasetBundle {
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
    };
    let attribution = make_entity_attribution_set(&bundle, &config.attribution);
    bundle.documents.extend(attribution);
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forge::{SubsetId, TagKind};

    pub(crate) fn toy_entities(n: usize) -> Vec<EntityRecord> {
        let genders = ["male", "female"];
        (0..n)
            .map(|i| EntityRecord {
                id: i as u32,
                name: format!("Person Number{i}"),
                attributes: BTreeMap::from([
                    ("gender".to_string(), genders[i % 2].to_string()),
                    ("birth".to_string(), format!("{} century", i % 7 + 10)),
                    ("death".to_string(), format!("{}0s", 190 + i % 9)),
                    ("region".to_string(), format!("Region{}", i % 5)),
                    ("occupation".to_string(), format!("job{}", i % 11)),
                    ("nationality".to_string(), format!("Country{}", i % 13)),
                ]),
                popularity_rank: Some(i as u32 + 1),
            })
            .collect()
    }

    fn cvdb_config(variant: Variant) -> ForgeConfig {
        ForgeConfig { source: Source::Cvdb, variant, ..ForgeConfig::set_inclusion(Default::default()) }
    }

    #[test]
    fn base_bundle_layout_and_laws() {
        let b = build_natural_bundle(&cvdb_config(Variant::Base), toy_entities(400), 3).unwrap();
        let sizes: Vec<usize> = b.subsets.iter().map(|s| s.entity_ids.len()).collect();
        assert_eq!(sizes, vec![100, 100, 40, 40, 32, 32, 24, 32]);
        let d1 = b.subset(SubsetId::D1consQA1).unwrap();
        let id = d1.entity_ids[0];
        let qa: Vec<_> = b.documents.iter().filter(|d| d.entity_id == id && d.kind == DocKind::Qa).collect();
        let val: Vec<_> = b.documents.iter().filter(|d| d.entity_id == id && d.kind == DocKind::Question).collect();
        assert_eq!((qa.len(), val.len()), (5, 1));
        assert!(qa[0].text.starts_with("Q: ") && qa[0].text.contains(" A: "));
        // Leakage guard and raw names for QA4.
        for d in b.documents.iter().filter(|d| d.kind != DocKind::Definition) {
            let named = b.entities.iter().any(|e| d.text.contains(&e.name));
            let replaced = b.subset(d.subset).unwrap().spec.alias_replaced;
            if matches!(d.kind, DocKind::Qa | DocKind::Question) {
                assert_eq!(named, !replaced, "{}", d.text);
            }
        }
        let (mut fully_distinct, mut inconsistent) = (0, 0);
        for def in &b.definitions {
            if def.tag == TagKind::Bar && b.subset(SubsetId::D2inconsQA2).unwrap().entity_ids.contains(&def.entity_id) {
                let (t, s) = (&b.entities[def.entity_id as usize], &b.entities[def.stated_entity_id as usize]);
                assert_ne!(def.entity_id, def.stated_entity_id);
                if t.attributes.iter().all(|(k, v)| s.attributes[k] != *v) {
                    fully_distinct += 1;
                }
                inconsistent += 1;
            } else {
                assert_eq!(def.entity_id, def.stated_entity_id);
            }
        }
        assert_eq!(inconsistent, 100);
        // Opposite genders are required, so at most 2 * min(male, female)
        // pairs can differ everywhere.
        let d2 = &b.subset(SubsetId::D2inconsQA2).unwrap().entity_ids;
        let male = d2.iter().filter(|&&i| b.entities[i as usize].attributes["gender"] == "male").count();
        let bound = 2 * male.min(100 - male);
        assert!(fully_distinct + 5 >= bound, "{fully_distinct} fully distinct pairs, bound {bound}");
        let x2: Vec<_> = b.documents.iter().filter(|d| d.subset == SubsetId::D5cons && d.kind == DocKind::Question).collect();
        assert_eq!(x2.len(), 32 * 6);
        assert!(b.train_docs(Stage::X2).all(|d| d.kind == DocKind::Definition));
    }

    #[test]
    fn attribution_prompts() {
        let b = build_natural_bundle(&cvdb_config(Variant::Base), toy_entities(400), 3).unwrap();
        let d1 = b.subset(SubsetId::D1consQA1).unwrap().entity_ids[0];
        let att: Vec<_> = b.documents.iter().filter(|d| d.entity_id == d1 && d.kind == DocKind::Attribution).collect();
        assert_eq!(att.len(), 4);
        let alias = &b.aliases[d1 as usize].surface;
        assert_eq!(att[0].text, format!("Q: What is the name of {alias}? A:"));
        assert_eq!(att[0].gold_answers.as_ref().unwrap()[0], b.entities[d1 as usize].name);
        let d2 = b.subset(SubsetId::D2inconsQA2).unwrap().entity_ids[0];
        let both: Vec<_> = b.documents.iter().filter(|d| d.entity_id == d2 && !d.kind.is_train() && d.question_kind.as_deref() == Some("name")).collect();
        assert_eq!(both.len(), 2);
        assert_ne!(both[0].gold_answers, both[1].gold_answers);
        assert!(b.subset(SubsetId::QA4notReplaced).unwrap().entity_ids.iter().all(|&id| !b.documents.iter().any(|d| d.entity_id == id && d.kind == DocKind::Attribution)));
    }

    #[test]
    fn in_context_and_alpha_variants() {
        let b = build_natural_bundle(&cvdb_config(Variant::InContext), toy_entities(400), 3).unwrap();
        assert!(b.documents.iter().all(|d| d.kind != DocKind::Definition));
        let d1 = b.subset(SubsetId::D1consQA1).unwrap().entity_ids[0];
        let def = b.definitions.iter().find(|d| d.entity_id == d1).unwrap();
        let q = b.documents.iter().find(|d| d.entity_id == d1 && d.kind == DocKind::Qa).unwrap();
        assert!(q.text.starts_with(&format!("{} Q: ", def.rendered)));

        let b = build_natural_bundle(&cvdb_config(Variant::Alpha { alpha: 0.5 }), toy_entities(400), 3).unwrap();
        assert_eq!(b.measured_alpha(), Some(0.5));
        assert_eq!(b.measured_bar_alpha(), Some(0.5));
        let b1 = build_natural_bundle(&cvdb_config(Variant::Alpha { alpha: 1.0 }), toy_entities(400), 3).unwrap();
        assert!(b1.subset(SubsetId::D9inconsQA9).unwrap().entity_ids.is_empty());
        assert!(b1.subset(SubsetId::D10consQA10).unwrap().entity_ids.is_empty());
        let err = build_natural_bundle(&cvdb_config(Variant::Alpha { alpha: 0.333 }), toy_entities(400), 3);
        assert!(matches!(err, Err(CoreError::InvalidVariant(_))));
    }

    #[test]
    fn trex_questions_and_gold_parts() {
        let e = [EntityRecord {
            id: 0,
            name: "Film".into(),
            attributes: BTreeMap::from([("P161".to_string(), "Tom;Anna".to_string())]),
            popularity_rank: None,
        }];
        assert_eq!(question_text(Source::Trex, "P161", "xyz").unwrap(), "First name of a cast member of xyz?");
        assert_eq!(gold_set(&e[0].attributes["P161"]), vec!["Tom;Anna", "Tom", "Anna"]);
        assert!(question_text(Source::Cvdb, "P161", "x").is_err());
    }
}
