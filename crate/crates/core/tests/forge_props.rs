use std::collections::{BTreeMap, BTreeSet};

use iml_core::forge::{
    anonymize_year, build_natural_bundle, gen_set_inclusion, membership_answer, serialize_bundle, DatasetBundle,
    DocKind, EntityRecord, ForgeConfig, SetInclusionSpec, Source, Split, SubsetId, Variant,
};
use proptest::prelude::*;

fn set_inclusion(variables: usize, variant: Variant) -> ForgeConfig {
    let spec = SetInclusionSpec { variables, test_questions_per_variable: 4, ..Default::default() };
    ForgeConfig { variant, ..ForgeConfig::set_inclusion(spec) }
}

fn people(n: usize) -> Vec<EntityRecord> {
    (0..n)
        .map(|i| EntityRecord {
            id: i as u32,
            name: format!("Person Number{i}"),
            attributes: BTreeMap::from([
                ("gender".to_string(), ["male", "female"][i % 2].to_string()),
                ("birth".to_string(), format!("{} century", i % 7 + 10)),
                ("region".to_string(), format!("Region{}", i % 5)),
                ("occupation".to_string(), format!("job{}", i % 11)),
            ]),
            popularity_rank: Some(i as u32 + 1),
        })
        .collect()
}

fn cvdb(variant: Variant) -> ForgeConfig {
    ForgeConfig { source: Source::Cvdb, variant, ..ForgeConfig::set_inclusion(Default::default()) }
}

/// Subsets partition the entities and every document sits in its entity's subset.
fn check_disjoint(b: &DatasetBundle) {
    let mut seen = BTreeSet::new();
    let mut owner = BTreeMap::new();
    for s in &b.subsets {
        for &id in &s.entity_ids {
            assert!(seen.insert(id), "entity {id} in two subsets");
            owner.insert(id, s.spec.id);
        }
    }
    assert_eq!(seen.len(), b.entities.len());
    for d in &b.documents {
        assert_eq!(owner[&d.entity_id], d.subset, "{}", d.text);
    }
    for a in &b.aliases {
        assert!(b.aliases.iter().filter(|x| x.surface == a.surface).count() == 1);
    }
}

/// Definitions name the QA entity exactly in consistent subsets.
fn check_consistency(b: &DatasetBundle) {
    for def in &b.definitions {
        let spec = &b.subset(subset_of(b, def.entity_id)).unwrap().spec;
        assert_eq!(def.tag, spec.tag_kind.unwrap());
        match spec.consistent {
            Some(true) => assert_eq!(def.entity_id, def.stated_entity_id),
            Some(false) => assert_ne!(
                b.entities[def.entity_id as usize].name,
                b.entities[def.stated_entity_id as usize].name
            ),
            None => unreachable!("definition in a subset without definitions"),
        }
        let tag = &b.tag(def.tag).unwrap().surface;
        let stated = &b.entities[def.stated_entity_id as usize].name;
        assert!(def.rendered.contains(tag.as_str()) && def.rendered.contains(def.alias.as_str()));
        assert!(def.rendered.contains(stated.as_str()));
    }
}

fn subset_of(b: &DatasetBundle, entity: u32) -> SubsetId {
    b.subsets.iter().find(|s| s.entity_ids.contains(&entity)).unwrap().spec.id
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn set_inclusion_laws(seed in any::<u64>(), tens in 2usize..12) {
        let variables = tens * 10;
        let b = gen_set_inclusion(&set_inclusion(variables, Variant::Base), seed).unwrap();
        check_disjoint(&b);
        check_consistency(&b);
        // Gold answers follow the true value, whatever the definition states.
        let mut balance: BTreeMap<(u32, Split), (usize, usize)> = BTreeMap::new();
        for d in b.documents.iter().filter(|d| matches!(d.kind, DocKind::Qa | DocKind::Question)) {
            let value: u32 = b.entities[d.entity_id as usize].name.parse().unwrap();
            let body = d.text.split('?').next().unwrap();
            let list: Vec<u32> = body.split_whitespace().skip(1).map(|t| t.parse().unwrap()).collect();
            let gold = &d.gold_answers.as_ref().unwrap()[0];
            prop_assert_eq!(gold.as_str(), membership_answer(value, &list));
            let e = balance.entry((d.entity_id, d.split)).or_default();
            if gold == "Yes" { e.0 += 1 } else { e.1 += 1 }
        }
        prop_assert!(balance.values().all(|&(y, n)| y == n && y > 0));
        // Stage 2 trains on definitions only.
        prop_assert!(b.documents.iter().filter(|d| d.kind == DocKind::Qa).all(|d| matches!(d.subset, SubsetId::D1consQA1 | SubsetId::D2inconsQA2)));
    }

    #[test]
    fn regeneration_is_byte_identical(seed in any::<u64>()) {
        let cfg = set_inclusion(60, Variant::Base);
        let a = serialize_bundle(&gen_set_inclusion(&cfg, seed).unwrap());
        prop_assert_eq!(&a, &serialize_bundle(&gen_set_inclusion(&cfg, seed).unwrap()));
        prop_assert_ne!(&a, &serialize_bundle(&gen_set_inclusion(&cfg, seed.wrapping_add(1)).unwrap()));
        let n = serialize_bundle(&build_natural_bundle(&cvdb(Variant::Base), people(200), seed).unwrap());
        prop_assert_eq!(n, serialize_bundle(&build_natural_bundle(&cvdb(Variant::Base), people(200), seed).unwrap()));
    }

    #[test]
    fn alpha_recomputed_from_counts_is_exact(seed in any::<u64>(), k in 0u32..=8, twenties in 2usize..6) {
        let alpha = f64::from(k) / 8.0;
        let b = gen_set_inclusion(&set_inclusion(twenties * 20, Variant::Alpha { alpha }), seed).unwrap();
        check_disjoint(&b);
        check_consistency(&b);
        prop_assert_eq!(b.measured_alpha(), Some(alpha));
        prop_assert_eq!(b.measured_bar_alpha(), Some(alpha));
    }

    #[test]
    fn natural_bundle_laws(seed in any::<u64>()) {
        let b = build_natural_bundle(&cvdb(Variant::Base), people(200), seed).unwrap();
        check_disjoint(&b);
        check_consistency(&b);
        for d in b.documents.iter().filter(|d| matches!(d.kind, DocKind::Qa | DocKind::Question)) {
            let kind = d.question_kind.as_ref().unwrap();
            let truth = &b.entities[d.entity_id as usize].attributes[kind];
            prop_assert!(d.gold_answers.as_ref().unwrap().contains(truth));
        }
    }

    #[test]
    fn anonymized_years_keep_their_period(year in -3000i32..3000) {
        prop_assume!(year != 0);
        let s = anonymize_year(year).unwrap();
        match year {
            y if y < 0 => prop_assert!(s.ends_with(" century BC")),
            y if y < 1900 => prop_assert_eq!(s, format!("{} century", (y - 1) / 100 + 1)),
            y if y < 2000 => prop_assert_eq!(s, format!("{}0s", y / 10)),
            y => prop_assert_eq!(s, y.to_string()),
        }
    }
}

#[test]
fn year_worked_examples() {
    assert_eq!(anonymize_year(1812).unwrap(), "19 century");
    assert_eq!(anonymize_year(-122).unwrap(), "2 century BC");
    assert_eq!(anonymize_year(1923).unwrap(), "1920s");
    assert_eq!(anonymize_year(2000).unwrap(), "2000");
    assert!(anonymize_year(0).is_err());
}
