//! Synthetic definition/QA corpus generation.
//!
//! A [`DatasetBundle`] holds everything one experiment seed trains and
//! evaluates on: the entities, their random aliases, the define tags, the
//! subset assignment and every rendered document.

mod io;
mod natural;
mod set_inclusion;
mod sources;
mod split;
mod strings;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub use io::{load_bundle, read_bundle, serialize_bundle, write_bundle};
pub use natural::{build_natural_bundle, make_entity_attribution_set, AttributionTemplates};
pub use set_inclusion::{gen_set_inclusion, membership_answer, SetInclusionSpec};
pub use sources::{anonymize_year, ingest_cvdb, ingest_trex, read_cvdb_tsv, read_trex_tsv, CvdbRow, TrexTriplet, TREX_QUESTIONS};
pub use split::{assign_qa_splits, make_inconsistent_assignment, split_entities};
pub use strings::{gen_surface_strings, render_definition, DEFAULT_ALPHABET, SURFACE_LEN};

/// Source reliability marker prefixed (or infixed) to a definition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagKind {
    /// Reliable: definitions agree with the QA data.
    Dot,
    /// Unreliable: definitions contradict the QA data.
    Bar,
    /// Fresh tag never seen in the first stage.
    Tilde,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefineTag {
    pub kind: TagKind,
    pub surface: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alias {
    pub surface: String,
    pub entity_id: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub id: u32,
    pub name: String,
    /// Question kind -> answer.
    pub attributes: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub popularity_rank: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SubsetId {
    D1consQA1,
    D2inconsQA2,
    QA3,
    QA4notReplaced,
    D5cons,
    D6cons,
    QA7noDefs,
    D8tildeCons,
    D9inconsQA9,
    D10consQA10,
}

impl SubsetId {
    pub const ALL: [SubsetId; 10] = [
        SubsetId::D1consQA1,
        SubsetId::D2inconsQA2,
        SubsetId::QA3,
        SubsetId::QA4notReplaced,
        SubsetId::D5cons,
        SubsetId::D6cons,
        SubsetId::QA7noDefs,
        SubsetId::D8tildeCons,
        SubsetId::D9inconsQA9,
        SubsetId::D10consQA10,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SubsetId::D1consQA1 => "D1consQA1",
            SubsetId::D2inconsQA2 => "D2inconsQA2",
            SubsetId::QA3 => "QA3",
            SubsetId::QA4notReplaced => "QA4notReplaced",
            SubsetId::D5cons => "D5cons",
            SubsetId::D6cons => "D6cons",
            SubsetId::QA7noDefs => "QA7noDefs",
            SubsetId::D8tildeCons => "D8tildeCons",
            SubsetId::D9inconsQA9 => "D9inconsQA9",
            SubsetId::D10consQA10 => "D10consQA10",
        }
    }
}

impl fmt::Display for SubsetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SubsetId {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        SubsetId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| CoreError::Parse(format!("unknown subset `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    X1,
    X2,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::X1 => "x1",
            Stage::X2 => "x2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One row of the subset table: which kinds of training documents exist for
/// the subset's entities and how large a share of entities it receives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetSpec {
    pub id: SubsetId,
    pub stage: Stage,
    pub has_qa: bool,
    pub has_defs: bool,
    pub tag_kind: Option<TagKind>,
    pub consistent: Option<bool>,
    pub alias_replaced: bool,
    pub entity_fraction: f64,
}

impl SubsetSpec {
    #[allow(clippy::too_many_arguments)]
    fn row(
        id: SubsetId,
        stage: Stage,
        has_qa: bool,
        has_defs: bool,
        tag_kind: Option<TagKind>,
        consistent: Option<bool>,
        alias_replaced: bool,
        entity_fraction: f64,
    ) -> Self {
        Self { id, stage, has_qa, has_defs, tag_kind, consistent, alias_replaced, entity_fraction }
    }

    /// Natural-language layout: 0.7 of entities in the first stage.
    pub fn cvdb_layout() -> Vec<SubsetSpec> {
        use SubsetId::*;
        use TagKind::*;
        vec![
            Self::row(D1consQA1, Stage::X1, true, true, Some(Dot), Some(true), true, 0.25),
            Self::row(D2inconsQA2, Stage::X1, true, true, Some(Bar), Some(false), true, 0.25),
            Self::row(QA3, Stage::X1, true, false, None, None, true, 0.1),
            Self::row(QA4notReplaced, Stage::X1, true, false, None, None, false, 0.1),
            Self::row(D5cons, Stage::X2, false, true, Some(Dot), Some(true), true, 0.08),
            Self::row(D6cons, Stage::X2, false, true, Some(Bar), Some(true), true, 0.08),
            Self::row(QA7noDefs, Stage::X2, false, false, None, None, true, 0.06),
            Self::row(D8tildeCons, Stage::X2, false, true, Some(Tilde), Some(true), true, 0.08),
        ]
    }

    /// Toy set-inclusion layout: 0.8 of variables in the first stage.
    pub fn set_inclusion_layout() -> Vec<SubsetSpec> {
        use SubsetId::*;
        use TagKind::*;
        vec![
            Self::row(D1consQA1, Stage::X1, true, true, Some(Dot), Some(true), true, 0.4),
            Self::row(D2inconsQA2, Stage::X1, true, true, Some(Bar), Some(false), true, 0.4),
            Self::row(D5cons, Stage::X2, false, true, Some(Dot), Some(true), true, 0.1),
            Self::row(D6cons, Stage::X2, false, true, Some(Bar), Some(true), true, 0.1),
        ]
    }

    /// Rows for the tag-reliability sweep: the `D1` pool is split into
    /// consistent `D1` (share `alpha`) and inconsistent `D9`; the `D2` pool
    /// into inconsistent `D2` (share `alpha`) and consistent `D10`.
    pub fn alpha_rows(base: &[SubsetSpec], alpha: f64) -> Vec<SubsetSpec> {
        let mut out = Vec::new();
        for s in base {
            match s.id {
                SubsetId::D1consQA1 => {
                    out.push(SubsetSpec { entity_fraction: s.entity_fraction * alpha, ..s.clone() });
                    out.push(SubsetSpec {
                        id: SubsetId::D9inconsQA9,
                        consistent: Some(false),
                        entity_fraction: s.entity_fraction * (1.0 - alpha),
                        ..s.clone()
                    });
                }
                SubsetId::D2inconsQA2 => {
                    out.push(SubsetSpec { entity_fraction: s.entity_fraction * alpha, ..s.clone() });
                    out.push(SubsetSpec {
                        id: SubsetId::D10consQA10,
                        consistent: Some(true),
                        entity_fraction: s.entity_fraction * (1.0 - alpha),
                        ..s.clone()
                    });
                }
                _ => out.push(s.clone()),
            }
        }
        out
    }

    /// Checks the fraction law for a layout.
    pub fn validate_layout(specs: &[SubsetSpec]) -> Result<()> {
        let total: f64 = specs.iter().map(|s| s.entity_fraction).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(CoreError::Generation(format!("subset fractions sum to {total}, expected 1")));
        }
        if let Some(s) = specs.iter().find(|s| !(0.0..=1.0).contains(&s.entity_fraction)) {
            return Err(CoreError::Generation(format!("fraction of {} outside [0, 1]", s.id)));
        }
        Ok(())
    }
}

/// Order of tag (T), alias (A) and entity (E) inside a rendered definition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WordOrder {
    TAE,
    ATE,
    AET,
    EAT,
    TEA,
    ETA,
}

impl WordOrder {
    pub const ALL: [WordOrder; 6] =
        [WordOrder::TAE, WordOrder::ATE, WordOrder::AET, WordOrder::EAT, WordOrder::TEA, WordOrder::ETA];

    pub fn as_str(self) -> &'static str {
        match self {
            WordOrder::TAE => "TAE",
            WordOrder::ATE => "ATE",
            WordOrder::AET => "AET",
            WordOrder::EAT => "EAT",
            WordOrder::TEA => "TEA",
            WordOrder::ETA => "ETA",
        }
    }
}

impl FromStr for WordOrder {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        WordOrder::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| CoreError::InvalidVariant(format!("unknown word order `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Definition {
    pub tag: TagKind,
    pub alias: String,
    /// Entity whose attributes generate the alias's QA answers.
    pub entity_id: u32,
    /// Entity named by the definition text.
    pub stated_entity_id: u32,
    pub word_order: WordOrder,
    pub rendered: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Cvdb,
    Trex,
    SetInclusion,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Cvdb => "cvdb",
            Source::Trex => "trex",
            Source::SetInclusion => "set_inclusion",
        }
    }
}

/// Corpus variant. `Base` is the plain two-stage layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Variant {
    Base,
    Alpha { alpha: f64 },
    WordOrder { order: WordOrder },
    InContext,
    JointSingleStage,
}

impl Variant {
    pub fn word_order(&self) -> WordOrder {
        match self {
            Variant::WordOrder { order } => *order,
            _ => WordOrder::TAE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Variant::Alpha { alpha } = self {
            if !(0.0..=1.0).contains(alpha) || alpha.is_nan() {
                return Err(CoreError::InvalidVariant(format!("alpha {alpha} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Apply the variant to a base subset layout.
    pub fn layout(&self, base: Vec<SubsetSpec>) -> Vec<SubsetSpec> {
        match self {
            Variant::Alpha { alpha } => SubsetSpec::alpha_rows(&base, *alpha),
            _ => base,
        }
    }
}

/// What a document is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocKind {
    /// Training definition.
    Definition,
    /// Training QA pair.
    Qa,
    /// Held-out QA prompt; `text` stops before the answer.
    Question,
    /// Entity-attribution prompt, gold = entity named by the definition.
    Attribution,
    /// Entity-attribution prompt, gold = entity consistent with the QA data.
    AttributionQa,
}

impl DocKind {
    pub fn is_train(self) -> bool {
        matches!(self, DocKind::Definition | DocKind::Qa)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DocKind::Definition => "definition",
            DocKind::Qa => "qa",
            DocKind::Question => "question",
            DocKind::Attribution => "attribution",
            DocKind::AttributionQa => "attribution_qa",
        }
    }
}

/// One line of a bundle file.
///
/// Training documents carry their full text and `gold_answers = [answer]`,
/// where `text` ends with `" " + answer`. Evaluation prompts carry the text
/// up to the answer and every accepted answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub text: String,
    pub subset: SubsetId,
    pub split: Split,
    pub stage: Stage,
    pub entity_id: u32,
    pub alias: Option<String>,
    pub gold_answers: Option<Vec<String>>,
    pub question_kind: Option<String>,
    pub kind: DocKind,
}

impl Document {
    /// Full training text for an evaluation prompt: prompt, space, first gold.
    pub fn with_answer(&self) -> String {
        match (&self.kind, &self.gold_answers) {
            (k, Some(g)) if !k.is_train() && !g.is_empty() => format!("{} {}", self.text, g[0]),
            _ => self.text.clone(),
        }
    }

    /// Prompt portion and answer portion of a training document.
    pub fn prompt_and_answer(&self) -> (&str, Option<&str>) {
        if self.kind.is_train() {
            if let Some(ans) = self.gold_answers.as_ref().and_then(|g| g.first()) {
                if let Some(prefix) = self.text.strip_suffix(ans.as_str()) {
                    return (prefix.trim_end(), Some(ans.as_str()));
                }
            }
            (&self.text, None)
        } else {
            (&self.text, None)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetAssignment {
    pub spec: SubsetSpec,
    pub entity_ids: Vec<u32>,
}

/// Provenance carried in the header line of a bundle file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleHeader {
    pub source: Source,
    pub variant: Variant,
    pub seed: u64,
    pub spec_hash: String,
    pub toolkit_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub header: BundleHeader,
    pub entities: Vec<EntityRecord>,
    pub aliases: Vec<Alias>,
    pub tags: Vec<DefineTag>,
    pub subsets: Vec<SubsetAssignment>,
    pub definitions: Vec<Definition>,
    pub documents: Vec<Document>,
}

impl DatasetBundle {
    pub fn subset(&self, id: SubsetId) -> Option<&SubsetAssignment> {
        self.subsets.iter().find(|s| s.spec.id == id)
    }

    pub fn tag(&self, kind: TagKind) -> Option<&DefineTag> {
        self.tags.iter().find(|t| t.kind == kind)
    }

    pub fn entity(&self, id: u32) -> Option<&EntityRecord> {
        self.entities.iter().find(|e| e.id == id)
    }

    /// Training documents of one stage, in file order.
    pub fn train_docs(&self, stage: Stage) -> impl Iterator<Item = &Document> {
        self.documents.iter().filter(move |d| d.kind.is_train() && d.stage == stage)
    }

    /// Evaluation documents of one `(subset, split, kind)` family.
    pub fn eval_docs(&self, subset: SubsetId, split: Split, kind: DocKind) -> Vec<&Document> {
        self.documents
            .iter()
            .filter(|d| d.subset == subset && d.split == split && d.kind == kind)
            .collect()
    }

    /// Distinct `(subset, split, kind)` evaluation families present.
    pub fn eval_families(&self) -> Vec<(SubsetId, Split, DocKind)> {
        let mut out: Vec<(SubsetId, Split, DocKind)> = Vec::new();
        for d in self.documents.iter().filter(|d| !d.kind.is_train()) {
            let key = (d.subset, d.split, d.kind);
            if !out.contains(&key) {
                out.push(key);
            }
        }
        out
    }

    /// `|Ents(D1)| / |Ents(D1 ∪ D9)|`, the measured tag reliability.
    pub fn measured_alpha(&self) -> Option<f64> {
        let n = |id| self.subset(id).map_or(0, |s| s.entity_ids.len());
        let (d1, d9) = (n(SubsetId::D1consQA1), n(SubsetId::D9inconsQA9));
        (d1 + d9 > 0).then(|| d1 as f64 / (d1 + d9) as f64)
    }

    /// `|Ents(D2)| / |Ents(D2 ∪ D10)|`, the share of unreliable-tag entities
    /// whose definitions are inconsistent.
    pub fn measured_bar_alpha(&self) -> Option<f64> {
        let n = |id| self.subset(id).map_or(0, |s| s.entity_ids.len());
        let (d2, d10) = (n(SubsetId::D2inconsQA2), n(SubsetId::D10consQA10));
        (d2 + d10 > 0).then(|| d2 as f64 / (d2 + d10) as f64)
    }
}

/// Parameters that fully determine a generated bundle (besides the seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgeConfig {
    #[serde(default = "default_source")]
    pub source: Source,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default)]
    pub set_inclusion: SetInclusionSpec,
    /// Raw tab-separated input for the natural-language sources.
    #[serde(default)]
    pub raw_path: Option<String>,
    /// Entities to ingest (CVDB: balanced by gender; T-REx: subject count).
    #[serde(default)]
    pub entity_count: Option<usize>,
    #[serde(default)]
    pub attribution: AttributionTemplates,
    /// Optional definition template with `{tag}`, `{alias}`, `{entity}`
    /// placeholders; the default joins the three surfaces with spaces.
    #[serde(default)]
    pub definition_template: Option<String>,
}

fn default_source() -> Source {
    Source::SetInclusion
}

fn default_variant() -> Variant {
    Variant::Base
}

impl ForgeConfig {
    pub fn set_inclusion(spec: SetInclusionSpec) -> Self {
        Self {
            source: Source::SetInclusion,
            variant: Variant::Base,
            set_inclusion: spec,
            raw_path: None,
            entity_count: None,
            attribution: AttributionTemplates::default(),
            definition_template: None,
        }
    }

    /// Hex SHA-256 over the canonical JSON of the config and seed.
    pub fn spec_hash(&self, seed: u64) -> String {
        crate::hash::canonical_hash(&(self, seed))
    }
}

/// Generate the bundle described by `config` for one seed.
///
/// Natural-language sources take already-ingested entities; see
/// [`ingest_cvdb`] and [`ingest_trex`].
pub fn build_bundle(config: &ForgeConfig, entities: Option<Vec<EntityRecord>>, seed: u64) -> Result<DatasetBundle> {
    config.variant.validate()?;
    match config.source {
        Source::SetInclusion => gen_set_inclusion(config, seed),
        Source::Cvdb | Source::Trex => {
            let entities = entities.ok_or_else(|| {
                CoreError::Generation(format!("{} source needs ingested entities", config.source.as_str()))
            })?;
            build_natural_bundle(config, entities, seed)
        }
    }
}
