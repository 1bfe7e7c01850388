//! Experiment configuration and shipped presets.
//!
//! Configs are TOML documents. Every section except `name` has defaults,
//! so a file only needs the fields it changes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::{AlignMetric, ProbeConfig, ProbeTask};
use crate::error::{CoreError, Result};
use crate::forge::{ForgeConfig, SetInclusionSpec, SubsetId, Variant, WordOrder};
use crate::model::{ModelConfig, Positional, Precision};
use crate::optim::OptimizerConfig;
use crate::train::{EarlyStop, StageSpec};

/// Model hyperparameters; the vocabulary size comes from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_context_length: usize,
    pub positional: Positional,
    pub init_scale: f64,
    pub precision: Precision,
    pub rotary_base: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            max_context_length: 16,
            positional: Positional::LearnedAbsolute,
            init_scale: 1.0,
            precision: Precision::F32,
            rotary_base: 10000.0,
        }
    }
}

impl ModelSection {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            vocab_size,
            max_context_length: self.max_context_length,
            positional: self.positional,
            init_scale: self.init_scale,
            precision: self.precision,
            rotary_base: self.rotary_base,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default)]
    pub early_stop: Option<EarlyStop>,
}

impl StageSection {
    pub fn spec(&self, label: &str, shuffle_key: u64, definitions_only: bool) -> StageSpec {
        StageSpec {
            label: label.to_string(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            eval_every: self.eval_every,
            shuffle_key,
            definitions_only,
            early_stop: self.early_stop.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    TwoStage,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub protocol: Protocol,
    pub stage1: StageSection,
    pub stage2: StageSection,
    /// Used by the joint protocol; stage 1 settings apply when absent.
    pub joint: Option<StageSection>,
    pub max_new_tokens: usize,
    /// Save a checkpoint at the end of each stage.
    pub checkpoints: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            protocol: Protocol::TwoStage,
            stage1: StageSection { epochs: 50, batch_size: 256, eval_every: 5, early_stop: None },
            stage2: StageSection { epochs: 20, batch_size: 256, eval_every: 1, early_stop: None },
            joint: None,
            max_new_tokens: 2,
            checkpoints: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub alignment_metrics: Vec<AlignMetric>,
    pub alignment_subsets: Vec<SubsetId>,
    /// Stage-1 epochs at which alignment is measured; the final stage-1
    /// epoch is always included when alignment is enabled.
    pub alignment_epochs: Vec<usize>,
    pub probe_tasks: Vec<ProbeTask>,
    pub probe_layer: usize,
    /// Stage-1 epoch whose weights are probed; `None` means the last.
    pub probe_epoch: Option<usize>,
    pub probe: ProbeConfig,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            alignment_metrics: AlignMetric::ALL.to_vec(),
            alignment_subsets: vec![SubsetId::D5cons, SubsetId::D6cons],
            alignment_epochs: Vec::new(),
            probe_tasks: vec![ProbeTask::TagPrediction],
            probe_layer: 1,
            probe_epoch: None,
            probe: ProbeConfig::default(),
        }
    }
}

/// A family of configs differing in one knob. Each value becomes one
/// sweep point with its own output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Sweep {
    Alpha { values: Vec<f64> },
    WordOrder { values: Vec<WordOrder> },
    BatchSize { values: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_forge")]
    pub forge: ForgeConfig,
    /// Questions per entity kept when ingesting CVDB rows.
    #[serde(default = "default_questions")]
    pub questions_per_entity: usize,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub sweep: Option<Sweep>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_forge() -> ForgeConfig {
    ForgeConfig::set_inclusion(SetInclusionSpec::default())
}

fn default_questions() -> usize {
    6
}

pub const PRESETS: [&str; 6] =
    ["set-inclusion-paper", "set-inclusion-desk", "alpha-sweep", "word-order-sweep", "batch-size-sweep", "in-context-control"];

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CoreError::Config {
            field: e.span().map_or_else(String::new, |s| field_at(text, s.start)),
            message: format!("{origin}: {}", e.message().trim()),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Field-path checks beyond what deserialization enforces.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| Err(CoreError::Config { field: field.to_string(), message });
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return bad("name", format!("`{}` must be non-empty and use [A-Za-z0-9_-]", self.name));
        }
        if self.seeds.is_empty() {
            return bad("seeds", "at least one seed is required".into());
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return bad("seeds", "duplicate seed".into());
        }
        if let Err(e) = self.forge.variant.validate() {
            return bad("forge.variant", e.to_string());
        }
        if let Err(e) = self.model.with_vocab(3).validate() {
            return bad("model", e.to_string());
        }
        for (field, s) in [("training.stage1", &self.training.stage1), ("training.stage2", &self.training.stage2)]
            .into_iter()
            .chain(self.training.joint.as_ref().map(|j| ("training.joint", j)))
        {
            if s.epochs == 0 {
                return bad(&format!("{field}.epochs"), "must be >= 1".into());
            }
            if s.batch_size == 0 {
                return bad(&format!("{field}.batch_size"), "must be >= 1".into());
            }
        }
        if self.training.max_new_tokens == 0 {
            return bad("training.max_new_tokens", "must be >= 1".into());
        }
        if self.analysis.probe_layer > self.model.n_layers {
            return bad("analysis.probe_layer", format!("{} exceeds n_layers {}", self.analysis.probe_layer, self.model.n_layers));
        }
        if let Some(e) = self.analysis.probe_epoch {
            if e == 0 || e > self.training.stage1.epochs {
                return bad("analysis.probe_epoch", format!("{e} outside 1..={}", self.training.stage1.epochs));
            }
        }
        match &self.sweep {
            Some(Sweep::Alpha { values }) if values.iter().any(|a| !(0.0..=1.0).contains(a)) => {
                bad("sweep.values", "alpha outside [0, 1]".into())
            }
            Some(Sweep::BatchSize { values }) if values.contains(&0) => bad("sweep.values", "batch size 0".into()),
            Some(Sweep::Alpha { values }) if values.is_empty() => bad("sweep.values", "empty sweep".into()),
            Some(Sweep::WordOrder { values }) if values.is_empty() => bad("sweep.values", "empty sweep".into()),
            Some(Sweep::BatchSize { values }) if values.is_empty() => bad("sweep.values", "empty sweep".into()),
            _ => Ok(()),
        }
    }

    /// Hash of the canonical JSON of everything except the seed list.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.seeds.clear();
        crate::hash::canonical_hash(&c)
    }

    pub fn run_id(&self) -> String {
        format!("{}-{}-{}", self.name, crate::VERSION, &self.config_hash()[..12])
    }

    /// Concrete configs, one per sweep value (just `self` without a sweep),
    /// each with a directory label.
    pub fn points(&self) -> Vec<(String, ExperimentConfig)> {
        let base = || ExperimentConfig { sweep: None, ..self.clone() };
        match &self.sweep {
            None => vec![("main".to_string(), base())],
            Some(Sweep::Alpha { values }) => values
                .iter()
                .map(|&alpha| {
                    let mut c = base();
                    c.forge.variant = Variant::Alpha { alpha };
                    (format!("alpha-{alpha}"), c)
                })
                .collect(),
            Some(Sweep::WordOrder { values }) => values
                .iter()
                .map(|&order| {
                    let mut c = base();
                    c.forge.variant = Variant::WordOrder { order };
                    (format!("order-{}", order.as_str()), c)
                })
                .collect(),
            Some(Sweep::BatchSize { values }) => values
                .iter()
                .map(|&b| {
                    let mut c = base();
                    c.training.protocol = Protocol::Joint;
                    let joint = c.training.joint.clone().unwrap_or_else(|| c.training.stage1.clone());
                    c.training.joint = Some(StageSection {
                        batch_size: b,
                        early_stop: Some(joint.early_stop.clone().unwrap_or_default()),
                        ..joint
                    });
                    (format!("batch-{b}"), c)
                })
                .collect(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        let desk = || ExperimentConfig {
            name: "set-inclusion-desk".into(),
            seeds: (0..10).collect(),
            forge: ForgeConfig::set_inclusion(SetInclusionSpec { variables: 2000, ..Default::default() }),
            questions_per_entity: default_questions(),
            model: ModelSection::default(),
            optimizer: OptimizerConfig::default(),
            training: TrainingSection::default(),
            analysis: AnalysisSection::default(),
            sweep: None,
        };
        let small_sweep = |name: &str, sweep: Sweep| {
            let mut c = desk();
            c.name = name.into();
            c.seeds = (0..5).collect();
            c.forge = ForgeConfig::set_inclusion(SetInclusionSpec { variables: 1000, ..Default::default() });
            c.analysis.alignment_metrics.clear();
            c.sweep = Some(sweep);
            c
        };
        let cfg = match name {
            "set-inclusion-desk" => desk(),
            "set-inclusion-paper" => ExperimentConfig {
                name: name.into(),
                seeds: (0..50).collect(),
                forge: ForgeConfig::set_inclusion(SetInclusionSpec::default()),
                model: ModelSection {
                    n_layers: 6,
                    n_heads: 8,
                    d_model: 512,
                    d_ff: 2048,
                    max_context_length: 16,
                    positional: Positional::Rotary,
                    ..ModelSection::default()
                },
                training: TrainingSection {
                    stage1: StageSection { epochs: 100, batch_size: 512, eval_every: 5, early_stop: None },
                    stage2: StageSection { epochs: 40, batch_size: 512, eval_every: 2, early_stop: None },
                    ..TrainingSection::default()
                },
                ..desk()
            },
            "alpha-sweep" => small_sweep(name, Sweep::Alpha { values: vec![0.5, 0.625, 0.75, 0.875, 1.0] }),
            "word-order-sweep" => small_sweep(name, Sweep::WordOrder { values: WordOrder::ALL.to_vec() }),
            "batch-size-sweep" => {
                let mut c = small_sweep(name, Sweep::BatchSize { values: vec![64, 128, 256, 512] });
                c.training.joint = Some(StageSection { epochs: 100, batch_size: 256, eval_every: 5, early_stop: Some(EarlyStop::default()) });
                c
            }
            "in-context-control" => {
                let mut c = desk();
                c.name = name.into();
                c.seeds = (0..5).collect();
                c.forge.variant = Variant::InContext;
                c.analysis.alignment_metrics.clear();
                c.analysis.probe_tasks.clear();
                c
            }
            other => {
                return Err(CoreError::Config {
                    field: "preset".into(),
                    message: format!("unknown preset `{other}` (known: {})", PRESETS.join(", ")),
                });
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Dotted path of the key on the line containing byte `pos`, prefixed by
/// the enclosing `[table]` header.
fn field_at(text: &str, pos: usize) -> String {
    let pos = pos.min(text.len());
    let line_start = text[..pos].rfind('\n').map_or(0, |i| i + 1);
    let line = text[line_start..].lines().next().unwrap_or("").trim();
    let table = text[..line_start]
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('['))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').trim().to_string());
    if line.starts_with('[') {
        return line.trim_matches(|c| c == '[' || c == ']').trim().to_string();
    }
    let key = line.split('=').next().unwrap_or("").trim();
    match table {
        Some(t) if !key.is_empty() => format!("{t}.{key}"),
        Some(t) => t,
        None => key.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in PRESETS {
            let c = ExperimentConfig::preset(name).unwrap();
            let back = ExperimentConfig::from_toml(&c.to_toml(), name).unwrap();
            assert_eq!(back, c, "{name}");
        }
        assert!(ExperimentConfig::preset("nope").is_err());
    }

    #[test]
    fn hash_ignores_seeds() {
        let a = ExperimentConfig::preset("set-inclusion-desk").unwrap();
        let mut b = a.clone();
        b.seeds = vec![99];
        assert_eq!(a.config_hash(), b.config_hash());
        b.training.stage1.epochs = 3;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn minimal_file_and_field_errors() {
        let c = ExperimentConfig::from_toml("name = \"x\"\n", "mem").unwrap();
        assert_eq!(c.training.stage1.batch_size, 256);
        let err = ExperimentConfig::from_toml("name = \"x\"\n[training.stage1]\nepochs = 0\nbatch_size = 4\n", "mem").unwrap_err();
        assert!(err.to_string().contains("training.stage1.epochs"), "{err}");
        let err = ExperimentConfig::from_toml("name = \"x\"\n[model]\nd_modle = 3\n", "mem").unwrap_err();
        assert!(err.to_string().contains("`model.d_modle`"), "{err}");
        let err = ExperimentConfig::from_toml("name = \"x\"\n[training]\nmax_new_tokens = \"two\"\n", "mem").unwrap_err();
        assert!(err.to_string().contains("`training.max_new_tokens`"), "{err}");
    }

    #[test]
    fn sweep_points() {
        let c = ExperimentConfig::preset("batch-size-sweep").unwrap();
        let pts = c.points();
        assert_eq!(pts.len(), 4);
        assert_eq!(pts[0].0, "batch-64");
        assert_eq!(pts[0].1.training.protocol, Protocol::Joint);
        assert_eq!(pts[0].1.training.joint.as_ref().unwrap().batch_size, 64);
        let a = ExperimentConfig::preset("alpha-sweep").unwrap().points();
        assert_eq!(a[0].1.forge.variant, Variant::Alpha { alpha: 0.5 });
    }
}
