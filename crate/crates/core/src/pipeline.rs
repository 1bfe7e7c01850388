//! End-to-end runs: forge, tokenize, train, evaluate, analyze, persist.
//!
//! Layout under an output directory:
//!
//! ```text
//! <out>/<point>/seed-<s>/{config.toml, bundle.jsonl, vocab.jsonl, metrics.csv,
//!                         predictions.jsonl, alignment.csv, probe.csv,
//!                         checkpoints/<stage>.ckpt, run.json}
//! <out>/<point>/report/{summary.csv, contrasts.csv, alignment_summary.csv,
//!                       probe_summary.csv, *.svg}
//! ```
//!
//! `run.json` is written last; a seed directory whose `run.json` carries
//! the same run id is reused instead of retrained.

use std::fs;
use std::path::{Path, PathBuf};

use iml_numerics::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::analysis::probe::probe_samples;
use crate::analysis::report::{
    emit_report, read_csv, summarize, write_csv, AlignmentRow, ContrastSource, ContrastSpec, ProbeRow, ALIGNMENT_HEADER,
    METRIC_HEADER, PROBE_HEADER, SUMMARY_HEADER,
};
use crate::analysis::{alias_disjoint_split, alignment, alignment_groups, train_probe, AlignmentGroup};
use crate::config::{ExperimentConfig, Protocol};
use crate::error::{CoreError, Result};
use crate::forge::{
    build_bundle, ingest_cvdb, ingest_trex, load_bundle, read_cvdb_tsv, read_trex_tsv, write_bundle, DatasetBundle, Source, Stage, SubsetId,
};
use crate::model::{init_model, load_checkpoint, save_checkpoint, CheckpointExtra, ModelState, Precision};
use crate::optim::Optimizer;
use crate::rng::keys;
use crate::tokenizer::{build_vocab, encode_doc, TokenizedDoc, Vocab};
use crate::train::{
    build_eval_sets, eval_subset, run_joint, run_two_stage, EpochEnd, EvalReport, MetricRow, PredictionRecord, RunContext,
};

pub const STAGE1: &str = "stage1";
pub const STAGE2: &str = "stage2";
pub const JOINT: &str = "joint";

/// Generate the bundle of one seed, ingesting raw files for natural sources.
pub fn forge_bundle(cfg: &ExperimentConfig, seed: u64) -> Result<DatasetBundle> {
    let f = &cfg.forge;
    let entities = match f.source {
        Source::SetInclusion => None,
        Source::Cvdb | Source::Trex => {
            let raw = f.raw_path.as_deref().ok_or_else(|| CoreError::Config {
                field: "forge.raw_path".into(),
                message: format!("{} source needs a raw input file", f.source.as_str()),
            })?;
            let path = Path::new(raw);
            Some(match f.source {
                Source::Cvdb => ingest_cvdb(&read_cvdb_tsv(path)?, f.entity_count.unwrap_or(4000), cfg.questions_per_entity)?,
                _ => ingest_trex(&read_trex_tsv(path)?, f.entity_count.unwrap_or(1000))?,
            })
        }
    };
    build_bundle(f, entities, seed)
}

pub fn vocab_for(cfg: &ExperimentConfig, bundle: &DatasetBundle) -> Vocab {
    build_vocab(bundle, cfg.forge.set_inclusion.value_range)
}

/// Training documents of each stage, tokenized to the model context.
pub fn tokenize_stages(bundle: &DatasetBundle, vocab: &Vocab, max_len: usize) -> Result<(Vec<TokenizedDoc>, Vec<TokenizedDoc>)> {
    let enc = |stage| bundle.train_docs(stage).map(|d| encode_doc(vocab, d, max_len)).collect::<Result<Vec<_>>>();
    Ok((enc(Stage::X1)?, enc(Stage::X2)?))
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub toolkit_version: String,
    pub status: String,
    pub vocab_size: usize,
    pub vocab_hash: String,
    pub param_count: usize,
    pub final_stage: String,
}

pub fn seed_dir(out: &Path, point: &str, seed: u64) -> PathBuf {
    out.join(point).join(format!("seed-{seed}"))
}

fn write_jsonl<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| CoreError::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CoreError::ParseAt { path: path.display().to_string(), line: i + 1, message: e.to_string() })
        })
        .collect()
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))
}

/// Model and optimizer state written at the end of a stage.
#[allow(clippy::too_many_arguments)]
pub fn save_stage_checkpoint<T: Real>(
    path: &Path,
    state: &ModelState<T>,
    opt: &Optimizer,
    vocab: &Vocab,
    run_id: &str,
    seed: u64,
    stage: &str,
    epoch: usize,
) -> Result<()> {
    let tensors = opt
        .export()
        .into_iter()
        .map(|(name, shape, v)| Ok((name, Tensor::from_f64(shape, &v)?)))
        .collect::<Result<Vec<_>>>()?;
    let meta = serde_json::json!({
        "run_id": run_id,
        "seed": seed,
        "stage": stage,
        "epoch": epoch,
        "optimizer": opt.config,
        "optimizer_step": opt.step,
        "toolkit_version": crate::VERSION,
    });
    save_checkpoint(path, state, &vocab.hash(), &CheckpointExtra { meta, tensors })
}

struct Analyses<'a> {
    cfg: &'a ExperimentConfig,
    bundle: &'a DatasetBundle,
    vocab: &'a Vocab,
    groups: Vec<(SubsetId, Vec<AlignmentGroup>)>,
    run_id: &'a str,
    seed: u64,
    alignment: Vec<AlignmentRow>,
    probes: Vec<ProbeRow>,
}

impl<'a> Analyses<'a> {
    fn new(cfg: &'a ExperimentConfig, bundle: &'a DatasetBundle, vocab: &'a Vocab, run_id: &'a str, seed: u64) -> Result<Self> {
        let mut groups = Vec::new();
        if !cfg.analysis.alignment_metrics.is_empty() {
            for &s in &cfg.analysis.alignment_subsets {
                if bundle.subset(s).is_some_and(|a| !a.entity_ids.is_empty()) {
                    groups.push((s, alignment_groups(bundle, vocab, s, cfg.model.max_context_length)?));
                }
            }
        }
        Ok(Self { cfg, bundle, vocab, groups, run_id, seed, alignment: Vec::new(), probes: Vec::new() })
    }

    fn align<T: Real>(&mut self, state: &ModelState<T>, epoch: usize) -> Result<()> {
        let st64: ModelState<f64> = state.cast();
        for (subset, groups) in &self.groups {
            for r in alignment(&st64, *subset, groups, &self.cfg.analysis.alignment_metrics, epoch)? {
                self.alignment.push(AlignmentRow {
                    run_id: self.run_id.to_string(),
                    seed: self.seed,
                    epoch,
                    subset: subset.as_str().to_string(),
                    metric: r.metric.as_str().to_string(),
                    n: r.n,
                    k: r.k,
                    value: r.mean,
                });
            }
        }
        Ok(())
    }

    fn probe<T: Real>(&mut self, state: &ModelState<T>) -> Result<()> {
        let a = &self.cfg.analysis;
        for &task in &a.probe_tasks {
            let (samples, filter) = probe_samples(state, self.bundle, self.vocab, task, a.probe_layer, self.seed)?;
            let split = alias_disjoint_split(&samples, a.probe.test_fraction, self.seed ^ keys::PROBE)?;
            let r = train_probe(&samples, &split, &a.probe, task, a.probe_layer, &filter)?;
            self.probes.push(ProbeRow {
                run_id: self.run_id.to_string(),
                seed: self.seed,
                task: task.as_str().to_string(),
                layer: r.layer,
                train_acc: r.train_acc,
                test_acc: r.test_acc,
                n_train: r.n_train,
                n_test: r.n_test,
            });
        }
        Ok(())
    }
}

/// Train and analyze one seed of a concrete (sweep-free) config, writing
/// every artifact into `dir`. Returns the run record.
/// `bundle` replaces forging with an existing bundle file.
pub fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    dir: &Path,
    bundle: Option<&Path>,
    log: &mut dyn FnMut(&str),
) -> Result<RunRecord> {
    let bundle = match bundle {
        Some(path) => load_bundle(path)?,
        None => forge_bundle(cfg, seed)?,
    };
    match cfg.model.precision {
        Precision::F32 => run_seed_typed::<f32>(cfg, seed, dir, bundle, log),
        Precision::F64 => run_seed_typed::<f64>(cfg, seed, dir, bundle, log),
    }
}

fn run_seed_typed<T: Real>(
    cfg: &ExperimentConfig,
    seed: u64,
    dir: &Path,
    bundle: DatasetBundle,
    log: &mut dyn FnMut(&str),
) -> Result<RunRecord> {
    mkdir(dir)?;
    let run_id = cfg.run_id();
    fs::write(dir.join("config.toml"), cfg.to_toml()).map_err(|e| CoreError::io(dir.join("config.toml"), e))?;
    write_bundle(&bundle, &dir.join("bundle.jsonl"))?;
    let vocab = vocab_for(cfg, &bundle);
    vocab.save(&dir.join("vocab.jsonl"))?;
    let model_cfg = cfg.model.with_vocab(vocab.len());
    let mut state: ModelState<T> = init_model(&model_cfg, crate::rng::stream_seed(seed, keys::INIT))?;
    let (x1, x2) = tokenize_stages(&bundle, &vocab, model_cfg.max_context_length)?;
    let eval_sets = build_eval_sets(&bundle, &vocab);
    let ctx = RunContext { run_id: &run_id, seed, vocab: &vocab, eval_sets: &eval_sets, max_new_tokens: cfg.training.max_new_tokens };
    let mut analyses = Analyses::new(cfg, &bundle, &vocab, &run_id, seed)?;
    let a = &cfg.analysis;
    let ckpt_dir = dir.join("checkpoints");
    let r1: Vec<&TokenizedDoc> = x1.iter().collect();
    let r2: Vec<&TokenizedDoc> = x2.iter().collect();
    log(&format!(
        "{run_id} seed {seed}: {} params, vocab {}, {} + {} training documents",
        model_cfg.param_count(),
        vocab.len(),
        x1.len(),
        x2.len()
    ));
    let start = std::time::Instant::now();
    let first_stage = match cfg.training.protocol {
        Protocol::TwoStage => STAGE1,
        Protocol::Joint => JOINT,
    };
    let mut hook = |e: EpochEnd<'_>, s: &ModelState<T>, opt: &Optimizer| -> Result<()> {
        log(&format!("{run_id} seed {seed}: {} epoch {} done at {:.0}s", e.stage, e.epoch, start.elapsed().as_secs_f64()));
        if e.stage == first_stage {
            if !analyses.groups.is_empty() && (e.last || a.alignment_epochs.contains(&e.epoch)) {
                analyses.align(s, e.epoch)?;
            }
            let probe_now = match a.probe_epoch {
                Some(p) => p == e.epoch,
                None => e.last,
            };
            if probe_now && !a.probe_tasks.is_empty() {
                analyses.probe(s)?;
            }
        }
        if e.last && cfg.training.checkpoints {
            save_stage_checkpoint(&ckpt_dir.join(format!("{}.ckpt", e.stage)), s, opt, &vocab, &run_id, seed, e.stage, e.epoch)?;
        }
        Ok(())
    };
    let t = &cfg.training;
    let (report, final_stage) = match t.protocol {
        Protocol::TwoStage => {
            let s1 = t.stage1.spec(STAGE1, 1, false);
            let s2 = t.stage2.spec(STAGE2, 2, true);
            let (mut a1, a2) = run_two_stage(&mut state, &cfg.optimizer, &r1, &r2, &s1, &s2, &ctx, &mut hook)?;
            let last = if r2.is_empty() { STAGE1 } else { STAGE2 };
            a1.extend(a2);
            (a1, last)
        }
        Protocol::Joint => {
            let spec = t.joint.as_ref().unwrap_or(&t.stage1).spec(JOINT, 3, false);
            (run_joint(&mut state, &cfg.optimizer, &r1, &r2, &spec, &ctx, &mut hook)?, JOINT)
        }
    };
    let EvalReport { rows, predictions } = report;
    write_csv(&dir.join("metrics.csv"), &METRIC_HEADER, &rows)?;
    write_jsonl(&dir.join("predictions.jsonl"), &predictions)?;
    write_csv(&dir.join("alignment.csv"), &ALIGNMENT_HEADER, &analyses.alignment)?;
    write_csv(&dir.join("probe.csv"), &PROBE_HEADER, &analyses.probes)?;
    let record = RunRecord {
        run_id: run_id.clone(),
        config_hash: cfg.config_hash(),
        seed,
        toolkit_version: crate::VERSION.to_string(),
        status: "complete".into(),
        vocab_size: vocab.len(),
        vocab_hash: vocab.hash(),
        param_count: model_cfg.param_count(),
        final_stage: final_stage.to_string(),
    };
    let json = serde_json::to_string_pretty(&record).expect("record serializes") + "\n";
    fs::write(dir.join("run.json"), json).map_err(|e| CoreError::io(dir.join("run.json"), e))?;
    log(&format!("{run_id} seed {seed}: finished in {:.0}s", start.elapsed().as_secs_f64()));
    Ok(record)
}

/// The cached record of a completed seed run with the same run id.
pub fn cached_run(dir: &Path, run_id: &str) -> Option<RunRecord> {
    let text = fs::read_to_string(dir.join("run.json")).ok()?;
    let r: RunRecord = serde_json::from_str(&text).ok()?;
    (r.status == "complete" && r.run_id == run_id).then_some(r)
}

/// Contrasts reported for a config.
pub fn default_contrasts(cfg: &ExperimentConfig) -> Vec<ContrastSpec> {
    let m = |name: &str, stage: &str, a: SubsetId, b: SubsetId| ContrastSpec {
        name: name.into(),
        source: ContrastSource::Metrics { stage: stage.into(), question_family: "qa".into() },
        metric: "em".into(),
        a: a.as_str().into(),
        b: b.as_str().into(),
    };
    let mut out = match cfg.training.protocol {
        Protocol::TwoStage => vec![
            m("stage1_consistency", STAGE1, SubsetId::D1consQA1, SubsetId::D2inconsQA2),
            m("stage2_iml", STAGE2, SubsetId::D5cons, SubsetId::D6cons),
        ],
        Protocol::Joint => vec![
            m("joint_consistency", JOINT, SubsetId::D1consQA1, SubsetId::D2inconsQA2),
            m("joint_iml", JOINT, SubsetId::D5cons, SubsetId::D6cons),
        ],
    };
    for metric in &cfg.analysis.alignment_metrics {
        out.push(ContrastSpec {
            name: format!("alignment_{}", metric.as_str()),
            source: ContrastSource::Alignment,
            metric: metric.as_str().into(),
            a: SubsetId::D5cons.as_str().into(),
            b: SubsetId::D6cons.as_str().into(),
        });
    }
    out
}

/// Aggregate every seed directory of a point into `<point>/report`.
pub fn report_point(point_dir: &Path, contrasts: &[ContrastSpec]) -> Result<Vec<PathBuf>> {
    let mut metrics: Vec<MetricRow> = Vec::new();
    let mut align: Vec<AlignmentRow> = Vec::new();
    let mut probes: Vec<ProbeRow> = Vec::new();
    let mut seeds: Vec<(u64, PathBuf)> = Vec::new();
    for entry in fs::read_dir(point_dir).map_err(|e| CoreError::io(point_dir, e))? {
        let entry = entry.map_err(|e| CoreError::io(point_dir, e))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(s) = name.strip_prefix("seed-").and_then(|s| s.parse::<u64>().ok()) {
            if entry.path().join("run.json").exists() {
                seeds.push((s, entry.path()));
            }
        }
    }
    seeds.sort();
    for (_, dir) in &seeds {
        metrics.extend(read_csv::<MetricRow>(&dir.join("metrics.csv"))?);
        align.extend(read_csv::<AlignmentRow>(&dir.join("alignment.csv"))?);
        probes.extend(read_csv::<ProbeRow>(&dir.join("probe.csv"))?);
    }
    let out = point_dir.join("report");
    let mut written = emit_report(&out, &metrics, &align, contrasts, 0)?;
    let probe_rows: Vec<MetricRow> = probes
        .iter()
        .map(|p| MetricRow {
            run_id: p.run_id.clone(),
            seed: p.seed,
            stage: "probe".into(),
            epoch: 0,
            subset: p.task.clone(),
            question_family: format!("layer{}", p.layer),
            metric: "test_acc".into(),
            value: p.test_acc,
            n: p.n_test,
        })
        .collect();
    let path = out.join("probe_summary.csv");
    write_csv(&path, &SUMMARY_HEADER, &summarize(&probe_rows))?;
    written.push(path);
    Ok(written)
}

/// Outcome of [`run_experiment`] for one sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointOutcome {
    pub point: String,
    pub records: Vec<RunRecord>,
    pub reused: usize,
    pub report: Vec<PathBuf>,
}

/// Run every point and seed (reusing completed seeds) and write reports.
/// A given `bundle` file is used for every seed and requires a sweep-free
/// config.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out: &Path,
    seeds: &[u64],
    bundle: Option<&Path>,
    log: &mut dyn FnMut(&str),
) -> Result<Vec<PointOutcome>> {
    cfg.validate()?;
    if bundle.is_some() && cfg.sweep.is_some() {
        return Err(CoreError::Config { field: "sweep".into(), message: "a fixed bundle cannot be combined with a sweep".into() });
    }
    let mut outcomes = Vec::new();
    for (point, pcfg) in cfg.points() {
        let run_id = pcfg.run_id();
        let mut records = Vec::new();
        let mut reused = 0;
        for &seed in seeds {
            let dir = seed_dir(out, &point, seed);
            if let Some(r) = cached_run(&dir, &run_id) {
                log(&format!("{run_id} seed {seed}: reusing completed run in {}", dir.display()));
                reused += 1;
                records.push(r);
                continue;
            }
            records.push(run_seed(&pcfg, seed, &dir, bundle, log)?);
        }
        let report = report_point(&out.join(&point), &default_contrasts(&pcfg))?;
        outcomes.push(PointOutcome { point, records, reused, report });
    }
    Ok(outcomes)
}

/// Load a checkpoint of either element type as `f64`, checking that it
/// belongs to `vocab`.
pub fn load_any_checkpoint(path: &Path, vocab: &Vocab) -> Result<ModelState<f64>> {
    let state = match load_checkpoint::<f32>(path) {
        Ok((s, hash, _)) => {
            check_vocab(path, &hash, vocab)?;
            s.cast()
        }
        Err(_) => {
            let (s, hash, _) = load_checkpoint::<f64>(path)?;
            check_vocab(path, &hash, vocab)?;
            s
        }
    };
    Ok(state)
}

fn check_vocab(path: &Path, hash: &str, vocab: &Vocab) -> Result<()> {
    if hash != vocab.hash() {
        return Err(CoreError::Model(format!("{}: checkpoint vocabulary does not match the config's corpus", path.display())));
    }
    Ok(())
}

/// Exact match of every evaluation family under a checkpoint.
pub fn eval_checkpoint(cfg: &ExperimentConfig, seed: u64, ckpt: &Path, out: &Path) -> Result<Vec<MetricRow>> {
    let bundle = forge_bundle(cfg, seed)?;
    let vocab = vocab_for(cfg, &bundle);
    let state = load_any_checkpoint(ckpt, &vocab)?;
    let run_id = cfg.run_id();
    let mut rows = Vec::new();
    let mut preds = Vec::new();
    for set in build_eval_sets(&bundle, &vocab) {
        let (em, p) = eval_subset(&state, &vocab, &set, cfg.training.max_new_tokens)?;
        rows.push(MetricRow {
            run_id: run_id.clone(),
            seed,
            stage: "eval".into(),
            epoch: state.step as usize,
            subset: set.subset.as_str().into(),
            question_family: set.family.clone(),
            metric: "em".into(),
            value: em,
            n: p.len(),
        });
        preds.extend(p.into_iter().map(|prediction| PredictionRecord {
            run_id: run_id.clone(),
            seed,
            stage: "eval".into(),
            epoch: state.step as usize,
            subset: set.subset.as_str().into(),
            question_family: set.family.clone(),
            prediction,
        }));
    }
    mkdir(out)?;
    write_csv(&out.join("metrics.csv"), &METRIC_HEADER, &rows)?;
    write_jsonl(&out.join("predictions.jsonl"), &preds)?;
    Ok(rows)
}

/// Alignment under a checkpoint for the config's subsets and metrics.
pub fn align_checkpoint(cfg: &ExperimentConfig, seed: u64, ckpt: &Path, out: &Path) -> Result<Vec<AlignmentRow>> {
    let bundle = forge_bundle(cfg, seed)?;
    let vocab = vocab_for(cfg, &bundle);
    let state = load_any_checkpoint(ckpt, &vocab)?;
    let run_id = cfg.run_id();
    let mut a = Analyses::new(cfg, &bundle, &vocab, &run_id, seed)?;
    if a.groups.is_empty() {
        return Err(CoreError::Analysis("no alignment subsets with definitions in this corpus".into()));
    }
    a.align(&state, state.step as usize)?;
    mkdir(out)?;
    write_csv(&out.join("alignment.csv"), &ALIGNMENT_HEADER, &a.alignment)?;
    Ok(a.alignment)
}

/// Probes under a checkpoint for the config's tasks.
pub fn probe_checkpoint(cfg: &ExperimentConfig, seed: u64, ckpt: &Path, out: &Path) -> Result<Vec<ProbeRow>> {
    let bundle = forge_bundle(cfg, seed)?;
    let vocab = vocab_for(cfg, &bundle);
    let state = load_any_checkpoint(ckpt, &vocab)?;
    let run_id = cfg.run_id();
    let mut probe_only = cfg.clone();
    probe_only.analysis.alignment_metrics.clear();
    let mut a = Analyses::new(&probe_only, &bundle, &vocab, &run_id, seed)?;
    a.probe(&state)?;
    mkdir(out)?;
    write_csv(&out.join("probe.csv"), &PROBE_HEADER, &a.probes)?;
    Ok(a.probes)
}

/// Write the bundle and vocabulary of every point and seed without training.
pub fn forge_experiment(cfg: &ExperimentConfig, out: &Path, seeds: &[u64]) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let mut written = Vec::new();
    for (point, pcfg) in cfg.points() {
        for &seed in seeds {
            let dir = seed_dir(out, &point, seed);
            mkdir(&dir)?;
            let bundle = forge_bundle(&pcfg, seed)?;
            let path = dir.join("bundle.jsonl");
            write_bundle(&bundle, &path)?;
            vocab_for(&pcfg, &bundle).save(&dir.join("vocab.jsonl"))?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Regenerate the reports of every point directory under `out`.
pub fn report_experiment(out: &Path) -> Result<Vec<PathBuf>> {
    let mut points: Vec<PathBuf> = Vec::new();
    for entry in fs::read_dir(out).map_err(|e| CoreError::io(out, e))? {
        let path = entry.map_err(|e| CoreError::io(out, e))?.path();
        if path.is_dir() && point_config(&path).is_some() {
            points.push(path);
        }
    }
    if points.is_empty() {
        return Err(CoreError::Analysis(format!("{}: no completed runs found", out.display())));
    }
    points.sort();
    let mut written = Vec::new();
    for p in points {
        let cfg = point_config(&p).expect("checked above")?;
        written.extend(report_point(&p, &default_contrasts(&cfg))?);
    }
    Ok(written)
}

/// Config of the first completed seed directory under a point directory.
fn point_config(point_dir: &Path) -> Option<Result<ExperimentConfig>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(point_dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("run.json").exists() && p.join("config.toml").exists())
        .collect();
    dirs.sort();
    dirs.first().map(|d| ExperimentConfig::load(&d.join("config.toml")))
}
