//! Training protocols and exact-match evaluation.

use std::collections::BTreeMap;

use iml_numerics::{Graph, Real};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::forge::{DatasetBundle, DocKind, Split, SubsetId};
use crate::model::{batch_targets, forward_graph, generate_greedy_batch, ModelState};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::rng::{keys, stream};
use crate::tokenizer::{TokenizedDoc, Vocab, EOD};

/// True iff the trimmed prediction equals any trimmed gold (case-sensitive).
pub fn exact_match(predicted: &str, gold: &[String]) -> bool {
    let p = predicted.trim();
    gold.iter().any(|g| g.trim() == p)
}

/// Held-out prompts of one `(subset, family)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub subset: SubsetId,
    pub split: Split,
    /// `qa`, or `attribution.<template>` / `attribution_qa.<template>`.
    pub family: String,
    pub prompts: Vec<Vec<u32>>,
    pub prompt_texts: Vec<String>,
    pub golds: Vec<Vec<String>>,
}

fn family_of(kind: DocKind, question_kind: Option<&str>) -> Option<String> {
    match kind {
        DocKind::Question => Some("qa".to_string()),
        DocKind::Attribution | DocKind::AttributionQa => {
            Some(format!("{}.{}", kind.as_str(), question_kind.unwrap_or("default")))
        }
        DocKind::Definition | DocKind::Qa => None,
    }
}

/// Every evaluation family of a bundle, in order of first appearance.
pub fn build_eval_sets(bundle: &DatasetBundle, vocab: &Vocab) -> Vec<EvalSet> {
    let mut order: Vec<(SubsetId, String)> = Vec::new();
    let mut sets: BTreeMap<(SubsetId, String), EvalSet> = BTreeMap::new();
    for d in &bundle.documents {
        let Some(family) = family_of(d.kind, d.question_kind.as_deref()) else { continue };
        let key = (d.subset, family.clone());
        let set = sets.entry(key.clone()).or_insert_with(|| {
            order.push(key.clone());
            EvalSet {
                subset: d.subset,
                split: d.split,
                family,
                prompts: Vec::new(),
                prompt_texts: Vec::new(),
                golds: Vec::new(),
            }
        });
        set.prompts.push(vocab.encode_text(&d.text));
        set.prompt_texts.push(d.text.clone());
        set.golds.push(d.gold_answers.clone().unwrap_or_default());
    }
    order.into_iter().map(|k| sets.remove(&k).expect("set recorded")).collect()
}

/// One prediction of an evaluation pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub prompt: String,
    pub prediction: String,
    pub gold_answers: Vec<String>,
    pub correct: bool,
}

/// Greedy-decode every prompt and score exact match.
pub fn eval_subset<T: Real>(
    state: &ModelState<T>,
    vocab: &Vocab,
    set: &EvalSet,
    max_new: usize,
) -> Result<(f64, Vec<Prediction>)> {
    if set.prompts.is_empty() {
        return Err(CoreError::Training(format!("empty eval set {} {}", set.subset, set.family)));
    }
    let outs = generate_greedy_batch(state, &set.prompts, max_new, EOD)?;
    let mut correct = 0usize;
    let mut preds = Vec::with_capacity(outs.len());
    for ((out, prompt), gold) in outs.iter().zip(&set.prompt_texts).zip(&set.golds) {
        let prediction = vocab.decode(out);
        let ok = exact_match(&prediction, gold);
        correct += ok as usize;
        preds.push(Prediction { prompt: prompt.clone(), prediction, gold_answers: gold.clone(), correct: ok });
    }
    Ok((correct as f64 / preds.len() as f64, preds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub min_delta: f64,
    pub patience: usize,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self { min_delta: 1e-4, patience: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub label: String,
    pub epochs: usize,
    pub batch_size: usize,
    /// Evaluate after every `eval_every` epochs and always after the last;
    /// 0 evaluates only after the last epoch.
    pub eval_every: usize,
    /// Distinguishes the shuffle streams of different stages.
    pub shuffle_key: u64,
    /// Fail if a QA document reaches the batch stream.
    pub definitions_only: bool,
    pub early_stop: Option<EarlyStop>,
}

impl StageSpec {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CoreError::Training(format!("stage {}: epochs and batch size must be >= 1", self.label)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub seed: u64,
    pub stage: String,
    pub epoch: usize,
    pub subset: String,
    pub question_family: String,
    pub metric: String,
    pub value: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub run_id: String,
    pub seed: u64,
    pub stage: String,
    pub epoch: usize,
    pub subset: String,
    pub question_family: String,
    #[serde(flatten)]
    pub prediction: Prediction,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
    /// Predictions of the final evaluation of the stage.
    pub predictions: Vec<PredictionRecord>,
}

impl EvalReport {
    pub fn extend(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
        self.predictions.extend(other.predictions);
    }

    /// Value of `metric` for `(stage, subset, family)` at the last epoch
    /// it was recorded.
    pub fn last(&self, stage: &str, subset: SubsetId, family: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .filter(|r| r.stage == stage && r.subset == subset.as_str() && r.question_family == family && r.metric == metric)
            .max_by_key(|r| r.epoch)
            .map(|r| r.value)
    }
}

/// Passed to the per-epoch hook after evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochEnd<'a> {
    pub stage: &'a str,
    pub epoch: usize,
    /// True for the final epoch of the stage (including early stops).
    pub last: bool,
}

pub type EpochHook<'h, T> = dyn FnMut(EpochEnd<'_>, &ModelState<T>, &Optimizer) -> Result<()> + 'h;

pub struct RunContext<'a> {
    pub run_id: &'a str,
    pub seed: u64,
    pub vocab: &'a Vocab,
    pub eval_sets: &'a [EvalSet],
    pub max_new_tokens: usize,
}

/// Optimizer step on one batch; returns each document's mean token loss.
pub fn train_step<T: Real>(state: &mut ModelState<T>, opt: &mut Optimizer, docs: &[&TokenizedDoc]) -> Result<Vec<f64>> {
    let (ids, len, targets, weights) = batch_targets(docs)?;
    let mut g = Graph::new();
    let f = forward_graph(&mut g, state, &ids, docs.len(), len, true)?;
    let loss = g.cross_entropy_weighted(f.logits, &targets, &weights)?;
    let rows = g.cross_entropy_rows(loss).expect("cross-entropy node");
    let grads = g.backward(loss)?;
    let per_param: Vec<Vec<T>> =
        f.params.iter().zip(&state.params).map(|(v, p)| grads.get_or_zeros(*v, p.len())).collect();
    drop(g);
    let names = state.param_names();
    opt.step(&mut state.params, &per_param, &names)?;
    state.step += 1;
    let mut losses = Vec::with_capacity(docs.len());
    for (b, d) in docs.iter().enumerate() {
        let n = d.len() - 1;
        let s: f64 = rows[b * len..b * len + n].iter().map(|v| v.as_f64()).sum();
        losses.push(s / n as f64);
    }
    Ok(losses)
}

fn evaluate_all<T: Real>(
    state: &ModelState<T>,
    ctx: &RunContext,
    stage: &str,
    epoch: usize,
    keep_predictions: bool,
    report: &mut EvalReport,
) -> Result<()> {
    for set in ctx.eval_sets {
        let (em, preds) = eval_subset(state, ctx.vocab, set, ctx.max_new_tokens)?;
        report.rows.push(MetricRow {
            run_id: ctx.run_id.to_string(),
            seed: ctx.seed,
            stage: stage.to_string(),
            epoch,
            subset: set.subset.as_str().to_string(),
            question_family: set.family.clone(),
            metric: "em".into(),
            value: em,
            n: preds.len(),
        });
        if keep_predictions {
            report.predictions.extend(preds.into_iter().map(|p| PredictionRecord {
                run_id: ctx.run_id.to_string(),
                seed: ctx.seed,
                stage: stage.to_string(),
                epoch,
                subset: set.subset.as_str().to_string(),
                question_family: set.family.clone(),
                prediction: p,
            }));
        }
    }
    Ok(())
}

/// Train for `spec.epochs` epochs over `docs` with per-epoch shuffling,
/// logging per-(subset, kind) train loss and evaluating every registered
/// set. `on_epoch` runs after each epoch's evaluation.
pub fn run_stage<T: Real>(
    state: &mut ModelState<T>,
    opt: &mut Optimizer,
    docs: &[&TokenizedDoc],
    spec: &StageSpec,
    ctx: &RunContext,
    on_epoch: &mut EpochHook<'_, T>,
) -> Result<EvalReport> {
    spec.validate()?;
    if docs.is_empty() {
        return Err(CoreError::Training(format!("stage {} has no training documents", spec.label)));
    }
    if spec.definitions_only {
        if let Some(d) = docs.iter().find(|d| d.kind != DocKind::Definition) {
            return Err(CoreError::Training(format!(
                "stage {} admits definitions only, got a {} document",
                spec.label,
                d.kind.as_str()
            )));
        }
    }
    let mut report = EvalReport::default();
    let mut history: Vec<f64> = Vec::new();
    let mut order: Vec<usize> = (0..docs.len()).collect();
    for epoch in 1..=spec.epochs {
        let mut rng = stream(ctx.seed, keys::SHUFFLE_BASE + spec.shuffle_key * 1_000_000 + epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut sums: BTreeMap<(SubsetId, DocKind), (f64, usize)> = BTreeMap::new();
        let mut steps = 0usize;
        for chunk in order.chunks(spec.batch_size) {
            let batch: Vec<&TokenizedDoc> = chunk.iter().map(|&i| docs[i]).collect();
            let losses = train_step(state, opt, &batch)?;
            steps += 1;
            for (d, l) in batch.iter().zip(losses) {
                let e = sums.entry((d.subset, d.kind)).or_insert((0.0, 0));
                e.0 += l;
                e.1 += 1;
            }
        }
        let row = |subset: &str, family: &str, metric: &str, value: f64, n: usize| MetricRow {
            run_id: ctx.run_id.to_string(),
            seed: ctx.seed,
            stage: spec.label.clone(),
            epoch,
            subset: subset.to_string(),
            question_family: family.to_string(),
            metric: metric.to_string(),
            value,
            n,
        };
        let (mut total, mut count) = (0.0, 0);
        for ((subset, kind), (s, n)) in &sums {
            report.rows.push(row(subset.as_str(), kind.as_str(), "train_loss", s / *n as f64, *n));
            total += s;
            count += n;
        }
        let epoch_loss = total / count as f64;
        report.rows.push(row("all", "all", "train_loss", epoch_loss, count));
        report.rows.push(row("all", "all", "steps", steps as f64, count));
        history.push(epoch_loss);

        let converged = spec.early_stop.as_ref().is_some_and(|es| {
            history.len() > es.patience && history[history.len() - 1 - es.patience] - epoch_loss < es.min_delta
        });
        let last = epoch == spec.epochs || converged;
        if last || (spec.eval_every > 0 && epoch % spec.eval_every == 0) {
            evaluate_all(state, ctx, &spec.label, epoch, last, &mut report)?;
        }
        on_epoch(EpochEnd { stage: &spec.label, epoch, last }, state, opt)?;
        if converged {
            break;
        }
    }
    Ok(report)
}

/// Stage 1 on `x1`, then stage 2 on `x2` from the resulting weights with a
/// fresh optimizer. An empty `x2` skips the second stage.
#[allow(clippy::too_many_arguments)]
pub fn run_two_stage<T: Real>(
    state: &mut ModelState<T>,
    opt_config: &OptimizerConfig,
    x1: &[&TokenizedDoc],
    x2: &[&TokenizedDoc],
    stage1: &StageSpec,
    stage2: &StageSpec,
    ctx: &RunContext,
    on_epoch: &mut EpochHook<'_, T>,
) -> Result<(EvalReport, EvalReport)> {
    let shapes: Vec<Vec<usize>> = state.params.iter().map(|p| p.shape().to_vec()).collect();
    let mut opt = Optimizer::new(opt_config.clone(), shapes.clone());
    let r1 = run_stage(state, &mut opt, x1, stage1, ctx, on_epoch)?;
    if x2.is_empty() {
        return Ok((r1, EvalReport::default()));
    }
    let mut opt = Optimizer::new(opt_config.clone(), shapes);
    let r2 = run_stage(state, &mut opt, x2, stage2, ctx, on_epoch)?;
    Ok((r1, r2))
}

/// One stage over the union of both stages' training documents.
pub fn run_joint<T: Real>(
    state: &mut ModelState<T>,
    opt_config: &OptimizerConfig,
    x1: &[&TokenizedDoc],
    x2: &[&TokenizedDoc],
    spec: &StageSpec,
    ctx: &RunContext,
    on_epoch: &mut EpochHook<'_, T>,
) -> Result<EvalReport> {
    let shapes = state.params.iter().map(|p| p.shape().to_vec()).collect();
    let mut opt = Optimizer::new(opt_config.clone(), shapes);
    let union: Vec<&TokenizedDoc> = x1.iter().chain(x2).copied().collect();
    run_stage(state, &mut opt, &union, spec, ctx, on_epoch)
}

/// Joint runs from fresh weights, one per batch size, each stopped on a
/// train-loss plateau. Stage labels become `joint-b<size>`.
#[allow(clippy::too_many_arguments)]
pub fn batch_size_sweep<T: Real>(
    init: &dyn Fn() -> Result<ModelState<T>>,
    opt_config: &OptimizerConfig,
    x1: &[&TokenizedDoc],
    x2: &[&TokenizedDoc],
    base: &StageSpec,
    sizes: &[usize],
    ctx: &RunContext,
) -> Result<Vec<(usize, EvalReport)>> {
    let n = x1.len() + x2.len();
    if let Some(&s) = sizes.iter().find(|&&s| s == 0 || s > n) {
        return Err(CoreError::Training(format!("batch size {s} outside 1..={n}")));
    }
    let mut out = Vec::new();
    for &size in sizes {
        let mut state = init()?;
        let spec = StageSpec {
            label: format!("{}-b{size}", base.label),
            batch_size: size,
            early_stop: Some(base.early_stop.clone().unwrap_or_default()),
            ..base.clone()
        };
        let report = run_joint(&mut state, opt_config, x1, x2, &spec, ctx, &mut |_, _, _| Ok(()))?;
        out.push((size, report));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_match_examples() {
        assert!(exact_match("Queen", &["Queen".to_string()]));
        assert!(exact_match(" Queen ", &["Queen".to_string()]));
        assert!(!exact_match("France", &["Italy".to_string(), "Spain".to_string()]));
        assert!(!exact_match("queen", &["Queen".to_string()]));
        assert!(!exact_match("", &[]));
    }
}
