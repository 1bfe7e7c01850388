use iml_core::forge::{gen_set_inclusion, DatasetBundle, ForgeConfig, SetInclusionSpec, Stage};
use iml_core::model::{init_model, ModelConfig, ModelState, Positional, Precision};
use iml_core::optim::{Optimizer, OptimizerConfig};
use iml_core::pipeline::tokenize_stages;
use iml_core::tokenizer::{build_set_inclusion_vocab, TokenizedDoc, Vocab};
use iml_core::train::*;

struct Fixture {
    bundle: DatasetBundle,
    vocab: Vocab,
    x1: Vec<TokenizedDoc>,
    x2: Vec<TokenizedDoc>,
}

fn fixture() -> Fixture {
    let spec = SetInclusionSpec { variables: 40, test_questions_per_variable: 4, ..Default::default() };
    let bundle = gen_set_inclusion(&ForgeConfig::set_inclusion(spec), 2).unwrap();
    let vocab = build_set_inclusion_vocab(&bundle, 100);
    let (x1, x2) = tokenize_stages(&bundle, &vocab, 16).unwrap();
    Fixture { bundle, vocab, x1, x2 }
}

fn model(vocab: &Vocab) -> ModelState<f32> {
    let cfg = ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: vocab.len(),
        max_context_length: 16,
        positional: Positional::LearnedAbsolute,
        init_scale: 1.0,
        precision: Precision::F32,
        rotary_base: 10000.0,
    };
    init_model(&cfg, 7).unwrap()
}

fn spec(label: &str, epochs: usize, defs_only: bool) -> StageSpec {
    StageSpec { label: label.into(), epochs, batch_size: 32, eval_every: 1, shuffle_key: 1, definitions_only: defs_only, early_stop: None }
}

fn adam() -> OptimizerConfig {
    OptimizerConfig::Adamw { lr: 3e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
}

fn optimizer(state: &ModelState<f32>) -> Optimizer {
    Optimizer::new(adam(), state.params.iter().map(|p| p.shape().to_vec()).collect())
}

#[test]
fn two_stage_run_logs_and_is_deterministic() {
    let f = fixture();
    let sets = build_eval_sets(&f.bundle, &f.vocab);
    let ctx = RunContext { run_id: "t", seed: 3, vocab: &f.vocab, eval_sets: &sets, max_new_tokens: 2 };
    let x1: Vec<&TokenizedDoc> = f.x1.iter().collect();
    let x2: Vec<&TokenizedDoc> = f.x2.iter().collect();
    assert!(x2.iter().all(|d| d.stage == Stage::X2));
    let run = || {
        let mut st = model(&f.vocab);
        let mut seen = Vec::new();
        let (r1, r2) = run_two_stage(&mut st, &adam(), &x1, &x2, &spec("stage1", 3, false), &spec("stage2", 2, true), &ctx, &mut |e, _, _| {
            seen.push((e.stage.to_string(), e.epoch, e.last));
            Ok(())
        })
        .unwrap();
        (st, r1, r2, seen)
    };
    let (a, r1, r2, seen) = run();
    let (b, r1b, r2b, _) = run();
    assert_eq!(a.params, b.params);
    assert_eq!(r1.rows, r1b.rows);
    assert_eq!(r2.predictions, r2b.predictions);
    assert_eq!(seen, vec![
        ("stage1".into(), 1, false), ("stage1".into(), 2, false), ("stage1".into(), 3, true),
        ("stage2".into(), 1, false), ("stage2".into(), 2, true),
    ]);
    // Loss decreases over stage 1 and every eval set is scored each epoch.
    let loss: Vec<f64> = r1.rows.iter().filter(|r| r.subset == "all" && r.metric == "train_loss").map(|r| r.value).collect();
    assert!(loss[2] < loss[0], "{loss:?}");
    let em_rows = r1.rows.iter().filter(|r| r.metric == "em").count();
    assert_eq!(em_rows, 3 * sets.len());
    // Predictions only at the final epoch, and EM equals their mean.
    assert!(r2.predictions.iter().all(|p| p.epoch == 2 && p.stage == "stage2"));
    for set in &sets {
        let preds: Vec<_> = r2.predictions.iter().filter(|p| p.subset == set.subset.as_str() && p.question_family == set.family).collect();
        let em = preds.iter().filter(|p| p.prediction.correct).count() as f64 / preds.len() as f64;
        assert_eq!(r2.last("stage2", set.subset, &set.family, "em"), Some(em));
    }
    let steps: Vec<f64> = r2.rows.iter().filter(|r| r.metric == "steps").map(|r| r.value).collect();
    assert_eq!(steps, vec![(x2.len() as f64 / 32.0).ceil(); 2]);
}

#[test]
fn definitions_only_stage_rejects_qa() {
    let f = fixture();
    let ctx = RunContext { run_id: "t", seed: 0, vocab: &f.vocab, eval_sets: &[], max_new_tokens: 2 };
    let mut st = model(&f.vocab);
    let mut opt = optimizer(&st);
    let x1: Vec<&TokenizedDoc> = f.x1.iter().collect();
    let err = run_stage(&mut st, &mut opt, &x1, &spec("stage2", 1, true), &ctx, &mut |_, _, _| Ok(())).unwrap_err();
    assert!(err.to_string().contains("definitions only"), "{err}");
    let err = run_stage(&mut st, &mut opt, &[], &spec("s", 1, false), &ctx, &mut |_, _, _| Ok(())).unwrap_err();
    assert!(err.to_string().contains("no training documents"));
    let err = run_stage(&mut st, &mut opt, &x1, &spec("s", 0, false), &ctx, &mut |_, _, _| Ok(())).unwrap_err();
    assert!(err.to_string().contains(">= 1"));
}

#[test]
fn early_stop_ends_a_plateaued_stage() {
    let f = fixture();
    let ctx = RunContext { run_id: "t", seed: 0, vocab: &f.vocab, eval_sets: &[], max_new_tokens: 2 };
    let mut st = model(&f.vocab);
    // A zero learning rate leaves the loss flat, so patience runs out.
    let mut opt = Optimizer::new(OptimizerConfig::Sgd { lr: 0.0, weight_decay: 0.0 }, st.params.iter().map(|p| p.shape().to_vec()).collect());
    let x2: Vec<&TokenizedDoc> = f.x2.iter().collect();
    let s = StageSpec { early_stop: Some(EarlyStop { min_delta: 1e-4, patience: 2 }), ..spec("s", 50, true) };
    let mut last = None;
    run_stage(&mut st, &mut opt, &x2, &s, &ctx, &mut |e, _, _| {
        last = Some((e.epoch, e.last));
        Ok(())
    })
    .unwrap();
    assert_eq!(last, Some((3, true)));
}

#[test]
fn batch_size_sweep_validates_and_labels() {
    let f = fixture();
    let ctx = RunContext { run_id: "t", seed: 0, vocab: &f.vocab, eval_sets: &[], max_new_tokens: 2 };
    let x1: Vec<&TokenizedDoc> = f.x1.iter().collect();
    let x2: Vec<&TokenizedDoc> = f.x2.iter().collect();
    let init = || Ok(model(&f.vocab));
    let base = spec("joint", 1, false);
    let n = x1.len() + x2.len();
    assert!(batch_size_sweep(&init, &adam(), &x1, &x2, &base, &[0], &ctx).is_err());
    assert!(batch_size_sweep(&init, &adam(), &x1, &x2, &base, &[n + 1], &ctx).is_err());
    let out = batch_size_sweep(&init, &adam(), &x1, &x2, &base, &[64, n], &ctx).unwrap();
    assert_eq!(out.len(), 2);
    assert!(out[0].1.rows.iter().all(|r| r.stage == "joint-b64"));
    let steps = out[1].1.rows.iter().find(|r| r.metric == "steps").unwrap();
    assert_eq!((steps.value, steps.n), (1.0, n));
}

#[test]
fn eval_subset_scores_predictions() {
    let f = fixture();
    let sets = build_eval_sets(&f.bundle, &f.vocab);
    let st = model(&f.vocab);
    let (em, preds) = eval_subset(&st, &f.vocab, &sets[0], 2).unwrap();
    assert_eq!(preds.len(), sets[0].prompts.len());
    let hits = preds.iter().filter(|p| exact_match(&p.prediction, &p.gold_answers)).count();
    assert_eq!(em, hits as f64 / preds.len() as f64);
    assert!(preds.iter().all(|p| p.correct == exact_match(&p.prediction, &p.gold_answers)));
    let empty = EvalSet { prompts: vec![], prompt_texts: vec![], golds: vec![], ..sets[0].clone() };
    assert!(eval_subset(&st, &f.vocab, &empty, 2).is_err());
}
