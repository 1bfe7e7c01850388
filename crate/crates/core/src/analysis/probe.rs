//! Logistic-regression probes on residual-stream activations.

use std::collections::{BTreeMap, BTreeSet};

use iml_numerics::Real;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::forge::{DatasetBundle, DocKind, Split, SubsetId};
use crate::model::{extract_activations, ModelState};
use crate::rng::{keys, stream};
use crate::tokenizer::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTask {
    /// Reliable-tag aliases against unreliable-tag aliases.
    TagPrediction,
    /// Defined aliases against aliases that never had a definition.
    DefinitionPresence,
}

impl ProbeTask {
    pub fn as_str(self) -> &'static str {
        match self {
            ProbeTask::TagPrediction => "tag_prediction",
            ProbeTask::DefinitionPresence => "definition_presence",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSample {
    pub alias: String,
    pub features: Vec<f64>,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub l2: f64,
    pub steps: usize,
    pub learning_rate: f64,
    /// Share of aliases (per class) held out for testing.
    pub test_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { l2: 1e-3, steps: 2000, learning_rate: 0.5, test_fraction: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSplit {
    pub train_aliases: Vec<String>,
    pub test_aliases: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: ProbeTask,
    pub layer: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    pub n_train: usize,
    pub n_test: usize,
    /// Majority-class share of the test set.
    pub chance: f64,
    /// Which samples were kept (question kind, alias token length).
    pub filter: String,
    pub split: ProbeSplit,
}

/// Split aliases into train and test sets, per class of the alias's
/// majority label, so that no alias appears on both sides.
pub fn alias_disjoint_split(samples: &[ProbeSample], test_fraction: f64, seed: u64) -> Result<ProbeSplit> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(CoreError::Analysis(format!("test fraction {test_fraction} outside [0, 1)")));
    }
    let mut votes: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for s in samples {
        let v = votes.entry(&s.alias).or_default();
        if s.label {
            v.1 += 1;
        } else {
            v.0 += 1;
        }
    }
    let mut rng = stream(seed, keys::PROBE);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for class in [false, true] {
        let mut aliases: Vec<&str> =
            votes.iter().filter(|(_, (f, t))| (t > f) == class).map(|(a, _)| *a).collect();
        aliases.shuffle(&mut rng);
        let n_test = (aliases.len() as f64 * test_fraction).round() as usize;
        test.extend(aliases[..n_test].iter().map(|a| a.to_string()));
        train.extend(aliases[n_test..].iter().map(|a| a.to_string()));
    }
    train.sort();
    test.sort();
    Ok(ProbeSplit { train_aliases: train, test_aliases: test })
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Fitted probe: standardization plus logistic weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticProbe {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogisticProbe {
    pub fn predict(&self, x: &[f64]) -> bool {
        let z: f64 = x
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .zip(&self.weights)
            .map(|(((v, m), s), w)| (v - m) / s * w)
            .sum::<f64>()
            + self.bias;
        z > 0.0
    }

    /// Full-batch gradient descent on mean logistic loss plus `l2/2 ‖w‖²`
    /// over standardized features.
    pub fn fit(xs: &[&[f64]], ys: &[bool], config: &ProbeConfig) -> Self {
        let p = xs[0].len();
        let n = xs.len() as f64;
        let mean: Vec<f64> = (0..p).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..p)
            .map(|j| {
                let sd = (xs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        let z: Vec<Vec<f64>> =
            xs.iter().map(|x| (0..p).map(|j| (x[j] - mean[j]) / scale[j]).collect()).collect();
        let mut w = vec![0.0; p];
        let mut b = 0.0;
        let mut gw = vec![0.0; p];
        for _ in 0..config.steps {
            gw.iter_mut().for_each(|g| *g = 0.0);
            let mut gb = 0.0;
            for (x, &y) in z.iter().zip(ys) {
                let logit: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
                let r = sigmoid(logit) - if y { 1.0 } else { 0.0 };
                for (g, xi) in gw.iter_mut().zip(x) {
                    *g += r * xi;
                }
                gb += r;
            }
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= config.learning_rate * (g / n + config.l2 * *wi);
            }
            b -= config.learning_rate * gb / n;
        }
        LogisticProbe { mean, scale, weights: w, bias: b }
    }
}

fn accuracy(probe: &LogisticProbe, samples: &[&ProbeSample]) -> f64 {
    let hits = samples.iter().filter(|s| probe.predict(&s.features) == s.label).count();
    hits as f64 / samples.len().max(1) as f64
}

/// Fit on the split's train aliases and score on its test aliases.
///
/// Fails if a test alias is used for fitting, if a class is missing from
/// the training side, or if feature widths differ.
pub fn train_probe(
    samples: &[ProbeSample],
    split: &ProbeSplit,
    config: &ProbeConfig,
    task: ProbeTask,
    layer: usize,
    filter: &str,
) -> Result<ProbeReport> {
    let train_set: BTreeSet<&str> = split.train_aliases.iter().map(String::as_str).collect();
    let test_set: BTreeSet<&str> = split.test_aliases.iter().map(String::as_str).collect();
    if let Some(a) = train_set.intersection(&test_set).next() {
        return Err(CoreError::Analysis(format!("alias `{a}` is on both sides of the probe split")));
    }
    let train: Vec<&ProbeSample> = samples.iter().filter(|s| train_set.contains(s.alias.as_str())).collect();
    let test: Vec<&ProbeSample> = samples.iter().filter(|s| test_set.contains(s.alias.as_str())).collect();
    assert!(
        train.iter().all(|s| !test_set.contains(s.alias.as_str())),
        "probe fitting must not see test aliases"
    );
    for class in [false, true] {
        if !train.iter().any(|s| s.label == class) {
            return Err(CoreError::Analysis(format!("class {class} absent from probe training split")));
        }
    }
    if test.is_empty() {
        return Err(CoreError::Analysis("probe test split is empty".into()));
    }
    let p = train[0].features.len();
    if samples.iter().any(|s| s.features.len() != p) {
        return Err(CoreError::Analysis("probe features differ in width".into()));
    }
    let xs: Vec<&[f64]> = train.iter().map(|s| s.features.as_slice()).collect();
    let ys: Vec<bool> = train.iter().map(|s| s.label).collect();
    let probe = LogisticProbe::fit(&xs, &ys, config);
    let positives = test.iter().filter(|s| s.label).count() as f64 / test.len() as f64;
    Ok(ProbeReport {
        task,
        layer,
        train_acc: accuracy(&probe, &train),
        test_acc: accuracy(&probe, &test),
        n_train: train.len(),
        n_test: test.len(),
        chance: positives.max(1.0 - positives),
        filter: filter.to_string(),
        split: split.clone(),
    })
}

fn most_common<K: Ord + Clone>(items: impl Iterator<Item = K>) -> Option<K> {
    let mut counts: BTreeMap<K, usize> = BTreeMap::new();
    for k in items {
        *counts.entry(k).or_default() += 1;
    }
    // Ties go to the smallest key.
    counts.into_iter().fold(None, |best: Option<(K, usize)>, (k, c)| match best {
        Some((bk, bc)) if bc >= c => Some((bk, bc)),
        _ => Some((k, c)),
    }).map(|(k, _)| k)
}

/// Activations at the final prompt token of first-stage held-out questions
/// about D1/D2 (and QA3 for definition presence) aliases, filtered to one
/// question kind and one alias token length, with classes balanced by
/// subsampling aliases. Returns the samples and a filter descriptor.
pub fn probe_samples<T: Real>(
    state: &ModelState<T>,
    bundle: &DatasetBundle,
    vocab: &Vocab,
    task: ProbeTask,
    layer: usize,
    seed: u64,
) -> Result<(Vec<ProbeSample>, String)> {
    let label_of = |s: SubsetId| match (task, s) {
        (_, SubsetId::D1consQA1) => Some(true),
        (ProbeTask::TagPrediction, SubsetId::D2inconsQA2) => Some(false),
        (ProbeTask::DefinitionPresence, SubsetId::D2inconsQA2) => Some(true),
        (ProbeTask::DefinitionPresence, SubsetId::QA3) => Some(false),
        _ => None,
    };
    let docs: Vec<_> = bundle
        .documents
        .iter()
        .filter(|d| d.kind == DocKind::Question && d.split == Split::Val && d.alias.is_some())
        .filter(|d| label_of(d.subset).is_some())
        .collect();
    let kind = most_common(docs.iter().map(|d| d.question_kind.clone()))
        .ok_or_else(|| CoreError::Analysis("no first-stage held-out questions to probe".into()))?;
    let alias_len = |d: &&crate::forge::Document| vocab.encode_text(d.alias.as_deref().unwrap_or("")).len();
    let docs: Vec<_> = docs.into_iter().filter(|d| d.question_kind == kind).collect();
    let width = most_common(docs.iter().map(alias_len)).expect("non-empty after kind filter");
    let docs: Vec<_> = docs.into_iter().filter(|d| alias_len(d) == width).collect();

    let mut by_class: [BTreeSet<&str>; 2] = [BTreeSet::new(), BTreeSet::new()];
    for d in &docs {
        let label = label_of(d.subset).expect("filtered");
        by_class[label as usize].insert(d.alias.as_deref().expect("filtered"));
    }
    let keep = by_class[0].len().min(by_class[1].len());
    if keep == 0 {
        return Err(CoreError::Analysis(format!("{} probe has an empty class", task.as_str())));
    }
    let mut rng = stream(seed, keys::PROBE ^ 0x42);
    let mut kept: BTreeSet<&str> = BTreeSet::new();
    for class in &by_class {
        let mut v: Vec<&str> = class.iter().copied().collect();
        v.shuffle(&mut rng);
        kept.extend(v.into_iter().take(keep));
    }
    let mut samples = Vec::new();
    for d in docs {
        let alias = d.alias.as_deref().expect("filtered");
        if !kept.contains(alias) {
            continue;
        }
        let ids = vocab.encode_text(&d.text);
        let features = extract_activations(state, &ids, layer, ids.len() - 1)?;
        samples.push(ProbeSample {
            alias: alias.to_string(),
            features: features.into_iter().map(|x| x.as_f64()).collect(),
            label: label_of(d.subset).expect("filtered"),
        });
    }
    let filter = format!("question_kind={};alias_tokens={width}", kind.as_deref().unwrap_or("none"));
    Ok((samples, filter))
}
