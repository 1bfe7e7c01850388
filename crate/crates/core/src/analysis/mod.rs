//! Gradient alignment, gradient norms, trace of covariance, probes and
//! seed statistics.

pub mod probe;
pub mod report;
pub mod stats;

use std::collections::BTreeMap;

use iml_numerics::Real;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::forge::{DatasetBundle, DocKind, Document, Stage, SubsetId};
use crate::model::{doc_grad, ModelState};
use crate::tokenizer::{encode_doc, TokenizedDoc, Vocab};

pub use probe::{alias_disjoint_split, train_probe, ProbeConfig, ProbeReport, ProbeSample, ProbeSplit, ProbeTask};
pub use stats::{paired_permutation, seed_stats, Contrast, SeedStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMetric {
    InnerProduct,
    Cosine,
    SquaredL2,
}

impl AlignMetric {
    pub const ALL: [AlignMetric; 3] = [AlignMetric::InnerProduct, AlignMetric::Cosine, AlignMetric::SquaredL2];

    pub fn as_str(self) -> &'static str {
        match self {
            AlignMetric::InnerProduct => "inner_product",
            AlignMetric::Cosine => "cosine",
            AlignMetric::SquaredL2 => "squared_l2",
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// ρ(a, b). Cosine of a zero vector is defined as 0.
pub fn rho(metric: AlignMetric, a: &[f64], b: &[f64]) -> f64 {
    match metric {
        AlignMetric::InnerProduct => dot(a, b),
        AlignMetric::Cosine => {
            let n = (dot(a, a) * dot(b, b)).sqrt();
            if n == 0.0 {
                0.0
            } else {
                dot(a, b) / n
            }
        }
        AlignMetric::SquaredL2 => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub subset: SubsetId,
    pub metric: AlignMetric,
    /// Number of definitions.
    pub n: usize,
    /// Questions per definition.
    pub k: usize,
    pub mean: f64,
    /// `raw[i][j] = ρ(∇Def_i, ∇QA_ij)`.
    pub raw: Vec<Vec<f64>>,
    pub epoch: usize,
}

/// One definition and its questions, tokenized for gradient computation.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentGroup {
    pub definition: TokenizedDoc,
    pub questions: Vec<TokenizedDoc>,
}

fn as_training_doc(d: &Document) -> Document {
    let mut out = d.clone();
    out.text = d.with_answer();
    out.kind = DocKind::Qa;
    out.gold_answers = d.gold_answers.as_ref().and_then(|g| g.first().cloned()).map(|a| vec![a]);
    out
}

/// Definition/question groups of `subset`: first-stage subsets pair each
/// definition with its training QA, second-stage subsets with their
/// held-out questions completed by the first gold answer.
pub fn alignment_groups(bundle: &DatasetBundle, vocab: &Vocab, subset: SubsetId, max_len: usize) -> Result<Vec<AlignmentGroup>> {
    let mut defs: Vec<(u32, &Document)> = Vec::new();
    let mut qs: BTreeMap<u32, Vec<Document>> = BTreeMap::new();
    for d in bundle.documents.iter().filter(|d| d.subset == subset) {
        match d.kind {
            DocKind::Definition => defs.push((d.entity_id, d)),
            DocKind::Qa if d.stage == Stage::X1 => qs.entry(d.entity_id).or_default().push(d.clone()),
            DocKind::Question if d.stage == Stage::X2 => qs.entry(d.entity_id).or_default().push(as_training_doc(d)),
            _ => {}
        }
    }
    if defs.is_empty() {
        return Err(CoreError::Analysis(format!("subset {subset} has no definitions")));
    }
    let mut out = Vec::with_capacity(defs.len());
    for (id, def) in defs {
        let questions = qs.remove(&id).unwrap_or_default();
        if questions.is_empty() {
            return Err(CoreError::Analysis(format!("definition of entity {id} in {subset} has no questions")));
        }
        out.push(AlignmentGroup {
            definition: encode_doc(vocab, def, max_len)?,
            questions: questions.iter().map(|q| encode_doc(vocab, q, max_len)).collect::<Result<_>>()?,
        });
    }
    Ok(out)
}

fn to_f64<T: Real>(v: Vec<T>) -> Vec<f64> {
    v.into_iter().map(|x| x.as_f64()).collect()
}

/// `E_D[ρ] = (1/n) Σ_i (1/k) Σ_j ρ(∇Def_i, ∇QA_ij)` for every requested
/// metric. Gradients are computed one at a time, so at most one definition
/// and one question gradient are held.
pub fn alignment<T: Real>(
    state: &ModelState<T>,
    subset: SubsetId,
    groups: &[AlignmentGroup],
    metrics: &[AlignMetric],
    epoch: usize,
) -> Result<Vec<AlignmentReport>> {
    let k = groups.first().map_or(0, |g| g.questions.len());
    if groups.is_empty() || k == 0 {
        return Err(CoreError::Analysis(format!("no definition/question pairs for {subset}")));
    }
    if let Some(g) = groups.iter().find(|g| g.questions.len() != k) {
        return Err(CoreError::Analysis(format!(
            "{subset}: definitions have differing question counts ({k} and {})",
            g.questions.len()
        )));
    }
    let mut raw: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(groups.len()); metrics.len()];
    for g in groups {
        let d = to_f64(doc_grad(state, &g.definition)?);
        let mut rows = vec![Vec::with_capacity(k); metrics.len()];
        for q in &g.questions {
            let qg = to_f64(doc_grad(state, q)?);
            for (m, row) in metrics.iter().zip(rows.iter_mut()) {
                row.push(rho(*m, &d, &qg));
            }
        }
        for (r, row) in raw.iter_mut().zip(rows) {
            r.push(row);
        }
    }
    Ok(metrics
        .iter()
        .zip(raw)
        .map(|(&metric, raw)| AlignmentReport { subset, metric, n: groups.len(), k, mean: double_mean(&raw), raw, epoch })
        .collect())
}

fn double_mean(raw: &[Vec<f64>]) -> f64 {
    raw.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).sum::<f64>() / raw.len() as f64
}

/// L2 norm of each document's gradient.
pub fn grad_norms<T: Real>(state: &ModelState<T>, docs: &[&TokenizedDoc]) -> Result<Vec<f64>> {
    docs.iter()
        .map(|d| Ok(doc_grad(state, d)?.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()))
        .collect()
}

/// `m × p` matrix of flattened per-document gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl GradientMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let p = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || rows.iter().any(|r| r.len() != p) {
            return Err(CoreError::Analysis("gradient matrix needs at least one row and equal widths".into()));
        }
        Ok(Self { rows })
    }

    pub fn from_docs<T: Real>(state: &ModelState<T>, docs: &[&TokenizedDoc]) -> Result<Self> {
        Self::new(docs.iter().map(|d| Ok(to_f64(doc_grad(state, d)?))).collect::<Result<_>>()?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceCov {
    /// `Σ_i Var(G[:, i])` with population variance.
    pub by_columns: f64,
    /// `(1 / 2m²) Σ_j Σ_k ‖G_j − G_k‖²`.
    pub by_pairs: f64,
}

/// Trace of the gradient covariance computed both ways; errors if the two
/// disagree beyond `1e-9` relative.
pub fn trace_cov(g: &GradientMatrix) -> Result<TraceCov> {
    let m = g.rows.len();
    let p = g.rows[0].len();
    let mut by_columns = 0.0;
    for i in 0..p {
        let mean = g.rows.iter().map(|r| r[i]).sum::<f64>() / m as f64;
        by_columns += g.rows.iter().map(|r| (r[i] - mean).powi(2)).sum::<f64>() / m as f64;
    }
    let mut pairs = 0.0;
    for a in &g.rows {
        for b in &g.rows {
            pairs += rho(AlignMetric::SquaredL2, a, b);
        }
    }
    let by_pairs = pairs / (2.0 * (m * m) as f64);
    let scale = by_columns.abs().max(by_pairs.abs());
    if scale > 0.0 && (by_columns - by_pairs).abs() / scale > 1e-9 {
        return Err(CoreError::Analysis(format!("trace formulas disagree: {by_columns} vs {by_pairs}")));
    }
    Ok(TraceCov { by_columns, by_pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rho_examples() {
        let a = [1.0, 1.0];
        let b = [1.0, 0.0];
        assert!((rho(AlignMetric::Cosine, &a, &b) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(rho(AlignMetric::InnerProduct, &[0.0, 2.0], &[3.0, 0.0]), 0.0);
        assert!((rho(AlignMetric::Cosine, &[0.3, -2.0], &[0.3, -2.0]) - 1.0).abs() < 1e-15);
        assert_eq!(rho(AlignMetric::SquaredL2, &a, &b), 1.0);
    }

    #[test]
    fn trace_cov_examples() {
        let t = trace_cov(&GradientMatrix::new(vec![vec![1.0], vec![2.0], vec![3.0]]).unwrap()).unwrap();
        assert_eq!(t.by_pairs, 2.0 / 3.0);
        assert!((t.by_columns - 2.0 / 3.0).abs() < 1e-15);
        let t = trace_cov(&GradientMatrix::new(vec![vec![1.0, 5.0]; 4]).unwrap()).unwrap();
        assert_eq!((t.by_columns, t.by_pairs), (0.0, 0.0));
        let t = trace_cov(&GradientMatrix::new(vec![vec![7.0, -1.0]]).unwrap()).unwrap();
        assert_eq!((t.by_columns, t.by_pairs), (0.0, 0.0));
    }
}
