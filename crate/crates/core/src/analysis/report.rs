//! CSV tables and SVG charts over per-seed results.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::stats::{paired_permutation, seed_stats};
use crate::error::{CoreError, Result};
use crate::train::MetricRow;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRow {
    pub run_id: String,
    pub seed: u64,
    pub epoch: usize,
    pub subset: String,
    pub metric: String,
    pub n: usize,
    pub k: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub run_id: String,
    pub seed: u64,
    pub task: String,
    pub layer: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run_id: String,
    pub stage: String,
    pub epoch: usize,
    pub subset: String,
    pub question_family: String,
    pub metric: String,
    pub n_seeds: usize,
    pub mean: f64,
    pub sem: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Where a contrast's per-seed values come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastSource {
    /// Metric rows of `stage`, at each seed's last recorded epoch.
    Metrics { stage: String, question_family: String },
    /// Alignment rows at each seed's last recorded epoch.
    Alignment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastSpec {
    pub name: String,
    pub source: ContrastSource,
    pub metric: String,
    /// Hypothesis: `a > b`.
    pub a: String,
    pub b: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastRow {
    pub name: String,
    pub metric: String,
    pub a: String,
    pub b: String,
    pub n_seeds: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub mean_diff: f64,
    pub p_value: f64,
    pub exact: bool,
}

pub const METRIC_HEADER: [&str; 9] = ["run_id", "seed", "stage", "epoch", "subset", "question_family", "metric", "value", "n"];
pub const ALIGNMENT_HEADER: [&str; 8] = ["run_id", "seed", "epoch", "subset", "metric", "n", "k", "value"];
pub const PROBE_HEADER: [&str; 8] = ["run_id", "seed", "task", "layer", "train_acc", "test_acc", "n_train", "n_test"];
pub const SUMMARY_HEADER: [&str; 11] =
    ["run_id", "stage", "epoch", "subset", "question_family", "metric", "n_seeds", "mean", "sem", "ci_low", "ci_high"];
pub const CONTRAST_HEADER: [&str; 10] =
    ["name", "metric", "a", "b", "n_seeds", "mean_a", "mean_b", "mean_diff", "p_value", "exact"];

/// CSV text with an explicit header, so empty tables still carry one.
pub fn to_csv<R: Serialize>(header: &[&str], rows: &[R]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(|e| CoreError::Analysis(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| CoreError::Analysis(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CoreError::Analysis(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_csv<R: Serialize>(path: &Path, header: &[&str], rows: &[R]) -> Result<()> {
    fs::write(path, to_csv(header, rows)?).map_err(|e| CoreError::io(path, e))
}

pub fn read_csv<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CoreError::Parse(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| CoreError::ParseAt { path: path.display().to_string(), line: i + 2, message: e.to_string() })
        })
        .collect()
}

/// Seed aggregates per `(stage, epoch, subset, family, metric)`.
pub fn summarize(rows: &[MetricRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, String, usize, String, String, String), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.run_id.clone(), r.stage.clone(), r.epoch, r.subset.clone(), r.question_family.clone(), r.metric.clone()))
            .or_default()
            .push(r.value);
    }
    groups
        .into_iter()
        .map(|((run_id, stage, epoch, subset, question_family, metric), v)| {
            let (mean, sem, lo, hi) = match seed_stats(&v) {
                Ok(s) => (s.mean, s.sem, s.ci_low, s.ci_high),
                Err(_) => (v[0], 0.0, v[0], v[0]),
            };
            SummaryRow { run_id, stage, epoch, subset, question_family, metric, n_seeds: v.len(), mean, sem, ci_low: lo, ci_high: hi }
        })
        .collect()
}

/// `seed -> value` at each seed's last epoch for one subset.
fn last_per_seed(rows: impl Iterator<Item = (u64, usize, f64)>) -> BTreeMap<u64, f64> {
    let mut best: BTreeMap<u64, (usize, f64)> = BTreeMap::new();
    for (seed, epoch, value) in rows {
        let e = best.entry(seed).or_insert((epoch, value));
        if epoch >= e.0 {
            *e = (epoch, value);
        }
    }
    best.into_iter().map(|(s, (_, v))| (s, v)).collect()
}

/// Evaluate a contrast over the seeds present for both sides; `None` if
/// fewer than two seeds pair up.
pub fn contrast(spec: &ContrastSpec, metrics: &[MetricRow], alignment: &[AlignmentRow], seed: u64) -> Option<ContrastRow> {
    let side = |subset: &str| -> BTreeMap<u64, f64> {
        match &spec.source {
            ContrastSource::Metrics { stage, question_family } => last_per_seed(
                metrics
                    .iter()
                    .filter(|r| {
                        &r.stage == stage && &r.question_family == question_family && r.metric == spec.metric && r.subset == subset
                    })
                    .map(|r| (r.seed, r.epoch, r.value)),
            ),
            ContrastSource::Alignment => last_per_seed(
                alignment.iter().filter(|r| r.metric == spec.metric && r.subset == subset).map(|r| (r.seed, r.epoch, r.value)),
            ),
        }
    };
    let (a, b) = (side(&spec.a), side(&spec.b));
    let seeds: Vec<u64> = a.keys().filter(|s| b.contains_key(s)).copied().collect();
    let va: Vec<f64> = seeds.iter().map(|s| a[s]).collect();
    let vb: Vec<f64> = seeds.iter().map(|s| b[s]).collect();
    let c = paired_permutation(&va, &vb, seed).ok()?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Some(ContrastRow {
        name: spec.name.clone(),
        metric: spec.metric.clone(),
        a: spec.a.clone(),
        b: spec.b.clone(),
        n_seeds: seeds.len(),
        mean_a: mean(&va),
        mean_b: mean(&vb),
        mean_diff: c.mean_diff,
        p_value: c.p_value,
        exact: c.exact,
    })
}

const PALETTE: [&str; 10] =
    ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

/// Line chart with one polyline per series.
pub fn svg_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 60.0, 170.0, 40.0, 50.0);
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let (pw, ph) = (w - left - right, h - top - bottom);
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, left + pw / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{left} {top} V{} H{}" fill="none" stroke="black"/>"#,
        top + ph,
        left + pw
    );
    for i in 0..=4 {
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{:.3}</text>"#, left - 4.0, sy(fy) + 4.0, fy);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{:.1}</text>"#, sx(fx), top + ph + 16.0, fx);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 10.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (i, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = points.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(s, r#"<polyline class="series" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        let ly = top + 14.0 * i as f64;
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, w - right + 10.0, w - right + 28.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, w - right + 32.0, ly + 4.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn file_stem(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Write `summary.csv`, `contrasts.csv`, `alignment_summary.csv` and one
/// EM-versus-epoch chart per `(stage, family)` into `dir`. Returns the
/// written paths in order.
pub fn emit_report(
    dir: &Path,
    metrics: &[MetricRow],
    alignment: &[AlignmentRow],
    contrasts: &[ContrastSpec],
    seed: u64,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut written = Vec::new();
    let summary = summarize(metrics);
    let path = dir.join("summary.csv");
    write_csv(&path, &SUMMARY_HEADER, &summary)?;
    written.push(path);

    let rows: Vec<ContrastRow> = contrasts.iter().filter_map(|c| contrast(c, metrics, alignment, seed)).collect();
    let path = dir.join("contrasts.csv");
    write_csv(&path, &CONTRAST_HEADER, &rows)?;
    written.push(path);

    let as_metric: Vec<MetricRow> = alignment
        .iter()
        .map(|a| MetricRow {
            run_id: a.run_id.clone(),
            seed: a.seed,
            stage: "alignment".into(),
            epoch: a.epoch,
            subset: a.subset.clone(),
            question_family: format!("k={}", a.k),
            metric: a.metric.clone(),
            value: a.value,
            n: a.n,
        })
        .collect();
    let path = dir.join("alignment_summary.csv");
    write_csv(&path, &SUMMARY_HEADER, &summarize(&as_metric))?;
    written.push(path);

    let charts: BTreeSet<(String, String)> =
        summary.iter().filter(|r| r.metric == "em").map(|r| (r.stage.clone(), r.question_family.clone())).collect();
    for (stage, family) in charts {
        let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for r in summary.iter().filter(|r| r.metric == "em" && r.stage == stage && r.question_family == family) {
            series.entry(r.subset.clone()).or_default().push((r.epoch as f64, r.mean));
        }
        let series: Vec<(String, Vec<(f64, f64)>)> = series.into_iter().collect();
        let svg = svg_chart(&format!("{stage}: {family}"), "epoch", "exact match", &series);
        let path = dir.join(format!("em_{}_{}.svg", file_stem(&stage), file_stem(&family)));
        fs::write(&path, svg).map_err(|e| CoreError::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
