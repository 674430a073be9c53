//! Task metrics and per-source averages.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("labels contain a single class")]
    SingleClass,
    #[error("no positive labels")]
    NoPositives,
    #[error("every label column is single-class")]
    AllColumnsDegenerate,
    #[error("empty input")]
    EmptyInput,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("class {0} outside 0..{1}")]
    ClassOutOfRange(usize, usize),
}

type Result<T> = std::result::Result<T, MetricError>;

/// Average 1-based ranks, ties sharing the mean rank.
fn average_ranks(scores: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Mann-Whitney AUC: `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)`.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Area under the precision-recall step curve (average precision), one
/// step per distinct score threshold.
pub fn auc_pr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(MetricError::NoPositives);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut area, mut last_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let threshold = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == threshold {
            tp += usize::from(labels[idx[i]]);
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / seen as f64;
        area += (recall - last_recall) * precision;
        last_recall = recall;
    }
    Ok(area)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroMicro {
    pub macro_auc: f64,
    pub micro_auc: f64,
    /// Single-class columns left out of the macro average.
    pub skipped: Vec<usize>,
}

/// Macro (mean of column AUCs) and micro (pooled) AUC-ROC over `n × k`
/// row-major matrices.
pub fn macro_micro_auc(scores: &[f64], labels: &[bool], columns: usize) -> Result<MacroMicro> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
    }
    if columns == 0 || scores.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let mut aucs = Vec::new();
    let mut skipped = Vec::new();
    for c in 0..columns {
        let s: Vec<f64> = scores.iter().skip(c).step_by(columns).copied().collect();
        let l: Vec<bool> = labels.iter().skip(c).step_by(columns).copied().collect();
        match auc_roc(&s, &l) {
            Ok(a) => aucs.push(a),
            Err(_) => skipped.push(c),
        }
    }
    if aucs.is_empty() {
        return Err(MetricError::AllColumnsDegenerate);
    }
    Ok(MacroMicro {
        macro_auc: aucs.iter().sum::<f64>() / aucs.len() as f64,
        micro_auc: auc_roc(scores, labels)?,
        skipped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum KappaWeighting {
    None,
    #[default]
    Linear,
}

/// Cohen's kappa over classes `0..classes`: `1 − Σ w O / Σ w E` with `E`
/// the product of the marginals. Agreement that chance already explains
/// fully (a single shared class) scores 1.
pub fn cohen_kappa(pred: &[usize], truth: &[usize], classes: usize, weighting: KappaWeighting) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    if let Some(&bad) = pred.iter().chain(truth).find(|&&c| c >= classes) {
        return Err(MetricError::ClassOutOfRange(bad, classes));
    }
    let n = pred.len() as f64;
    let mut observed = vec![0.0; classes * classes];
    let mut row = vec![0.0; classes];
    let mut col = vec![0.0; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        observed[t * classes + p] += 1.0;
        row[t] += 1.0;
        col[p] += 1.0;
    }
    let (mut wo, mut we) = (0.0, 0.0);
    for i in 0..classes {
        for j in 0..classes {
            let w = match weighting {
                KappaWeighting::None => f64::from(u8::from(i != j)),
                KappaWeighting::Linear => i.abs_diff(j) as f64,
            };
            wo += w * observed[i * classes + j] / n;
            we += w * row[i] * col[j] / (n * n);
        }
    }
    if we == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - wo / we)
}

/// Mean absolute class-index difference.
pub fn mad(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    Ok(pred.iter().zip(truth).map(|(&p, &t)| p.abs_diff(t) as f64).sum::<f64>() / pred.len() as f64)
}

/// Remaining-stay midpoint of each length-of-stay class, in hours.
pub const LOS_CLASS_MIDPOINT_HOURS: [f64; 10] = [12.0, 36.0, 60.0, 84.0, 108.0, 132.0, 156.0, 180.0, 264.0, 420.0];

/// Mean absolute difference of class midpoints, in hours.
pub fn mad_hours(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    if let Some(&bad) = pred.iter().chain(truth).find(|&&c| c >= LOS_CLASS_MIDPOINT_HOURS.len()) {
        return Err(MetricError::ClassOutOfRange(bad, LOS_CLASS_MIDPOINT_HOURS.len()));
    }
    let m = &LOS_CLASS_MIDPOINT_HOURS;
    Ok(pred.iter().zip(truth).map(|(&p, &t)| (m[p] - m[t]).abs()).sum::<f64>() / pred.len() as f64)
}

/// Per-source average of the first `s` values.
pub fn psa(values: &[f64], s: usize) -> Result<f64> {
    if values.len() != s {
        return Err(MetricError::LengthMismatch(values.len(), s));
    }
    if s == 0 {
        return Err(MetricError::EmptyInput);
    }
    Ok(values.iter().sum::<f64>() / s as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `"0.864 (0.005)"`.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.3} ({std:.3})")
}

/// One metric value of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub task: String,
    pub region: String,
    pub method: String,
    pub seed: u64,
    /// Number of sources trained when the value was measured.
    pub trained_on: usize,
    /// Source name, or `PSA`.
    pub source: String,
    pub metric: String,
    pub value: f64,
}

/// Per-source values and PSA of every run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
}

pub const PSA_SOURCE: &str = "PSA";

impl MetricsReport {
    pub fn values(&self, trained_on: usize, source: &str, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.trained_on == trained_on && r.source == source && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    /// Mean and std over seeds per `(trained_on, source, metric)`.
    pub fn summary(&self) -> BTreeMap<(usize, String, String), (f64, f64)> {
        let mut groups: BTreeMap<(usize, String, String), Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            groups
                .entry((r.trained_on, r.source.clone(), r.metric.clone()))
                .or_default()
                .push(r.value);
        }
        groups.into_iter().map(|(k, v)| (k, mean_std(&v))).collect()
    }

    pub fn write_json(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).map_err(std::io::Error::other)?)
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["task", "region", "method", "seed", "trained_on", "source", "metric", "value"])?;
        for r in &self.rows {
            w.write_record([
                r.task.clone(),
                r.region.clone(),
                r.method.clone(),
                r.seed.to_string(),
                r.trained_on.to_string(),
                r.source.clone(),
                r.metric.clone(),
                r.value.to_string(),
            ])?;
        }
        w.flush()
    }
}
