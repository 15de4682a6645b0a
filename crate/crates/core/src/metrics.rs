//! Calibration and confidence-ranking metrics.
//!
//! Ordering conventions: wherever samples are ranked by confidence, ties are
//! resolved by the lower sample index first, which makes every metric a
//! deterministic function of the (confidence, correctness) multiset.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::argmax;

pub const DEFAULT_BINS: usize = 15;

/// Floor applied to p_y inside the log of the NLL.
const PROB_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    confidences: Vec<f64>,
    probs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    correct: Vec<bool>,
}

impl PredictionSet {
    /// Builds the set from probability rows; confidence is the row maximum
    /// and the prediction its lowest-index argmax.
    pub fn from_probs(probs: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if probs.len() != labels.len() {
            return Err(Error::Shape(format!("{} probability rows for {} labels", probs.len(), labels.len())));
        }
        let k = probs.first().map_or(0, Vec::len);
        let mut confidences = Vec::with_capacity(probs.len());
        let mut correct = Vec::with_capacity(probs.len());
        for (i, (row, &y)) in probs.iter().zip(&labels).enumerate() {
            if row.len() != k || k == 0 {
                return Err(Error::Shape(format!("probability row {i} has {} entries, expected {k}", row.len())));
            }
            if y >= k {
                return Err(Error::Shape(format!("label {y} at row {i} is not below K={k}")));
            }
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Numeric(format!("probability row {i} is not on the simplex")));
            }
            let top = argmax(row);
            confidences.push(row[top]);
            correct.push(top == y);
        }
        Ok(Self {
            confidences,
            probs,
            labels,
            correct,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn confidences(&self) -> &[f64] {
        &self.confidences
    }

    pub fn correct(&self) -> &[bool] {
        &self.correct
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn probs(&self) -> &[Vec<f64>] {
        &self.probs
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            confidences: indices.iter().map(|&i| self.confidences[i]).collect(),
            probs: indices.iter().map(|&i| self.probs[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            correct: indices.iter().map(|&i| self.correct[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean confidence of the bin, 0 when empty.
    pub confidence: f64,
    /// Accuracy of the bin, 0 when empty.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub bins: Vec<ReliabilityBin>,
}

impl ReliabilityBins {
    /// CSV `bin_lo,bin_hi,count,conf,acc`, one row per bin.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count,conf,acc\n");
        for b in &self.bins {
            let _ = writeln!(out, "{},{},{},{},{}", b.lower, b.upper, b.count, b.confidence, b.accuracy);
        }
        out
    }
}

fn bin_edge(b: usize, n_bins: usize) -> f64 {
    b as f64 / n_bins as f64
}

/// Bin of confidence `c` among `n_bins` right-closed equal-width bins
/// (lo, hi]; c = 0 goes to the first bin.
pub fn bin_index(c: f64, n_bins: usize) -> usize {
    let mut b = ((c * n_bins as f64).ceil() as isize - 1).clamp(0, n_bins as isize - 1) as usize;
    // Agree with the edge comparisons exactly where c·n_bins rounds.
    while b > 0 && c <= bin_edge(b, n_bins) {
        b -= 1;
    }
    while b + 1 < n_bins && c > bin_edge(b + 1, n_bins) {
        b += 1;
    }
    b
}

pub fn ece_scores(confidences: &[f64], correct: &[bool], n_bins: usize) -> (f64, ReliabilityBins) {
    let n_bins = n_bins.max(1);
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut hits = vec![0usize; n_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = bin_index(c, n_bins);
        count[b] += 1;
        conf_sum[b] += c;
        hits[b] += usize::from(ok);
    }
    let n = confidences.len().max(1) as f64;
    let mut ece = 0.0;
    let bins = (0..n_bins)
        .map(|b| {
            let (confidence, accuracy) = if count[b] > 0 {
                let m = count[b] as f64;
                (conf_sum[b] / m, hits[b] as f64 / m)
            } else {
                (0.0, 0.0)
            };
            ece += count[b] as f64 / n * (accuracy - confidence).abs();
            ReliabilityBin {
                lower: bin_edge(b, n_bins),
                upper: bin_edge(b + 1, n_bins),
                count: count[b],
                confidence,
                accuracy,
            }
        })
        .collect();
    (ece, ReliabilityBins { bins })
}

/// Expected calibration error over equal-width bins, with the reliability
/// diagram it was computed from.
pub fn ece(preds: &PredictionSet, n_bins: usize) -> (f64, ReliabilityBins) {
    ece_scores(&preds.confidences, &preds.correct, n_bins)
}

pub fn accuracy(preds: &PredictionSet) -> f64 {
    preds.correct.iter().filter(|c| **c).count() as f64 / preds.len().max(1) as f64
}

/// Mean squared distance between the probability row and the one-hot label,
/// summed over classes.
pub fn brier(preds: &PredictionSet) -> f64 {
    let total: f64 = preds
        .probs
        .iter()
        .zip(&preds.labels)
        .map(|(row, &y)| {
            row.iter()
                .enumerate()
                .map(|(k, p)| {
                    let t = if k == y { 1.0 } else { 0.0 };
                    (p - t) * (p - t)
                })
                .sum::<f64>()
        })
        .sum();
    total / preds.len().max(1) as f64
}

pub fn nll(preds: &PredictionSet) -> f64 {
    let total: f64 = preds
        .probs
        .iter()
        .zip(&preds.labels)
        .map(|(row, &y)| -row[y].max(PROB_FLOOR).ln())
        .sum();
    total / preds.len().max(1) as f64
}

/// Indices sorted by confidence descending, lower index first on ties.
fn by_confidence_desc(confidences: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    order.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]));
    order
}

/// Risk-coverage curve: `(j/n, errors among the j most confident / j)` for
/// j = 1..n.
pub fn risk_coverage_scores(confidences: &[f64], correct: &[bool]) -> Vec<(f64, f64)> {
    let n = confidences.len();
    let mut errors = 0usize;
    by_confidence_desc(confidences)
        .into_iter()
        .enumerate()
        .map(|(j, i)| {
            errors += usize::from(!correct[i]);
            ((j + 1) as f64 / n as f64, errors as f64 / (j + 1) as f64)
        })
        .collect()
}

pub fn risk_coverage(preds: &PredictionSet) -> Vec<(f64, f64)> {
    risk_coverage_scores(&preds.confidences, &preds.correct)
}

pub fn risk_coverage_csv(curve: &[(f64, f64)]) -> String {
    let mut out = String::from("coverage,risk\n");
    for (c, r) in curve {
        let _ = writeln!(out, "{c},{r}");
    }
    out
}

/// `(AURC, EAURC)`. The optimal AURC ranks every correct sample first.
pub fn aurc_eaurc_scores(confidences: &[f64], correct: &[bool]) -> (f64, f64) {
    let n = confidences.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let aurc = risk_coverage_scores(confidences, correct)
        .iter()
        .map(|(_, r)| r)
        .sum::<f64>()
        / n as f64;
    let n_correct = correct.iter().filter(|c| **c).count();
    let optimal = (1..=n)
        .map(|j| j.saturating_sub(n_correct) as f64 / j as f64)
        .sum::<f64>()
        / n as f64;
    (aurc, aurc - optimal)
}

pub fn aurc_eaurc(preds: &PredictionSet) -> (f64, f64) {
    aurc_eaurc_scores(&preds.confidences, &preds.correct)
}

/// FPR among incorrect predictions at the largest confidence threshold that
/// still keeps at least 95% of the correct ones.
pub fn fpr_at_95tpr_scores(confidences: &[f64], correct: &[bool]) -> Result<f64> {
    let mut pos: Vec<f64> = confidences
        .iter()
        .zip(correct)
        .filter(|(_, c)| **c)
        .map(|(p, _)| *p)
        .collect();
    let n_neg = correct.len() - pos.len();
    if pos.is_empty() || n_neg == 0 {
        return Err(Error::UndefinedMetric {
            metric: "fpr_at_95tpr",
            reason: "needs at least one correct and one incorrect prediction",
        });
    }
    pos.sort_by(|a, b| b.total_cmp(a));
    let n_pos = pos.len() as f64;
    let k = (1..=pos.len())
        .find(|&k| k as f64 / n_pos >= 0.95)
        .unwrap_or(pos.len());
    let threshold = pos[k - 1];
    let accepted = confidences
        .iter()
        .zip(correct)
        .filter(|(p, c)| !**c && **p >= threshold)
        .count();
    Ok(accepted as f64 / n_neg as f64)
}

pub fn fpr_at_95tpr(preds: &PredictionSet) -> Result<f64> {
    fpr_at_95tpr_scores(&preds.confidences, &preds.correct)
}

/// Average precision for detecting errors, scoring each sample by its
/// negated confidence. Samples with equal scores enter the curve together.
pub fn aupr_err_scores(confidences: &[f64], correct: &[bool]) -> Result<f64> {
    let n_pos = correct.iter().filter(|c| !**c).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric {
            metric: "aupr_err",
            reason: "needs at least one incorrect prediction",
        });
    }
    // Ascending confidence = descending error score.
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    order.sort_by(|&a, &b| confidences[a].total_cmp(&confidences[b]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let score = confidences[order[i]];
        while i < order.len() && confidences[order[i]] == score {
            if correct[order[i]] {
                fp += 1;
            } else {
                tp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

pub fn aupr_err(preds: &PredictionSet) -> Result<f64> {
    aupr_err_scores(&preds.confidences, &preds.correct)
}

/// All metrics; the ones undefined on this input are `None` and omitted
/// from the JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ece: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub brier: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nll: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aurc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eaurc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aupr_err: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fpr_at_95tpr: Option<f64>,
}

pub fn full_report(preds: &PredictionSet, n_bins: usize) -> MetricsReport {
    if preds.is_empty() {
        return MetricsReport::default();
    }
    let (aurc, eaurc) = aurc_eaurc(preds);
    MetricsReport {
        accuracy: Some(accuracy(preds)),
        ece: Some(ece(preds, n_bins).0),
        brier: Some(brier(preds)),
        nll: Some(nll(preds)),
        aurc: Some(aurc),
        eaurc: Some(eaurc),
        aupr_err: aupr_err(preds).ok(),
        fpr_at_95tpr: fpr_at_95tpr(preds).ok(),
    }
}
