//! Evaluation metrics: confusion matrices, macro F1, macro specificity,
//! multiclass Rk correlation, quadratic weighted kappa, image MSE, and the
//! challenge-style mean of the four classification metrics.
//!
//! Degenerate denominators follow documented conventions (Rk -> 0,
//! specificity over zero eligible classes -> 0) and surface a warning in
//! the evaluation report.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::dataio::GrayImage;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("true/pred lengths differ: {true_len} vs {pred_len}")]
    LengthMismatch { true_len: usize, pred_len: usize },
    #[error("confusion matrix has no scored samples")]
    Empty,
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("non-finite metric input")]
    NonFinite,
    #[error("image dimensions differ: {a_h}x{a_w} vs {b_h}x{b_w}")]
    DimMismatch { a_h: usize, a_w: usize, b_h: usize, b_w: usize },
}

/// K x K count table; rows are true classes, columns predicted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix { k, counts: vec![0; k * k] }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Self {
        assert_eq!(counts.len(), k * k);
        ConfusionMatrix { k, counts }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn count(&self, true_class: usize, pred_class: usize) -> u64 {
        self.counts[true_class * self.k + pred_class]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, true_class: usize) -> u64 {
        (0..self.k).map(|p| self.count(true_class, p)).sum()
    }

    pub fn col_sum(&self, pred_class: usize) -> u64 {
        (0..self.k).map(|t| self.count(t, pred_class)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|c| self.count(c, c)).sum()
    }
}

/// Tally a confusion matrix from parallel label arrays.
pub fn confusion(
    true_labels: &[usize],
    pred_labels: &[usize],
    k: usize,
) -> Result<ConfusionMatrix, MetricsError> {
    if true_labels.len() != pred_labels.len() {
        return Err(MetricsError::LengthMismatch {
            true_len: true_labels.len(),
            pred_len: pred_labels.len(),
        });
    }
    let mut cm = ConfusionMatrix::new(k);
    for (&t, &p) in true_labels.iter().zip(pred_labels) {
        if t >= k {
            return Err(MetricsError::LabelOutOfRange { label: t, classes: k });
        }
        if p >= k {
            return Err(MetricsError::LabelOutOfRange { label: p, classes: k });
        }
        cm.counts[t * k + p] += 1;
    }
    Ok(cm)
}

/// Per-class F1 as `2TP / (2TP + FP + FN)`; `None` when the class is
/// absent from both truth and prediction.
fn class_f1(cm: &ConfusionMatrix, c: usize) -> Option<f64> {
    let tp = cm.count(c, c);
    let fp = cm.col_sum(c) - tp;
    let fn_ = cm.row_sum(c) - tp;
    if tp + fp + fn_ == 0 {
        return None;
    }
    Some(2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64))
}

/// Unweighted mean of per-class F1 over classes present in truth or
/// prediction.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    if cm.total() == 0 {
        return Err(MetricsError::Empty);
    }
    let scores: Vec<f64> = (0..cm.k()).filter_map(|c| class_f1(cm, c)).collect();
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Gorodkin's K-category correlation. Returns 0 when either radicand
/// factor vanishes (constant truth or constant prediction).
pub fn rk_correlation(cm: &ConfusionMatrix) -> f64 {
    let s = cm.total() as f64;
    if s == 0.0 {
        return 0.0;
    }
    let c = cm.trace() as f64;
    let mut dot_tp = 0.0;
    let mut sum_t2 = 0.0;
    let mut sum_p2 = 0.0;
    for k in 0..cm.k() {
        let t = cm.row_sum(k) as f64;
        let p = cm.col_sum(k) as f64;
        dot_tp += t * p;
        sum_t2 += t * t;
        sum_p2 += p * p;
    }
    let denom2 = (s * s - sum_p2) * (s * s - sum_t2);
    if denom2 <= 0.0 {
        return 0.0;
    }
    (c * s - dot_tp) / denom2.sqrt()
}

/// One-vs-rest true-negative rate per class, averaged over classes that
/// have negatives (`TN + FP > 0`). Zero (degenerate) when none do.
pub fn macro_specificity(cm: &ConfusionMatrix) -> f64 {
    let n = cm.total();
    let mut scores = Vec::new();
    for c in 0..cm.k() {
        let negatives = n - cm.row_sum(c);
        if negatives == 0 {
            continue;
        }
        let fp = cm.col_sum(c) - cm.count(c, c);
        let tn = negatives - fp;
        scores.push(tn as f64 / negatives as f64);
    }
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

/// Cohen's kappa with quadratic weights `(i-j)^2 / (K-1)^2`. Returns 1.0
/// when both the observed and expected weighted disagreements are zero.
pub fn qwk(true_labels: &[usize], pred_labels: &[usize], k: usize) -> Result<f64, MetricsError> {
    if k < 2 {
        return Err(MetricsError::TooFewClasses(k));
    }
    let cm = confusion(true_labels, pred_labels, k)?;
    let n = cm.total() as f64;
    if n == 0.0 {
        return Err(MetricsError::Empty);
    }
    let weight = |i: usize, j: usize| {
        let d = i as f64 - j as f64;
        d * d / ((k - 1) as f64 * (k - 1) as f64)
    };
    let mut wo = 0.0;
    let mut we = 0.0;
    for i in 0..k {
        for j in 0..k {
            let w = weight(i, j);
            wo += w * cm.count(i, j) as f64;
            we += w * cm.row_sum(i) as f64 * cm.col_sum(j) as f64 / n;
        }
    }
    if we == 0.0 {
        return Ok(if wo == 0.0 { 1.0 } else { 0.0 });
    }
    Ok(1.0 - wo / we)
}

/// Arithmetic mean of the four challenge metrics.
pub fn mean_metric(f1: f64, rk: f64, spec: f64, qwk: f64) -> Result<f64, MetricsError> {
    let vals = [f1, rk, spec, qwk];
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    Ok(vals.iter().sum::<f64>() / 4.0)
}

/// Mean squared pixel difference.
pub fn image_mse(a: &GrayImage, b: &GrayImage) -> Result<f64, MetricsError> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(MetricsError::DimMismatch {
            a_h: a.height(),
            a_w: a.width(),
            b_h: b.height(),
            b_w: b.width(),
        });
    }
    let sum: f64 = a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.pixels().len() as f64)
}

#[derive(Clone, Debug, Serialize)]
pub struct PerClassMetrics {
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
}

/// Evaluation report emitted by the `evaluate` command.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub task: u8,
    pub n: u64,
    /// F1/specificity averaging mode; macro is an assumption, the
    /// challenge's exact mode being unspecified.
    pub averaging: &'static str,
    pub f1: f64,
    pub rk: f64,
    pub specificity: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qwk: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    pub per_class: BTreeMap<String, PerClassMetrics>,
    pub warnings: Vec<String>,
}

/// Build the full report for a task. Task 1 scores 4 classes; task 2
/// scores 3 ordinal classes and adds QWK and the mean metric.
pub fn evaluate_task(
    task: u8,
    true_labels: &[usize],
    pred_labels: &[usize],
) -> Result<EvalReport, MetricsError> {
    let k = if task == 2 { 3 } else { 4 };
    let cm = confusion(true_labels, pred_labels, k)?;
    if cm.total() == 0 {
        return Err(MetricsError::Empty);
    }
    let mut warnings = Vec::new();
    let f1 = macro_f1(&cm)?;
    let rk = rk_correlation(&cm);
    if rk == 0.0 {
        let degenerate = (0..k).all(|c| cm.col_sum(c) == 0 || cm.col_sum(c) == cm.total())
            || (0..k).all(|c| cm.row_sum(c) == 0 || cm.row_sum(c) == cm.total());
        if degenerate {
            warnings.push("rk degenerate (constant truth or prediction); reported as 0".into());
        }
    }
    let spec = macro_specificity(&cm);
    if (0..k).all(|c| cm.total() == cm.row_sum(c) || cm.row_sum(c) == 0)
        && (0..k).filter(|&c| cm.total() - cm.row_sum(c) > 0).count() == 0
    {
        warnings.push("specificity degenerate (single-class truth); reported as 0".into());
    }
    let (qwk_v, mean_v) = if task == 2 {
        let q = qwk(true_labels, pred_labels, k)?;
        (Some(q), Some(mean_metric(f1, rk, spec, q)?))
    } else {
        (None, None)
    };
    let mut per_class = BTreeMap::new();
    for c in 0..k {
        let tp = cm.count(c, c);
        let fp = cm.col_sum(c) - tp;
        let fn_ = cm.row_sum(c) - tp;
        let negatives = cm.total() - cm.row_sum(c);
        let tn = negatives - fp;
        per_class.insert(
            c.to_string(),
            PerClassMetrics {
                support: cm.row_sum(c),
                precision: if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 },
                recall: if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 },
                f1: class_f1(&cm, c).unwrap_or(0.0),
                specificity: if negatives > 0 { tn as f64 / negatives as f64 } else { 0.0 },
            },
        );
    }
    Ok(EvalReport {
        task,
        n: cm.total(),
        averaging: "macro (assumed; challenge averaging mode unspecified)",
        f1,
        rk,
        specificity: spec,
        qwk: qwk_v,
        mean: mean_v,
        per_class,
        warnings,
    })
}

/// Binary Matthews correlation from raw counts; the independent oracle
/// the K=2 Rk test compares against.
pub fn binary_mcc(tp: u64, tn: u64, fp: u64, fn_: u64) -> f64 {
    let (tp, tn, fp, fn_) = (tp as f64, tn as f64, fp as f64, fn_ as f64);
    let denom = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    if denom == 0.0 {
        return 0.0;
    }
    (tp * tn - fp * fn_) / denom
}
