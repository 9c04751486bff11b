//! Confusion matrices, sensitivity/specificity, precision/recall/F1, ROC
//! curves and the JSON evaluation report.

pub mod heatmap;

use std::collections::BTreeMap;

use serde::Serialize;

pub use heatmap::{export_features, occlusion_heatmap, Heatmap};

use crate::data::CLASS_NAMES;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Counts indexed `[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn row_sum(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    fn col_sum(&self, k: usize) -> u64 {
        self.counts.iter().map(|r| r[k]).sum()
    }

    /// Class 0 against every other class, as a 2×2 matrix.
    pub fn to_binary(&self) -> ConfusionMatrix {
        let mut b = vec![vec![0; 2]; 2];
        for (t, row) in self.counts.iter().enumerate() {
            for (p, &c) in row.iter().enumerate() {
                b[(t > 0) as usize][(p > 0) as usize] += c;
            }
        }
        ConfusionMatrix { counts: b }
    }
}

pub fn confusion_matrix(predictions: &[usize], labels: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid(
            "confusion_matrix",
            format!("{} predictions for {} labels", predictions.len(), labels.len()),
        ));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (i, (&p, &t)) in predictions.iter().zip(labels).enumerate() {
        if p >= k || t >= k {
            return Err(Error::invalid(
                "confusion_matrix",
                format!("sample {i}: class id ({t}, {p}) outside 0..{k}"),
            ));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Sensitivity and specificity with class 1 as positive. A metric whose
/// denominator is zero is `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BinaryMetrics {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub tp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub fp: u64,
}

pub fn binary_metrics(cm: &ConfusionMatrix) -> Result<BinaryMetrics> {
    if cm.k() != 2 {
        return Err(Error::invalid(
            "binary_metrics",
            format!("needs a 2x2 matrix, got {}x{}", cm.k(), cm.k()),
        ));
    }
    let (tn, fp, fn_, tp) = (cm.counts[0][0], cm.counts[0][1], cm.counts[1][0], cm.counts[1][1]);
    Ok(BinaryMetrics {
        sensitivity: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
        tp,
        fn_,
        tn,
        fp,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

pub fn prf1(cm: &ConfusionMatrix) -> Vec<ClassMetrics> {
    (0..cm.k())
        .map(|k| {
            let tp = cm.counts[k][k];
            let precision = ratio(tp, cm.col_sum(k));
            let recall = ratio(tp, cm.row_sum(k));
            let f1 = match (precision, recall) {
                (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
                (Some(_), Some(_)) => Some(0.0),
                _ => None,
            };
            ClassMetrics { precision, recall, f1 }
        })
        .collect()
}

/// Mean of the defined per-class F1 scores.
pub fn macro_f1(per_class: &[ClassMetrics]) -> Option<f64> {
    let v: Vec<f64> = per_class.iter().filter_map(|c| c.f1).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RocCurve {
    /// `(false positive rate, true positive rate)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Threshold sweep over the distinct scores, highest first; equal scores
/// form a single step. The trapezoid area is accumulated in integers, so
/// the AUC equals the pair-ordering statistic with ties counted one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(
            "roc_auc",
            format!("{} scores for {} labels", scores.len(), labels.len()),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("roc_auc", "NaN score"));
    }
    let p = labels.iter().filter(|&&l| l).count() as u64;
    let n = labels.len() as u64 - p;
    if p == 0 || n == 0 {
        return Err(Error::invalid("roc_auc", "both classes must be present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut area2 = 0u128;
    let mut points = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut dtp, mut dfp) = (0u64, 0u64);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                dtp += 1;
            } else {
                dfp += 1;
            }
            i += 1;
        }
        area2 += dfp as u128 * (2 * tp + dtp) as u128;
        tp += dtp;
        fp += dfp;
        points.push((fp as f64 / n as f64, tp as f64 / p as f64));
    }
    Ok(RocCurve {
        points,
        auc: area2 as f64 / (2 * p as u128 * n as u128) as f64,
    })
}

/// Abnormal score `1 − p(class 0)` per row.
pub fn collapse_to_binary(probs: &Tensor<f32>) -> Result<Vec<f64>> {
    let (n, k) = probs.dims2("collapse_to_binary")?;
    (0..n)
        .map(|i| {
            let row = probs.row(i);
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            if k < 2 || (s - 1.0).abs() > 1e-4 || row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid(
                    "collapse_to_binary",
                    format!("row {i} is not a distribution (sum {s})"),
                ));
            }
            Ok(1.0 - row[0] as f64)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PerClass {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    /// One-vs-rest AUC of that class's probability.
    pub auc_ovr: Option<f64>,
}

/// The evaluation report written as `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub n: usize,
    pub accuracy: f64,
    pub confusion: Vec<Vec<u64>>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub per_class: BTreeMap<String, PerClass>,
    pub macro_f1: Option<f64>,
    pub binary_auc: Option<f64>,
    pub roc_points: Vec<(f64, f64)>,
}

fn class_name(k: usize) -> String {
    CLASS_NAMES
        .get(k)
        .map_or_else(|| format!("class{k}"), |s| s.to_string())
}

/// Everything in [`Report`] from class probabilities and true labels.
/// Predictions are the arg-max class; the binary task is class 0 against
/// the rest.
pub fn evaluate(probs: &Tensor<f32>, labels: &[usize]) -> Result<Report> {
    let (n, k) = probs.dims2("evaluate")?;
    if labels.len() != n || n == 0 {
        return Err(Error::invalid(
            "evaluate",
            format!("{n} predictions for {} labels", labels.len()),
        ));
    }
    let preds = probs.argmax_rows()?;
    let cm = confusion_matrix(&preds, labels, k)?;
    let bin = binary_metrics(&cm.to_binary())?;
    let pcm = prf1(&cm);
    let scores = collapse_to_binary(probs)?;
    let abnormal: Vec<bool> = labels.iter().map(|&l| l > 0).collect();
    let roc = roc_auc(&scores, &abnormal).ok();
    let per_class = pcm
        .iter()
        .enumerate()
        .map(|(c, m)| {
            let s: Vec<f64> = (0..n).map(|i| probs.row(i)[c] as f64).collect();
            let is_c: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            let auc_ovr = roc_auc(&s, &is_c).ok().map(|r| r.auc);
            (
                class_name(c),
                PerClass {
                    precision: m.precision,
                    recall: m.recall,
                    f1: m.f1,
                    auc_ovr,
                },
            )
        })
        .collect();
    let correct: u64 = (0..k).map(|c| cm.counts[c][c]).sum();
    Ok(Report {
        n,
        accuracy: correct as f64 / n as f64,
        confusion: cm.counts.clone(),
        sensitivity: bin.sensitivity,
        specificity: bin.specificity,
        per_class,
        macro_f1: macro_f1(&pcm),
        binary_auc: roc.as_ref().map(|r| r.auc),
        roc_points: roc.map(|r| r.points).unwrap_or_default(),
    })
}
