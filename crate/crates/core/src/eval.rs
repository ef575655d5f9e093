//! Accuracy and macro-F1, robustness drops, per-class tables and pruning
//! statistics.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::{label_name, Dataset};
use crate::error::{CvibError, Result};
use crate::scalar::Scalar;
use crate::trainer::{Checkpoint, Predictor};
use crate::vib::{alpha_ratios, prune, MaskParams};

/// Anything that maps a dataset to hard labels.
pub trait Classifier {
    fn n_classes(&self) -> usize;
    fn predict(&self, dataset: &Dataset) -> Result<Vec<usize>>;
}

impl Classifier for Predictor {
    fn n_classes(&self) -> usize {
        self.encoder.n_classes
    }

    fn predict(&self, dataset: &Dataset) -> Result<Vec<usize>> {
        Predictor::predict(self, dataset)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub label: String,
    pub support: usize,
    pub predicted: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Neither gold nor predicted anywhere; `f1` is then 0 by convention.
    pub absent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[gold][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn confusion_matrix(gold: &[usize], pred: &[usize], n_classes: usize) -> Result<Array2<usize>> {
    if gold.len() != pred.len() {
        return Err(CvibError::Shape(format!(
            "{} gold labels but {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    let mut cm = Array2::zeros((n_classes, n_classes));
    for (&g, &p) in gold.iter().zip(pred) {
        if g >= n_classes || p >= n_classes {
            return Err(CvibError::Validation(format!(
                "label pair ({g}, {p}) outside {n_classes} classes"
            )));
        }
        cm[[g, p]] += 1;
    }
    Ok(cm)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics_from_confusion(cm: &Array2<usize>) -> Result<MetricsReport> {
    let (c, c2) = cm.dim();
    if c != c2 || c == 0 {
        return Err(CvibError::Shape(format!("confusion matrix of shape {:?}", cm.dim())));
    }
    let n: usize = cm.sum();
    if n == 0 {
        return Err(CvibError::Validation("empty evaluation set".into()));
    }
    let correct: usize = (0..c).map(|k| cm[[k, k]]).sum();
    let per_class: Vec<ClassMetrics> = (0..c)
        .map(|k| {
            let tp = cm[[k, k]];
            let support = cm.row(k).sum();
            let predicted = cm.column(k).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            // 2TP / (2TP + FP + FN), with 0/0 = 0
            let f1 = ratio(2 * tp, support + predicted);
            ClassMetrics {
                class: k,
                label: label_name(k),
                support,
                predicted,
                precision,
                recall,
                f1,
                absent: support == 0 && predicted == 0,
            }
        })
        .collect();
    let macro_f1 = per_class.iter().map(|m| m.f1).sum::<f64>() / c as f64;
    Ok(MetricsReport {
        n,
        accuracy: correct as f64 / n as f64,
        macro_f1,
        per_class,
        confusion: cm.rows().into_iter().map(|r| r.to_vec()).collect(),
    })
}

pub fn metrics(gold: &[usize], pred: &[usize], n_classes: usize) -> Result<MetricsReport> {
    metrics_from_confusion(&confusion_matrix(gold, pred, n_classes)?)
}

pub fn evaluate<P: Classifier + ?Sized>(predictor: &P, dataset: &Dataset) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(CvibError::Validation("cannot evaluate on an empty dataset".into()));
    }
    let pred = predictor.predict(dataset)?;
    metrics(&dataset.labels(), &pred, predictor.n_classes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Drops {
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub original: MetricsReport,
    pub perturbed: MetricsReport,
    /// `original - perturbed`; positive means the perturbed set is harder.
    pub drop: Drops,
}

impl RobustnessReport {
    pub fn from_reports(original: MetricsReport, perturbed: MetricsReport) -> Self {
        let drop = Drops {
            accuracy: original.accuracy - perturbed.accuracy,
            macro_f1: original.macro_f1 - perturbed.macro_f1,
        };
        RobustnessReport {
            original,
            perturbed,
            drop,
        }
    }
}

pub fn robustness_report<P: Classifier + ?Sized>(
    predictor: &P,
    original: &Dataset,
    perturbed: &Dataset,
) -> Result<RobustnessReport> {
    Ok(RobustnessReport::from_reports(
        evaluate(predictor, original)?,
        evaluate(predictor, perturbed)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassReport {
    pub accuracy: f64,
    pub classes: Vec<ClassMetrics>,
}

impl PerClassReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,label,support,predicted,precision,recall,f1\n");
        for m in &self.classes {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                m.class, m.label, m.support, m.predicted, m.precision, m.recall, m.f1
            ));
        }
        out
    }
}

pub fn per_class_report<P: Classifier + ?Sized>(predictor: &P, dataset: &Dataset) -> Result<PerClassReport> {
    let m = evaluate(predictor, dataset)?;
    Ok(PerClassReport {
        accuracy: m.accuracy,
        classes: m.per_class,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    /// Bin covers `[lo, lo + 1)` in log10(alpha).
    pub lo: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPruning {
    pub layer: usize,
    pub dim: usize,
    pub retained: usize,
    pub retained_fraction: f64,
    /// Dimensions with alpha exactly 0 (log undefined).
    pub zero_alpha: usize,
    pub log10_alpha_histogram: Vec<HistogramBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningReport {
    pub threshold: f64,
    pub layers: Vec<LayerPruning>,
    pub mean_retained_fraction: f64,
}

pub fn mask_pruning_report<F: Scalar>(masks: &MaskParams<F>, threshold: f64) -> Result<PruningReport> {
    let decision = prune(masks, threshold)?;
    let fractions = decision.retained_fraction();
    let retained = decision.retained();
    let layers: Vec<LayerPruning> = alpha_ratios(masks)
        .iter()
        .enumerate()
        .map(|(l, alpha)| {
            let logs: Vec<f64> = alpha.iter().filter(|&&a| a > 0.0).map(|a| a.log10()).collect();
            let mut bins: Vec<HistogramBin> = Vec::new();
            if let (Some(lo), Some(hi)) = (
                logs.iter().copied().reduce(f64::min),
                logs.iter().copied().reduce(f64::max),
            ) {
                let (lo, hi) = (lo.floor(), hi.floor());
                let n_bins = (hi - lo) as usize + 1;
                bins = (0..n_bins)
                    .map(|k| HistogramBin {
                        lo: lo + k as f64,
                        count: 0,
                    })
                    .collect();
                for v in &logs {
                    bins[((v.floor() - lo) as usize).min(n_bins - 1)].count += 1;
                }
            }
            LayerPruning {
                layer: l,
                dim: alpha.len(),
                retained: retained[l],
                retained_fraction: fractions[l],
                zero_alpha: alpha.len() - logs.len(),
                log10_alpha_histogram: bins,
            }
        })
        .collect();
    let mean = if fractions.is_empty() {
        0.0
    } else {
        fractions.iter().sum::<f64>() / fractions.len() as f64
    };
    Ok(PruningReport {
        threshold,
        layers,
        mean_retained_fraction: mean,
    })
}

pub fn pruning_report(checkpoint: &Checkpoint, threshold: f64) -> Result<PruningReport> {
    mask_pruning_report(&checkpoint.masks, threshold)
}
