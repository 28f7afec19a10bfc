//! Evaluation over points: accuracy, confusion-matrix IoU, pseudo-label
//! quality and prototype drift. This is the only module that reads
//! [`HiddenLabels`].

use crate::data::HiddenLabels;
use crate::error::{Error, Result};
use crate::proto::PrototypeBank;
use crate::scalar::Scalar;
use crate::tensor::{euclidean, Tensor2D};
use crate::IGNORE;

/// Confusion-matrix summary of one labelling.
#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    /// `None` for classes absent from the ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub accuracy: f64,
    /// Rows where neither side was [`IGNORE`].
    pub counted: usize,
}

/// `K×K` confusion counts (rows: truth, columns: prediction), skipping rows
/// where either side is [`IGNORE`].
pub fn confusion_matrix(pred: &[usize], truth: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    if pred.len() != truth.len() {
        return Err(Error::dim("confusion_matrix", truth.len(), pred.len()));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == IGNORE || t == IGNORE {
            continue;
        }
        if p >= classes || t >= classes {
            return Err(Error::dim("confusion_matrix", format!("labels < {classes}"), p.max(t)));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// `IoU_k = TP/(TP+FP+FN)`; the mean runs over classes present in `truth`.
pub fn confusion_and_iou(pred: &[usize], truth: &[usize], classes: usize) -> Result<IouReport> {
    let m = confusion_matrix(pred, truth, classes)?;
    let counted: u64 = m.iter().flatten().sum();
    let correct: u64 = (0..classes).map(|k| m[k][k]).sum();
    let mut per_class = Vec::with_capacity(classes);
    let mut sum = 0.0;
    let mut present = 0usize;
    for k in 0..classes {
        let tp = m[k][k];
        let fn_: u64 = m[k].iter().sum::<u64>() - tp;
        let fp: u64 = (0..classes).map(|t| m[t][k]).sum::<u64>() - tp;
        if tp + fn_ == 0 {
            per_class.push(None);
            continue;
        }
        let iou = tp as f64 / (tp + fp + fn_) as f64;
        sum += iou;
        present += 1;
        per_class.push(Some(iou));
    }
    Ok(IouReport {
        per_class_iou: per_class,
        mean_iou: if present == 0 { 0.0 } else { sum / present as f64 },
        accuracy: if counted == 0 {
            0.0
        } else {
            correct as f64 / counted as f64
        },
        counted: counted as usize,
    })
}

/// Scores a labelling of the target set against its hidden ground truth.
pub fn evaluate(pred: &[usize], truth: &HiddenLabels, classes: usize) -> Result<IouReport> {
    confusion_and_iou(pred, truth.labels(), classes)
}

/// Fraction of `pred` rows that disagree with the ground truth; ignored
/// predictions count as errors.
pub fn label_error_rate(pred: &[usize], truth: &HiddenLabels) -> Result<f64> {
    let t = truth.labels();
    if pred.len() != t.len() {
        return Err(Error::dim("label_error_rate", t.len(), pred.len()));
    }
    if t.is_empty() {
        return Ok(0.0);
    }
    let wrong = pred.iter().zip(t).filter(|(p, t)| p != t).count();
    Ok(wrong as f64 / t.len() as f64)
}

/// Mean feature of each ground-truth class (`None` when a class is absent).
pub fn true_centroids<T: Scalar>(features: &Tensor2D<T>, truth: &HiddenLabels, classes: usize) -> Result<Vec<Option<Vec<T>>>> {
    let labels = truth.labels();
    if labels.len() != features.rows() {
        return Err(Error::dim("true_centroids", features.rows(), labels.len()));
    }
    let b = crate::proto::batch_centroids(features, labels, classes)?;
    Ok((0..classes)
        .map(|k| b.present(k).then(|| b.centroids.row(k).to_vec()))
        .collect())
}

/// Mean distance between each seen prototype and its true class centroid.
pub fn proto_drift<T: Scalar>(bank: &PrototypeBank<T>, features: &Tensor2D<T>, truth: &HiddenLabels) -> Result<f64> {
    let truth_c = true_centroids(features, truth, bank.classes())?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (k, c) in truth_c.iter().enumerate() {
        if let (Some(c), true) = (c, bank.seen()[k]) {
            sum += euclidean(bank.centroids().row(k), c).as_f64();
            n += 1;
        }
    }
    Ok(if n == 0 { f64::NAN } else { sum / n as f64 })
}

/// Prototype bank built from ground-truth centroids of `features`.
pub fn oracle_bank<T: Scalar>(features: &Tensor2D<T>, truth: &HiddenLabels, classes: usize, momentum: T) -> Result<PrototypeBank<T>> {
    PrototypeBank::init(features, truth.labels(), classes, momentum)
}

/// Read-only view of the ground truth for evaluation code such as fixtures
/// and reports.
pub fn ground_truth(truth: &HiddenLabels) -> &[usize] {
    truth.labels()
}

/// Everything reported at one evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub accuracy: f64,
    pub pseudo_accuracy: f64,
    pub pseudo_mean_iou: f64,
    pub proto_drift: f64,
}
