//! Classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One-vs-rest AUC by the Mann–Whitney rank formula, ties sharing the mean
/// of their ranks. `None` when either class is empty.
pub fn rank_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len());
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based: positions i..=j share (i + j) / 2 + 1
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Unweighted mean of one-vs-rest AUCs; `probs[i][k]` scores sample `i` for
/// class `k`.
pub fn macro_auc(probs: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::Dimension {
            expected: labels.len(),
            actual: probs.len(),
        });
    }
    if let Some(absent) = (0..n_classes).find(|c| !labels.contains(c)) {
        return Err(Error::AbsentClass(absent));
    }
    let mut total = 0.0;
    for class in 0..n_classes {
        let scores: Vec<f64> = probs.iter().map(|p| p[class]).collect();
        let positive: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        total += rank_auc(&scores, &positive).ok_or(Error::AbsentClass(class))?;
    }
    Ok(total / n_classes as f64)
}

/// `confusion[true][predicted]`.
pub fn confusion_matrix(labels: &[usize], predictions: &[usize], n_classes: usize) -> Result<Vec<Vec<usize>>> {
    if labels.len() != predictions.len() {
        return Err(Error::Dimension {
            expected: labels.len(),
            actual: predictions.len(),
        });
    }
    let mut m = vec![vec![0; n_classes]; n_classes];
    for (&t, &p) in labels.iter().zip(predictions) {
        for label in [t, p] {
            if label >= n_classes {
                return Err(Error::LabelOutOfRange { label, n_classes });
            }
        }
        m[t][p] += 1;
    }
    Ok(m)
}

pub fn accuracy(confusion: &[Vec<usize>]) -> f64 {
    let total: usize = confusion.iter().flatten().sum();
    let trace: usize = (0..confusion.len()).map(|i| confusion[i][i]).sum();
    if total == 0 {
        0.0
    } else {
        trace as f64 / total as f64
    }
}

/// `2TP / (2TP + FP + FN)` per class; 0 for a class never seen nor predicted.
pub fn per_class_f1(confusion: &[Vec<usize>]) -> Vec<f64> {
    let n = confusion.len();
    (0..n)
        .map(|k| {
            let tp = confusion[k][k];
            let fn_: usize = confusion[k].iter().sum::<usize>() - tp;
            let fp: usize = (0..n).map(|r| confusion[r][k]).sum::<usize>() - tp;
            let den = 2 * tp + fp + fn_;
            if den == 0 {
                0.0
            } else {
                2.0 * tp as f64 / den as f64
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_auc: f64,
    /// Indexed by class.
    pub f1: Vec<f64>,
    /// Mean Grad-CAM vs mask IoU at the predicted class.
    pub iou: f64,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
    pub n_classes: usize,
    /// Seed of the evaluation support draw and the ids it picked.
    pub support_seed: u64,
    pub support_ids: Vec<String>,
}
