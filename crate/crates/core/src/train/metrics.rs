use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_classes: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Binary AUC for two classes, one-vs-rest macro otherwise.
    pub auc: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub support: Vec<usize>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counting ½.
/// `None` unless both groups are non-empty.
pub fn pairwise_auc(positive: &[bool], scores: &[f64]) -> Option<f64> {
    assert_eq!(positive.len(), scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut neg_below, mut n_pos, mut n_neg) = (0u64, 0u64, 0u64);
    // Twice the number of correctly ordered pairs plus the number of ties.
    let mut doubled = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if positive[order[j]] {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        doubled += 2 * p * neg_below + p * n;
        neg_below += n;
        n_pos += p;
        n_neg += n;
        i = j;
    }
    (n_pos > 0 && n_neg > 0).then(|| doubled as f64 / (2 * n_pos * n_neg) as f64)
}

/// Metrics of probability rows `scores` (`N×K`, row-major) against `labels`.
///
/// Classes with no positive or no negative sample are left out of the
/// one-vs-rest macro AUC; if none remains the AUC is 0.5.
pub fn compute_metrics(labels: &[usize], scores: &[f64], n_classes: usize) -> Result<MetricsReport> {
    let k = n_classes;
    if k < 2 {
        return Err(Error::contract("metrics need at least two classes"));
    }
    if labels.is_empty() {
        return Err(Error::contract("metrics need at least one sample"));
    }
    if scores.len() != labels.len() * k {
        return Err(Error::Dimension {
            op: "compute_metrics",
            lhs: vec![labels.len(), k],
            rhs: vec![scores.len()],
        });
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::contract(format!("label {l} out of range for {k} classes")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("compute_metrics"));
    }

    let n = labels.len();
    let mut confusion = vec![vec![0usize; k]; k];
    for (i, &y) in labels.iter().enumerate() {
        confusion[y][argmax(&scores[i * k..(i + 1) * k])] += 1;
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let support: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).collect();

    let (mut precision, mut recall, mut f1) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
    for c in 0..k {
        let tp = confusion[c][c];
        let predicted: usize = (0..k).map(|r| confusion[r][c]).sum();
        let (fp, fn_) = (predicted - tp, support[c] - tp);
        if predicted > 0 {
            precision[c] = tp as f64 / predicted as f64;
        }
        if support[c] > 0 {
            recall[c] = tp as f64 / support[c] as f64;
        }
        let denom = 2 * tp + fp + fn_;
        if denom > 0 {
            f1[c] = (2 * tp) as f64 / denom as f64;
        }
    }
    let macro_f1 = f1.iter().sum::<f64>() / k as f64;

    let column = |c: usize| -> Vec<f64> { (0..n).map(|i| scores[i * k + c]).collect() };
    let auc = if k == 2 {
        let pos: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
        pairwise_auc(&pos, &column(1)).unwrap_or(0.5)
    } else {
        let per_class: Vec<f64> = (0..k)
            .filter_map(|c| {
                let pos: Vec<bool> = labels.iter().map(|&y| y == c).collect();
                pairwise_auc(&pos, &column(c))
            })
            .collect();
        if per_class.is_empty() {
            0.5
        } else {
            per_class.iter().sum::<f64>() / per_class.len() as f64
        }
    };

    Ok(MetricsReport {
        n_classes: k,
        accuracy: correct as f64 / n as f64,
        macro_f1,
        auc,
        precision,
        recall,
        f1,
        support,
        confusion,
    })
}

/// Row-wise softmax of `N×K` logits.
pub fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = logits.to_vec();
    for row in out.chunks_mut(k) {
        crate::tensor::kernels::softmax_in_place(row);
    }
    out
}
