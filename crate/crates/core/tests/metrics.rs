//! Metrics against brute-force pair counting and direct confusion formulas.

mod common;

use common::rng;
use fixformer_core::train::{compute_metrics, pairwise_auc};
use rand::Rng;

/// `P(score+ > score−) + ½·P(tie)` by enumerating every pair.
fn brute_auc(pos: &[bool], s: &[f64]) -> Option<f64> {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if pos[i] && !pos[j] {
                pairs += 1;
                twice += if s[i] > s[j] {
                    2
                } else if s[i] == s[j] {
                    1
                } else {
                    0
                };
            }
        }
    }
    (pairs > 0).then(|| twice as f64 / (2 * pairs) as f64)
}

fn first_argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b })
}

struct Instance {
    labels: Vec<usize>,
    scores: Vec<f64>,
    k: usize,
}

fn instance(seed: u64) -> Instance {
    let mut r = rng(seed);
    let k = r.random_range(2..=4);
    let n = r.random_range(1..=25);
    // Few distinct levels so ties are common.
    let levels = r.random_range(2..=6);
    let labels = (0..n).map(|_| r.random_range(0..k)).collect();
    let scores = (0..n * k).map(|_| r.random_range(0..levels) as f64 / levels as f64).collect();
    Instance { labels, scores, k }
}

#[test]
fn thousands_of_random_instances_match_exactly() {
    for seed in 0..2000u64 {
        let Instance { labels, scores, k } = instance(seed);
        let n = labels.len();
        let m = compute_metrics(&labels, &scores, k).unwrap();

        let pred: Vec<usize> = (0..n).map(|i| first_argmax(&scores[i * k..(i + 1) * k])).collect();
        let correct = (0..n).filter(|&i| pred[i] == labels[i]).count();
        assert_eq!(m.accuracy, correct as f64 / n as f64, "seed {seed}");

        let mut f1_sum = 0.0;
        for c in 0..k {
            let tp = (0..n).filter(|&i| pred[i] == c && labels[i] == c).count();
            let fp = (0..n).filter(|&i| pred[i] == c && labels[i] != c).count();
            let fn_ = (0..n).filter(|&i| pred[i] != c && labels[i] == c).count();
            let f1 = if 2 * tp + fp + fn_ == 0 {
                0.0
            } else {
                (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
            };
            assert_eq!(m.f1[c], f1, "seed {seed} class {c}");
            f1_sum += f1;
            assert_eq!(m.support[c], tp + fn_);
            let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            assert_eq!(m.precision[c], p);
        }
        assert_eq!(m.macro_f1, f1_sum / k as f64, "seed {seed}");

        let col = |c: usize| -> Vec<f64> { (0..n).map(|i| scores[i * k + c]).collect() };
        let want_auc = if k == 2 {
            let pos: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
            brute_auc(&pos, &col(1)).unwrap_or(0.5)
        } else {
            let per: Vec<f64> = (0..k)
                .filter_map(|c| brute_auc(&labels.iter().map(|&y| y == c).collect::<Vec<_>>(), &col(c)))
                .collect();
            if per.is_empty() {
                0.5
            } else {
                per.iter().sum::<f64>() / per.len() as f64
            }
        };
        assert_eq!(m.auc, want_auc, "seed {seed}");
        let confusion_total: usize = m.confusion.iter().flatten().sum();
        assert_eq!(confusion_total, n);
    }
}

#[test]
fn pairwise_auc_matches_brute_force_on_continuous_scores() {
    for seed in 0..1000u64 {
        let mut r = rng(seed);
        let n = r.random_range(1..40);
        let pos: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        let s: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        assert_eq!(pairwise_auc(&pos, &s), brute_auc(&pos, &s), "seed {seed}");
    }
}

#[test]
fn degenerate_auc_cases() {
    assert_eq!(pairwise_auc(&[true, true], &[0.1, 0.2]), None);
    assert_eq!(pairwise_auc(&[false, true], &[0.2, 0.2]), Some(0.5));
    let m = compute_metrics(&[0, 0], &[0.9, 0.1, 0.8, 0.2], 2).unwrap();
    assert_eq!(m.auc, 0.5);
    assert_eq!(m.f1, vec![1.0, 0.0]);
}

#[test]
fn invalid_inputs_are_rejected() {
    assert!(compute_metrics(&[], &[], 2).is_err());
    assert!(compute_metrics(&[2], &[0.5, 0.5], 2).is_err());
    assert!(compute_metrics(&[0], &[0.5], 1).is_err());
    assert!(compute_metrics(&[0], &[f64::NAN, 0.5], 2).is_err());
}
