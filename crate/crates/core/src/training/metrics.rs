//! Classification metrics and fold aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub auc: f64,
    pub f1: f64,
}

pub fn accuracy(labels: &[usize], predicted: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels.iter().zip(predicted).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}

/// F1 of class 1; 0 when there are no true positives.
pub fn f1_score(labels: &[usize], predicted: &[usize]) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fneg = 0usize;
    for (&y, &p) in labels.iter().zip(predicted) {
        match (y, p) {
            (1, 1) => tp += 1,
            (0, 1) => fp += 1,
            (1, 0) => fneg += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
}

/// Mann-Whitney AUC of class-1 scores; ties earn half credit.
pub fn auc(labels: &[usize], scores: &[f64]) -> Result<f64> {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    // average ranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Metrics from class-1 probabilities; the predicted class is the argmax.
pub fn evaluate_scores(labels: &[usize], prob_pos: &[f64]) -> Result<Metrics> {
    let predicted: Vec<usize> = prob_pos.iter().map(|&p| usize::from(p > 0.5)).collect();
    Ok(Metrics {
        acc: accuracy(labels, &predicted),
        auc: auc(labels, prob_pos)?,
        f1: f1_score(labels, &predicted),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub folds: Vec<Metrics>,
    pub mean: Metrics,
    pub std: Metrics,
}

impl MetricsReport {
    /// Population standard deviation across folds.
    pub fn from_folds(folds: Vec<Metrics>) -> Self {
        let n = folds.len().max(1) as f64;
        let pick = |f: fn(&Metrics) -> f64| -> (f64, f64) {
            let mean = folds.iter().map(f).sum::<f64>() / n;
            let var = folds.iter().map(|m| (f(m) - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        };
        let (acc, acc_sd) = pick(|m| m.acc);
        let (auc, auc_sd) = pick(|m| m.auc);
        let (f1, f1_sd) = pick(|m| m.f1);
        Self {
            folds,
            mean: Metrics { acc, auc, f1 },
            std: Metrics {
                acc: acc_sd,
                auc: auc_sd,
                f1: f1_sd,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force_auc(labels: &[usize], scores: &[f64]) -> f64 {
        let mut credit = 0.0;
        let mut pairs = 0.0;
        for (i, &yi) in labels.iter().enumerate() {
            for (j, &yj) in labels.iter().enumerate() {
                if yi == 1 && yj == 0 {
                    pairs += 1.0;
                    credit += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
        }
        credit / pairs
    }

    #[test]
    fn separated_scores_give_unit_auc() {
        assert_eq!(auc(&[1, 1, 0, 0], &[0.9, 0.8, 0.7, 0.1]).unwrap(), 1.0);
    }

    #[test]
    fn perfect_predictions() {
        let m = evaluate_scores(&[1, 0, 1, 0], &[0.9, 0.2, 0.7, 0.1]).unwrap();
        assert_eq!((m.acc, m.auc, m.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn all_negative_predictions() {
        let labels = [1, 1, 0, 0];
        let pred = [0, 0, 0, 0];
        assert_eq!(accuracy(&labels, &pred), 0.5);
        assert_eq!(f1_score(&labels, &pred), 0.0);
    }

    #[test]
    fn single_class_auc_is_an_error() {
        assert!(matches!(auc(&[1, 1], &[0.2, 0.3]), Err(Error::SingleClass)));
    }

    #[test]
    fn fold_aggregation() {
        let r = MetricsReport::from_folds(vec![
            Metrics { acc: 1.0, auc: 1.0, f1: 1.0 },
            Metrics { acc: 0.5, auc: 0.5, f1: 0.0 },
        ]);
        assert_eq!(r.mean.acc, 0.75);
        assert_eq!(r.std.f1, 0.5);
    }

    proptest! {
        #[test]
        fn auc_matches_pair_count(
            data in prop::collection::vec((0usize..2, 0u8..6), 2..40)
        ) {
            let labels: Vec<usize> = data.iter().map(|d| d.0).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            // coarse scores force plenty of ties
            let scores: Vec<f64> = data.iter().map(|d| d.1 as f64 / 5.0).collect();
            let a = auc(&labels, &scores).unwrap();
            prop_assert!((a - brute_force_auc(&labels, &scores)).abs() < 1e-12);
        }
    }
}
