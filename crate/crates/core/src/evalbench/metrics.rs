//! Accuracy, AUC and R² for a single task.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::{TaskDataset, TaskKind};

/// Fraction of predicted labels equal to the true ones.
pub fn metric_accuracy(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Probability that a positive example scores above a negative one, ties
/// counting one half. Labels are `+1`/`-1`.
pub fn metric_auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(scores, labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("AUC scores contain NaN"));
    }
    let n_pos = labels.iter().filter(|&&l| l > 0.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("AUC is undefined when only one class is present"));
    }
    // Mann-Whitney: sum of positive ranks with tied groups sharing the mean rank.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        pos_rank_sum += mean_rank * order[i..=j].iter().filter(|&&k| labels[k] > 0.0).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Coefficient of determination, floored at zero so that it shares the unit
/// interval with the classification metrics. A constant target scores 1 when
/// predicted exactly and 0 otherwise.
pub fn metric_r2(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_lengths(preds, targets)?;
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let sse: f64 = preds.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum();
    let sst: f64 = targets.iter().map(|t| (t - mean).powi(2)).sum();
    if sst == 0.0 {
        return Ok(if sse == 0.0 { 1.0 } else { 0.0 });
    }
    Ok((1.0 - sse / sst).max(0.0))
}

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension { expected: b.len(), got: a.len() });
    }
    if b.is_empty() {
        return Err(Error::invalid("metric over zero examples"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    Accuracy,
    Auc,
    R2,
}

impl Metric {
    /// Accuracy for classification, R² for regression.
    pub fn default_for(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Classification => Metric::Accuracy,
            TaskKind::Regression => Metric::R2,
        }
    }

    pub fn supports(self, kind: TaskKind) -> bool {
        matches!(
            (self, kind),
            (Metric::Accuracy | Metric::Auc, TaskKind::Classification) | (Metric::R2, TaskKind::Regression)
        )
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Accuracy => "accuracy",
            Metric::Auc => "auc",
            Metric::R2 => "r2",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "accuracy" | "acc" => Ok(Metric::Accuracy),
            "auc" => Ok(Metric::Auc),
            "r2" => Ok(Metric::R2),
            other => Err(Error::invalid(format!("unknown metric '{other}'"))),
        }
    }
}

/// Scores `task` with linear weights `w`. Classification labels threshold the
/// margin at zero (probability 0.5); AUC ranks the margins.
pub fn evaluate_weights(task: &TaskDataset, w: &DVector<f64>, metric: Metric) -> Result<f64> {
    if !metric.supports(task.kind) {
        return Err(Error::invalid(format!("metric {metric} does not apply to {:?} tasks", task.kind)));
    }
    if w.len() != task.dim() {
        return Err(Error::Dimension { expected: task.dim(), got: w.len() });
    }
    let margins: Vec<f64> = task.x.mul_vec(w).iter().copied().collect();
    match metric {
        Metric::Accuracy => {
            let preds: Vec<f64> = margins.iter().map(|&m| if m >= 0.0 { 1.0 } else { -1.0 }).collect();
            metric_accuracy(&preds, &task.y)
        }
        Metric::Auc => metric_auc(&margins, &task.y),
        Metric::R2 => metric_r2(&margins, &task.y),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive pairwise count.
    fn auc_pairs(scores: &[f64], labels: &[f64]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] > 0.0 && labels[j] < 0.0 {
                    den += 1.0;
                    num += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_edge_cases() {
        assert_eq!(metric_auc(&[0.9, 0.8, 0.1], &[1.0, 1.0, -1.0]).unwrap(), 1.0);
        assert_eq!(metric_auc(&[0.3; 4], &[1.0, -1.0, 1.0, -1.0]).unwrap(), 0.5);
        assert_eq!(metric_auc(&[0.1, 0.9], &[1.0, -1.0]).unwrap(), 0.0);
        assert!(metric_auc(&[0.1, 0.2], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn accuracy_and_r2() {
        assert_eq!(metric_accuracy(&[1.0, -1.0, 1.0, 1.0], &[1.0, 1.0, 1.0, -1.0]).unwrap(), 0.5);
        assert!(metric_accuracy(&[1.0], &[]).is_err());
        assert_eq!(metric_r2(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        // mean prediction scores zero; worse than the mean is floored
        assert_eq!(metric_r2(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(metric_r2(&[3.0, 2.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!((metric_r2(&[1.5, 2.0, 2.5], &[1.0, 2.0, 3.0]).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn metric_names_round_trip() {
        for m in [Metric::Accuracy, Metric::Auc, Metric::R2] {
            assert_eq!(m.to_string().parse::<Metric>().unwrap(), m);
        }
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_count(
            pts in prop::collection::vec((0u8..6, any::<bool>()), 2..40)
        ) {
            let scores: Vec<f64> = pts.iter().map(|p| p.0 as f64).collect();
            let labels: Vec<f64> = pts.iter().map(|p| if p.1 { 1.0 } else { -1.0 }).collect();
            prop_assume!(labels.iter().any(|&l| l > 0.0) && labels.iter().any(|&l| l < 0.0));
            let a = metric_auc(&scores, &labels).unwrap();
            prop_assert!((a - auc_pairs(&scores, &labels)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
            // strictly monotone transform leaves the ranking alone
            let t: Vec<f64> = scores.iter().map(|s| (0.7 * s).exp() - 3.0).collect();
            prop_assert_eq!(metric_auc(&t, &labels).unwrap(), a);
        }
    }
}
