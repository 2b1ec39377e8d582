//! Attack-success metrics: accuracy, tie-corrected AUROC, FNR95, FPR95, and
//! targeted success rate. All values are raw fractions; percent formatting is
//! presentation-layer only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Metric identifier used in report rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Acc,
    Auroc,
    Fnr95,
    Fpr95,
    Tsuc,
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MetricKind::Acc => "acc",
            MetricKind::Auroc => "auroc",
            MetricKind::Fnr95 => "fnr95",
            MetricKind::Fpr95 => "fpr95",
            MetricKind::Tsuc => "tsuc",
        };
        write!(f, "{s}")
    }
}

/// Tie-corrected Mann–Whitney AUROC between positive and negative scores.
/// Rank-based, O((n+m) log(n+m)); exact 0.5 credit for ties.
pub fn auroc(pos_scores: &[f64], neg_scores: &[f64]) -> Result<f64> {
    if pos_scores.is_empty() || neg_scores.is_empty() {
        return Err(Error::Validation("auroc: empty score list".into()));
    }
    let n = pos_scores.len();
    let m = neg_scores.len();
    let mut all: Vec<(f64, bool)> = pos_scores
        .iter()
        .map(|&s| (s, true))
        .chain(neg_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    // average ranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0; // ranks are 1-based
        for item in &all[i..j] {
            if item.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n * (n + 1)) as f64 / 2.0;
    Ok(u / (n as f64 * m as f64))
}

/// Fraction of attacked-ID scores strictly below the threshold (complementing
/// the ">= tau is ID" tie rule).
pub fn fnr_at_threshold(adv_scores: &[f64], tau: f64) -> Result<f64> {
    if adv_scores.is_empty() {
        return Err(Error::Validation("fnr_at_threshold: empty score list".into()));
    }
    Ok(adv_scores.iter().filter(|&&s| s < tau).count() as f64 / adv_scores.len() as f64)
}

/// Fraction of distal scores at or above the threshold.
pub fn fpr_at_threshold(distal_scores: &[f64], tau: f64) -> Result<f64> {
    if distal_scores.is_empty() {
        return Err(Error::Validation("fpr_at_threshold: empty score list".into()));
    }
    Ok(distal_scores.iter().filter(|&&s| s >= tau).count() as f64 / distal_scores.len() as f64)
}

/// Fraction of predictions matching the ground-truth labels.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Validation(format!(
            "accuracy: {} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Validation("accuracy: empty input".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Fraction of predictions matching the attacker-chosen target classes.
pub fn targeted_success(predictions: &[usize], targets: &[usize]) -> Result<f64> {
    accuracy(predictions, targets).map_err(|_| {
        Error::Validation(format!(
            "targeted_success: {} predictions vs {} targets",
            predictions.len(),
            targets.len()
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force pairwise AUROC oracle.
    pub fn auroc_oracle(pos: &[f64], neg: &[f64]) -> f64 {
        let mut acc = 0.0;
        for &p in pos {
            for &n in neg {
                if p > n {
                    acc += 1.0;
                } else if p == n {
                    acc += 0.5;
                }
            }
        }
        acc / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn auroc_full_separation() {
        assert_eq!(auroc(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 1.0);
    }

    #[test]
    fn auroc_identical_multisets() {
        let s = [0.1, 0.4, 0.4, 0.9];
        assert!((auroc(&s, &s).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn auroc_tie_example() {
        // no wins, two half-credit ties out of six pairs
        let v = auroc(&[1.0, 2.0, 2.0], &[2.0, 3.0]).unwrap();
        assert!((v - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn auroc_matches_oracle_with_ties() {
        let mut rng = crate::rng::stream(&[0xacc]);
        use rand::Rng;
        for _ in 0..200 {
            let n = rng.gen_range(1..30);
            let m = rng.gen_range(1..30);
            // coarse grid forces heavy ties
            let pos: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..8) as f64) / 8.0).collect();
            let neg: Vec<f64> = (0..m).map(|_| (rng.gen_range(0..8) as f64) / 8.0).collect();
            let fast = auroc(&pos, &neg).unwrap();
            let slow = auroc_oracle(&pos, &neg);
            assert!((fast - slow).abs() < 1e-9);
        }
    }

    #[test]
    fn auroc_complement_identity() {
        let pos = [0.2, 0.5, 0.5, 0.8];
        let neg = [0.1, 0.5, 0.9];
        let a = auroc(&pos, &neg).unwrap();
        let b = auroc(&neg, &pos).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fnr_fpr_examples() {
        assert_eq!(fnr_at_threshold(&[0.1, 0.2], 0.5).unwrap(), 1.0);
        assert_eq!(fnr_at_threshold(&[0.5, 0.5], 0.5).unwrap(), 0.0);
        assert!((fnr_at_threshold(&[0.1, 0.5, 0.9], 0.5).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(fpr_at_threshold(&[0.5, 0.6], 0.5).unwrap(), 1.0);
        assert_eq!(fpr_at_threshold(&[0.1, 0.2], 0.5).unwrap(), 0.0);
    }

    #[test]
    fn fnr_fpr_complementarity() {
        let s = [0.1, 0.3, 0.3, 0.7, 0.9];
        for tau in [0.0, 0.3, 0.5, 1.0] {
            let f = fnr_at_threshold(&s, tau).unwrap() + fpr_at_threshold(&s, tau).unwrap();
            assert!((f - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn accuracy_counting() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 2], &[3, 4]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn targeted_success_counting() {
        assert_eq!(targeted_success(&[2; 10], &[2; 10]).unwrap(), 1.0);
        let preds = [0, 1, 2, 0, 1, 2, 0, 1, 2, 0];
        let tgts = [0, 1, 2, 0, 1, 2, 0, 0, 0, 9];
        assert!((targeted_success(&preds, &tgts).unwrap() - 0.7).abs() < 1e-12);
    }
}
