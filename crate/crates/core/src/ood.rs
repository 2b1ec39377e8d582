//! Post-hoc OOD scoring (MCM for zero-shot heads, MSP for parameterized
//! heads) and the 95%-TPR thresholding protocol.
//!
//! Tie rule throughout: a score greater than or equal to the threshold counts
//! as in-distribution.

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::softmax;

/// Which detector scores a head's outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetectorConfig {
    /// Maximum Concept Matching over temperature-scaled cosine similarities.
    Mcm { temperature: f64 },
    /// Maximum Softmax Probability of a classifier head.
    Msp,
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if let DetectorConfig::Mcm { temperature } = self {
            if *temperature <= 0.0 {
                return Err(Error::Config(format!(
                    "MCM temperature {temperature} must be positive"
                )));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            DetectorConfig::Mcm { .. } => "mcm",
            DetectorConfig::Msp => "msp",
        }
    }
}

/// How the clean-ID threshold is computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub tpr_target: f64,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy { tpr_target: 0.95 }
    }
}

/// MCM score: max softmax of the cosine similarities divided by temperature.
pub fn mcm_score(sims: ArrayView1<f64>, temperature: f64) -> f64 {
    let scaled = sims.mapv(|s| s / temperature);
    softmax(scaled.view()).iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// MSP score: max entry of a probability simplex.
pub fn msp_score(probs: ArrayView1<f64>) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Validation("msp_score: empty probability vector".into()));
    }
    let total: f64 = probs.sum();
    if (total - 1.0).abs() > 1e-6 || probs.iter().any(|&p| p < -1e-12) {
        return Err(Error::Validation(format!(
            "msp_score: input is not a probability simplex (sum {total})"
        )));
    }
    Ok(probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
}

/// Threshold retaining at least `tpr_target` of the clean scores as ID under
/// the "score >= tau is ID" tie rule. Uses the linear-interpolated
/// `(1 - tpr_target)` quantile, lowered to the nearest order statistic if the
/// interpolated value would under-retain.
pub fn tpr95_threshold(clean_scores: &[f64], policy: &ThresholdPolicy) -> Result<f64> {
    if clean_scores.is_empty() {
        return Err(Error::Validation("tpr95_threshold: empty score list".into()));
    }
    if !(policy.tpr_target > 0.0 && policy.tpr_target < 1.0) {
        return Err(Error::Validation(format!(
            "tpr_target {} outside (0,1)",
            policy.tpr_target
        )));
    }
    if clean_scores.len() < 20 {
        eprintln!(
            "warning: tpr95_threshold over only {} scores; the quantile is degenerate",
            clean_scores.len()
        );
    }
    let mut sorted = clean_scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let q = 1.0 - policy.tpr_target;
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    let mut tau = sorted[lo] + frac * (sorted[hi] - sorted[lo]);

    // guarantee clean TPR >= target under the tie rule
    let retained = |t: f64| sorted.iter().filter(|&&s| s >= t).count() as f64 / n as f64;
    let mut idx = lo;
    while retained(tau) < policy.tpr_target {
        tau = sorted[idx];
        if retained(tau) >= policy.tpr_target || idx == 0 {
            break;
        }
        idx -= 1;
    }
    Ok(tau)
}
