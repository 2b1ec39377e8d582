//! Attack configuration types and their validation.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which objective drives the attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Away-From-Start: push an ID input away from its own features.
    Id2OodAfs,
    /// Towards-Target + Away-From-Start: pull a noise seed towards a target
    /// class embedding.
    Ood2IdTtAfs,
}

/// Random resize-and-pad policy for the diverse-inputs trick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversePolicy {
    pub min_size: usize,
    pub max_size: usize,
    pub transform_prob: f64,
}

impl DiversePolicy {
    /// Scale the reference policy (170/224 at probability 0.5) to an input size.
    pub fn for_input(size: usize) -> Self {
        DiversePolicy {
            min_size: ((size as f64 * 170.0 / 224.0).round() as usize).max(1),
            max_size: size,
            transform_prob: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_size == 0 || self.min_size > self.max_size {
            return Err(Error::Config(format!(
                "diverse policy: need 0 < min_size <= max_size, got {}..{}",
                self.min_size, self.max_size
            )));
        }
        if !(0.0..=1.0).contains(&self.transform_prob) {
            return Err(Error::Config(format!(
                "diverse policy: transform_prob {} outside [0,1]",
                self.transform_prob
            )));
        }
        Ok(())
    }
}

/// Normalized smoothing kernel for the translation-invariance trick.
#[derive(Debug, Clone, PartialEq)]
pub struct TiKernel {
    pub size: usize,
    pub weights: Array2<f64>,
}

impl TiKernel {
    /// Truncated Gaussian kernel with sigma = size / 3, normalized.
    pub fn gaussian(size: usize) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(Error::Config(format!("TI kernel size {size} must be odd")));
        }
        let sigma = size as f64 / 3.0;
        let half = (size / 2) as f64;
        let mut weights = Array2::zeros((size, size));
        for i in 0..size {
            for j in 0..size {
                let di = i as f64 - half;
                let dj = j as f64 - half;
                weights[[i, j]] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            }
        }
        let total = weights.sum();
        weights.mapv_inplace(|v| v / total);
        Ok(TiKernel { size, weights })
    }

    /// Uniform kernel, normalized.
    pub fn uniform(size: usize) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(Error::Config(format!("TI kernel size {size} must be odd")));
        }
        let w = 1.0 / (size * size) as f64;
        Ok(TiKernel { size, weights: Array2::from_elem((size, size), w) })
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % 2 == 0 {
            return Err(Error::Config(format!("TI kernel size {} must be odd", self.size)));
        }
        if self.weights.dim() != (self.size, self.size) {
            return Err(Error::Config("TI kernel weights shape mismatch".into()));
        }
        if self.weights.iter().any(|&v| v < 0.0) {
            return Err(Error::Config("TI kernel weights must be nonnegative".into()));
        }
        if (self.weights.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("TI kernel weights must sum to 1".into()));
        }
        // symmetric under 180-degree rotation
        let n = self.size;
        for i in 0..n {
            for j in 0..n {
                if (self.weights[[i, j]] - self.weights[[n - 1 - i, n - 1 - j]]).abs() > 1e-9 {
                    return Err(Error::Config(
                        "TI kernel must be symmetric under 180-degree rotation".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Full attack configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackSpec {
    pub objective: Objective,
    /// ℓ∞ budget as a fraction of the dynamic range, e.g. 16/255.
    pub epsilon: f64,
    pub steps: usize,
    /// Pixel units per iteration.
    pub step_size: f64,
    pub momentum_mu: f64,
    pub di_policy: Option<DiversePolicy>,
    pub ti_kernel: Option<TiKernel>,
    /// AFS weight in the TT+AFS objective.
    pub lambda_afs: f64,
    /// Per-member nonnegative weights summing to 1.
    pub ensemble_weights: Vec<f64>,
    pub seed: u64,
}

impl AttackSpec {
    /// Defaults for the ID→OOD direction: eps 16/255, 20 iterations, mu 1.0,
    /// step size eps/steps, uniform ensemble weights.
    pub fn id2ood_defaults(num_members: usize, input_size: usize, seed: u64) -> Self {
        let epsilon = 16.0 / 255.0;
        let steps = 20;
        AttackSpec {
            objective: Objective::Id2OodAfs,
            epsilon,
            steps,
            step_size: epsilon / steps as f64,
            momentum_mu: 1.0,
            di_policy: Some(DiversePolicy::for_input(input_size)),
            ti_kernel: None,
            lambda_afs: 0.0,
            ensemble_weights: uniform_weights(num_members),
            seed,
        }
    }

    /// Defaults for the distal OOD→ID direction: 500 iterations, lambda 0.25,
    /// TI kernel size 5. The budget defaults to 32/255 — distal seeds are
    /// noise, so a looser ball than the ID→OOD direction is appropriate.
    pub fn ood2id_defaults(num_members: usize, input_size: usize, seed: u64) -> Self {
        let epsilon = 32.0 / 255.0;
        let steps = 500;
        AttackSpec {
            objective: Objective::Ood2IdTtAfs,
            epsilon,
            steps,
            step_size: epsilon / 100.0,
            momentum_mu: 1.0,
            di_policy: Some(DiversePolicy::for_input(input_size)),
            ti_kernel: Some(TiKernel::gaussian(5).expect("odd size")),
            lambda_afs: 0.25,
            ensemble_weights: uniform_weights(num_members),
            seed,
        }
    }

    pub fn validate(&self, num_members: usize) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::Config(format!("epsilon {} outside (0,1]", self.epsilon)));
        }
        if self.step_size <= 0.0 {
            return Err(Error::Config("step_size must be positive".into()));
        }
        if self.momentum_mu < 0.0 {
            return Err(Error::Config("momentum_mu must be nonnegative".into()));
        }
        if self.lambda_afs < 0.0 {
            return Err(Error::Config("lambda_afs must be nonnegative".into()));
        }
        if self.ensemble_weights.len() != num_members {
            return Err(Error::Config(format!(
                "{} ensemble weights for {num_members} members",
                self.ensemble_weights.len()
            )));
        }
        if self.ensemble_weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Config("ensemble weights must be nonnegative".into()));
        }
        let total: f64 = self.ensemble_weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("ensemble weights sum to {total}, not 1")));
        }
        if let Some(p) = &self.di_policy {
            p.validate()?;
        }
        if let Some(k) = &self.ti_kernel {
            k.validate()?;
        }
        Ok(())
    }
}

/// Uniform ensemble weights.
pub fn uniform_weights(n: usize) -> Vec<f64> {
    if n == 0 {
        return Vec::new();
    }
    vec![1.0 / n as f64; n]
}
