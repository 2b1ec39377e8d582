//! Campaign configuration: the TOML-facing types and their resolution into
//! runtime attack specs.

use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use crate::attack::{AttackSpec, DiversePolicy, Objective, TiKernel};
use crate::error::{Error, Result};
use crate::ood::DetectorConfig;
use crate::zoo::ToyWorldSpec;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// A numeric value that may be written as a fraction string ("16/255") and is
/// kept in its source form for exact snapshots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Fraction {
    Text(String),
    Num(f64),
}

impl Fraction {
    pub fn value(&self) -> Result<f64> {
        match self {
            Fraction::Num(v) => Ok(*v),
            Fraction::Text(s) => {
                if let Some((a, b)) = s.split_once('/') {
                    let num: f64 = a
                        .trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad fraction '{s}'")))?;
                    let den: f64 = b
                        .trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad fraction '{s}'")))?;
                    if den == 0.0 {
                        return Err(Error::Config(format!("zero denominator in '{s}'")));
                    }
                    Ok(num / den)
                } else {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad number '{s}'")))
                }
            }
        }
    }
}

/// Dataset source: the built-in toy world or an ingested directory tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskConfig {
    Toy {
        #[serde(default)]
        world: ToyWorldSpec,
        #[serde(default)]
        data_seed: u64,
    },
    /// Tree layout: `<split>/<class_name>/*.png` with an `ood/<kind>/*.png`
    /// sibling for natural OOD sources.
    Dir { path: PathBuf },
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig::Toy { world: ToyWorldSpec::default(), data_seed: 0 }
    }
}

/// One entry of the model pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Toy {
        id: String,
        seed: u64,
        #[serde(default)]
        num_patterns: Option<usize>,
        #[serde(default)]
        pool_grid: Option<usize>,
    },
    External {
        id: String,
        model_id: String,
        cache_dir: PathBuf,
    },
}

impl ModelConfig {
    pub fn id(&self) -> &str {
        match self {
            ModelConfig::Toy { id, .. } => id,
            ModelConfig::External { id, .. } => id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub models: Vec<ModelConfig>,
    /// Subset of model ids used to generate perturbations.
    pub whitebox: Vec<String>,
}

/// Classification head scheme evaluated on every pool model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadScheme {
    Zeroshot,
    Probe,
    Knn,
}

impl std::fmt::Display for HeadScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            HeadScheme::Zeroshot => "zeroshot",
            HeadScheme::Probe => "probe",
            HeadScheme::Knn => "knn",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub scheme: HeadScheme,
    /// kNN neighbor count.
    #[serde(default = "default_knn_k")]
    pub knn_k: usize,
    /// Probe L2 strength; defaults to 1/N at fit time when absent.
    #[serde(default)]
    pub probe_l2: Option<f64>,
    #[serde(default = "default_probe_max_iter")]
    pub probe_max_iter: usize,
}

fn default_knn_k() -> usize {
    5
}

fn default_probe_max_iter() -> usize {
    1000
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            scheme: HeadScheme::Zeroshot,
            knn_k: default_knn_k(),
            probe_l2: None,
            probe_max_iter: default_probe_max_iter(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiConfig {
    pub min_size: usize,
    pub max_size: usize,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiConfig {
    pub size: usize,
    #[serde(default = "default_ti_shape")]
    pub shape: String,
}

fn default_ti_shape() -> String {
    "gaussian".into()
}

/// Attack section of the config file; flat keys mirroring the runtime spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub objective: Objective,
    pub epsilon: Fraction,
    pub steps: usize,
    /// Defaults to epsilon/steps when absent.
    #[serde(default)]
    pub step_size: Option<Fraction>,
    #[serde(default = "default_mu")]
    pub momentum_mu: f64,
    #[serde(default)]
    pub di: Option<DiConfig>,
    #[serde(default)]
    pub ti: Option<TiConfig>,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub seed: u64,
    /// Per-whitebox weights; uniform when absent.
    #[serde(default)]
    pub ensemble_weights: Option<Vec<f64>>,
}

fn default_mu() -> f64 {
    1.0
}

impl AttackConfig {
    /// Resolve into a runtime [`AttackSpec`] for `num_members` whiteboxes.
    pub fn resolve(&self, num_members: usize) -> Result<AttackSpec> {
        let epsilon = self.epsilon.value()?;
        let step_size = match &self.step_size {
            Some(f) => f.value()?,
            None => {
                if self.steps == 0 {
                    epsilon
                } else {
                    epsilon / self.steps as f64
                }
            }
        };
        let ti_kernel = match &self.ti {
            None => None,
            Some(t) => Some(match t.shape.as_str() {
                "gaussian" => TiKernel::gaussian(t.size)?,
                "uniform" => TiKernel::uniform(t.size)?,
                other => {
                    return Err(Error::Config(format!(
                        "attack.ti.shape: unknown kernel shape '{other}'"
                    )))
                }
            }),
        };
        let spec = AttackSpec {
            objective: self.objective,
            epsilon,
            steps: self.steps,
            step_size,
            momentum_mu: self.momentum_mu,
            di_policy: self.di.as_ref().map(|d| DiversePolicy {
                min_size: d.min_size,
                max_size: d.max_size,
                transform_prob: d.prob,
            }),
            ti_kernel,
            lambda_afs: self.lambda,
            ensemble_weights: match &self.ensemble_weights {
                Some(w) => w.clone(),
                None => crate::attack::uniform_weights(num_members),
            },
            seed: self.seed,
        };
        spec.validate(num_members)?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// 0 means machine parallelism.
    #[serde(default)]
    pub workers: usize,
}

/// Full campaign configuration, mirroring the TOML config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub task: TaskConfig,
    pub pool: PoolConfig,
    #[serde(default)]
    pub head: HeadConfig,
    pub detector: DetectorConfig,
    pub attack: AttackConfig,
    #[serde(default = "default_num_distals")]
    pub num_distals: usize,
    pub output: OutputConfig,
}

fn default_schema_version() -> u32 {
    CONFIG_SCHEMA_VERSION
}

fn default_num_distals() -> usize {
    100
}

impl CampaignConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: CampaignConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    /// Canonical snapshot covering the experiment-defining fields only.
    /// Execution-side settings (output directory, worker count) are reset to
    /// defaults so reruns of the same experiment agree on the digest.
    pub fn canonical_snapshot(&self) -> Result<String> {
        let mut canon = self.clone();
        canon.output = OutputConfig { dir: PathBuf::new(), workers: 0 };
        canon.to_toml()
    }

    /// Hex digest of the canonical snapshot; recorded in every report.
    pub fn digest(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.canonical_snapshot()?.as_bytes());
        Ok(h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: self.schema_version,
                expected: CONFIG_SCHEMA_VERSION,
            });
        }
        if self.pool.models.is_empty() {
            return Err(Error::Config("pool.models is empty".into()));
        }
        let ids: Vec<&str> = self.pool.models.iter().map(|m| m.id()).collect();
        for (i, id) in ids.iter().enumerate() {
            if ids[..i].contains(id) {
                return Err(Error::Config(format!("duplicate pool model id '{id}'")));
            }
        }
        if self.pool.whitebox.is_empty() {
            return Err(Error::Config("pool.whitebox is empty".into()));
        }
        for w in &self.pool.whitebox {
            if !ids.contains(&w.as_str()) {
                return Err(Error::Config(format!(
                    "pool.whitebox id '{w}' is not in pool.models"
                )));
            }
        }
        self.detector.validate()?;
        match (self.head.scheme, &self.detector) {
            (HeadScheme::Zeroshot, DetectorConfig::Mcm { .. }) => {}
            (HeadScheme::Probe | HeadScheme::Knn, DetectorConfig::Msp) => {}
            (scheme, det) => {
                return Err(Error::Config(format!(
                    "detector.kind: {} detector is incompatible with head_scheme {scheme}",
                    det.name()
                )))
            }
        }
        if let TaskConfig::Toy { world, .. } = &self.task {
            world.validate()?;
        }
        // resolve attack early so config errors surface before any compute
        self.attack.resolve(self.pool.whitebox.len())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fraction_parsing() {
        assert!((Fraction::Text("16/255".into()).value().unwrap() - 16.0 / 255.0).abs() < 1e-15);
        assert!((Fraction::Text("0.05".into()).value().unwrap() - 0.05).abs() < 1e-15);
        assert!((Fraction::Num(0.1).value().unwrap() - 0.1).abs() < 1e-15);
        assert!(Fraction::Text("1/0".into()).value().is_err());
        assert!(Fraction::Text("x".into()).value().is_err());
    }
}
