//! Classification heads over frozen features: zero-shot prototype matching,
//! multinomial linear probe, and kNN. All heads are immutable after
//! construction; prediction is pure.

mod probe;
mod serialize;

pub use probe::{fit_linear_probe, probe_objective_grad_norm, probe_predict_proba, LinearProbeHead};
pub use serialize::{load_head, save_head, AnyHead, HEAD_SCHEMA_VERSION};

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::zoo::toy::argmax;

/// Zero-shot head: one unit prototype row per ID class.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotHead {
    /// K × embed_dim, unit rows.
    pub prototypes: Array2<f64>,
    pub class_names: Vec<String>,
    pub temperature: f64,
}

impl ZeroShotHead {
    pub fn new(prototypes: Array2<f64>, class_names: Vec<String>, temperature: f64) -> Result<Self> {
        if prototypes.nrows() != class_names.len() {
            return Err(Error::Config("prototype/class count mismatch".into()));
        }
        if prototypes.nrows() < 2 {
            return Err(Error::Config("zero-shot head needs at least 2 classes".into()));
        }
        if temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        for row in prototypes.rows() {
            let n = row.dot(&row).sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::Config(format!("prototype row norm {n} not unit")));
            }
        }
        Ok(ZeroShotHead { prototypes, class_names, temperature })
    }
}

/// Prediction plus the per-class cosine scores.
#[derive(Debug, Clone)]
pub struct ZeroShotPrediction {
    pub class: usize,
    pub sims: Array1<f64>,
}

/// Cosine scores against each prototype; argmax with lowest-index tie-break.
pub fn zeroshot_predict(head: &ZeroShotHead, projected: ArrayView1<f64>) -> ZeroShotPrediction {
    let sims = head.prototypes.dot(&projected);
    ZeroShotPrediction { class: argmax(sims.view()), sims }
}

/// Distance metric for the kNN head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnnMetric {
    Cosine,
    Euclidean,
}

/// kNN head over a bank of frozen feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnHead {
    /// N × feature_dim.
    pub bank: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub k: usize,
    pub metric: KnnMetric,
}

impl KnnHead {
    pub fn new(
        bank: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        k: usize,
        metric: KnnMetric,
    ) -> Result<Self> {
        if bank.nrows() == 0 {
            return Err(Error::Validation("kNN bank is empty".into()));
        }
        if bank.nrows() != labels.len() {
            return Err(Error::Validation("kNN bank/label length mismatch".into()));
        }
        if k == 0 || k > bank.nrows() {
            return Err(Error::Validation(format!(
                "k={k} outside 1..={}",
                bank.nrows()
            )));
        }
        if bank.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("kNN bank has nonfinite rows".into()));
        }
        Ok(KnnHead { bank, labels, num_classes, k, metric })
    }
}

fn knn_distance(metric: KnnMetric, a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    match metric {
        KnnMetric::Euclidean => {
            let mut acc = 0.0;
            for (x, y) in a.iter().zip(b.iter()) {
                acc += (x - y) * (x - y);
            }
            acc.sqrt()
        }
        KnnMetric::Cosine => {
            let na = a.dot(&a).sqrt().max(1e-12);
            let nb = b.dot(&b).sqrt().max(1e-12);
            1.0 - a.dot(&b) / (na * nb)
        }
    }
}

/// Per-class neighbor vote fractions of the k nearest bank rows. Ties in
/// distance are broken by bank index.
pub fn knn_predict_proba(head: &KnnHead, features: ArrayView1<f64>) -> Result<Array1<f64>> {
    if features.len() != head.bank.ncols() {
        return Err(Error::Validation("kNN query dimension mismatch".into()));
    }
    let mut dists: Vec<(f64, usize)> = head
        .bank
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| (knn_distance(head.metric, features, row), i))
        .collect();
    dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut votes = Array1::zeros(head.num_classes);
    for &(_, idx) in dists.iter().take(head.k) {
        votes[head.labels[idx]] += 1.0 / head.k as f64;
    }
    Ok(votes)
}

/// Class prediction from vote fractions (lowest-index tie-break).
pub fn knn_predict(head: &KnnHead, features: ArrayView1<f64>) -> Result<usize> {
    Ok(argmax(knn_predict_proba(head, features)?.view()))
}

/// Softmax with max-shift for stability.
pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Array1<f64> = logits.mapv(|v| (v - m).exp());
    let total = exp.sum();
    exp.mapv(|v| v / total)
}
