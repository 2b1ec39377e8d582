//! Head persistence: a JSON manifest (kind, hyperparameters, provenance
//! fingerprint) plus a flat little-endian f64 parameter blob.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::heads::{KnnHead, KnnMetric, LinearProbeHead, ZeroShotHead};

pub const HEAD_SCHEMA_VERSION: u32 = 1;

/// Any trained head.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyHead {
    ZeroShot(ZeroShotHead),
    Probe(LinearProbeHead),
    Knn(KnnHead),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum HeadManifest {
    ZeroShot {
        schema_version: u32,
        class_names: Vec<String>,
        temperature: f64,
        embed_dim: usize,
    },
    Probe {
        schema_version: u32,
        num_classes: usize,
        feature_dim: usize,
        l2_strength: f64,
        trained_on: String,
        converged: bool,
    },
    Knn {
        schema_version: u32,
        bank_rows: usize,
        feature_dim: usize,
        num_classes: usize,
        k: usize,
        metric: KnnMetric,
        labels: Vec<usize>,
    },
}

fn write_blob(path: &Path, vals: impl Iterator<Item = f64>) -> Result<()> {
    let mut out = Vec::new();
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn read_blob(path: &Path, expect: usize) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() != expect * 8 {
        return Err(Error::Integrity(format!(
            "head blob {} has {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expect * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Save a head as `manifest.json` + `params.bin` under `dir`.
pub fn save_head(head: &AnyHead, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (manifest, params): (HeadManifest, Vec<f64>) = match head {
        AnyHead::ZeroShot(h) => (
            HeadManifest::ZeroShot {
                schema_version: HEAD_SCHEMA_VERSION,
                class_names: h.class_names.clone(),
                temperature: h.temperature,
                embed_dim: h.prototypes.ncols(),
            },
            h.prototypes.iter().cloned().collect(),
        ),
        AnyHead::Probe(h) => (
            HeadManifest::Probe {
                schema_version: HEAD_SCHEMA_VERSION,
                num_classes: h.weights.nrows(),
                feature_dim: h.weights.ncols(),
                l2_strength: h.l2_strength,
                trained_on: h.trained_on.clone(),
                converged: h.converged,
            },
            h.weights.iter().cloned().chain(h.bias.iter().cloned()).collect(),
        ),
        AnyHead::Knn(h) => (
            HeadManifest::Knn {
                schema_version: HEAD_SCHEMA_VERSION,
                bank_rows: h.bank.nrows(),
                feature_dim: h.bank.ncols(),
                num_classes: h.num_classes,
                k: h.k,
                metric: h.metric,
                labels: h.labels.clone(),
            },
            h.bank.iter().cloned().collect(),
        ),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    write_blob(&dir.join("params.bin"), params.into_iter())
}

/// Load a head saved by [`save_head`].
pub fn load_head(dir: &Path) -> Result<AnyHead> {
    let manifest: HeadManifest =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    let blob = dir.join("params.bin");
    match manifest {
        HeadManifest::ZeroShot { schema_version, class_names, temperature, embed_dim } => {
            check_version(schema_version)?;
            let k = class_names.len();
            let vals = read_blob(&blob, k * embed_dim)?;
            let protos = Array2::from_shape_vec((k, embed_dim), vals)
                .map_err(|e| Error::Integrity(e.to_string()))?;
            Ok(AnyHead::ZeroShot(ZeroShotHead::new(protos, class_names, temperature)?))
        }
        HeadManifest::Probe {
            schema_version,
            num_classes,
            feature_dim,
            l2_strength,
            trained_on,
            converged,
        } => {
            check_version(schema_version)?;
            let vals = read_blob(&blob, num_classes * feature_dim + num_classes)?;
            let (w, b) = vals.split_at(num_classes * feature_dim);
            Ok(AnyHead::Probe(LinearProbeHead {
                weights: Array2::from_shape_vec((num_classes, feature_dim), w.to_vec())
                    .map_err(|e| Error::Integrity(e.to_string()))?,
                bias: Array1::from(b.to_vec()),
                l2_strength,
                trained_on,
                converged,
            }))
        }
        HeadManifest::Knn {
            schema_version,
            bank_rows,
            feature_dim,
            num_classes,
            k,
            metric,
            labels,
        } => {
            check_version(schema_version)?;
            let vals = read_blob(&blob, bank_rows * feature_dim)?;
            let bank = Array2::from_shape_vec((bank_rows, feature_dim), vals)
                .map_err(|e| Error::Integrity(e.to_string()))?;
            Ok(AnyHead::Knn(KnnHead::new(bank, labels, num_classes, k, metric)?))
        }
    }
}

fn check_version(found: u32) -> Result<()> {
    if found != HEAD_SCHEMA_VERSION {
        return Err(Error::SchemaVersion { found, expected: HEAD_SCHEMA_VERSION });
    }
    Ok(())
}
