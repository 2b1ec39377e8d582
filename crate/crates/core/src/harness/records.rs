//! Campaign outputs: per-sample score records, metric rows, and report
//! persistence. Every metric row is recomputable from the persisted records;
//! `verify_report` checks that invariant.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{
    accuracy, auroc, fnr_at_threshold, fpr_at_threshold, targeted_success, MetricKind,
};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Where a scored image came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    CleanId,
    AdvId,
    Distal,
    NaturalOod,
    NoiseId,
}

/// One (image, model) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub provenance: Provenance,
    pub model_id: String,
    pub head: String,
    pub detector: String,
    pub ood_score: f64,
    pub predicted_class: usize,
    /// ID ground truth, or the attacker's target class for distals.
    pub true_class: Option<usize>,
    pub attack_config_digest: String,
}

/// Which population a metric row describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Clean evaluation, no attack involved.
    Clean,
    /// Attacked, model was in the generating ensemble.
    Whitebox,
    /// Attacked, model was held out of the generating ensemble.
    Transfer,
    /// Mean over all transfer rows of the same metric.
    BlackboxAvg,
    /// Uniform-noise perturbation baseline.
    Noise,
}

/// One aggregated metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: MetricKind,
    pub value: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub threshold: Option<f64>,
    pub model_id: String,
    pub head: String,
    pub detector: String,
    pub scope: Scope,
    pub attack_config_digest: String,
}

/// Per-model calibration outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub model_id: String,
    pub tau: f64,
    pub clean_tpr: f64,
}

/// Full campaign report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub schema_version: u32,
    pub config_digest: String,
    /// Exact TOML snapshot the digest is computed over.
    pub config_snapshot: String,
    pub thresholds: Vec<ThresholdRow>,
    /// (model_id, reason) for pool members that failed to load.
    pub model_failures: Vec<(String, String)>,
    pub records: Vec<ScoreRecord>,
    pub metrics: Vec<MetricRow>,
}

#[derive(Serialize, Deserialize)]
struct ReportMeta {
    schema_version: u32,
    config_digest: String,
    thresholds: Vec<ThresholdRow>,
    model_failures: Vec<(String, String)>,
}

/// Persist a report under `dir`: `records.ndjson`, `metrics.csv`,
/// `transfer_matrix.csv`, `config.snapshot`, `report.json`. Writes are
/// deterministic: identical reports produce byte-identical files.
pub fn write_report(report: &ReportBundle, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;

    let mut ndjson = String::new();
    for rec in &report.records {
        ndjson.push_str(&serde_json::to_string(rec)?);
        ndjson.push('\n');
    }
    std::fs::write(dir.join("records.ndjson"), ndjson)?;

    let mut wtr = csv::Writer::from_path(dir.join("metrics.csv"))?;
    for row in &report.metrics {
        wtr.serialize(row)?;
    }
    wtr.flush()?;
    drop(wtr);

    write_transfer_matrix(report, &dir.join("transfer_matrix.csv"))?;
    std::fs::write(dir.join("config.snapshot"), &report.config_snapshot)?;

    let meta = ReportMeta {
        schema_version: report.schema_version,
        config_digest: report.config_digest.clone(),
        thresholds: report.thresholds.clone(),
        model_failures: report.model_failures.clone(),
    };
    std::fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

/// Pivot of the attacked metric rows: one line per (metric, scope, model).
fn write_transfer_matrix(report: &ReportBundle, path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["metric", "scope", "model_id", "value"])?;
    for row in &report.metrics {
        if matches!(row.scope, Scope::Whitebox | Scope::Transfer | Scope::BlackboxAvg) {
            wtr.write_record([
                row.metric.to_string(),
                format!("{:?}", row.scope).to_lowercase(),
                row.model_id.clone(),
                row.value.to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Load a report written by [`write_report`], verifying the schema version and
/// that the config snapshot still matches the recorded digest.
pub fn read_report(dir: &Path) -> Result<ReportBundle> {
    let meta: ReportMeta = serde_json::from_slice(&std::fs::read(dir.join("report.json"))?)?;
    if meta.schema_version != REPORT_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: meta.schema_version,
            expected: REPORT_SCHEMA_VERSION,
        });
    }
    let config_snapshot = std::fs::read_to_string(dir.join("config.snapshot"))?;
    let digest = snapshot_digest(&config_snapshot);
    if digest != meta.config_digest {
        return Err(Error::Integrity(format!(
            "config snapshot digest {digest} does not match recorded {}",
            meta.config_digest
        )));
    }

    let mut records = Vec::new();
    for line in std::fs::read_to_string(dir.join("records.ndjson"))?.lines() {
        if !line.trim().is_empty() {
            records.push(serde_json::from_str(line)?);
        }
    }
    let mut metrics = Vec::new();
    let mut rdr = csv::Reader::from_path(dir.join("metrics.csv"))?;
    for row in rdr.deserialize() {
        metrics.push(row?);
    }

    Ok(ReportBundle {
        schema_version: meta.schema_version,
        config_digest: meta.config_digest,
        config_snapshot,
        thresholds: meta.thresholds,
        model_failures: meta.model_failures,
        records,
        metrics,
    })
}

/// Digest of a config snapshot's bytes; first 8 bytes of SHA-256 as hex.
pub fn snapshot_digest(snapshot: &str) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(snapshot.as_bytes());
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn scores_of(
    records: &[ScoreRecord],
    model_id: &str,
    provenance: Provenance,
) -> Vec<f64> {
    records
        .iter()
        .filter(|r| r.model_id == model_id && r.provenance == provenance)
        .map(|r| r.ood_score)
        .collect()
}

fn preds_labels_of(
    records: &[ScoreRecord],
    model_id: &str,
    provenance: Provenance,
) -> (Vec<usize>, Vec<usize>) {
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for r in records {
        if r.model_id == model_id && r.provenance == provenance {
            if let Some(t) = r.true_class {
                preds.push(r.predicted_class);
                labels.push(t);
            }
        }
    }
    (preds, labels)
}

/// Recompute every metric row from the persisted records and compare within
/// `tol`. Returns the first mismatch as an error.
pub fn verify_report(report: &ReportBundle, tol: f64) -> Result<()> {
    for row in &report.metrics {
        let recomputed = match (row.metric, row.scope) {
            (m, Scope::BlackboxAvg) => {
                let vals: Vec<f64> = report
                    .metrics
                    .iter()
                    .filter(|r| r.metric == m && r.scope == Scope::Transfer)
                    .map(|r| r.value)
                    .collect();
                if vals.is_empty() {
                    return Err(Error::Validation(
                        "blackbox_avg row without transfer rows".into(),
                    ));
                }
                vals.iter().sum::<f64>() / vals.len() as f64
            }
            (MetricKind::Acc, scope) => {
                let prov = match scope {
                    Scope::Clean => Provenance::CleanId,
                    _ => Provenance::AdvId,
                };
                let (preds, labels) = preds_labels_of(&report.records, &row.model_id, prov);
                accuracy(&preds, &labels)?
            }
            (MetricKind::Tsuc, _) => {
                let (preds, targets) =
                    preds_labels_of(&report.records, &row.model_id, Provenance::Distal);
                targeted_success(&preds, &targets)?
            }
            (MetricKind::Auroc, scope) => {
                let pos = scores_of(&report.records, &row.model_id, Provenance::CleanId);
                let neg_prov = match scope {
                    Scope::Clean => Provenance::NaturalOod,
                    Scope::Noise => Provenance::NoiseId,
                    _ => {
                        if report
                            .records
                            .iter()
                            .any(|r| r.provenance == Provenance::Distal)
                        {
                            Provenance::Distal
                        } else {
                            Provenance::AdvId
                        }
                    }
                };
                let neg = scores_of(&report.records, &row.model_id, neg_prov);
                auroc(&pos, &neg)?
            }
            (MetricKind::Fnr95, scope) => {
                let prov = match scope {
                    Scope::Clean => Provenance::CleanId,
                    Scope::Noise => Provenance::NoiseId,
                    _ => Provenance::AdvId,
                };
                let tau = row.threshold.ok_or_else(|| {
                    Error::Validation("fnr95 row without threshold".into())
                })?;
                fnr_at_threshold(&scores_of(&report.records, &row.model_id, prov), tau)?
            }
            (MetricKind::Fpr95, scope) => {
                let prov = match scope {
                    Scope::Clean => Provenance::NaturalOod,
                    _ => Provenance::Distal,
                };
                let tau = row.threshold.ok_or_else(|| {
                    Error::Validation("fpr95 row without threshold".into())
                })?;
                fpr_at_threshold(&scores_of(&report.records, &row.model_id, prov), tau)?
            }
        };
        if (recomputed - row.value).abs() > tol {
            return Err(Error::Validation(format!(
                "metric {} for {} ({:?}) stored {} but recomputed {recomputed}",
                row.metric, row.model_id, row.scope, row.value
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_report() -> ReportBundle {
        let snapshot = "x = 1\n".to_string();
        let digest = snapshot_digest(&snapshot);
        let rec = |sid: &str, prov, score: f64, pred, truth| ScoreRecord {
            sample_id: sid.into(),
            provenance: prov,
            model_id: "m0".into(),
            head: "zeroshot".into(),
            detector: "mcm".into(),
            ood_score: score,
            predicted_class: pred,
            true_class: truth,
            attack_config_digest: digest.clone(),
        };
        let records = vec![
            rec("a", Provenance::CleanId, 0.9, 0, Some(0)),
            rec("b", Provenance::CleanId, 0.8, 1, Some(1)),
            rec("a", Provenance::AdvId, 0.3, 1, Some(0)),
            rec("b", Provenance::AdvId, 0.2, 0, Some(1)),
        ];
        let row = |metric, value, threshold| MetricRow {
            metric,
            value,
            n_pos: 2,
            n_neg: 2,
            threshold,
            model_id: "m0".into(),
            head: "zeroshot".into(),
            detector: "mcm".into(),
            scope: Scope::Whitebox,
            attack_config_digest: digest.clone(),
        };
        ReportBundle {
            schema_version: REPORT_SCHEMA_VERSION,
            config_digest: digest.clone(),
            config_snapshot: snapshot,
            thresholds: vec![ThresholdRow { model_id: "m0".into(), tau: 0.8, clean_tpr: 1.0 }],
            model_failures: vec![],
            records,
            metrics: vec![
                row(MetricKind::Acc, 0.0, None),
                row(MetricKind::Auroc, 1.0, None),
                row(MetricKind::Fnr95, 1.0, Some(0.8)),
            ],
        }
    }

    #[test]
    fn roundtrip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let report = tiny_report();
        write_report(&report, dir.path()).unwrap();
        let back = read_report(dir.path()).unwrap();
        assert_eq!(report, back);
    }

    #[test]
    fn verify_accepts_consistent_report() {
        verify_report(&tiny_report(), 1e-12).unwrap();
    }

    #[test]
    fn verify_rejects_tampered_metric() {
        let mut report = tiny_report();
        report.metrics[0].value = 0.5;
        assert!(verify_report(&report, 1e-12).is_err());
    }

    #[test]
    fn read_detects_snapshot_tampering() {
        let dir = tempfile::tempdir().unwrap();
        write_report(&tiny_report(), dir.path()).unwrap();
        std::fs::write(dir.path().join("config.snapshot"), "x = 2\n").unwrap();
        assert!(matches!(read_report(dir.path()), Err(Error::Integrity(_))));
    }

    #[test]
    fn writes_are_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        write_report(&tiny_report(), d1.path()).unwrap();
        write_report(&tiny_report(), d2.path()).unwrap();
        for name in ["records.ndjson", "metrics.csv", "transfer_matrix.csv", "report.json"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
    }
}
