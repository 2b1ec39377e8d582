//! Campaign execution: prepare a model pool with fitted heads and calibrated
//! thresholds, run attacks over a dataset, and aggregate metric rows.
//!
//! Determinism contract: all per-sample randomness is derived from
//! (config seed, sample index), and parallel maps collect by index, so record
//! and metric output is byte-identical for any worker count.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rayon::prelude::*;

use crate::attack::{make_distal_seed, run_attack, AttackSpec, Objective};
use crate::error::{Error, Result};
use crate::harness::config::{CampaignConfig, HeadScheme, ModelConfig, TaskConfig};
use crate::harness::records::{
    MetricRow, Provenance, ReportBundle, ScoreRecord, Scope, ThresholdRow, REPORT_SCHEMA_VERSION,
};
use crate::heads::{
    fit_linear_probe, knn_predict_proba, probe_predict_proba, zeroshot_predict, KnnHead,
    KnnMetric, LinearProbeHead, ZeroShotHead,
};
use crate::metrics::{
    accuracy, auroc, fnr_at_threshold, fpr_at_threshold, targeted_success, MetricKind,
};
use crate::ood::{mcm_score, msp_score, tpr95_threshold, DetectorConfig, ThresholdPolicy};
use crate::rng;
use crate::tensor::{clamp01, load_image, Image};
use crate::zoo::toy::argmax;
use crate::zoo::toy::{build_toy_bundle_with, ToyBundleConfig};
use crate::zoo::{
    encode_image, format_prompt, generate_toy_dataset, load_external_bundle, Encoder, Label,
    Sample, Split,
};

/// A classification head fitted to one pool model.
pub enum BuiltHead {
    Zero(ZeroShotHead),
    Probe(LinearProbeHead),
    Knn(KnnHead),
}

/// One loaded pool member with its head and calibrated threshold.
pub struct PreparedModel {
    pub pool_id: String,
    pub bundle: Box<dyn Encoder>,
    pub head: BuiltHead,
    pub tau: f64,
    pub clean_tpr: f64,
    /// (ood_score, predicted class) per ID test sample, test order.
    pub clean: Vec<(f64, usize)>,
    /// Same for natural OOD samples.
    pub natural: Vec<(f64, usize)>,
}

/// A prepared campaign: dataset, models, heads, thresholds.
pub struct Campaign {
    pub config: CampaignConfig,
    spec: AttackSpec,
    digest: String,
    class_names: Vec<String>,
    test: Vec<Sample>,
    ood: Vec<Sample>,
    pub models: Vec<PreparedModel>,
    whitebox_idx: Vec<usize>,
    pub failures: Vec<(String, String)>,
}

fn id_class(label: &Label) -> Option<usize> {
    match label {
        Label::Id(k) => Some(*k),
        Label::Ood(_) => None,
    }
}

/// Load a `<split>/<class>/*.png` tree plus an `ood/<kind>/*.png` sibling.
fn ingest_dir(root: &Path) -> Result<(Vec<String>, Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    let class_dir = root.join("train");
    if !class_dir.is_dir() {
        return Err(Error::NotFound(format!(
            "dataset train split missing at {}",
            class_dir.display()
        )));
    }
    let mut class_names: Vec<String> = std::fs::read_dir(&class_dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    class_names.sort();
    if class_names.len() < 2 {
        return Err(Error::Validation("dataset needs at least 2 ID classes".into()));
    }

    let read_split = |split: &str| -> Result<Vec<Sample>> {
        let mut out = Vec::new();
        for (k, name) in class_names.iter().enumerate() {
            let dir = root.join(split).join(name);
            if !dir.is_dir() {
                continue;
            }
            let mut files: Vec<_> = std::fs::read_dir(&dir)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|e| e == "png"))
                .collect();
            files.sort();
            for path in files {
                out.push(Sample {
                    id: format!("{split}/{name}/{}", path.file_stem().unwrap().to_string_lossy()),
                    image: load_image(&path)?,
                    label: Label::Id(k),
                });
            }
        }
        Ok(out)
    };
    let train = read_split("train")?;
    let test = read_split("test")?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Validation("dataset train/test splits are empty".into()));
    }

    let mut ood = Vec::new();
    let ood_root = root.join("ood");
    if ood_root.is_dir() {
        let mut kinds: Vec<_> = std::fs::read_dir(&ood_root)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        kinds.sort();
        for kind in kinds {
            let dir = ood_root.join(&kind);
            let mut files: Vec<_> = std::fs::read_dir(&dir)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|e| e == "png"))
                .collect();
            files.sort();
            for path in files {
                ood.push(Sample {
                    id: format!("ood/{kind}/{}", path.file_stem().unwrap().to_string_lossy()),
                    image: load_image(&path)?,
                    label: Label::Ood(kind.clone()),
                });
            }
        }
    }
    Ok((class_names, train, test, ood))
}

impl Campaign {
    /// Load the dataset, build every pool model, fit heads, and calibrate
    /// per-model thresholds from each model's own clean test scores.
    ///
    /// Non-whitebox models that fail to load are recorded in `failures` and
    /// skipped; a whitebox failure aborts preparation.
    pub fn prepare(config: &CampaignConfig) -> Result<Campaign> {
        config.validate()?;
        let spec = config.attack.resolve(config.pool.whitebox.len())?;
        let digest = config.digest()?;

        let (class_names, train, test, ood) = match &config.task {
            TaskConfig::Toy { world, data_seed } => {
                let train = generate_toy_dataset(world, Split::Train, *data_seed)?;
                let test = generate_toy_dataset(world, Split::Test, *data_seed)?;
                let ood = generate_toy_dataset(world, Split::Ood, *data_seed)?;
                (world.class_names(), train, test, ood)
            }
            TaskConfig::Dir { path } => ingest_dir(path)?,
        };
        if test.is_empty() {
            return Err(Error::Validation("empty test split".into()));
        }
        let input_shape = test[0].image.dim();

        let mut models = Vec::new();
        let mut failures = Vec::new();
        for entry in &config.pool.models {
            let pool_id = entry.id().to_string();
            let is_whitebox = config.pool.whitebox.contains(&pool_id);
            let built = build_model(entry, config, &class_names, &train, input_shape);
            match built {
                Ok((bundle, head)) => {
                    models.push((pool_id, bundle, head));
                }
                Err(e) if !is_whitebox => {
                    eprintln!("warning: skipping pool model {pool_id}: {e}");
                    failures.push((pool_id, e.to_string()));
                }
                Err(e) => {
                    return Err(Error::Config(format!(
                        "whitebox model {pool_id} failed to load: {e}"
                    )))
                }
            }
        }
        if models.is_empty() {
            return Err(Error::Config("no pool model loaded successfully".into()));
        }

        if spec.objective == Objective::Ood2IdTtAfs {
            if config.num_distals == 0 {
                return Err(Error::Config("num_distals must be positive".into()));
            }
            for (id, bundle, _) in &models {
                if config.pool.whitebox.contains(id) && !bundle.has_text_tower() {
                    return Err(Error::Config(format!(
                        "whitebox model {id} has no text tower; the targeted attack needs one"
                    )));
                }
            }
        }

        // calibrate: each model's threshold comes from its own clean scores
        let detector = config.detector;
        let mut prepared = Vec::new();
        for (pool_id, bundle, head) in models {
            let clean: Vec<(f64, usize)> = test
                .iter()
                .map(|s| score_sample(bundle.as_ref(), &head, &detector, &s.image))
                .collect::<Result<_>>()?;
            let natural: Vec<(f64, usize)> = ood
                .iter()
                .map(|s| score_sample(bundle.as_ref(), &head, &detector, &s.image))
                .collect::<Result<_>>()?;
            let scores: Vec<f64> = clean.iter().map(|c| c.0).collect();
            let tau = tpr95_threshold(&scores, &ThresholdPolicy::default())?;
            let clean_tpr =
                scores.iter().filter(|&&s| s >= tau).count() as f64 / scores.len() as f64;
            prepared.push(PreparedModel {
                pool_id,
                bundle,
                head,
                tau,
                clean_tpr,
                clean,
                natural,
            });
        }

        let whitebox_idx: Vec<usize> = config
            .pool
            .whitebox
            .iter()
            .map(|w| prepared.iter().position(|m| &m.pool_id == w).unwrap())
            .collect();

        Ok(Campaign {
            config: config.clone(),
            spec,
            digest,
            class_names,
            test,
            ood,
            models: prepared,
            whitebox_idx,
            failures,
        })
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn attack_spec(&self) -> &AttackSpec {
        &self.spec
    }

    pub fn config_digest(&self) -> &str {
        &self.digest
    }

    fn thread_pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.output.workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))
    }

    fn scope_for(&self, pool_id: &str) -> Scope {
        if self.config.pool.whitebox.iter().any(|w| w == pool_id) {
            Scope::Whitebox
        } else {
            Scope::Transfer
        }
    }

    fn record(
        &self,
        sample_id: &str,
        provenance: Provenance,
        model: &PreparedModel,
        score: f64,
        pred: usize,
        true_class: Option<usize>,
    ) -> ScoreRecord {
        ScoreRecord {
            sample_id: sample_id.to_string(),
            provenance,
            model_id: model.pool_id.clone(),
            head: self.config.head.scheme.to_string(),
            detector: self.config.detector.name().to_string(),
            ood_score: score,
            predicted_class: pred,
            true_class,
            attack_config_digest: self.digest.clone(),
        }
    }

    fn clean_and_natural_records(&self) -> Vec<ScoreRecord> {
        let mut out = Vec::new();
        for (si, sample) in self.test.iter().enumerate() {
            for model in &self.models {
                let (score, pred) = model.clean[si];
                out.push(self.record(
                    &sample.id,
                    Provenance::CleanId,
                    model,
                    score,
                    pred,
                    id_class(&sample.label),
                ));
            }
        }
        for (si, sample) in self.ood.iter().enumerate() {
            for model in &self.models {
                let (score, pred) = model.natural[si];
                out.push(self.record(&sample.id, Provenance::NaturalOod, model, score, pred, None));
            }
        }
        out
    }

    fn threshold_rows(&self) -> Vec<ThresholdRow> {
        self.models
            .iter()
            .map(|m| ThresholdRow {
                model_id: m.pool_id.clone(),
                tau: m.tau,
                clean_tpr: m.clean_tpr,
            })
            .collect()
    }

    fn metric_row(
        &self,
        metric: MetricKind,
        value: f64,
        n_pos: usize,
        n_neg: usize,
        threshold: Option<f64>,
        model_id: &str,
        scope: Scope,
    ) -> MetricRow {
        MetricRow {
            metric,
            value,
            n_pos,
            n_neg,
            threshold,
            model_id: model_id.to_string(),
            head: self.config.head.scheme.to_string(),
            detector: self.config.detector.name().to_string(),
            scope,
            attack_config_digest: self.digest.clone(),
        }
    }

    /// Append a blackbox-average row per metric when transfer rows exist.
    fn append_blackbox_avg(&self, metrics: &mut Vec<MetricRow>) {
        let kinds: Vec<MetricKind> = {
            let mut seen = Vec::new();
            for row in metrics.iter() {
                if row.scope == Scope::Transfer && !seen.contains(&row.metric) {
                    seen.push(row.metric);
                }
            }
            seen
        };
        for metric in kinds {
            let rows: Vec<&MetricRow> = metrics
                .iter()
                .filter(|r| r.metric == metric && r.scope == Scope::Transfer)
                .collect();
            let value = rows.iter().map(|r| r.value).sum::<f64>() / rows.len() as f64;
            let n_pos = rows.iter().map(|r| r.n_pos).sum();
            let n_neg = rows.iter().map(|r| r.n_neg).sum();
            metrics.push(self.metric_row(
                metric,
                value,
                n_pos,
                n_neg,
                None,
                "blackbox_avg",
                Scope::BlackboxAvg,
            ));
        }
    }

    fn finish_report(&self, records: Vec<ScoreRecord>, metrics: Vec<MetricRow>) -> Result<ReportBundle> {
        self.finish_report_as(records, metrics, &self.config)
    }

    /// Finish a report under a (possibly rewritten) config; the snapshot and
    /// digest always describe the config the records were produced with.
    fn finish_report_as(
        &self,
        records: Vec<ScoreRecord>,
        metrics: Vec<MetricRow>,
        config: &CampaignConfig,
    ) -> Result<ReportBundle> {
        Ok(ReportBundle {
            schema_version: REPORT_SCHEMA_VERSION,
            config_digest: config.digest()?,
            config_snapshot: config.canonical_snapshot()?,
            thresholds: self.threshold_rows(),
            model_failures: self.failures.clone(),
            records,
            metrics,
        })
    }

    /// Run the configured attack campaign. Dispatches on the objective.
    pub fn run(&self) -> Result<ReportBundle> {
        Ok(self.run_with_examples()?.0)
    }

    /// As [`Campaign::run`], also returning a few (sample_id, adversarial
    /// image) pairs for grid rendering.
    pub fn run_with_examples(&self) -> Result<(ReportBundle, Vec<(String, Image)>)> {
        match self.spec.objective {
            Objective::Id2OodAfs => self.run_id2ood_inner(Some(&self.spec), &self.config),
            Objective::Ood2IdTtAfs => self.run_distal(),
        }
    }

    /// ID→OOD leg for an explicit spec/config pair (the sweep reuses this
    /// with rescaled budgets). `spec = None` scores the clean images as the
    /// attacked population (the ε = 0 point).
    fn run_id2ood_inner(
        &self,
        spec: Option<&AttackSpec>,
        config: &CampaignConfig,
    ) -> Result<(ReportBundle, Vec<(String, Image)>)> {
        let whitebox: Vec<&dyn Encoder> = self
            .whitebox_idx
            .iter()
            .map(|&i| self.models[i].bundle.as_ref())
            .collect();

        // one attack per test sample; scored on every pool model
        let attacked: Vec<(Image, Vec<(f64, usize)>)> = match spec {
            None => self
                .test
                .iter()
                .enumerate()
                .map(|(si, s)| {
                    (
                        s.image.clone(),
                        self.models.iter().map(|m| m.clean[si]).collect(),
                    )
                })
                .collect(),
            Some(spec) => {
                let pool = self.thread_pool()?;
                pool.install(|| {
                    self.test
                        .par_iter()
                        .enumerate()
                        .map(|(si, sample)| {
                            let adv =
                                run_attack(&whitebox, &sample.image, spec, None, si as u64)?;
                            let scored = self.score_on_all(&adv.x_adv)?;
                            Ok((adv.x_adv, scored))
                        })
                        .collect::<Result<Vec<_>>>()
                })?
            }
        };

        let mut records = self.clean_and_natural_records();
        let mut base = Vec::new();
        for (si, sample) in self.test.iter().enumerate() {
            for (mi, model) in self.models.iter().enumerate() {
                let (score, pred) = attacked[si].1[mi];
                base.push(self.record(
                    &sample.id,
                    Provenance::AdvId,
                    model,
                    score,
                    pred,
                    id_class(&sample.label),
                ));
            }
        }
        records.extend(base);

        let labels: Vec<usize> =
            self.test.iter().filter_map(|s| id_class(&s.label)).collect();
        let mut metrics = Vec::new();
        for (mi, model) in self.models.iter().enumerate() {
            let scope = self.scope_for(&model.pool_id);
            let clean_scores: Vec<f64> = model.clean.iter().map(|c| c.0).collect();
            let adv_scores: Vec<f64> = attacked.iter().map(|a| a.1[mi].0).collect();
            let adv_preds: Vec<usize> = attacked.iter().map(|a| a.1[mi].1).collect();
            let n = labels.len();
            metrics.push(self.metric_row(
                MetricKind::Acc,
                accuracy(&adv_preds, &labels)?,
                n,
                0,
                None,
                &model.pool_id,
                scope,
            ));
            metrics.push(self.metric_row(
                MetricKind::Auroc,
                auroc(&clean_scores, &adv_scores)?,
                clean_scores.len(),
                adv_scores.len(),
                None,
                &model.pool_id,
                scope,
            ));
            metrics.push(self.metric_row(
                MetricKind::Fnr95,
                fnr_at_threshold(&adv_scores, model.tau)?,
                adv_scores.len(),
                0,
                Some(model.tau),
                &model.pool_id,
                scope,
            ));
        }
        self.append_blackbox_avg(&mut metrics);

        let mut report = self.finish_report_as(records, metrics, config)?;
        let digest = report.config_digest.clone();
        rewrite_digest(&mut report, &digest);
        let examples: Vec<(String, Image)> = self
            .test
            .iter()
            .zip(&attacked)
            .take(16)
            .map(|(s, a)| (s.id.clone(), a.0.clone()))
            .collect();
        Ok((report, examples))
    }

    /// Distal OOD→ID leg: seeds are uniform noise, targets are round-robin
    /// over the ID classes, one text embedding per whitebox member.
    fn run_distal(&self) -> Result<(ReportBundle, Vec<(String, Image)>)> {
        let whitebox: Vec<&dyn Encoder> = self
            .whitebox_idx
            .iter()
            .map(|&i| self.models[i].bundle.as_ref())
            .collect();
        let k = self.class_names.len();
        let shape = self.models[self.whitebox_idx[0]].bundle.input_shape();

        // per-class target embeddings, one per whitebox member
        let mut class_targets: Vec<Vec<Array1<f64>>> = Vec::with_capacity(k);
        for name in &self.class_names {
            let prompt = format_prompt(name)?;
            let embeds: Vec<Array1<f64>> = whitebox
                .iter()
                .map(|b| b.encode_text(&prompt))
                .collect::<Result<_>>()?;
            class_targets.push(embeds);
        }

        let spec = &self.spec;
        let pool = self.thread_pool()?;
        let attacked: Vec<(Image, Vec<(f64, usize)>)> = pool.install(|| {
            (0..self.config.num_distals)
                .into_par_iter()
                .map(|i| {
                    let target_class = i % k;
                    let seed = rng::mix(&[spec.seed, 0xd15, i as u64]);
                    let x0 = make_distal_seed(shape, seed);
                    let adv = run_attack(
                        &whitebox,
                        &x0,
                        spec,
                        Some(&class_targets[target_class]),
                        i as u64,
                    )?;
                    let scored = self.score_on_all(&adv.x_adv)?;
                    Ok((adv.x_adv, scored))
                })
                .collect::<Result<Vec<_>>>()
        })?;

        let mut records = self.clean_and_natural_records();
        for i in 0..self.config.num_distals {
            let target_class = i % k;
            let sid = format!("distal/{}/{i}", self.class_names[target_class]);
            for (mi, model) in self.models.iter().enumerate() {
                let (score, pred) = attacked[i].1[mi];
                records.push(self.record(
                    &sid,
                    Provenance::Distal,
                    model,
                    score,
                    pred,
                    Some(target_class),
                ));
            }
        }

        let targets: Vec<usize> = (0..self.config.num_distals).map(|i| i % k).collect();
        let mut metrics = Vec::new();
        for (mi, model) in self.models.iter().enumerate() {
            let scope = self.scope_for(&model.pool_id);
            let clean_scores: Vec<f64> = model.clean.iter().map(|c| c.0).collect();
            let distal_scores: Vec<f64> = attacked.iter().map(|a| a.1[mi].0).collect();
            let preds: Vec<usize> = attacked.iter().map(|a| a.1[mi].1).collect();
            metrics.push(self.metric_row(
                MetricKind::Tsuc,
                targeted_success(&preds, &targets)?,
                targets.len(),
                0,
                None,
                &model.pool_id,
                scope,
            ));
            metrics.push(self.metric_row(
                MetricKind::Auroc,
                auroc(&clean_scores, &distal_scores)?,
                clean_scores.len(),
                distal_scores.len(),
                None,
                &model.pool_id,
                scope,
            ));
            metrics.push(self.metric_row(
                MetricKind::Fpr95,
                fpr_at_threshold(&distal_scores, model.tau)?,
                distal_scores.len(),
                0,
                Some(model.tau),
                &model.pool_id,
                scope,
            ));
        }
        self.append_blackbox_avg(&mut metrics);

        let examples: Vec<(String, Image)> = (0..self.config.num_distals.min(16))
            .map(|i| {
                let sid = format!("distal/{}/{i}", self.class_names[i % k]);
                (sid, attacked[i].0.clone())
            })
            .collect();
        Ok((self.finish_report(records, metrics)?, examples))
    }

    /// Clean evaluation only: accuracy, clean-vs-natural-OOD AUROC, and the
    /// rates implied by the stored thresholds. No attack is run.
    pub fn run_clean(&self) -> Result<ReportBundle> {
        let records = self.clean_and_natural_records();
        let labels: Vec<usize> =
            self.test.iter().filter_map(|s| id_class(&s.label)).collect();
        let mut metrics = Vec::new();
        for model in &self.models {
            let clean_scores: Vec<f64> = model.clean.iter().map(|c| c.0).collect();
            let preds: Vec<usize> = model.clean.iter().map(|c| c.1).collect();
            metrics.push(self.metric_row(
                MetricKind::Acc,
                accuracy(&preds, &labels)?,
                labels.len(),
                0,
                None,
                &model.pool_id,
                Scope::Clean,
            ));
            metrics.push(self.metric_row(
                MetricKind::Fnr95,
                fnr_at_threshold(&clean_scores, model.tau)?,
                clean_scores.len(),
                0,
                Some(model.tau),
                &model.pool_id,
                Scope::Clean,
            ));
            if !self.ood.is_empty() {
                let nat_scores: Vec<f64> = model.natural.iter().map(|c| c.0).collect();
                metrics.push(self.metric_row(
                    MetricKind::Auroc,
                    auroc(&clean_scores, &nat_scores)?,
                    clean_scores.len(),
                    nat_scores.len(),
                    None,
                    &model.pool_id,
                    Scope::Clean,
                ));
                metrics.push(self.metric_row(
                    MetricKind::Fpr95,
                    fpr_at_threshold(&nat_scores, model.tau)?,
                    nat_scores.len(),
                    0,
                    Some(model.tau),
                    &model.pool_id,
                    Scope::Clean,
                ));
            }
        }
        self.finish_report(records, metrics)
    }

    /// Uniform-noise baseline at the attack budget: each test image gets an
    /// i.i.d. uniform ℓ∞ perturbation of the same magnitude, no optimization.
    pub fn noise_baseline(&self) -> Result<ReportBundle> {
        let eps = self.spec.epsilon;
        let noisy: Vec<(Image, Vec<(f64, usize)>)> = {
            let pool = self.thread_pool()?;
            let seed = self.spec.seed;
            pool.install(|| {
                self.test
                    .par_iter()
                    .enumerate()
                    .map(|(si, sample)| {
                        let mut r = rng::stream(&[seed, 0x7015e, si as u64]);
                        let mut x = sample.image.clone();
                        for v in x.iter_mut() {
                            *v += r.gen_range(-eps..=eps);
                        }
                        clamp01(&mut x);
                        let scored = self.score_on_all(&x)?;
                        Ok((x, scored))
                    })
                    .collect::<Result<Vec<_>>>()
            })?
        };

        let mut records = self.clean_and_natural_records();
        for (si, sample) in self.test.iter().enumerate() {
            for (mi, model) in self.models.iter().enumerate() {
                let (score, pred) = noisy[si].1[mi];
                records.push(self.record(
                    &sample.id,
                    Provenance::NoiseId,
                    model,
                    score,
                    pred,
                    id_class(&sample.label),
                ));
            }
        }
        let mut metrics = Vec::new();
        for (mi, model) in self.models.iter().enumerate() {
            let clean_scores: Vec<f64> = model.clean.iter().map(|c| c.0).collect();
            let scores: Vec<f64> = noisy.iter().map(|a| a.1[mi].0).collect();
            metrics.push(self.metric_row(
                MetricKind::Fnr95,
                fnr_at_threshold(&scores, model.tau)?,
                scores.len(),
                0,
                Some(model.tau),
                &model.pool_id,
                Scope::Noise,
            ));
            metrics.push(self.metric_row(
                MetricKind::Auroc,
                auroc(&clean_scores, &scores)?,
                clean_scores.len(),
                scores.len(),
                None,
                &model.pool_id,
                Scope::Noise,
            ));
        }
        self.finish_report(records, metrics)
    }

    /// Sweep the ID→OOD attack over budgets. `0.0` entries reuse the clean
    /// scores as the attacked population; step size rescales as ε / steps
    /// unless the config pins it explicitly.
    pub fn epsilon_sweep(&self, epsilons: &[f64]) -> Result<SweepReport> {
        if self.spec.objective != Objective::Id2OodAfs {
            return Err(Error::Config("epsilon sweep is defined for the ID→OOD attack".into()));
        }
        if epsilons.is_empty() {
            return Err(Error::Config("empty epsilon list".into()));
        }
        let mut reports = Vec::with_capacity(epsilons.len());
        for &eps in epsilons {
            if eps < 0.0 || eps > 1.0 {
                return Err(Error::Config(format!("sweep epsilon {eps} outside [0,1]")));
            }
            let mut cfg = self.config.clone();
            cfg.attack.epsilon = crate::harness::config::Fraction::Num(eps);
            let report = if eps == 0.0 {
                self.run_id2ood_inner(None, &cfg)?.0
            } else {
                let mut spec = self.spec.clone();
                spec.epsilon = eps;
                if self.config.attack.step_size.is_none() && self.spec.steps > 0 {
                    spec.step_size = eps / self.spec.steps as f64;
                }
                self.run_id2ood_inner(Some(&spec), &cfg)?.0
            };
            reports.push(report);
        }
        Ok(SweepReport { epsilons: epsilons.to_vec(), reports })
    }
}

/// Epsilon-sweep output: one full report per budget, shared model pool.
pub struct SweepReport {
    pub epsilons: Vec<f64>,
    pub reports: Vec<ReportBundle>,
}

impl SweepReport {
    /// The metric-vs-epsilon series for one model.
    pub fn series(&self, metric: MetricKind, model_id: &str, scope: Scope) -> Vec<Option<f64>> {
        self.reports
            .iter()
            .map(|r| {
                r.metrics
                    .iter()
                    .find(|m| m.metric == metric && m.model_id == model_id && m.scope == scope)
                    .map(|m| m.value)
            })
            .collect()
    }

    /// Write the sweep as a long-form CSV: epsilon, metric, model, scope, value.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(["epsilon", "metric", "scope", "model_id", "value"])?;
        for (eps, report) in self.epsilons.iter().zip(&self.reports) {
            for row in &report.metrics {
                wtr.write_record([
                    eps.to_string(),
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
}

impl Campaign {
    fn score_on_all(&self, x: &Image) -> Result<Vec<(f64, usize)>> {
        self.models
            .iter()
            .map(|m| score_sample(m.bundle.as_ref(), &m.head, &self.config.detector, x))
            .collect()
    }
}

/// Swap every digest field of a report to `digest` (sweep entries carry the
/// per-budget config digest, not the base campaign's).
fn rewrite_digest(report: &mut ReportBundle, digest: &str) {
    if report.config_digest == digest {
        return;
    }
    report.config_digest = digest.to_string();
    for r in &mut report.records {
        r.attack_config_digest = digest.to_string();
    }
    for m in &mut report.metrics {
        m.attack_config_digest = digest.to_string();
    }
}

/// Score one image on one model: OOD score plus predicted class.
pub fn score_sample(
    bundle: &dyn Encoder,
    head: &BuiltHead,
    detector: &DetectorConfig,
    x: &Image,
) -> Result<(f64, usize)> {
    match (head, detector) {
        (BuiltHead::Zero(h), DetectorConfig::Mcm { temperature }) => {
            let enc = encode_image(bundle, x)?;
            let p = zeroshot_predict(h, enc.projected.view());
            Ok((mcm_score(p.sims.view(), *temperature), p.class))
        }
        (BuiltHead::Probe(h), DetectorConfig::Msp) => {
            let f = bundle.features(x)?;
            let probs = probe_predict_proba(h, f.view());
            Ok((msp_score(probs.view())?, argmax(probs.view())))
        }
        (BuiltHead::Knn(h), DetectorConfig::Msp) => {
            let enc = encode_image(bundle, x)?;
            let probs = knn_predict_proba(h, enc.projected.view())?;
            Ok((msp_score(probs.view())?, argmax(probs.view())))
        }
        _ => Err(Error::Config("head scheme and detector kind are mismatched".into())),
    }
}

/// Load one pool entry and fit its head on the training split.
fn build_model(
    entry: &ModelConfig,
    config: &CampaignConfig,
    class_names: &[String],
    train: &[Sample],
    input_shape: (usize, usize, usize),
) -> Result<(Box<dyn Encoder>, BuiltHead)> {
    let bundle: Box<dyn Encoder> = match entry {
        ModelConfig::Toy { seed, num_patterns, pool_grid, .. } => {
            let world = match &config.task {
                TaskConfig::Toy { world, .. } => world.clone(),
                TaskConfig::Dir { .. } => {
                    return Err(Error::Config(
                        "toy pool models require the toy task".into(),
                    ))
                }
            };
            let mut cfg = ToyBundleConfig::with_seed(*seed);
            if let Some(p) = num_patterns {
                cfg.num_patterns = *p;
            }
            if let Some(g) = pool_grid {
                cfg.pool_grid = *g;
            }
            Box::new(build_toy_bundle_with(&world, &cfg)?)
        }
        ModelConfig::External { model_id, cache_dir, .. } => {
            Box::new(load_external_bundle(model_id, cache_dir)?)
        }
    };
    if bundle.input_shape() != input_shape {
        return Err(Error::Config(format!(
            "model {} expects input {:?} but the dataset is {:?}",
            entry.id(),
            bundle.input_shape(),
            input_shape
        )));
    }

    let head = match config.head.scheme {
        HeadScheme::Zeroshot => {
            if !bundle.has_text_tower() {
                return Err(Error::Config(format!(
                    "model {} has no text tower; the zero-shot head needs one",
                    entry.id()
                )));
            }
            let mut protos = Array2::zeros((class_names.len(), bundle.embed_dim()));
            for (k, name) in class_names.iter().enumerate() {
                let e = bundle.encode_text(&format_prompt(name)?)?;
                protos.row_mut(k).assign(&e);
            }
            BuiltHead::Zero(ZeroShotHead::new(protos, class_names.to_vec(), 1.0)?)
        }
        HeadScheme::Probe => {
            let (feats, labels) = train_features(bundle.as_ref(), train, false)?;
            let l2 = config.head.probe_l2.unwrap_or(1.0 / feats.nrows() as f64);
            BuiltHead::Probe(fit_linear_probe(
                feats.view(),
                &labels,
                l2,
                config.head.probe_max_iter,
            )?)
        }
        HeadScheme::Knn => {
            let (bank, labels) = train_features(bundle.as_ref(), train, true)?;
            BuiltHead::Knn(KnnHead::new(
                bank,
                labels,
                class_names.len(),
                config.head.knn_k,
                KnnMetric::Cosine,
            )?)
        }
    };
    Ok((bundle, head))
}

/// Stack the training split's features (or projected embeddings) row-wise.
fn train_features(
    bundle: &dyn Encoder,
    train: &[Sample],
    projected: bool,
) -> Result<(Array2<f64>, Vec<usize>)> {
    let id_samples: Vec<&Sample> = train
        .iter()
        .filter(|s| id_class(&s.label).is_some())
        .collect();
    if id_samples.is_empty() {
        return Err(Error::Validation("no labeled training samples".into()));
    }
    let dim = if projected { bundle.embed_dim() } else { bundle.feature_dim() };
    let mut rows = Array2::zeros((id_samples.len(), dim));
    let mut labels = Vec::with_capacity(id_samples.len());
    for (i, s) in id_samples.iter().enumerate() {
        let v = if projected {
            encode_image(bundle, &s.image)?.projected
        } else {
            bundle.features(&s.image)?
        };
        rows.row_mut(i).assign(&v);
        labels.push(id_class(&s.label).unwrap());
    }
    Ok((rows, labels))
}

/// Prepare and run a campaign in one call.
pub fn run_campaign(config: &CampaignConfig) -> Result<ReportBundle> {
    Campaign::prepare(config)?.run()
}
