//! Acceptance suite: each test covers one release criterion and prints a
//! single PASS/FAIL line. Criteria are desk-scale analogs on the toy world
//! plus oracle-equivalence and property checks.

use std::time::Instant;

use ndarray::{Array1, Array2, Array3};
use rand::Rng;

use oodattack::attack::{
    run_attack, ti_smooth, AttackSpec, DiversePolicy, Objective, TiKernel,
};
use oodattack::harness::{
    read_report, verify_report, write_report, AttackConfig, Campaign, CampaignConfig, DiConfig,
    Fraction, HeadConfig, HeadScheme, ModelConfig, OutputConfig, PoolConfig, Scope, TaskConfig,
    TiConfig,
};
use oodattack::heads::{
    fit_linear_probe, knn_predict_proba, probe_objective_grad_norm, probe_predict_proba, KnnHead,
    KnnMetric,
};
use oodattack::metrics::{auroc, MetricKind};
use oodattack::ood::DetectorConfig;
use oodattack::tensor::{in_unit_box, linf_dist, Image};
use oodattack::zoo::hub::random_linear_bundle;
use oodattack::zoo::{Encoder, ToyWorldSpec};

fn verdict(criterion: u32, name: &str, failures: &[String]) {
    if failures.is_empty() {
        println!("ACCEPTANCE {criterion} ({name}): PASS");
    } else {
        println!("ACCEPTANCE {criterion} ({name}): FAIL [{}]", failures.join("; "));
        panic!("criterion {criterion} failed");
    }
}

/// The evaluation detector for the toy world's zero-shot head: MCM with a
/// temperature sharp enough to expose margin collapse.
fn toy_detector() -> DetectorConfig {
    DetectorConfig::Mcm { temperature: 0.05 }
}

fn toy_model(id: &str, seed: u64) -> ModelConfig {
    ModelConfig::Toy { id: id.into(), seed, num_patterns: None, pool_grid: None }
}

fn base_config(models: Vec<ModelConfig>, whitebox: Vec<&str>) -> CampaignConfig {
    CampaignConfig {
        schema_version: 1,
        task: TaskConfig::Toy { world: ToyWorldSpec::default(), data_seed: 0 },
        pool: PoolConfig { models, whitebox: whitebox.iter().map(|s| s.to_string()).collect() },
        head: HeadConfig { scheme: HeadScheme::Zeroshot, ..HeadConfig::default() },
        detector: toy_detector(),
        attack: AttackConfig {
            objective: Objective::Id2OodAfs,
            epsilon: Fraction::Text("16/255".into()),
            steps: 20,
            step_size: None,
            momentum_mu: 1.0,
            di: Some(DiConfig { min_size: 24, max_size: 32, prob: 0.5 }),
            ti: None,
            lambda: 0.0,
            seed: 7,
            ensemble_weights: None,
        },
        num_distals: 100,
        output: OutputConfig { dir: std::env::temp_dir().join("oodattack-acceptance"), workers: 0 },
    }
}

fn metric(report: &oodattack::harness::ReportBundle, kind: MetricKind, model: &str, scope: Scope) -> f64 {
    report
        .metrics
        .iter()
        .find(|m| m.metric == kind && m.model_id == model && m.scope == scope)
        .unwrap_or_else(|| panic!("missing {kind} for {model} in {scope:?}"))
        .value
}

#[test]
fn criterion_01_projection_soundness() {
    let t0 = Instant::now();
    let mut failures = Vec::new();
    let bundle = random_linear_bundle("fuzz", (1, 6, 6), 8, 4, vec![], 1).unwrap();
    let violations: usize = (0..10_000u64)
        .map(|trial| {
            let mut r = oodattack::rng::stream(&[0xf022, trial]);
            let x0: Image = Array3::from_shape_fn((1, 6, 6), |_| r.gen::<f64>());
            let spec = AttackSpec {
                objective: Objective::Id2OodAfs,
                epsilon: r.gen_range(0.005..0.3),
                steps: r.gen_range(1..4),
                step_size: r.gen_range(0.001..0.4),
                momentum_mu: r.gen_range(0.0..1.5),
                di_policy: if r.gen::<bool>() {
                    Some(DiversePolicy { min_size: 4, max_size: 6, transform_prob: 0.5 })
                } else {
                    None
                },
                ti_kernel: if r.gen::<bool>() { Some(TiKernel::gaussian(3).unwrap()) } else { None },
                lambda_afs: 0.0,
                ensemble_weights: vec![1.0],
                seed: trial,
            };
            let adv = run_attack(&[&bundle], &x0, &spec, None, trial).unwrap();
            let ok = linf_dist(&adv.x_adv, &x0) <= spec.epsilon + 1e-6 && in_unit_box(&adv.x_adv);
            usize::from(!ok)
        })
        .sum();
    if violations > 0 {
        failures.push(format!("{violations} constraint violations"));
    }
    let secs = t0.elapsed().as_secs_f64();
    if secs >= 120.0 {
        failures.push(format!("runtime {secs:.1}s over budget"));
    }
    verdict(1, "projection soundness, 10k fuzzed attacks", &failures);
}

#[test]
fn criterion_02_gradient_fidelity() {
    use oodattack::zoo::{build_toy_bundle, generate_toy_dataset, LossSpec, LossTerm, Split};
    let world = ToyWorldSpec::default();
    let bundle = build_toy_bundle(&world, 1).unwrap();
    let test = generate_toy_dataset(&world, Split::Test, 0).unwrap();
    let mut failures = Vec::new();
    let mut r = oodattack::rng::stream(&[0x9fad]);
    let h = 1e-6;
    for pair in 0..50 {
        let x = &test[pair % test.len()].image;
        let anchor = bundle.features(x).unwrap().mapv(|v| v + 0.05);
        let loss = LossSpec::single(LossTerm::FeatureCosine { anchor });
        // random unit direction
        let mut d: Image = Array3::from_shape_fn(x.dim(), |_| r.gen::<f64>() - 0.5);
        let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        d.mapv_inplace(|v| v / n);
        let (_, g) = bundle.value_and_grad(&loss, x).unwrap();
        let analytic: f64 = (&g * &d).sum();
        let mut xp = x.clone();
        xp.scaled_add(h, &d);
        let mut xm = x.clone();
        xm.scaled_add(-h, &d);
        let fd = (bundle.value_and_grad(&loss, &xp).unwrap().0
            - bundle.value_and_grad(&loss, &xm).unwrap().0)
            / (2.0 * h);
        let rel = (analytic - fd).abs() / fd.abs().max(analytic.abs()).max(1e-12);
        if rel >= 1e-4 {
            failures.push(format!("pair {pair}: rel err {rel:.2e}"));
        }
    }
    verdict(2, "gradient vs finite differences, 50 pairs", &failures);
}

#[test]
fn criterion_03_auroc_oracle() {
    fn oracle(pos: &[f64], neg: &[f64]) -> f64 {
        let mut acc = 0.0;
        for &p in pos {
            for &n in neg {
                acc += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        acc / (pos.len() * neg.len()) as f64
    }
    let mut failures = Vec::new();
    let mut r = oodattack::rng::stream(&[0xa20c]);
    for inst in 0..1000 {
        let n = r.gen_range(1..60);
        let m = r.gen_range(1..60);
        // a coarse grid in half the instances forces heavy ties
        let coarse = inst % 2 == 0;
        let draw = |r: &mut rand_chacha::ChaCha8Rng| {
            if coarse { (r.gen_range(0..6) as f64) / 6.0 } else { r.gen::<f64>() }
        };
        let pos: Vec<f64> = (0..n).map(|_| draw(&mut r)).collect();
        let neg: Vec<f64> = (0..m).map(|_| draw(&mut r)).collect();
        let fast = auroc(&pos, &neg).unwrap();
        let slow = oracle(&pos, &neg);
        if (fast - slow).abs() >= 1e-9 {
            failures.push(format!("instance {inst}: |{fast} - {slow}|"));
        }
    }
    verdict(3, "AUROC vs brute-force oracle, 1000 instances", &failures);
}

#[test]
fn criterion_04_ti_equivalence() {
    let mut failures = Vec::new();
    let mut r = oodattack::rng::stream(&[0x71e9]);
    for trial in 0..20 {
        let size = [3, 5, 7][trial % 3];
        let kernel = TiKernel::gaussian(size).unwrap();
        let g: Image = Array3::from_shape_fn((3, 12, 12), |_| r.gen::<f64>() - 0.5);
        let fast = ti_smooth(&g, &kernel).unwrap();
        // explicit convolution sum with zero padding
        let (c, hh, ww) = g.dim();
        let half = (size / 2) as isize;
        let mut err: f64 = 0.0;
        for ch in 0..c {
            for i in 0..hh as isize {
                for j in 0..ww as isize {
                    let mut acc = 0.0;
                    for di in -half..=half {
                        for dj in -half..=half {
                            let (si, sj) = (i + di, j + dj);
                            if si >= 0 && (si as usize) < hh && sj >= 0 && (sj as usize) < ww {
                                acc += kernel.weights[[(di + half) as usize, (dj + half) as usize]]
                                    * g[[ch, si as usize, sj as usize]];
                            }
                        }
                    }
                    err = err.max((acc - fast[[ch, i as usize, j as usize]]).abs());
                }
            }
        }
        if err >= 1e-6 {
            failures.push(format!("trial {trial} size {size}: max err {err:.2e}"));
        }
    }
    verdict(4, "TI smoothing vs explicit convolution", &failures);
}

#[test]
fn criterion_05_whitebox_id2ood() {
    let t0 = Instant::now();
    let config = base_config(vec![toy_model("m1", 1)], vec!["m1"]);
    let campaign = Campaign::prepare(&config).unwrap();
    let report = campaign.run().unwrap();
    let acc = metric(&report, MetricKind::Acc, "m1", Scope::Whitebox);
    let fnr = metric(&report, MetricKind::Fnr95, "m1", Scope::Whitebox);
    let secs = t0.elapsed().as_secs_f64();
    let mut failures = Vec::new();
    if acc > 0.10 {
        failures.push(format!("adv accuracy {acc:.3} > 0.10"));
    }
    if fnr < 0.90 {
        failures.push(format!("FNR95 {fnr:.3} < 0.90"));
    }
    if secs >= 300.0 {
        failures.push(format!("runtime {secs:.0}s over budget"));
    }
    verdict(5, "whitebox AFS attack floors", &failures);
}

#[test]
fn criterion_06_blackbox_transfer() {
    // 3-bundle pool with distinct seeds and feature configurations; m2 is the
    // held-out blackbox in both runs
    let models = || {
        vec![
            toy_model("m1", 1),
            ModelConfig::Toy { id: "m2".into(), seed: 2, num_patterns: Some(24), pool_grid: None },
            ModelConfig::Toy { id: "m3".into(), seed: 3, num_patterns: Some(40), pool_grid: None },
        ]
    };
    // a tighter budget than the whitebox criterion keeps transfer off its
    // ceiling so the ensemble ordering is informative
    let mut single = base_config(models(), vec!["m1"]);
    single.attack.epsilon = Fraction::Text("2/255".into());
    let campaign = Campaign::prepare(&single).unwrap();
    let fnr_single = metric(&campaign.run().unwrap(), MetricKind::Fnr95, "m2", Scope::Transfer);
    let fnr_noise = metric(&campaign.noise_baseline().unwrap(), MetricKind::Fnr95, "m2", Scope::Noise);

    let mut ensemble = base_config(models(), vec!["m1", "m3"]);
    ensemble.attack.epsilon = Fraction::Text("2/255".into());
    let campaign_e = Campaign::prepare(&ensemble).unwrap();
    let fnr_ens = metric(&campaign_e.run().unwrap(), MetricKind::Fnr95, "m2", Scope::Transfer);

    let mut failures = Vec::new();
    if fnr_single <= fnr_noise {
        failures.push(format!("blackbox {fnr_single:.3} <= noise baseline {fnr_noise:.3}"));
    }
    if fnr_ens < fnr_single {
        failures.push(format!("ensemble {fnr_ens:.3} < single-whitebox {fnr_single:.3}"));
    }
    verdict(6, "blackbox transfer orderings", &failures);
}

#[test]
fn criterion_07_distal_whitebox() {
    let t0 = Instant::now();
    let mut config = base_config(vec![toy_model("m1", 1)], vec!["m1"]);
    config.attack = AttackConfig {
        objective: Objective::Ood2IdTtAfs,
        epsilon: Fraction::Text("32/255".into()),
        steps: 500,
        step_size: None,
        momentum_mu: 1.0,
        di: Some(DiConfig { min_size: 24, max_size: 32, prob: 0.5 }),
        ti: Some(TiConfig { size: 5, shape: "gaussian".into() }),
        lambda: 0.25,
        seed: 7,
        ensemble_weights: None,
    };
    config.attack.step_size = Some(Fraction::Text("0.00125".into()));
    let campaign = Campaign::prepare(&config).unwrap();
    let report = campaign.run().unwrap();
    let tsuc = metric(&report, MetricKind::Tsuc, "m1", Scope::Whitebox);
    let fpr = metric(&report, MetricKind::Fpr95, "m1", Scope::Whitebox);
    let secs = t0.elapsed().as_secs_f64();
    let mut failures = Vec::new();
    if tsuc < 0.95 {
        failures.push(format!("tSuc {tsuc:.3} < 0.95"));
    }
    if fpr < 0.95 {
        failures.push(format!("FPR95 {fpr:.3} < 0.95"));
    }
    if secs >= 600.0 {
        failures.push(format!("runtime {secs:.0}s over budget"));
    }
    verdict(7, "distal TT+AFS floors, 100 distals", &failures);
}

#[test]
fn criterion_08_epsilon_sweep() {
    let config = base_config(vec![toy_model("m1", 1)], vec!["m1"]);
    let campaign = Campaign::prepare(&config).unwrap();
    let eps: Vec<f64> = [0.0, 2.0, 4.0, 8.0, 16.0].iter().map(|e| e / 255.0).collect();
    let sweep = campaign.epsilon_sweep(&eps).unwrap();
    let accs: Vec<f64> = sweep
        .series(MetricKind::Acc, "m1", Scope::Whitebox)
        .into_iter()
        .map(Option::unwrap)
        .collect();
    let fnrs: Vec<f64> = sweep
        .series(MetricKind::Fnr95, "m1", Scope::Whitebox)
        .into_iter()
        .map(Option::unwrap)
        .collect();
    let mut failures = Vec::new();
    if accs.windows(2).any(|w| w[1] > w[0]) {
        failures.push(format!("accuracy not non-increasing: {accs:?}"));
    }
    if fnrs.windows(2).any(|w| w[1] < w[0]) {
        failures.push(format!("FNR95 not non-decreasing: {fnrs:?}"));
    }
    let clean = campaign.run_clean().unwrap();
    let clean_acc = metric(&clean, MetricKind::Acc, "m1", Scope::Clean);
    let clean_fnr = metric(&clean, MetricKind::Fnr95, "m1", Scope::Clean);
    if accs[0] != clean_acc || fnrs[0] != clean_fnr {
        failures.push(format!(
            "eps=0 point ({}, {}) differs from clean ({clean_acc}, {clean_fnr})",
            accs[0], fnrs[0]
        ));
    }
    verdict(8, "epsilon sweep monotonicity", &failures);
}

#[test]
fn criterion_09_threshold_contract() {
    let mut failures = Vec::new();
    let config = base_config(vec![toy_model("m1", 1), toy_model("m2", 2)], vec!["m1"]);
    let campaign = Campaign::prepare(&config).unwrap();
    let report = campaign.run().unwrap();
    for t in &report.thresholds {
        if t.clean_tpr < 0.95 {
            failures.push(format!("{}: clean TPR {:.3} < 0.95", t.model_id, t.clean_tpr));
        }
    }
    // a zero-step attack must leave images untouched: FNR95 equals the clean
    // false-negative mass left below tau by the threshold rule
    let mut cfg0 = base_config(vec![toy_model("m1", 1)], vec!["m1"]);
    cfg0.attack.steps = 0;
    cfg0.attack.step_size = Some(Fraction::Num(0.01));
    let campaign0 = Campaign::prepare(&cfg0).unwrap();
    let n_clean = 200;
    let fnr0 = metric(&campaign0.run().unwrap(), MetricKind::Fnr95, "m1", Scope::Whitebox);
    if !(0.03..=0.07).contains(&fnr0) {
        failures.push(format!("steps=0 FNR95 {fnr0:.4} outside [0.03, 0.07] on {n_clean} images"));
    }
    verdict(9, "threshold contract", &failures);
}

#[test]
fn criterion_10_head_correctness() {
    let mut failures = Vec::new();
    let mut r = oodattack::rng::stream(&[0x4ead]);

    // kNN vs an independent brute-force oracle, exact equality
    let n = 400;
    let d = 8;
    let k = 7;
    let num_classes = 4;
    let bank = Array2::from_shape_fn((n, d), |_| r.gen_range(-1.0..1.0));
    let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..num_classes)).collect();
    for metric_kind in [KnnMetric::Cosine, KnnMetric::Euclidean] {
        let head = KnnHead::new(bank.clone(), labels.clone(), num_classes, k, metric_kind).unwrap();
        for q in 0..50 {
            let query = Array1::from_shape_fn(d, |_| r.gen_range(-1.0..1.0));
            let probs = knn_predict_proba(&head, query.view()).unwrap();
            // oracle: full sort of (distance, index), count the first k labels
            let mut scored: Vec<(f64, usize)> = (0..n)
                .map(|i| {
                    let row = bank.row(i);
                    let dist = match metric_kind {
                        KnnMetric::Euclidean => (&row.to_owned() - &query)
                            .iter()
                            .map(|v| v * v)
                            .sum::<f64>()
                            .sqrt(),
                        KnnMetric::Cosine => {
                            1.0 - row.dot(&query)
                                / (row.dot(&row).sqrt() * query.dot(&query).sqrt())
                        }
                    };
                    (dist, i)
                })
                .collect();
            scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let mut votes = vec![0.0; num_classes];
            for &(_, i) in scored.iter().take(k) {
                votes[labels[i]] += 1.0 / k as f64;
            }
            if probs.to_vec() != votes {
                failures.push(format!("kNN mismatch on query {q} ({metric_kind:?})"));
            }
            let total: f64 = probs.sum();
            if (total - 1.0).abs() >= 1e-9 {
                failures.push(format!("kNN probs sum {total}"));
            }
        }
    }

    // probe optimality and simplex outputs
    let np = 120;
    let feats = Array2::from_shape_fn((np, 5), |_| r.gen_range(-1.0..1.0));
    let plabels: Vec<usize> = (0..np)
        .map(|i| usize::from(feats[[i, 0]] + 0.3 * feats[[i, 1]] > 0.0))
        .collect();
    let head = fit_linear_probe(feats.view(), &plabels, 1.0 / np as f64, 1000).unwrap();
    let gn = probe_objective_grad_norm(&head, feats.view(), &plabels);
    if gn >= 1e-5 {
        failures.push(format!("probe gradient norm {gn:.2e} >= 1e-5"));
    }
    for i in 0..np {
        let p = probe_predict_proba(&head, feats.row(i));
        let total: f64 = p.sum();
        if (total - 1.0).abs() >= 1e-9 {
            failures.push(format!("probe probs sum {total} at row {i}"));
            break;
        }
    }
    verdict(10, "head correctness vs oracles", &failures);
}

#[test]
fn criterion_11_worker_determinism() {
    let mut failures = Vec::new();
    let mut world = ToyWorldSpec::default();
    world.samples_per_class = 10;
    let make = |workers: usize, dir: &std::path::Path| {
        let mut config = base_config(vec![toy_model("m1", 1), toy_model("m2", 2)], vec!["m1"]);
        config.task = TaskConfig::Toy { world: world.clone(), data_seed: 0 };
        config.attack.steps = 10;
        config.output = OutputConfig { dir: dir.into(), workers };
        config
    };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let cfg_a = make(1, dir_a.path());
    let cfg_b = make(3, dir_b.path());
    // worker count must not enter the config digest or the outputs
    let report_a = Campaign::prepare(&cfg_a).unwrap().run().unwrap();
    let report_b = Campaign::prepare(&cfg_b).unwrap().run().unwrap();
    write_report(&report_a, dir_a.path()).unwrap();
    write_report(&report_b, dir_b.path()).unwrap();
    for name in ["records.ndjson", "metrics.csv"] {
        let a = std::fs::read(dir_a.path().join(name)).unwrap();
        let b = std::fs::read(dir_b.path().join(name)).unwrap();
        if a != b {
            failures.push(format!("{name} differs between worker counts"));
        }
    }
    // round-trip and recomputation checks on the persisted report
    let back = read_report(dir_a.path()).unwrap();
    if back != report_a {
        failures.push("report round-trip mismatch".into());
    }
    if let Err(e) = verify_report(&back, 1e-9) {
        failures.push(format!("verify_report: {e}"));
    }
    verdict(11, "worker-count determinism", &failures);
}
