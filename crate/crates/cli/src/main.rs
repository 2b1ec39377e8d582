//! Batch command-line front end for the attack pipeline.
//!
//! Every command reads a TOML campaign config, applies `--set key=value`
//! overrides, prints the resolved config digest, and writes machine artifacts
//! only under the configured output directory. Exit codes: 0 success, 1
//! validation/configuration error, 2 runtime error, 3 partial campaign (some
//! pool models failed to load).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use oodattack::attack::Objective;
use oodattack::harness::{
    read_report, render_adv_grid, render_histograms, write_report, Campaign, CampaignConfig,
    ReportBundle, Scope, TaskConfig,
};
use oodattack::metrics::MetricKind;
use oodattack::zoo::hub::load_external_bundle;
use oodattack::zoo::{export_split, generate_toy_dataset, Split};
use oodattack::Error;

#[derive(Parser)]
#[command(name = "oodattack", version, about = "Feature-space attacks on frozen encoder pipelines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Campaign config file (TOML). Sections: task, pool, head, detector,
    /// attack, output; see the bundled examples.
    #[arg(long)]
    config: PathBuf,
    /// Dotted-key override applied before validation, e.g.
    /// `--set attack.epsilon=8/255` or `--set head.scheme=knn`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Worker threads for the evaluation loops; 0 means machine parallelism.
    /// Outputs are byte-identical at any worker count.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the toy dataset splits as PNG trees under the output directory.
    ToyData(ConfigArgs),
    /// Download and verify every external model in the pool.
    ModelFetch(ConfigArgs),
    /// Run the ID->OOD evasion campaign (AFS objective).
    AttackId2ood(ConfigArgs),
    /// Run the OOD->ID distal campaign (TT+AFS objective).
    AttackOod2id(ConfigArgs),
    /// Evaluate the clean pipeline: accuracy and OOD detection without attack.
    EvalClean(ConfigArgs),
    /// Run the whitebox campaign across an epsilon ladder.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated budgets; fractions allowed.
        #[arg(long, default_value = "0,2/255,4/255,8/255,16/255")]
        epsilons: String,
    },
    /// Re-render score histograms for a previously written report directory.
    ReportRender {
        /// Directory containing records.ndjson / report.json.
        #[arg(long)]
        dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Validation(_) | Error::SchemaVersion { .. } => {
                    ExitCode::from(1)
                }
                _ => ExitCode::from(2),
            }
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::ToyData(args) => toy_data(&load_config(&args)?),
        Command::ModelFetch(args) => model_fetch(&load_config(&args)?),
        Command::AttackId2ood(args) => attack(&load_config(&args)?, Objective::Id2OodAfs),
        Command::AttackOod2id(args) => attack(&load_config(&args)?, Objective::Ood2IdTtAfs),
        Command::EvalClean(args) => eval_clean(&load_config(&args)?),
        Command::Sweep { config, epsilons } => sweep(&load_config(&config)?, &epsilons),
        Command::ReportRender { dir } => report_render(&dir),
    }
}

/// Read, override, and validate the campaign config; prints the digest every
/// run so artifacts are attributable from terminal scrollback alone.
fn load_config(args: &ConfigArgs) -> Result<CampaignConfig, Error> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| {
        Error::Config(format!("cannot read config {}: {e}", args.config.display()))
    })?;
    let mut doc: toml::Value = toml::from_str(&text).map_err(as_config_error)?;
    for set in &args.sets {
        apply_set(&mut doc, set)?;
    }
    let resolved =
        toml::to_string(&doc).map_err(|e| Error::Serialization(e.to_string()))?;
    // a config that fails to deserialize is a configuration error, not a
    // runtime one: exit 1, with the offending key in the message
    let mut config = CampaignConfig::from_toml(&resolved).map_err(|e| match e {
        Error::Serialization(msg) => Error::Config(msg),
        other => other,
    })?;
    if let Some(w) = args.workers {
        config.output.workers = w;
    }
    println!("config digest: {}", config.digest()?);
    Ok(config)
}

fn as_config_error(e: toml::de::Error) -> Error {
    Error::Config(e.to_string())
}

/// Apply one `a.b.c=value` override to a TOML document. The value is parsed
/// as TOML where possible and kept as a string otherwise, so both
/// `attack.steps=10` and `attack.epsilon=8/255` work.
fn apply_set(doc: &mut toml::Value, set: &str) -> Result<(), Error> {
    let (key, value) = set
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set '{set}' is not KEY=VALUE")))?;
    let parsed: toml::Value = match toml::from_str::<toml::Value>(&format!("v = {value}")) {
        Ok(toml::Value::Table(t)) => t["v"].clone(),
        _ => toml::Value::String(value.to_string()),
    };
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        node = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("--set key '{key}': '{part}' is not a table")))?
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    node.as_table_mut()
        .ok_or_else(|| Error::Config(format!("--set key '{key}' does not address a table")))?
        .insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

fn toy_data(config: &CampaignConfig) -> Result<ExitCode, Error> {
    let TaskConfig::Toy { world, data_seed } = &config.task else {
        return Err(Error::Config("toy-data requires task.kind = \"toy\"".into()));
    };
    let root = config.output.dir.join("toy-data");
    for split in [Split::Train, Split::Val, Split::Test, Split::Ood] {
        let samples = generate_toy_dataset(world, split, *data_seed)?;
        export_split(&samples, &root)?;
        println!("{split:?}: {} images", samples.len());
    }
    println!("wrote {}", root.display());
    Ok(ExitCode::SUCCESS)
}

fn model_fetch(config: &CampaignConfig) -> Result<ExitCode, Error> {
    let mut fetched = 0;
    for model in &config.pool.models {
        if let oodattack::harness::ModelConfig::External { id, model_id, cache_dir } = model {
            load_external_bundle(model_id, cache_dir)?;
            println!("{id}: {model_id} cached under {}", cache_dir.display());
            fetched += 1;
        }
    }
    if fetched == 0 {
        println!("pool has no external models; nothing to fetch");
    }
    Ok(ExitCode::SUCCESS)
}

fn attack(config: &CampaignConfig, objective: Objective) -> Result<ExitCode, Error> {
    let mut config = config.clone();
    config.attack.objective = objective;
    config.validate()?;
    let campaign = Campaign::prepare(&config)?;
    let (report, examples) = campaign.run_with_examples()?;
    write_report(&report, &config.output.dir)?;
    let plots = config.output.dir.join("plots");
    render_histograms(&report, &plots)?;
    if !examples.is_empty() {
        render_adv_grid(&examples, 8, &plots.join("adv_grid.png"))?;
    }
    print_summary(&report);
    println!("wrote {}", config.output.dir.display());
    Ok(finish(&report))
}

fn eval_clean(config: &CampaignConfig) -> Result<ExitCode, Error> {
    let campaign = Campaign::prepare(config)?;
    let report = campaign.run_clean()?;
    write_report(&report, &config.output.dir)?;
    render_histograms(&report, &config.output.dir.join("plots"))?;
    print_summary(&report);
    println!("wrote {}", config.output.dir.display());
    Ok(finish(&report))
}

fn sweep(config: &CampaignConfig, epsilons: &str) -> Result<ExitCode, Error> {
    let mut budgets = Vec::new();
    for part in epsilons.split(',') {
        budgets.push(
            oodattack::harness::Fraction::Text(part.trim().to_string()).value()?,
        );
    }
    let campaign = Campaign::prepare(config)?;
    let sweep = campaign.epsilon_sweep(&budgets)?;
    std::fs::create_dir_all(&config.output.dir)?;
    let csv_path = config.output.dir.join("sweep.csv");
    sweep.write_csv(&csv_path)?;
    let mut partial = false;
    for (eps, report) in budgets.iter().zip(&sweep.reports) {
        println!("epsilon {eps:.6}:");
        print_summary(report);
        partial |= !report.model_failures.is_empty();
    }
    println!("wrote {}", csv_path.display());
    Ok(if partial { ExitCode::from(3) } else { ExitCode::SUCCESS })
}

fn report_render(dir: &Path) -> Result<ExitCode, Error> {
    let report = read_report(dir)?;
    let plots = render_histograms(&report, &dir.join("plots"))?;
    for p in &plots {
        println!("{}", p.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn finish(report: &ReportBundle) -> ExitCode {
    if report.model_failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        for (id, reason) in &report.model_failures {
            eprintln!("model '{id}' failed: {reason}");
        }
        ExitCode::from(3)
    }
}

fn print_summary(report: &ReportBundle) {
    for t in &report.thresholds {
        println!("  {}: tau {:.6} clean TPR {:.4}", t.model_id, t.tau, t.clean_tpr);
    }
    for scope in [Scope::Clean, Scope::Whitebox, Scope::Transfer, Scope::BlackboxAvg, Scope::Noise]
    {
        for kind in
            [MetricKind::Acc, MetricKind::Auroc, MetricKind::Fnr95, MetricKind::Fpr95, MetricKind::Tsuc]
        {
            for row in &report.metrics {
                if row.scope == scope && row.metric == kind {
                    println!(
                        "  {} {:?} {}: {:.4}",
                        row.model_id,
                        row.scope,
                        row.metric,
                        row.value
                    );
                }
            }
        }
    }
}
