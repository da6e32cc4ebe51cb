//! `dpu`: generate synthetic data, train, evaluate and sweep ablation variants.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use dpu_core::datagen::save_dataset;
use dpu_core::evalkit::read_aggregate_csv;
use dpu_core::jsonio;
use dpu_core::netcore::Checkpoint;
use dpu_core::runner::{
    evaluate_run, load_run_record, run_dir_name, save_reports, save_trained, summarize, sweep, train_run,
    DatasetSource, MetricSummary, RunIdentity,
};
use dpu_core::scorers::write_scores_csv;
use dpu_core::{EvalReport, RunConfig, Variant};

#[derive(Debug, Parser)]
#[command(
    name = "dpu",
    version,
    about = "Multimodal OOD detection with dynamic prototype updating"
)]
struct Cli {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set loss.mu=1.2` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY.PATH=VALUE")]
    overrides: Vec<String>,
    /// Seed for the command (replaces the configured seed list).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the configured synthetic dataset and write it as JSON.
    GenData,
    /// Train one variant and save checkpoint, run record and loss curves.
    Train {
        /// dpu | base-only | fixed-rate(<v>) | no-csct | no-aos
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Evaluate a trained run directory with the configured scorers.
    Eval {
        /// Directory written by `train` or by a sweep.
        run_dir: PathBuf,
    },
    /// Train and evaluate every (variant, seed) pair of the config.
    Sweep,
    /// Summarize a sweep's aggregate CSV as mean ± std per variant and method.
    Report {
        /// Sweep output directory or aggregate CSV file.
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::GenData => gen_data(&cli),
        Command::Train { variant } => train(&cli, *variant),
        Command::Eval { run_dir } => eval(&cli, run_dir),
        Command::Sweep => run_sweep(&cli),
        Command::Report { input } => report(&cli, input),
    }
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    let cfg = cfg.with_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = load_config(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn gen_data(cli: &Cli) -> Result<ExitCode> {
    let cfg = load_config(cli.config.as_deref(), &cli.overrides)?;
    let DatasetSource::Inline(mut synth) = cfg.dataset else {
        bail!("gen-data needs an inline synthetic dataset config, not a file path");
    };
    if let Some(seed) = cli.seed {
        synth.seed = seed;
    }
    let ds = dpu_core::datagen::generate(&synth)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("dataset.json"));
    save_dataset(&ds, &out)?;
    println!(
        "wrote {} (train {}, test {}, near-OOD {}, far-OOD {})",
        out.display(),
        ds.id_train.len(),
        ds.id_test.len(),
        ds.near_ood.len(),
        ds.far_ood.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn train(cli: &Cli, variant: Option<Variant>) -> Result<ExitCode> {
    let cfg = config(cli)?;
    let variant = variant
        .or_else(|| cfg.variants.first().copied())
        .unwrap_or(Variant::Dpu);
    let seed = cfg.seeds.first().copied().unwrap_or(0);
    let dir = cli
        .out
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join(run_dir_name(variant, seed)));
    let dataset = cfg.dataset.load()?;

    let start = Instant::now();
    let run = train_run(&cfg, &dataset, variant, seed).with_context(|| format!("training {variant} seed {seed}"))?;
    save_trained(&dir, &run, &cfg.dataset.name(), start.elapsed().as_secs_f64())?;
    jsonio::write_json(&dir.join("config.json"), &cfg, true)?;

    for e in &run.epochs {
        let l = &e.loss;
        println!(
            "epoch {:>3}  total {:>12.4}  base {:.4}  csct {:.4}  pdi {:.4}  aos {:.4}",
            e.epoch, l.total, l.base, l.csct, l.pdi, l.aos
        );
    }
    println!("saved {variant} seed {seed} to {}", dir.display());
    Ok(ExitCode::SUCCESS)
}

/// The config a run was trained with: explicit `--config`, else the copy in
/// the run directory, else the one at the root of the sweep that wrote it.
fn run_config(cli: &Cli, run_dir: &Path) -> Result<RunConfig> {
    if cli.config.is_some() {
        return load_config(cli.config.as_deref(), &cli.overrides);
    }
    let candidates = [run_dir.join("config.json"), run_dir.join("../../config.json")];
    let found = candidates.iter().find(|p| p.exists());
    load_config(found.map(PathBuf::as_path), &cli.overrides)
}

fn eval(cli: &Cli, run_dir: &Path) -> Result<ExitCode> {
    let record = load_run_record(run_dir).with_context(|| format!("reading run record in {}", run_dir.display()))?;
    let checkpoint = Checkpoint::load(&run_dir.join("checkpoint.json"))?;
    let cfg = run_config(cli, run_dir)?;
    let dataset = cfg.dataset.load()?;

    let start = Instant::now();
    let curves: Vec<_> = record.epochs.iter().map(|e| e.loss.clone()).collect();
    let identity = RunIdentity {
        dataset_name: &record.dataset,
        variant: record.variant.to_string(),
        seed: record.seed,
        loss_curves: &curves,
        runtime_seconds: record.train_seconds,
    };
    let mut eval = evaluate_run(&checkpoint.params, &dataset, &cfg.scorers, &identity)?;
    let elapsed = start.elapsed().as_secs_f64();
    for r in &mut eval.reports {
        r.runtime_seconds += elapsed;
    }
    let out = cli.out.clone().unwrap_or_else(|| run_dir.to_path_buf());
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    save_reports(&out, &eval.reports)?;
    write_scores_csv(&out.join("scores.csv"), &eval.scores)?;
    print_reports(&eval.reports);
    Ok(ExitCode::SUCCESS)
}

fn print_reports(reports: &[EvalReport]) {
    println!(
        "{:<12} {:<22} {:>8} {:>8} {:>8}",
        "method", "dataset", "fpr95", "auroc", "id_acc"
    );
    for r in reports {
        println!(
            "{:<12} {:<22} {:>8.4} {:>8.4} {:>8.4}",
            r.method, r.dataset, r.fpr95, r.auroc, r.id_acc
        );
    }
}

fn run_sweep(cli: &Cli) -> Result<ExitCode> {
    let cfg = config(cli)?;
    let out = cli.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let outcome = sweep(&cfg, &out)?;
    print_summary(&outcome.summary.metrics);
    println!(
        "{} of {} runs completed; results in {}",
        outcome.summary.runs_completed,
        outcome.summary.runs_completed + outcome.summary.failures.len(),
        out.display()
    );
    if outcome.all_succeeded() {
        return Ok(ExitCode::SUCCESS);
    }
    for f in &outcome.summary.failures {
        eprintln!("run {} seed {} failed: {}", f.variant, f.seed, f.error);
    }
    Ok(ExitCode::FAILURE)
}

fn print_summary(metrics: &[MetricSummary]) {
    println!(
        "{:<18} {:<12} {:<22} {:>4} {:>17} {:>17} {:>17}",
        "variant", "method", "dataset", "runs", "fpr95", "auroc", "id_acc"
    );
    for m in metrics {
        println!(
            "{:<18} {:<12} {:<22} {:>4} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4}",
            m.variant,
            m.method,
            m.dataset,
            m.runs,
            m.fpr95_mean,
            m.fpr95_std,
            m.auroc_mean,
            m.auroc_std,
            m.id_acc_mean,
            m.id_acc_std
        );
    }
}

fn report(cli: &Cli, input: &Path) -> Result<ExitCode> {
    let csv = if input.is_dir() {
        input.join("aggregate.csv")
    } else {
        input.to_path_buf()
    };
    let rows = read_aggregate_csv(&csv).with_context(|| format!("reading {}", csv.display()))?;
    if rows.is_empty() {
        bail!("{} has no rows", csv.display());
    }
    let metrics = summarize(&rows);
    print_summary(&metrics);
    if let Some(out) = &cli.out {
        jsonio::write_json(out, &metrics, true)?;
    }
    Ok(ExitCode::SUCCESS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn global_flags_parse_after_subcommand() {
        let cli = Cli::try_parse_from([
            "dpu",
            "train",
            "--variant",
            "fixed-rate(0.3)",
            "--seed",
            "4",
            "--set",
            "epochs=2",
        ])
        .unwrap();
        assert_eq!(cli.seed, Some(4));
        assert_eq!(cli.overrides, vec!["epochs=2".to_string()]);
        match cli.command {
            Command::Train { variant } => assert_eq!(variant, Some(Variant::FixedRate(0.3))),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_variant_is_rejected() {
        assert!(Cli::try_parse_from(["dpu", "train", "--variant", "adaptive"]).is_err());
    }
}
