use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::evalkit::{write_aggregate_csv, AggregateRow, EvalReport};
use crate::jsonio;
use crate::netcore::Checkpoint;
use crate::scorers::write_scores_csv;

use super::eval::{evaluate_run, save_reports, RunIdentity};
use super::train::{train_run, EpochLog, TrainedRun};
use super::{RunConfig, Variant};

pub const RUN_SCHEMA_VERSION: u64 = 1;
pub const SUMMARY_SCHEMA_VERSION: u64 = 1;

/// Training metadata stored next to the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u64,
    pub dataset: String,
    pub variant: Variant,
    pub seed: u64,
    pub epochs: Vec<EpochLog>,
    pub train_seconds: f64,
}

/// Directory name of a run, e.g. `fixed-rate-0.5_seed3`.
pub fn run_dir_name(variant: Variant, seed: u64) -> String {
    let v: String = variant
        .to_string()
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '-'
            }
        })
        .collect();
    format!("{}_seed{seed}", v.trim_end_matches('-'))
}

fn loss_curve_header() -> Vec<&'static str> {
    vec![
        "epoch",
        "base",
        "rmcl",
        "irm",
        "csct",
        "pdi",
        "aos",
        "total",
        "rate_min",
        "rate_max",
        "rate_mean",
        "pdi_skipped",
    ]
}

fn loss_curve_record(e: &EpochLog) -> Vec<String> {
    let l = &e.loss;
    let mut out = vec![e.epoch.to_string()];
    out.extend(
        [
            l.base,
            l.rmcl,
            l.irm,
            l.csct,
            l.pdi,
            l.aos,
            l.total,
            e.rate_min,
            e.rate_max,
            e.rate_mean,
        ]
        .iter()
        .map(|v| format!("{v:.16e}")),
    );
    out.push(e.pdi_skipped.to_string());
    out
}

pub fn write_loss_curves_csv(path: &Path, epochs: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(loss_curve_header())?;
    for e in epochs {
        w.write_record(loss_curve_record(e))?;
    }
    w.flush().map_err(|err| Error::io(path, err))?;
    Ok(())
}

/// Writes checkpoint, run record and loss curves of a trained run into `dir`.
pub fn save_trained(dir: &Path, run: &TrainedRun, dataset_name: &str, train_seconds: f64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Checkpoint::new(run.params.clone(), run.optimizer.clone(), Some(run.store.clone()))
        .save(&dir.join("checkpoint.json"))?;
    let record = RunRecord {
        schema_version: RUN_SCHEMA_VERSION,
        dataset: dataset_name.to_string(),
        variant: run.variant,
        seed: run.seed,
        epochs: run.epochs.clone(),
        train_seconds,
    };
    jsonio::write_json(&dir.join("run.json"), &record, true)?;
    write_loss_curves_csv(&dir.join("loss_curves.csv"), &run.epochs)
}

pub fn load_run_record(dir: &Path) -> Result<RunRecord> {
    let value = jsonio::read_value(&dir.join("run.json"))?;
    jsonio::check_schema(&value, RUN_SCHEMA_VERSION)?;
    Ok(serde_json::from_value(value)?)
}

/// Train, evaluate and persist one `(variant, seed)` run under `dir`.
pub fn execute_run(
    config: &RunConfig,
    dataset: &Dataset,
    dataset_name: &str,
    variant: Variant,
    seed: u64,
    dir: &Path,
) -> Result<(TrainedRun, Vec<EvalReport>)> {
    let start = Instant::now();
    let run = train_run(config, dataset, variant, seed)?;
    let train_seconds = start.elapsed().as_secs_f64();
    save_trained(dir, &run, dataset_name, train_seconds)?;
    let curves = run.loss_curves();
    let identity = RunIdentity {
        dataset_name,
        variant: variant.to_string(),
        seed,
        loss_curves: &curves,
        runtime_seconds: start.elapsed().as_secs_f64(),
    };
    let eval = evaluate_run(&run.params, dataset, &config.scorers, &identity)?;
    save_reports(dir, &eval.reports)?;
    write_scores_csv(&dir.join("scores.csv"), &eval.scores)?;
    Ok((run, eval.reports))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub variant: Variant,
    pub seed: u64,
    pub error: String,
}

/// Mean and sample standard deviation of one metric over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub variant: String,
    pub method: String,
    pub dataset: String,
    pub runs: usize,
    pub fpr95_mean: f64,
    pub fpr95_std: f64,
    pub auroc_mean: f64,
    pub auroc_std: f64,
    pub id_acc_mean: f64,
    pub id_acc_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub schema_version: u64,
    pub runs_completed: usize,
    pub failures: Vec<RunFailure>,
    pub metrics: Vec<MetricSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub out_dir: PathBuf,
    pub rows: Vec<AggregateRow>,
    pub summary: SweepSummary,
    pub runs: Vec<(Variant, u64, Vec<EpochLog>)>,
}

impl SweepOutcome {
    pub fn all_succeeded(&self) -> bool {
        self.summary.failures.is_empty()
    }
}

/// `(mean, sample std)`; the std of a single value is 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups rows by (variant, method, dataset) in first-appearance order.
pub fn summarize(rows: &[AggregateRow]) -> Vec<MetricSummary> {
    let mut order: Vec<(String, String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String, String), Vec<&AggregateRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.variant.clone(), r.method.clone(), r.dataset.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let col = |f: fn(&AggregateRow) -> f64| g.iter().map(|r| f(r)).collect::<Vec<_>>();
            let (fpr95_mean, fpr95_std) = mean_std(&col(|r| r.fpr95));
            let (auroc_mean, auroc_std) = mean_std(&col(|r| r.auroc));
            let (id_acc_mean, id_acc_std) = mean_std(&col(|r| r.id_acc));
            MetricSummary {
                variant: key.0,
                method: key.1,
                dataset: key.2,
                runs: g.len(),
                fpr95_mean,
                fpr95_std,
                auroc_mean,
                auroc_std,
                id_acc_mean,
                id_acc_std,
            }
        })
        .collect()
}

fn write_plot_files(out: &Path, runs: &[(Variant, u64, Vec<EpochLog>)], metrics: &[MetricSummary]) -> Result<()> {
    let path = out.join("plot_loss_curves.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec!["variant", "seed"];
    header.extend(loss_curve_header());
    w.write_record(header)?;
    for (variant, seed, epochs) in runs {
        for e in epochs {
            let mut rec = vec![variant.to_string(), seed.to_string()];
            rec.extend(loss_curve_record(e));
            w.write_record(rec)?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = out.join("plot_metric_bars.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["variant", "method", "dataset", "metric", "mean", "std"])?;
    for m in metrics {
        for (name, mean, std) in [
            ("fpr95", m.fpr95_mean, m.fpr95_std),
            ("auroc", m.auroc_mean, m.auroc_std),
            ("id_acc", m.id_acc_mean, m.id_acc_std),
        ] {
            w.write_record([
                m.variant.clone(),
                m.method.clone(),
                m.dataset.clone(),
                name.to_string(),
                format!("{mean:.16e}"),
                format!("{std:.16e}"),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Runs every `(variant, seed)` pair in parallel, then writes the aggregate
/// CSV, summary JSON and plot data under `out_dir`. A failed run is recorded
/// in the summary and the sweep carries on.
pub fn sweep(config: &RunConfig, out_dir: &Path) -> Result<SweepOutcome> {
    config.validate()?;
    if config.variants.is_empty() || config.seeds.is_empty() {
        return Err(Error::Config("a sweep needs at least one variant and one seed".into()));
    }
    let dataset = config.dataset.load()?;
    let dataset_name = config.dataset.name();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    jsonio::write_json(&out_dir.join("config.json"), config, true)?;

    let combos: Vec<(Variant, u64)> = config
        .variants
        .iter()
        .flat_map(|&v| config.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results: Vec<Result<(TrainedRun, Vec<EvalReport>)>> = combos
        .par_iter()
        .map(|&(v, s)| {
            let dir = out_dir.join("runs").join(run_dir_name(v, s));
            execute_run(config, &dataset, &dataset_name, v, s, &dir)
        })
        .collect();

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut runs = Vec::new();
    for ((variant, seed), result) in combos.into_iter().zip(results) {
        match result {
            Ok((run, reports)) => {
                rows.extend(reports.iter().map(EvalReport::aggregate_row));
                runs.push((variant, seed, run.epochs));
            }
            Err(e) => failures.push(RunFailure {
                variant,
                seed,
                error: e.to_string(),
            }),
        }
    }
    write_aggregate_csv(&out_dir.join("aggregate.csv"), &rows)?;
    let metrics = summarize(&rows);
    write_plot_files(out_dir, &runs, &metrics)?;
    let summary = SweepSummary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        runs_completed: runs.len(),
        failures,
        metrics,
    };
    jsonio::write_json(&out_dir.join("summary.json"), &summary, true)?;
    Ok(SweepOutcome {
        out_dir: out_dir.to_path_buf(),
        rows,
        summary,
        runs,
    })
}
