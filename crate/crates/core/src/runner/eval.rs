use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, MultimodalBatch};
use crate::dpuloss::LossBreakdown;
use crate::error::{Error, Result};
use crate::evalkit::{auroc, fpr_at_tpr, id_accuracy, EvalReport, REPORT_SCHEMA_VERSION};
use crate::netcore::{forward, ForwardCache, ModelParams};
use crate::scorers::{fit_scorer, ScoreRow, ScorerSpec};

/// The two OOD splits every scorer is evaluated on.
pub const OOD_SPLITS: [&str; 2] = ["near", "far"];

/// Reports for every scorer on both OOD splits, plus the raw scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub reports: Vec<EvalReport>,
    pub scores: Vec<ScoreRow>,
}

/// Identifies what produced the model being evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct RunIdentity<'a> {
    pub dataset_name: &'a str,
    pub variant: String,
    pub seed: u64,
    pub loss_curves: &'a [LossBreakdown],
    pub runtime_seconds: f64,
}

fn forward_split(params: &ModelParams, batch: &MultimodalBatch, name: &str) -> Result<ForwardCache> {
    forward(params, batch).map_err(|e| Error::Dimension(format!("{name} split: {e}")))
}

/// Fits each scorer on `id_train` outputs and scores `id_test` against the
/// near and far OOD splits. Reports come out scorer-major, near before far.
pub fn evaluate_run(
    params: &ModelParams,
    dataset: &Dataset,
    scorers: &[ScorerSpec],
    identity: &RunIdentity<'_>,
) -> Result<Evaluation> {
    let train = forward_split(params, &dataset.id_train, "id_train")?;
    let test = forward_split(params, &dataset.id_test, "id_test")?;
    let near = forward_split(params, &dataset.near_ood, "near_ood")?;
    let far = forward_split(params, &dataset.far_ood, "far_ood")?;
    let train_labels = dataset.id_train.class_labels()?;
    let id_acc = id_accuracy(&test, &dataset.id_test.labels)?;

    let mut reports = Vec::with_capacity(scorers.len() * 2);
    let mut scores = Vec::new();
    for spec in scorers {
        let model =
            fit_scorer(spec, params, &train, &train_labels).map_err(|e| Error::Fit(format!("{}: {e}", spec.method)))?;
        let id_scores = model.score_batch(&test)?;
        let split_scores = [model.score_batch(&near)?, model.score_batch(&far)?];
        for (split, ood) in OOD_SPLITS.iter().zip(&split_scores) {
            reports.push(EvalReport {
                schema_version: REPORT_SCHEMA_VERSION,
                method: spec.method.to_string(),
                dataset: format!("{}-{split}", identity.dataset_name),
                variant: identity.variant.clone(),
                seed: identity.seed,
                fpr95: fpr_at_tpr(&id_scores, ood, 0.95)?,
                auroc: auroc(&id_scores, ood)?,
                id_acc,
                loss_curves: identity.loss_curves.to_vec(),
                runtime_seconds: identity.runtime_seconds,
            });
        }
        for (split, values) in [
            ("id_test", &id_scores),
            ("near_ood", &split_scores[0]),
            ("far_ood", &split_scores[1]),
        ] {
            scores.extend(values.iter().enumerate().map(|(i, &score)| ScoreRow {
                sample_index: i,
                split: split.into(),
                method: spec.method.to_string(),
                score,
            }));
        }
    }
    Ok(Evaluation { reports, scores })
}

/// File name of a report inside a run directory.
pub fn report_file_name(report: &EvalReport) -> String {
    format!("report_{}_{}.json", report.method, report.dataset)
}

pub fn save_reports(dir: &Path, reports: &[EvalReport]) -> Result<()> {
    for r in reports {
        r.save(&dir.join(report_file_name(r)))?;
    }
    Ok(())
}
