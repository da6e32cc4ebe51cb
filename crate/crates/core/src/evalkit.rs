//! Detection metrics and report files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dpuloss::LossBreakdown;
use crate::error::{Error, Result};
use crate::jsonio;
use crate::netcore::ForwardCache;
use crate::numkit::argmax;

pub const REPORT_SCHEMA_VERSION: u64 = 1;

fn check_non_empty(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::Dimension(format!(
            "need ID and OOD scores, got {} and {}",
            id.len(),
            ood.len()
        )));
    }
    Ok(())
}

/// `P(id > ood) + ½·P(id = ood)` over all pairs.
///
/// Counted with a merge over sorted scores; the numerator is kept as the
/// integer `2·greater + equal` so the result is exact.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_non_empty(id_scores, ood_scores)?;
    let mut id = id_scores.to_vec();
    let mut ood = ood_scores.to_vec();
    id.sort_by(f64::total_cmp);
    ood.sort_by(f64::total_cmp);
    let mut twice: u128 = 0;
    let (mut lo, mut hi) = (0usize, 0usize);
    for &s in &id {
        // lo = #ood < s, hi = #ood <= s
        while lo < ood.len() && ood[lo] < s {
            lo += 1;
        }
        hi = hi.max(lo);
        while hi < ood.len() && ood[hi] <= s {
            hi += 1;
        }
        twice += 2 * lo as u128 + (hi - lo) as u128;
    }
    Ok(twice as f64 / (2 * id.len() * ood.len()) as f64)
}

/// OOD false-positive rate at the largest observed ID threshold `τ` with
/// `frac(id ≥ τ) ≥ tpr_target`.
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], tpr_target: f64) -> Result<f64> {
    check_non_empty(id_scores, ood_scores)?;
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::Argument(format!(
            "TPR target must be in (0, 1], got {tpr_target}"
        )));
    }
    let mut id = id_scores.to_vec();
    id.sort_by(|a, b| b.total_cmp(a));
    let n = id.len();
    // Descending order: frac(id ≥ id[i]) counts every score equal to id[i].
    let mut tau = id[n - 1];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && id[j + 1] == id[i] {
            j += 1;
        }
        if (j + 1) as f64 / n as f64 >= tpr_target {
            tau = id[i];
            break;
        }
        i = j + 1;
    }
    let fp = ood_scores.iter().filter(|&&s| s >= tau).count();
    Ok(fp as f64 / ood_scores.len() as f64)
}

/// Fraction of samples whose joint argmax equals the label (ties go to the lowest class).
pub fn id_accuracy(cache: &ForwardCache, labels: &[i64]) -> Result<f64> {
    if labels.len() != cache.len() {
        return Err(Error::Dimension(format!(
            "{} labels for {} samples",
            labels.len(),
            cache.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Dimension("accuracy of an empty set".into()));
    }
    let mut correct = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        if y < 0 {
            return Err(Error::Argument(format!("label {y} is not an ID class")));
        }
        correct += usize::from(argmax(cache.joint_probs.row(i)) as i64 == y);
    }
    Ok(correct as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u64,
    pub method: String,
    /// Dataset identifier including the OOD split, e.g. `synthetic-near`.
    pub dataset: String,
    pub variant: String,
    pub seed: u64,
    pub fpr95: f64,
    pub auroc: f64,
    pub id_acc: f64,
    pub loss_curves: Vec<LossBreakdown>,
    pub runtime_seconds: f64,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("fpr95", self.fpr95), ("auroc", self.auroc), ("id_acc", self.id_acc)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Invariant(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        jsonio::write_json(path, self, true)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let value = jsonio::read_value(path)?;
        jsonio::check_schema(&value, REPORT_SCHEMA_VERSION)?;
        let report: EvalReport = serde_json::from_value(value)?;
        report.validate()?;
        Ok(report)
    }

    pub fn aggregate_row(&self) -> AggregateRow {
        AggregateRow {
            dataset: self.dataset.clone(),
            method: self.method.clone(),
            variant: self.variant.clone(),
            seed: self.seed,
            fpr95: self.fpr95,
            auroc: self.auroc,
            id_acc: self.id_acc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub dataset: String,
    pub method: String,
    pub variant: String,
    pub seed: u64,
    pub fpr95: f64,
    pub auroc: f64,
    pub id_acc: f64,
}

/// Writes `(dataset, method, variant, seed, fpr95, auroc, id_acc)` rows.
pub fn write_aggregate_csv(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_aggregate_csv(path: &Path) -> Result<Vec<AggregateRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpuloss::test_support::embedding_cache;
    use crate::numkit::Mat64;
    use crate::rng::{SeededRng, Stream};
    use proptest::prelude::*;

    fn brute_auroc(id: &[f64], ood: &[f64]) -> f64 {
        let mut twice = 0u64;
        for &a in id {
            for &b in ood {
                twice += if a > b {
                    2
                } else if a == b {
                    1
                } else {
                    0
                };
            }
        }
        twice as f64 / (2 * id.len() * ood.len()) as f64
    }

    fn brute_fpr(id: &[f64], ood: &[f64], target: f64) -> f64 {
        let frac = |xs: &[f64], t: f64| xs.iter().filter(|&&s| s >= t).count() as f64 / xs.len() as f64;
        let tau = id
            .iter()
            .copied()
            .filter(|&t| frac(id, t) >= target)
            .fold(f64::NEG_INFINITY, f64::max);
        frac(ood, tau)
    }

    /// Scores on a coarse grid so ties are common.
    fn scores(rng: &mut SeededRng, n: usize) -> Vec<f64> {
        (0..n).map(|_| (rng.uniform() * 20.0).floor() / 4.0).collect()
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.5);
        assert_eq!(auroc(&[5.0, 5.0], &[5.0]).unwrap(), 0.5);
        assert!(matches!(auroc(&[], &[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn fpr_examples() {
        assert_eq!(fpr_at_tpr(&[2.0, 3.0, 4.0], &[0.0, 1.0], 0.95).unwrap(), 0.0);
        let xs: Vec<f64> = (0..100).map(f64::from).collect();
        let fpr = fpr_at_tpr(&xs, &xs, 0.95).unwrap();
        assert!((fpr - 0.95).abs() <= 0.01);
        assert!(fpr_at_tpr(&[1.0], &[], 0.95).is_err());
        assert!(fpr_at_tpr(&[1.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn metric_oracles_on_random_instances() {
        let mut rng = SeededRng::new(11, Stream::Data);
        for _ in 0..100 {
            let n = 1 + rng.index(200);
            let m = 1 + rng.index(200);
            let id = scores(&mut rng, n);
            let ood = scores(&mut rng, m);
            assert_eq!(auroc(&id, &ood).unwrap(), brute_auroc(&id, &ood));
            assert_eq!(fpr_at_tpr(&id, &ood, 0.95).unwrap(), brute_fpr(&id, &ood, 0.95));
        }
    }

    fn cache_with_probs(rows: Vec<Vec<f64>>) -> ForwardCache {
        let n = rows.len();
        let mut c = embedding_cache(vec![vec![vec![1.0]; n]]);
        c.joint_probs = Mat64::from_rows(&rows).unwrap();
        c
    }

    #[test]
    fn id_accuracy_examples() {
        let c = cache_with_probs(vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.6, 0.4], vec![0.3, 0.7]]);
        assert_eq!(id_accuracy(&c, &[0, 1, 0, 1]).unwrap(), 1.0);
        assert_eq!(id_accuracy(&c, &[0, 1, 1, 1]).unwrap(), 0.75);
        let u = cache_with_probs(vec![vec![0.5, 0.5]; 3]);
        assert_eq!(id_accuracy(&u, &[0, 0, 0]).unwrap(), 1.0);
        assert!(matches!(id_accuracy(&u, &[0, -1, 0]), Err(Error::Argument(_))));
    }

    #[test]
    fn report_round_trip_and_range() {
        let dir = tempfile::tempdir().unwrap();
        let report = EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            method: "MSP".into(),
            dataset: "synthetic-near".into(),
            variant: "dpu".into(),
            seed: 3,
            fpr95: 0.25,
            auroc: 0.875,
            id_acc: 0.99,
            loss_curves: vec![],
            runtime_seconds: 1.5,
        };
        let path = dir.path().join("r.json");
        report.save(&path).unwrap();
        assert_eq!(EvalReport::load(&path).unwrap(), report);
        let bad = EvalReport { auroc: 1.5, ..report };
        assert!(bad.save(&path).is_err());
    }

    #[test]
    fn aggregate_csv_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agg.csv");
        let row = AggregateRow {
            dataset: "synthetic-far".into(),
            method: "Energy".into(),
            variant: "base-only".into(),
            seed: 0,
            fpr95: 0.5,
            auroc: 0.75,
            id_acc: 1.0,
        };
        write_aggregate_csv(&path, std::slice::from_ref(&row)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("dataset,method,variant,seed,fpr95,auroc,id_acc\n"));
        assert_eq!(read_aggregate_csv(&path).unwrap(), vec![row]);
    }

    fn score_vec() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-50.0f64..50.0, 1..60)
    }

    proptest! {
        #[test]
        fn monotone_transform_invariance(id in score_vec(), ood in score_vec()) {
            let f = |xs: &[f64]| xs.iter().map(|x| (x / 10.0).exp() * 3.0 + 1.0).collect::<Vec<_>>();
            prop_assert_eq!(auroc(&id, &ood).unwrap(), auroc(&f(&id), &f(&ood)).unwrap());
            prop_assert_eq!(fpr_at_tpr(&id, &ood, 0.95).unwrap(), fpr_at_tpr(&f(&id), &f(&ood), 0.95).unwrap());
        }

        #[test]
        fn auroc_antisymmetric_without_ties(id in score_vec(), ood in score_vec()) {
            prop_assume!(id.iter().all(|a| ood.iter().all(|b| a != b)));
            let s = auroc(&id, &ood).unwrap() + auroc(&ood, &id).unwrap();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn fpr_monotone_in_target(id in score_vec(), ood in score_vec(), a in 0.01f64..1.0, b in 0.01f64..1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(fpr_at_tpr(&id, &ood, lo).unwrap() <= fpr_at_tpr(&id, &ood, hi).unwrap());
        }
    }
}
