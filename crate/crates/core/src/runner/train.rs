use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::dpuloss::{contrastive_stage, finish, LossBreakdown};
use crate::error::{Error, Result};
use crate::netcore::{init_params, AdamWState, ModelParams};
use crate::protolab::{batch_class_mean, FusionWeight, PrototypeStore};
use crate::rng::{SeededRng, Stream};

use super::{RunConfig, Variant};

/// Per-epoch record: batch-averaged losses and intensification-rate stats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub batches: usize,
    pub loss: LossBreakdown,
    /// Number of per-sample intensification rates applied this epoch.
    pub rate_count: usize,
    pub rate_min: f64,
    pub rate_max: f64,
    pub rate_mean: f64,
    /// Samples skipped because their prototype had never been updated.
    pub pdi_skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedRun {
    pub variant: Variant,
    pub seed: u64,
    pub params: ModelParams,
    pub optimizer: AdamWState,
    pub store: PrototypeStore,
    pub epochs: Vec<EpochLog>,
}

impl TrainedRun {
    pub fn loss_curves(&self) -> Vec<LossBreakdown> {
        self.epochs.iter().map(|e| e.loss.clone()).collect()
    }
}

#[derive(Default)]
struct EpochAccumulator {
    batches: usize,
    sums: [f64; 7],
    variance_sums: std::collections::BTreeMap<usize, (f64, usize)>,
    rates: Vec<f64>,
    skipped: usize,
}

impl EpochAccumulator {
    fn add(&mut self, b: &LossBreakdown, rates: &[f64], skipped: usize) {
        self.batches += 1;
        for (s, v) in self
            .sums
            .iter_mut()
            .zip([b.base, b.rmcl, b.irm, b.csct, b.pdi, b.aos, b.total])
        {
            *s += v;
        }
        for (&y, &v) in &b.class_variance {
            let e = self.variance_sums.entry(y).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
        self.rates.extend_from_slice(rates);
        self.skipped += skipped;
    }

    fn finish(self, epoch: usize) -> EpochLog {
        let n = self.batches.max(1) as f64;
        let [base, rmcl, irm, csct, pdi, aos, total] = self.sums.map(|s| s / n);
        let (rate_min, rate_max, rate_mean) = if self.rates.is_empty() {
            (0.0, 0.0, 0.0)
        } else {
            (
                self.rates.iter().copied().fold(f64::INFINITY, f64::min),
                self.rates.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                self.rates.iter().sum::<f64>() / self.rates.len() as f64,
            )
        };
        EpochLog {
            epoch,
            batches: self.batches,
            loss: LossBreakdown {
                base,
                rmcl,
                irm,
                csct,
                pdi,
                aos,
                total,
                class_variance: self
                    .variance_sums
                    .into_iter()
                    .map(|(y, (s, c))| (y, s / c as f64))
                    .collect(),
            },
            rate_count: self.rates.len(),
            rate_min,
            rate_max,
            rate_mean,
            pdi_skipped: self.skipped,
        }
    }
}

/// Trains one `(variant, seed)` run on `dataset.id_train`.
///
/// Per batch: forward and contrastive statistics, prototype updates from the
/// current embeddings, outlier synthesis from the updated prototypes, then
/// the full objective, backward and an AdamW step.
pub fn train_run(config: &RunConfig, dataset: &Dataset, variant: Variant, seed: u64) -> Result<TrainedRun> {
    config.validate()?;
    let dims = config.dims(dataset);
    dims.validate()?;
    let weights = variant.weights(&config.loss);
    let terms = variant.terms();
    let pc = config.prototypes;

    let mut params = init_params(&dims, seed)?;
    let mut optimizer = AdamWState::new(config.optimizer, &params);
    let mut store = PrototypeStore::new(dims.num_modalities(), dims.embed, dims.classes).with_mode(pc.mode);
    store.beta = pc.beta;
    store.gamma = pc.gamma;
    store.rate_cap = pc.rate_cap;
    let fusion = FusionWeight::Beta {
        alpha: pc.eta_alpha,
        beta: pc.eta_beta,
    };

    let mut shuffle_rng = SeededRng::new(seed, Stream::Shuffle);
    let mut outlier_rng = SeededRng::new(seed, Stream::Outlier);
    let train = &dataset.id_train;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut acc = EpochAccumulator::default();
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = train.select(chunk);
            let stage = contrastive_stage(&params, &batch, &weights, terms.csct || variant.uses_prototypes())?;

            if variant.uses_prototypes() {
                for class in 0..dims.classes {
                    let Some((variance, count)) = stage.class_statistics(class) else {
                        continue;
                    };
                    for k in 0..dims.num_modalities() {
                        if let Some(mean) = batch_class_mean(&stage.cache, &stage.labels, class, k) {
                            store.dpa_update(class, k, &mean, variance, count)?;
                        }
                    }
                }
            }

            let mut outliers = Vec::new();
            if terms.aos && (0..dims.classes).all(|c| store.is_initialized(c)) {
                let mut present: Vec<usize> = stage.labels.clone();
                present.sort_unstable();
                present.dedup();
                for class in present {
                    outliers.push(store.synthesize_outlier(class, pc.neighbors, fusion, &mut outlier_rng)?);
                }
            }

            let eval = finish(stage, &params, &batch, &store, &outliers, &weights, terms, epoch)
                .map_err(|e| with_epoch(e, epoch))?;
            optimizer
                .step(&mut params, &eval.grads)
                .map_err(|e| with_epoch(e, epoch))?;
            if !params.is_finite() {
                return Err(Error::Divergence {
                    epoch: Some(epoch),
                    reason: "parameters became non-finite".into(),
                });
            }
            acc.add(&eval.breakdown, &eval.pdi_rates, eval.pdi_skipped);
        }
        epochs.push(acc.finish(epoch));
    }

    Ok(TrainedRun {
        variant,
        seed,
        params,
        optimizer,
        store,
        epochs,
    })
}

fn with_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::Divergence { epoch: None, reason } => Error::Divergence {
            epoch: Some(epoch),
            reason,
        },
        other => other,
    }
}
