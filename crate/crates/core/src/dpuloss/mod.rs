//! Training objectives and their gradients.
//!
//! ```text
//! total = base + δ·(rmcl + λ·irm) + pdi + κ·aos
//! ```

mod contrastive;
mod terms;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::MultimodalBatch;
use crate::error::{Error, Result};
use crate::netcore::{backward, backward_heads, forward, ForwardCache, GradBuffer, ModelParams};
use crate::protolab::{FusedOutlier, PrototypeStore};

pub use contrastive::{csct_loss, irm_loss, rmcl_loss, IrmOutput, RmclOutput};
pub use terms::{
    aos_loss, base_loss, class_indices, entropy_logit_grad, hellinger_logit_grad, mean_pairwise_discrepancy, pdi_loss,
    AosOutput, BaseOutput, IntensityRate, PdiOutput,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Variance weight inside the contrastive term.
    pub lambda: f64,
    /// Contrastive term weight.
    pub delta: f64,
    /// Outlier-synthesis weight.
    pub kappa: f64,
    /// Intensification strength.
    pub mu: f64,
    pub margin_degrees: f64,
    pub temperature: f64,
    pub warmup_epochs: usize,
    /// Rate used before warm-up ends; `None` means `μ/2`.
    pub fixed_warmup_rate: Option<f64>,
    /// Replaces the adaptive rate for the whole run.
    pub fixed_rate: Option<f64>,
    /// Modality whose embedding is compared with its prototype.
    pub anchor_modality: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 2.0,
            delta: 0.2,
            kappa: 0.5,
            mu: 1.0,
            margin_degrees: 10.0,
            temperature: 0.05,
            warmup_epochs: 2,
            fixed_warmup_rate: None,
            fixed_rate: None,
            anchor_modality: 0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda", self.lambda),
            ("delta", self.delta),
            ("kappa", self.kappa),
            ("mu", self.mu),
            ("margin_degrees", self.margin_degrees),
            ("fixed_warmup_rate", self.fixed_warmup_rate.unwrap_or(0.0)),
            ("fixed_rate", self.fixed_rate.unwrap_or(0.0)),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn margin_radians(&self) -> f64 {
        self.margin_degrees.to_radians()
    }

    pub fn warmup_rate(&self) -> f64 {
        self.fixed_warmup_rate.unwrap_or(0.5 * self.mu)
    }

    /// Rate rule in force at `epoch` (0-based).
    pub fn intensity_rate(&self, epoch: usize) -> IntensityRate {
        match self.fixed_rate {
            Some(v) => IntensityRate::Fixed(v),
            None if epoch < self.warmup_epochs => IntensityRate::Fixed(self.warmup_rate()),
            None => IntensityRate::Adaptive { mu: self.mu },
        }
    }
}

/// Which optional terms take part in the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Terms {
    pub csct: bool,
    pub pdi: bool,
    pub aos: bool,
}

impl Terms {
    pub const ALL: Terms = Terms {
        csct: true,
        pdi: true,
        aos: true,
    };
    pub const BASE_ONLY: Terms = Terms {
        csct: false,
        pdi: false,
        aos: false,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub base: f64,
    pub rmcl: f64,
    pub irm: f64,
    pub csct: f64,
    pub pdi: f64,
    pub aos: f64,
    pub total: f64,
    /// Population variance of per-anchor contrastive losses per class in the batch.
    pub class_variance: BTreeMap<usize, f64>,
}

/// `base + δ·csct + pdi + κ·aos`; a non-finite component is a divergence.
pub fn total_loss(base: f64, rmcl: f64, irm: f64, pdi: f64, aos: f64, weights: &LossWeights) -> Result<LossBreakdown> {
    let csct = csct_loss(rmcl, irm, weights.lambda);
    let total = base + weights.delta * csct + pdi + weights.kappa * aos;
    let parts = [
        ("base", base),
        ("rmcl", rmcl),
        ("irm", irm),
        ("pdi", pdi),
        ("aos", aos),
        ("total", total),
    ];
    if let Some((name, v)) = parts.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Divergence {
            epoch: None,
            reason: format!("{name} loss is {v}"),
        });
    }
    Ok(LossBreakdown {
        base,
        rmcl,
        irm,
        csct,
        pdi,
        aos,
        total,
        class_variance: BTreeMap::new(),
    })
}

/// Everything one optimisation step needs from a batch.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub breakdown: LossBreakdown,
    pub grads: GradBuffer,
    pub cache: ForwardCache,
    /// Number of valid contrastive anchors per class.
    pub class_counts: BTreeMap<usize, usize>,
    /// Intensification rates actually applied (empty when the term is off).
    pub pdi_rates: Vec<f64>,
    pub pdi_skipped: usize,
}

/// Forward pass plus the contrastive statistics of a batch.
///
/// The per-class variances feed the prototype update, which has to happen
/// before the intensification term reads the prototypes.
#[derive(Debug, Clone)]
pub struct ContrastiveStage {
    pub cache: ForwardCache,
    pub labels: Vec<usize>,
    pub rmcl: Option<RmclOutput>,
    pub irm: Option<IrmOutput>,
    /// Number of valid contrastive anchors per class present in the batch.
    pub class_counts: BTreeMap<usize, usize>,
}

impl ContrastiveStage {
    /// `(variance, count)` for the prototype update of `class`, `None` if absent.
    ///
    /// Classes without a valid anchor report variance 0 over their sample count.
    pub fn class_statistics(&self, class: usize) -> Option<(f64, usize)> {
        let present = self.labels.iter().filter(|&&y| y == class).count();
        if present == 0 {
            return None;
        }
        let valid = self.class_counts.get(&class).copied().unwrap_or(0);
        match (&self.irm, valid) {
            (Some(irm), v) if v > 0 => Some((irm.class_variance.get(&class).copied().unwrap_or(0.0), v)),
            _ => Some((0.0, present)),
        }
    }
}

/// Runs the forward pass and, if `contrastive` is set, the contrastive loss.
pub fn contrastive_stage(
    params: &ModelParams,
    batch: &MultimodalBatch,
    weights: &LossWeights,
    contrastive: bool,
) -> Result<ContrastiveStage> {
    let cache = forward(params, batch)?;
    let labels = class_indices(&batch.labels, params.dims.classes)?;
    let mut class_counts = BTreeMap::new();
    let (rmcl, irm) = if contrastive {
        let rmcl = rmcl_loss(&cache, &labels, weights.margin_radians(), weights.temperature);
        let irm = irm_loss(&rmcl.per_sample, &rmcl.valid, &labels);
        for (j, &y) in labels.iter().enumerate() {
            *class_counts.entry(y).or_insert(0) += usize::from(rmcl.valid[j]);
        }
        (Some(rmcl), Some(irm))
    } else {
        (None, None)
    };
    Ok(ContrastiveStage {
        cache,
        labels,
        rmcl,
        irm,
        class_counts,
    })
}

/// Completes the objective for a batch: every enabled term and the exact
/// gradient of the total.
///
/// Prototypes and outliers are treated as constants. Disabled terms, and
/// outlier synthesis with no outliers, contribute 0. The contrastive term
/// counts only when `terms.csct` is set, even if the stage computed it.
#[allow(clippy::too_many_arguments)]
pub fn finish(
    stage: ContrastiveStage,
    params: &ModelParams,
    batch: &MultimodalBatch,
    store: &PrototypeStore,
    outliers: &[FusedOutlier],
    weights: &LossWeights,
    terms: Terms,
    epoch: usize,
) -> Result<Evaluation> {
    let ContrastiveStage {
        cache,
        rmcl,
        irm,
        class_counts,
        ..
    } = stage;
    let base = base_loss(&cache, &batch.labels)?;
    let mut upstream = base.upstream;

    let (mut rmcl_value, mut irm_value) = (0.0, 0.0);
    let mut class_variance = BTreeMap::new();
    if let (Some(rmcl), Some(irm)) = (&rmcl, &irm) {
        class_variance = irm.class_variance.clone();
        if terms.csct {
            // ∂(rmcl + λ·irm)/∂l_j = 1 + λ·∂irm/∂l_j, then scaled by δ.
            let anchor_weights: Vec<f64> = irm
                .sample_grads
                .iter()
                .map(|g| weights.delta * (1.0 + weights.lambda * g))
                .collect();
            for (k, g) in rmcl.embedding_grads(&cache, &anchor_weights).into_iter().enumerate() {
                let dst = upstream.embeddings[k].data_mut();
                dst.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
            }
            rmcl_value = rmcl.loss;
            irm_value = irm.loss;
        }
    } else if terms.csct {
        return Err(Error::Argument(
            "contrastive term enabled but the stage skipped it".into(),
        ));
    }

    let (mut pdi_value, mut pdi_rates, mut pdi_skipped) = (0.0, Vec::new(), 0);
    if terms.pdi {
        let pdi = pdi_loss(
            &cache,
            &batch.labels,
            store,
            weights.intensity_rate(epoch),
            weights.anchor_modality,
        )?;
        upstream.add(&pdi.upstream);
        pdi_value = pdi.loss;
        pdi_rates = pdi.rates.iter().flatten().copied().collect();
        pdi_skipped = pdi.skipped;
    }

    let mut grads = backward(params, &cache, &upstream)?;

    let mut aos_value = 0.0;
    if terms.aos && !outliers.is_empty() {
        let mut aos = aos_loss(params, outliers)?;
        for d in &mut aos.d_logits {
            d.scale(weights.kappa);
        }
        backward_heads(params, &aos.heads, &aos.d_logits, &mut grads)?;
        aos_value = aos.loss;
    }

    let mut breakdown = total_loss(base.loss, rmcl_value, irm_value, pdi_value, aos_value, weights)?;
    breakdown.class_variance = class_variance;
    Ok(Evaluation {
        breakdown,
        grads,
        cache,
        class_counts,
        pdi_rates,
        pdi_skipped,
    })
}

/// [`contrastive_stage`] followed by [`finish`] with the store unchanged.
pub fn evaluate(
    params: &ModelParams,
    batch: &MultimodalBatch,
    store: &PrototypeStore,
    outliers: &[FusedOutlier],
    weights: &LossWeights,
    terms: Terms,
    epoch: usize,
) -> Result<Evaluation> {
    let stage = contrastive_stage(params, batch, weights, terms.csct)?;
    finish(stage, params, batch, store, outliers, weights, terms, epoch)
}

#[cfg(test)]
pub(crate) mod test_support {
    use crate::netcore::{ForwardCache, ModalityCache};
    use crate::numkit::Mat64;

    /// Cache with only embeddings populated (other tensors are unused by the loss).
    pub(crate) fn embedding_cache(embs: Vec<Vec<Vec<f64>>>) -> ForwardCache {
        let n = embs[0].len();
        let modalities = embs
            .into_iter()
            .map(|rows| ModalityCache {
                input: Mat64::zeros(n, 1),
                hidden_pre: Mat64::zeros(n, 1),
                hidden: Mat64::zeros(n, 1),
                embedding: Mat64::from_rows(&rows).unwrap(),
                logits: Mat64::zeros(n, 2),
                probs: Mat64::zeros(n, 2),
            })
            .collect();
        ForwardCache {
            modalities,
            joint_input: Mat64::zeros(n, 1),
            joint_logits: Mat64::zeros(n, 2),
            joint_probs: Mat64::zeros(n, 2),
        }
    }
}
