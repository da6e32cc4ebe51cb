//! Cross-entropy, discrepancy intensification and outlier-synthesis losses.

use crate::error::{Error, Result};
use crate::netcore::{forward_heads, ForwardCache, HeadCache, ModelParams, Upstream};
use crate::numkit::{dot, entropy_raw, hellinger_raw, sigmoid, Mat64};
use crate::protolab::{FusedOutlier, PrototypeStore};

/// Converts labels to class indices below `classes`; the OOD sentinel is rejected.
pub fn class_indices(labels: &[i64], classes: usize) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&l| match usize::try_from(l) {
            Ok(y) if y < classes => Ok(y),
            _ => Err(Error::Argument(format!("label {l} is not one of {classes} ID classes"))),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseOutput {
    pub loss: f64,
    pub upstream: Upstream,
}

/// `(1/n)·Σ_i [Σ_k CE(p̂ᵢᵏ, yᵢ) + CE(p̂ᵢ, yᵢ)]`.
pub fn base_loss(cache: &ForwardCache, labels: &[i64]) -> Result<BaseOutput> {
    let classes = cache.joint_probs.cols();
    let ys = class_indices(labels, classes)?;
    let n = ys.len();
    if n != cache.len() {
        return Err(Error::Dimension(format!("{n} labels for {} samples", cache.len())));
    }
    let mut up = Upstream::zeros(cache);
    let mut loss = 0.0;
    let inv_n = 1.0 / n.max(1) as f64;
    let mut ce = |probs: &Mat64, d_logits: &mut Mat64| {
        for (i, &y) in ys.iter().enumerate() {
            // −ln p_y via log-softmax would need logits; probs are exact softmax outputs.
            loss -= probs.get(i, y).max(f64::MIN_POSITIVE).ln();
            let row = d_logits.row_mut(i);
            for (c, d) in row.iter_mut().enumerate() {
                *d += inv_n * (probs.get(i, c) - if c == y { 1.0 } else { 0.0 });
            }
        }
    };
    ce(&cache.joint_probs, &mut up.joint_logits);
    for (k, mc) in cache.modalities.iter().enumerate() {
        ce(&mc.probs, &mut up.modality_logits[k]);
    }
    Ok(BaseOutput {
        loss: loss * inv_n,
        upstream: up,
    })
}

/// Gradient of `hellinger(softmax(z), q)` with respect to `z`, given `p = softmax(z)`.
///
/// With `s = √p`, `r = √q`, `D = ‖s − r‖`:
/// `∂H/∂z_j = [(s_j − r_j)s_j − p_j Σ_i (s_i − r_i)s_i] / (2√2·D)`; zero when `D = 0`.
pub fn hellinger_logit_grad(p: &[f64], q: &[f64]) -> Vec<f64> {
    let s: Vec<f64> = p.iter().map(|v| v.max(0.0).sqrt()).collect();
    let r: Vec<f64> = q.iter().map(|v| v.max(0.0).sqrt()).collect();
    let d = s.iter().zip(&r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    if d == 0.0 {
        return vec![0.0; p.len()];
    }
    let u: Vec<f64> = s.iter().zip(&r).map(|(a, b)| (a - b) * a).collect();
    let total: f64 = u.iter().sum();
    let scale = 1.0 / (2.0 * std::f64::consts::SQRT_2 * d);
    u.iter().zip(p).map(|(uj, pj)| scale * (uj - pj * total)).collect()
}

/// Gradient of entropy `H(softmax(z))` with respect to `z`: `−p_j (ln p_j + H)`.
pub fn entropy_logit_grad(p: &[f64]) -> Vec<f64> {
    let h = entropy_raw(p);
    p.iter()
        .map(|&pj| if pj > 0.0 { -pj * (pj.ln() + h) } else { 0.0 })
        .collect()
}

/// Mean pairwise Hellinger distance across modalities.
pub fn mean_pairwise_discrepancy(dists: &[&[f64]]) -> f64 {
    let m = dists.len();
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for a in 0..m {
        for b in a + 1..m {
            sum += hellinger_raw(dists[a], dists[b]);
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        sum / pairs as f64
    }
}

/// Logit gradients of [`mean_pairwise_discrepancy`], one vector per modality.
fn discrepancy_logit_grads(dists: &[&[f64]]) -> Vec<Vec<f64>> {
    let m = dists.len();
    let pairs = (m * (m - 1) / 2).max(1) as f64;
    let mut out: Vec<Vec<f64>> = dists.iter().map(|d| vec![0.0; d.len()]).collect();
    for a in 0..m {
        for b in a + 1..m {
            let ga = hellinger_logit_grad(dists[a], dists[b]);
            let gb = hellinger_logit_grad(dists[b], dists[a]);
            out[a].iter_mut().zip(&ga).for_each(|(o, g)| *o += g / pairs);
            out[b].iter_mut().zip(&gb).for_each(|(o, g)| *o += g / pairs);
        }
    }
    out
}

/// How the per-sample intensification rate is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IntensityRate {
    /// `μ·(1 − sigmoid(F·Pᵀ))` on the anchor modality.
    Adaptive { mu: f64 },
    /// The same constant for every sample.
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdiOutput {
    pub loss: f64,
    /// Rate applied to each sample; `None` for skipped samples.
    pub rates: Vec<Option<f64>>,
    pub discrepancies: Vec<f64>,
    /// Samples skipped because their class prototype was never updated.
    pub skipped: usize,
    pub upstream: Upstream,
}

/// `−(1/n)·Σ_i rateᵢ·Discrᵢ`, with `Discrᵢ` the mean pairwise Hellinger
/// distance between the modality predictions of sample `i`.
pub fn pdi_loss(
    cache: &ForwardCache,
    labels: &[i64],
    store: &PrototypeStore,
    rate: IntensityRate,
    anchor_modality: usize,
) -> Result<PdiOutput> {
    let n = cache.len();
    let ys = class_indices(labels, store.num_classes())?;
    if ys.len() != n {
        return Err(Error::Dimension(format!("{} labels for {n} samples", ys.len())));
    }
    if anchor_modality >= cache.num_modalities() {
        return Err(Error::Argument(format!(
            "anchor modality {anchor_modality} does not exist"
        )));
    }
    let mut up = Upstream::zeros(cache);
    let inv_n = 1.0 / n.max(1) as f64;
    let mut loss = 0.0;
    let mut rates = Vec::with_capacity(n);
    let mut discrepancies = Vec::with_capacity(n);
    let mut skipped = 0;
    for (i, &y) in ys.iter().enumerate() {
        let dists: Vec<&[f64]> = cache.modalities.iter().map(|m| m.probs.row(i)).collect();
        let discr = mean_pairwise_discrepancy(&dists);
        discrepancies.push(discr);
        let (r, slope) = match rate {
            IntensityRate::Fixed(v) => (v, None),
            IntensityRate::Adaptive { mu } => {
                if !store.is_initialized(y) {
                    skipped += 1;
                    rates.push(None);
                    continue;
                }
                let proto = store.prototype(anchor_modality, y);
                let sig = sigmoid(dot(cache.embedding(anchor_modality, i), proto));
                (mu * (1.0 - sig), Some((mu * sig * (1.0 - sig), proto)))
            }
        };
        rates.push(Some(r));
        loss -= inv_n * r * discr;
        for (k, g) in discrepancy_logit_grads(&dists).into_iter().enumerate() {
            for (d, gv) in up.modality_logits[k].row_mut(i).iter_mut().zip(g) {
                *d -= inv_n * r * gv;
            }
        }
        // ∂rate/∂F = −μσ(1−σ)·P, so ∂loss/∂F = (1/n)·μσ(1−σ)·Discr·P.
        if let Some((s, proto)) = slope {
            for (d, p) in up.embeddings[anchor_modality].row_mut(i).iter_mut().zip(proto) {
                *d += inv_n * s * discr * p;
            }
        }
    }
    Ok(PdiOutput {
        loss,
        rates,
        discrepancies,
        skipped,
        upstream: up,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AosOutput {
    pub loss: f64,
    pub heads: HeadCache,
    /// `[modality]` gradient of the loss with respect to head logits.
    pub d_logits: Vec<Mat64>,
}

/// `−mean_o [Discr(q¹…qᴹ) + Σ_k H(qᵏ)]` where `qᵏ = softmax(h_k(fusedᵏ))`.
pub fn aos_loss(params: &ModelParams, outliers: &[FusedOutlier]) -> Result<AosOutput> {
    let m = params.heads.len();
    let l = params.dims.embed;
    if outliers.is_empty() {
        return Err(Error::Argument(
            "outlier loss needs at least one synthesized outlier".into(),
        ));
    }
    let inputs = (0..m)
        .map(|k| {
            let rows: Vec<Vec<f64>> = outliers
                .iter()
                .map(|o| o.per_modality.get(k).cloned().unwrap_or_default())
                .collect();
            let mat = Mat64::from_rows(&rows)?;
            if mat.cols() != l {
                return Err(Error::Dimension(format!(
                    "fused vector has width {}, heads take {l}",
                    mat.cols()
                )));
            }
            Ok(mat)
        })
        .collect::<Result<Vec<_>>>()?;
    let heads = forward_heads(params, &inputs)?;
    let count = outliers.len();
    let inv = 1.0 / count as f64;
    let classes = params.dims.classes;
    let mut d_logits: Vec<Mat64> = (0..m).map(|_| Mat64::zeros(count, classes)).collect();
    let mut loss = 0.0;
    for o in 0..count {
        let dists: Vec<&[f64]> = heads.probs.iter().map(|p| p.row(o)).collect();
        let discr = mean_pairwise_discrepancy(&dists);
        let ent: f64 = dists.iter().map(|d| entropy_raw(d)).sum();
        loss -= inv * (discr + ent);
        let dd = discrepancy_logit_grads(&dists);
        for k in 0..m {
            let de = entropy_logit_grad(dists[k]);
            for (c, d) in d_logits[k].row_mut(o).iter_mut().enumerate() {
                *d -= inv * (dd[k][c] + de[c]);
            }
        }
    }
    Ok(AosOutput { loss, heads, d_logits })
}
