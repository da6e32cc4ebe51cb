//! Angular-margin contrastive loss and the within-class variance penalty.
//!
//! For anchor `j` in modality `k`, positives `b` share its label (excluding
//! `j` itself) and negatives do not:
//!
//! ```text
//! f_pos = Σ_pos exp(cos(θ_bj + m)/t)     f_neg = Σ_neg exp(cos θ_bj / t)
//! loss_j = −log(f_pos / (f_pos + f_neg))
//! ```
//!
//! `cos(θ+m)` is expanded as `c·cos m − √(1−c²)·sin m` so angles never enter
//! the gradient path.

use std::collections::BTreeMap;

use crate::netcore::ForwardCache;
use crate::numkit::{dot, logsumexp, norm, Mat64};

#[derive(Debug, Clone, PartialEq)]
pub struct RmclOutput {
    /// Sum of per-anchor losses over anchors and modalities.
    pub loss: f64,
    /// Per-anchor loss summed over modalities (0 for invalid anchors).
    pub per_sample: Vec<f64>,
    /// Anchors with at least one positive and one negative.
    pub valid: Vec<bool>,
    /// `[modality]` n×n: `∂loss_j/∂cos(θ_jb)` at row `j`, column `b`.
    pair_grads: Vec<Mat64>,
}

/// `cos(θ + m)` and its derivative in `c = cos θ`.
#[inline]
fn margin_cos(c: f64, cos_m: f64, sin_m: f64) -> (f64, f64) {
    let s2 = 1.0 - c * c;
    if s2 <= 0.0 {
        return (c * cos_m, cos_m);
    }
    let s = s2.sqrt();
    (c * cos_m - s * sin_m, cos_m + c / s * sin_m)
}

fn cosine_matrix(emb: &Mat64) -> (Mat64, Vec<f64>) {
    let n = emb.rows();
    let norms: Vec<f64> = emb.iter_rows().map(norm).collect();
    let mut cos = Mat64::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let c = if norms[i] > 0.0 && norms[j] > 0.0 {
                (dot(emb.row(i), emb.row(j)) / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            cos.set(i, j, c);
            cos.set(j, i, c);
        }
    }
    (cos, norms)
}

/// Margin contrastive loss over every modality; `margin` in radians.
pub fn rmcl_loss(cache: &ForwardCache, labels: &[usize], margin: f64, temperature: f64) -> RmclOutput {
    let n = labels.len();
    debug_assert_eq!(n, cache.len());
    let valid: Vec<bool> = (0..n)
        .map(|j| {
            let pos = (0..n).any(|b| b != j && labels[b] == labels[j]);
            let neg = (0..n).any(|b| labels[b] != labels[j]);
            pos && neg
        })
        .collect();
    let mut per_sample = vec![0.0; n];
    let mut pair_grads = Vec::with_capacity(cache.num_modalities());
    let (cos_m, sin_m) = (margin.cos(), margin.sin());
    for mc in &cache.modalities {
        let (cos, _) = cosine_matrix(&mc.embedding);
        let mut g = Mat64::zeros(n, n);
        let mut logits = Vec::with_capacity(n);
        let mut slopes = Vec::with_capacity(n);
        for j in (0..n).filter(|&j| valid[j]) {
            logits.clear();
            slopes.clear();
            let mut pos_logits = Vec::new();
            for b in (0..n).filter(|&b| b != j) {
                let c = cos.get(j, b);
                let (a, da) = if labels[b] == labels[j] {
                    let (v, dv) = margin_cos(c, cos_m, sin_m);
                    pos_logits.push(v / temperature);
                    (v / temperature, dv / temperature)
                } else {
                    (c / temperature, 1.0 / temperature)
                };
                logits.push((b, a));
                slopes.push(da);
            }
            let all: Vec<f64> = logits.iter().map(|&(_, a)| a).collect();
            let lse_all = logsumexp(&all);
            let lse_pos = logsumexp(&pos_logits);
            per_sample[j] += lse_all - lse_pos;
            for (&(b, a), &da) in logits.iter().zip(&slopes) {
                let mut d = (a - lse_all).exp();
                if labels[b] == labels[j] {
                    d -= (a - lse_pos).exp();
                }
                g.set(j, b, d * da);
            }
        }
        pair_grads.push(g);
    }
    RmclOutput {
        loss: per_sample.iter().sum(),
        per_sample,
        valid,
        pair_grads,
    }
}

impl RmclOutput {
    /// `∂(Σ_j w_j·loss_j)/∂F^k` for every modality `k`.
    pub fn embedding_grads(&self, cache: &ForwardCache, anchor_weights: &[f64]) -> Vec<Mat64> {
        cache
            .modalities
            .iter()
            .zip(&self.pair_grads)
            .map(|(mc, g)| {
                let emb = &mc.embedding;
                let (n, l) = (emb.rows(), emb.cols());
                let (cos, norms) = cosine_matrix(emb);
                let mut out = Mat64::zeros(n, l);
                for j in 0..n {
                    let w = anchor_weights[j];
                    if w == 0.0 || !self.valid[j] {
                        continue;
                    }
                    for b in 0..n {
                        let gjb = w * g.get(j, b);
                        if gjb == 0.0 || norms[j] == 0.0 || norms[b] == 0.0 {
                            continue;
                        }
                        // ∂c/∂F_j = F_b/(|F_j||F_b|) − c·F_j/|F_j|², and symmetrically for F_b.
                        let c = cos.get(j, b);
                        let inv = 1.0 / (norms[j] * norms[b]);
                        let (fj, fb) = (emb.row(j).to_vec(), emb.row(b).to_vec());
                        let cj = c / (norms[j] * norms[j]);
                        let cb = c / (norms[b] * norms[b]);
                        for t in 0..l {
                            let dj = fb[t] * inv - cj * fj[t];
                            let db = fj[t] * inv - cb * fb[t];
                            out.data_mut()[j * l + t] += gjb * dj;
                            out.data_mut()[b * l + t] += gjb * db;
                        }
                    }
                }
                out
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IrmOutput {
    pub loss: f64,
    /// Population variance of per-sample losses for every class in the batch
    /// (0 when the class has fewer than two valid anchors).
    pub class_variance: BTreeMap<usize, f64>,
    /// `∂loss/∂l_j`.
    pub sample_grads: Vec<f64>,
}

/// `Σ_j Var(Lʲ)`: for every class, its valid anchors' count times the
/// population variance of their losses.
pub fn irm_loss(per_sample: &[f64], valid: &[bool], labels: &[usize]) -> IrmOutput {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (j, &y) in labels.iter().enumerate() {
        groups.entry(y).or_default();
        if valid[j] {
            groups.get_mut(&y).expect("inserted").push(j);
        }
    }
    let mut loss = 0.0;
    let mut sample_grads = vec![0.0; labels.len()];
    let mut class_variance = BTreeMap::new();
    for (y, members) in groups {
        if members.is_empty() {
            class_variance.insert(y, 0.0);
            continue;
        }
        let count = members.len() as f64;
        let mean = members.iter().map(|&j| per_sample[j]).sum::<f64>() / count;
        let var = members.iter().map(|&j| (per_sample[j] - mean).powi(2)).sum::<f64>() / count;
        loss += count * var;
        class_variance.insert(y, var);
        for &j in &members {
            sample_grads[j] = 2.0 * (per_sample[j] - mean);
        }
    }
    IrmOutput {
        loss,
        class_variance,
        sample_grads,
    }
}

/// `rmcl + λ·irm`.
pub fn csct_loss(rmcl: f64, irm: f64, lambda: f64) -> f64 {
    rmcl + lambda * irm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpuloss::test_support::embedding_cache;
    use proptest::prelude::*;

    #[test]
    fn three_sample_hand_evaluation() {
        let deg = std::f64::consts::PI / 180.0;
        let at = |a: f64| vec![a.cos(), a.sin()];
        let cache = embedding_cache(vec![vec![at(0.0), at(10.0 * deg), at(90.0 * deg)]]);
        let (m, t) = (10.0 * deg, 0.05);
        let out = rmcl_loss(&cache, &[0, 0, 1], m, t);
        // Anchor 0: positive at 10°, negative at 90°; anchor 1 the mirror image
        // (positive at 10°, negative at 80°); anchor 2 has no positive.
        let l0 = {
            let fp = ((20.0 * deg).cos() / t).exp();
            let fn_ = ((90.0 * deg).cos() / t).exp();
            -(fp / (fp + fn_)).ln()
        };
        let l1 = {
            let fp = ((20.0 * deg).cos() / t).exp();
            let fn_ = ((80.0 * deg).cos() / t).exp();
            -(fp / (fp + fn_)).ln()
        };
        assert!((out.per_sample[0] - l0).abs() < 1e-12);
        assert!((out.per_sample[1] - l1).abs() < 1e-12);
        assert_eq!(out.per_sample[2], 0.0);
        assert_eq!(out.valid, vec![true, true, false]);
        assert!((out.loss - (l0 + l1)).abs() < 1e-12);
    }

    #[test]
    fn single_label_batch_has_zero_loss() {
        let cache = embedding_cache(vec![vec![vec![1.0, 0.2], vec![0.3, 1.0], vec![-1.0, 0.5]]]);
        let out = rmcl_loss(&cache, &[2, 2, 2], 0.1, 0.05);
        assert_eq!(out.loss, 0.0);
        assert!(out.valid.iter().all(|v| !v));
    }

    #[test]
    fn degenerate_batch() {
        let cache = embedding_cache(vec![vec![vec![1.0, 0.0]]]);
        assert_eq!(rmcl_loss(&cache, &[0], 0.1, 0.05).loss, 0.0);
    }

    #[test]
    fn irm_examples() {
        let out = irm_loss(&[1.0, 2.0, 3.0], &[true; 3], &[4, 4, 4]);
        assert!((out.loss - 2.0).abs() < 1e-15);
        assert!((out.class_variance[&4] - 2.0 / 3.0).abs() < 1e-15);

        let flat = irm_loss(&[1.5, 1.5, 0.2, 0.2], &[true; 4], &[0, 0, 1, 1]);
        assert_eq!(flat.loss, 0.0);

        let singletons = irm_loss(&[1.0, 5.0, 9.0], &[true; 3], &[0, 1, 2]);
        assert_eq!(singletons.loss, 0.0);
    }

    #[test]
    fn csct_arithmetic() {
        assert_eq!(csct_loss(1.0, 0.5, 2.0), 2.0);
        assert_eq!(csct_loss(1.3, 0.7, 0.0), 1.3);
    }

    /// Plain InfoNCE written from angles, independent of the margin expansion.
    fn info_nce(embs: &[Vec<f64>], labels: &[usize], t: f64) -> f64 {
        let mut total = 0.0;
        for j in 0..embs.len() {
            let (mut fp, mut fn_) = (0.0, 0.0);
            let (mut has_p, mut has_n) = (false, false);
            for b in 0..embs.len() {
                if b == j {
                    continue;
                }
                let c = crate::numkit::cosine(&embs[j], &embs[b]).unwrap();
                if labels[b] == labels[j] {
                    fp += (c / t).exp();
                    has_p = true;
                } else {
                    fn_ += (c / t).exp();
                    has_n = true;
                }
            }
            if has_p && has_n {
                total -= (fp / (fp + fn_)).ln();
            }
        }
        total
    }

    #[test]
    fn zero_margin_is_info_nce() {
        let embs = vec![
            vec![1.0, 0.2, -0.3],
            vec![0.4, 1.0, 0.1],
            vec![-0.5, 0.3, 0.9],
            vec![0.7, -0.2, 0.4],
            vec![0.1, 0.1, -1.0],
        ];
        let labels = [0, 1, 0, 1, 2];
        let out = rmcl_loss(&embedding_cache(vec![embs.clone()]), &labels, 0.0, 0.3);
        assert!((out.loss - info_nce(&embs, &labels, 0.3)).abs() < 1e-10);
    }

    fn embeddings(n: usize, l: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, l), n)
    }

    proptest! {
        #[test]
        fn loss_is_non_negative(embs in embeddings(6, 3), labels in proptest::collection::vec(0usize..3, 6)) {
            let out = rmcl_loss(&embedding_cache(vec![embs]), &labels, 10f64.to_radians(), 0.05);
            prop_assert!(out.loss >= 0.0);
            prop_assert!(out.per_sample.iter().all(|&l| l >= 0.0));
        }

        #[test]
        fn margin_never_decreases_loss(
            embs in embeddings(5, 2),
            labels in proptest::collection::vec(0usize..2, 5),
            m1 in 0.0f64..0.3,
            dm in 0.0f64..0.3,
        ) {
            // Keep θ + m ≤ π for every positive pair.
            let cache = embedding_cache(vec![embs]);
            let (cos, _) = cosine_matrix(&cache.modalities[0].embedding);
            let max_theta = (0..5)
                .flat_map(|j| (0..5).filter(move |&b| b != j).map(move |b| (j, b)))
                .filter(|&(j, b)| labels[j] == labels[b])
                .map(|(j, b)| cos.get(j, b).acos())
                .fold(0.0f64, f64::max);
            prop_assume!(max_theta + m1 + dm <= std::f64::consts::PI);
            let a = rmcl_loss(&cache, &labels, m1, 0.1).loss;
            let b = rmcl_loss(&cache, &labels, m1 + dm, 0.1).loss;
            prop_assert!(b >= a - 1e-12);
        }
    }
}
