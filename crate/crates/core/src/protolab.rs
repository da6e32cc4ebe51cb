//! Class prototypes in embedding space.
//!
//! One prototype per class and modality, updated from each batch's class mean
//! at a rate that shrinks with the class's contrastive-loss variance and its
//! batch count:
//!
//! ```text
//! r = min(r_max, 1 / (γ + Var(Lʸ)·Nʸ))
//! interpolated: α = min(1, (1−β)·r);  P ← (1−α)·P + α·H
//! literal:      P ← β·P + (1−β)·r·(H − P)
//! ```
//!
//! Prototypes also seed synthetic outliers: two neighbouring classes'
//! concatenated prototypes are mixed with a Beta(10, 10) weight.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::ForwardCache;
use crate::numkit::{sq_dist, Mat64};
use crate::rng::SeededRng;

pub const DEFAULT_BETA: f64 = 0.8;
pub const DEFAULT_GAMMA: f64 = 1e-6;
pub const DEFAULT_RATE_CAP: f64 = 1.0;
pub const DEFAULT_NEIGHBORS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateMode {
    /// `P ← β·P + (1−β)·r·(H − P)`, exactly as written.
    Literal,
    /// `P ← (1−α)·P + α·H` with `α = min(1, (1−β)·r)`.
    #[default]
    Interpolated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeStore {
    /// `[modality]`, each `Q × L`; row `y` is class `y`'s prototype.
    pub prototypes: Vec<Mat64>,
    pub beta: f64,
    pub gamma: f64,
    pub rate_cap: f64,
    pub mode: UpdateMode,
    /// `[modality][class]` number of updates applied.
    pub update_counts: Vec<Vec<u64>>,
}

/// Synthetic outlier built from two class prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedOutlier {
    pub source: usize,
    pub partner: usize,
    pub eta: f64,
    /// One fused vector per modality.
    pub per_modality: Vec<Vec<f64>>,
}

/// Where the fusion weight η comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FusionWeight {
    Beta { alpha: f64, beta: f64 },
    Fixed(f64),
}

impl Default for FusionWeight {
    fn default() -> Self {
        FusionWeight::Beta {
            alpha: 10.0,
            beta: 10.0,
        }
    }
}

/// Mean embedding of the samples labelled `class` in `modality`; `None` when the class is absent.
pub fn batch_class_mean(cache: &ForwardCache, labels: &[usize], class: usize, modality: usize) -> Option<Vec<f64>> {
    let emb = &cache.modalities[modality].embedding;
    let mut sum = vec![0.0; emb.cols()];
    let mut count = 0usize;
    for (i, _) in labels.iter().enumerate().filter(|(_, &y)| y == class) {
        for (s, v) in sum.iter_mut().zip(emb.row(i)) {
            *s += v;
        }
        count += 1;
    }
    if count == 0 {
        return None;
    }
    sum.iter_mut().for_each(|s| *s /= count as f64);
    Some(sum)
}

impl PrototypeStore {
    /// Zero-initialised store with default hyperparameters.
    pub fn new(num_modalities: usize, embed_dim: usize, num_classes: usize) -> Self {
        PrototypeStore {
            prototypes: (0..num_modalities)
                .map(|_| Mat64::zeros(num_classes, embed_dim))
                .collect(),
            beta: DEFAULT_BETA,
            gamma: DEFAULT_GAMMA,
            rate_cap: DEFAULT_RATE_CAP,
            mode: UpdateMode::default(),
            update_counts: vec![vec![0; num_classes]; num_modalities],
        }
    }

    pub fn with_mode(mut self, mode: UpdateMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn num_modalities(&self) -> usize {
        self.prototypes.len()
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.first().map_or(0, Mat64::rows)
    }

    pub fn embed_dim(&self) -> usize {
        self.prototypes.first().map_or(0, Mat64::cols)
    }

    pub fn prototype(&self, modality: usize, class: usize) -> &[f64] {
        self.prototypes[modality].row(class)
    }

    pub fn set_prototype(&mut self, modality: usize, class: usize, value: &[f64]) {
        self.prototypes[modality].row_mut(class).copy_from_slice(value);
    }

    /// True once every modality's prototype for `class` has been updated.
    pub fn is_initialized(&self, class: usize) -> bool {
        self.update_counts.iter().all(|c| c[class] > 0)
    }

    /// `1/(γ + var·n)` before the cap.
    pub fn raw_update_rate(&self, variance: f64, count: usize) -> f64 {
        1.0 / (self.gamma + variance * count as f64)
    }

    pub fn update_rate(&self, variance: f64, count: usize) -> f64 {
        self.raw_update_rate(variance, count).min(self.rate_cap)
    }

    /// Moves class `class`'s prototype in `modality` toward the batch mean `h_av`.
    pub fn dpa_update(
        &mut self,
        class: usize,
        modality: usize,
        h_av: &[f64],
        variance: f64,
        count: usize,
    ) -> Result<()> {
        if !(variance >= 0.0) || !variance.is_finite() {
            return Err(Error::Argument(format!(
                "variance must be finite and >= 0, got {variance}"
            )));
        }
        if count == 0 {
            return Err(Error::Argument("class count must be >= 1".into()));
        }
        if modality >= self.num_modalities() || class >= self.num_classes() {
            return Err(Error::Argument(format!(
                "no prototype for class {class}, modality {modality}"
            )));
        }
        if h_av.len() != self.embed_dim() {
            return Err(Error::Dimension(format!(
                "class mean has length {}, prototypes have {}",
                h_av.len(),
                self.embed_dim()
            )));
        }
        let r = self.update_rate(variance, count);
        let beta = self.beta;
        let mode = self.mode;
        let p = self.prototypes[modality].row_mut(class);
        match mode {
            UpdateMode::Interpolated => {
                let alpha = ((1.0 - beta) * r).min(1.0);
                for (pj, hj) in p.iter_mut().zip(h_av) {
                    *pj = (1.0 - alpha) * *pj + alpha * hj;
                }
            }
            UpdateMode::Literal => {
                for (pj, hj) in p.iter_mut().zip(h_av) {
                    *pj = beta * *pj + (1.0 - beta) * r * (hj - *pj);
                }
            }
        }
        self.update_counts[modality][class] += 1;
        Ok(())
    }

    /// Class prototypes concatenated across modalities.
    pub fn concatenated(&self, class: usize) -> Vec<f64> {
        self.prototypes
            .iter()
            .flat_map(|m| m.row(class).iter().copied())
            .collect()
    }

    /// The `k` classes nearest to `class` by Euclidean distance on
    /// concatenated prototypes, nearest first; ties go to the lower index.
    pub fn nearest_classes(&self, class: usize, k: usize) -> Vec<usize> {
        let anchor = self.concatenated(class);
        let mut others: Vec<(f64, usize)> = (0..self.num_classes())
            .filter(|&c| c != class)
            .map(|c| (sq_dist(&anchor, &self.concatenated(c)), c))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        others.into_iter().take(k).map(|(_, c)| c).collect()
    }

    /// Fuses class `source` with a partner drawn uniformly from its `k`
    /// nearest classes (`k` is clamped to `Q − 1`).
    pub fn synthesize_outlier(
        &self,
        source: usize,
        k: usize,
        weight: FusionWeight,
        rng: &mut SeededRng,
    ) -> Result<FusedOutlier> {
        let q = self.num_classes();
        if q < 2 {
            return Err(Error::InsufficientClasses(q));
        }
        if source >= q {
            return Err(Error::Argument(format!("class {source} out of range for {q} classes")));
        }
        let k = k.clamp(1, q - 1);
        let candidates = self.nearest_classes(source, k);
        let partner = candidates[rng.index(candidates.len())];
        let eta = match weight {
            FusionWeight::Beta { alpha, beta } => rng.beta(alpha, beta),
            FusionWeight::Fixed(v) => v,
        };
        let per_modality = self
            .prototypes
            .iter()
            .map(|m| {
                m.row(source)
                    .iter()
                    .zip(m.row(partner))
                    // Equal endpoints are returned as-is; η·a + (1−η)·a can round off a.
                    .map(|(&a, &b)| if a == b { a } else { eta * a + (1.0 - eta) * b })
                    .collect()
            })
            .collect();
        Ok(FusedOutlier {
            source,
            partner,
            eta,
            per_modality,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.num_classes();
        let l = self.embed_dim();
        if self
            .prototypes
            .iter()
            .any(|m| m.rows() != q || m.cols() != l || !m.is_finite())
        {
            return Err(Error::Invariant(
                "prototype matrices are inconsistent or non-finite".into(),
            ));
        }
        if self.update_counts.len() != self.num_modalities() || self.update_counts.iter().any(|c| c.len() != q) {
            return Err(Error::Invariant("prototype update counters do not match".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::MultimodalBatch;
    use crate::netcore::{forward, init_params, ModelDims};
    use crate::numkit::norm;
    use crate::rng::Stream;

    fn cache_for(n: usize, seed: u64) -> ForwardCache {
        let dims = ModelDims::new(vec![4, 3], 5, 3, 3);
        let params = init_params(&dims, seed).unwrap();
        let mut rng = SeededRng::new(seed, Stream::Data);
        let mods = dims
            .input_dims
            .iter()
            .map(|&d| Mat64::from_vec(n, d, rng.normal_vec(n * d)).unwrap())
            .collect();
        forward(&params, &MultimodalBatch::new(mods, vec![0; n]).unwrap()).unwrap()
    }

    #[test]
    fn class_mean_examples() {
        let cache = cache_for(6, 1);
        let labels = [0, 1, 1, 2, 0, 0];
        assert_eq!(batch_class_mean(&cache, &labels, 2, 0).unwrap(), cache.embedding(0, 3));
        let mid = batch_class_mean(&cache, &labels, 1, 1).unwrap();
        for j in 0..3 {
            assert!((mid[j] - 0.5 * (cache.embedding(1, 1)[j] + cache.embedding(1, 2)[j])).abs() < 1e-15);
        }
        assert!(batch_class_mean(&cache, &[0, 0, 0, 0, 0, 0], 1, 0).is_none());
    }

    #[test]
    fn class_mean_matches_naive_sum() {
        let cache = cache_for(40, 2);
        let labels: Vec<usize> = (0..40).map(|i| (i * 7 + 3) % 3).collect();
        for y in 0..3 {
            for k in 0..2 {
                let members: Vec<usize> = (0..40).filter(|&i| labels[i] == y).collect();
                let mut naive = [0.0; 3];
                for &i in &members {
                    for j in 0..3 {
                        naive[j] += cache.embedding(k, i)[j];
                    }
                }
                let got = batch_class_mean(&cache, &labels, y, k).unwrap();
                for j in 0..3 {
                    assert!((got[j] - naive[j] / members.len() as f64).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fixed_point_in_both_modes() {
        for mode in [UpdateMode::Interpolated, UpdateMode::Literal] {
            let mut s = PrototypeStore::new(1, 2, 2).with_mode(mode);
            s.set_prototype(0, 0, &[0.3, -0.7]);
            s.dpa_update(0, 0, &[0.3, -0.7], 0.0, 1).unwrap();
            // Literal mode shrinks by β at the fixed point unless r cancels; only the innovation is zero.
            if mode == UpdateMode::Interpolated {
                assert_eq!(s.prototype(0, 0), &[0.3, -0.7]);
            } else {
                assert_eq!(s.prototype(0, 0), &[0.8 * 0.3, 0.8 * -0.7]);
            }
        }
    }

    #[test]
    fn frozen_when_variance_huge() {
        let mut s = PrototypeStore::new(1, 2, 2);
        s.set_prototype(0, 1, &[1.0, 2.0]);
        s.dpa_update(1, 0, &[-5.0, 9.0], 1e12, 10).unwrap();
        assert!((s.prototype(0, 1)[0] - 1.0).abs() < 1e-9);
        assert!((s.prototype(0, 1)[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn literal_mode_by_hand() {
        // r = 1: γ + var·N = 1 − 1e-6 + 1e-6 = 1 with var·N = 1 − γ.
        let mut s = PrototypeStore::new(1, 2, 1).with_mode(UpdateMode::Literal);
        s.rate_cap = f64::INFINITY;
        s.set_prototype(0, 0, &[1.0, 0.0]);
        s.dpa_update(0, 0, &[0.0, 1.0], 1.0 - 1e-6, 1).unwrap();
        let p = s.prototype(0, 0);
        assert!((p[0] - 0.6).abs() < 1e-12, "{p:?}");
        assert!((p[1] - 0.2).abs() < 1e-12, "{p:?}");
    }

    #[test]
    fn negative_variance_rejected() {
        let mut s = PrototypeStore::new(1, 2, 2);
        assert!(matches!(
            s.dpa_update(0, 0, &[0.0, 0.0], -0.1, 1),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn interpolated_converges_geometrically() {
        let target = [0.4, -1.2, 2.5];
        let d0 = norm(&target);
        // var·N = 3.9: r = 1/(γ + 3.9), α = 0.2·r ≈ 0.0513.
        let mut s = PrototypeStore::new(1, 3, 1);
        let alpha = (1.0 - s.beta) * s.update_rate(1.3, 3);
        assert!(alpha >= 0.05);
        for _ in 0..200 {
            s.dpa_update(0, 0, &target, 1.3, 3).unwrap();
        }
        let err = sq_dist(s.prototype(0, 0), &target).sqrt();
        let predicted = (1.0 - alpha).powi(200) * d0;
        assert!((err - predicted).abs() < 1e-9 * d0, "{err} vs {predicted}");

        // Capped regime (zero variance): α = 0.2.
        let mut s = PrototypeStore::new(1, 3, 1);
        for _ in 0..200 {
            s.dpa_update(0, 0, &target, 0.0, 3).unwrap();
        }
        assert!(sq_dist(s.prototype(0, 0), &target).sqrt() < 1e-6);
    }

    #[test]
    fn rate_strictly_decreasing() {
        let s = PrototypeStore::new(1, 1, 1);
        for n in 1..6 {
            let mut prev = f64::INFINITY;
            for i in 0..50 {
                let r = s.raw_update_rate(i as f64 * 0.1, n);
                assert!(r < prev);
                prev = r;
            }
        }
        for i in 1..20 {
            let var = i as f64 * 0.05;
            let mut prev = f64::INFINITY;
            for n in 1..30 {
                let r = s.raw_update_rate(var, n);
                assert!(r < prev);
                prev = r;
            }
        }
    }

    fn four_class_store() -> PrototypeStore {
        let mut s = PrototypeStore::new(2, 2, 4);
        let rows = [
            [0.0, 0.0, 1.0, 0.0],
            [3.0, 0.0, 0.0, 1.0],
            [0.5, 0.4, 1.0, 0.2],
            [-1.0, -2.0, 0.0, 0.0],
        ];
        for (y, r) in rows.iter().enumerate() {
            s.set_prototype(0, y, &r[..2]);
            s.set_prototype(1, y, &r[2..]);
        }
        s
    }

    #[test]
    fn eta_one_returns_source() {
        let s = four_class_store();
        let mut rng = SeededRng::new(0, Stream::Outlier);
        let o = s.synthesize_outlier(2, 2, FusionWeight::Fixed(1.0), &mut rng).unwrap();
        assert_eq!(o.per_modality[0], s.prototype(0, 2));
        assert_eq!(o.per_modality[1], s.prototype(1, 2));
    }

    #[test]
    fn identical_prototypes_fuse_to_themselves() {
        let mut s = PrototypeStore::new(2, 2, 2);
        for y in 0..2 {
            s.set_prototype(0, y, &[1.5, -0.5]);
            s.set_prototype(1, y, &[0.25, 4.0]);
        }
        let mut rng = SeededRng::new(3, Stream::Outlier);
        for _ in 0..10 {
            let o = s.synthesize_outlier(0, 3, FusionWeight::default(), &mut rng).unwrap();
            assert_eq!(o.per_modality[0], vec![1.5, -0.5]);
            assert_eq!(o.per_modality[1], vec![0.25, 4.0]);
        }
    }

    #[test]
    fn partner_is_among_k_nearest_bruteforce() {
        let s = four_class_store();
        let mut rng = SeededRng::new(9, Stream::Outlier);
        for source in 0..4 {
            // All-pairs scan.
            let mut d: Vec<(f64, usize)> = (0..4)
                .filter(|&c| c != source)
                .map(|c| {
                    let mut acc = 0.0;
                    for k in 0..2 {
                        for j in 0..2 {
                            acc += (s.prototype(k, source)[j] - s.prototype(k, c)[j]).powi(2);
                        }
                    }
                    (acc, c)
                })
                .collect();
            d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let allowed = [d[0].1, d[1].1];
            for _ in 0..50 {
                let o = s
                    .synthesize_outlier(source, 2, FusionWeight::default(), &mut rng)
                    .unwrap();
                assert!(allowed.contains(&o.partner));
                for k in 0..2 {
                    for j in 0..2 {
                        let expect = o.eta * s.prototype(k, source)[j] + (1.0 - o.eta) * s.prototype(k, o.partner)[j];
                        assert_eq!(o.per_modality[k][j], expect);
                    }
                }
            }
        }
    }

    #[test]
    fn single_class_rejected() {
        let s = PrototypeStore::new(2, 2, 1);
        let mut rng = SeededRng::new(0, Stream::Outlier);
        assert!(matches!(
            s.synthesize_outlier(0, 1, FusionWeight::default(), &mut rng),
            Err(Error::InsufficientClasses(1))
        ));
    }
}
