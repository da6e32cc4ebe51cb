//! Dense numeric primitives shared by every other module.
//!
//! Vectors are plain `[f64]` slices. [`Mat64`] is a small row-major matrix and
//! [`ProbDist`] is a validated probability vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `Σ p = 1` accepted by [`ProbDist::new`].
pub const PROB_SUM_TOL: f64 = 1e-9;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat64 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat64 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat64 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "matrix {rows}x{cols} needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Mat64 { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has length {}, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Mat64 {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.iter_rows().map(<[f64]>::to_vec).collect()
    }

    /// Selects rows by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Mat64 {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Mat64 {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// `y = self · x + bias` for a single input vector.
    pub fn affine(&self, x: &[f64], bias: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(bias.len(), self.rows);
        self.iter_rows().zip(bias).map(|(w, b)| dot(w, x) + b).collect()
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A probability vector: entries in `[0, 1]` summing to one within [`PROB_SUM_TOL`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Dimension("empty probability vector".into()));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Invariant(format!("probabilities outside [0,1]: {probs:?}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::Invariant(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(ProbDist(probs))
    }

    pub fn uniform(n: usize) -> Self {
        ProbDist(vec![1.0 / n as f64; n])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for ProbDist {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln Σ exp(x_i)`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Softmax without validation, for hot loops that already checked their inputs.
pub fn softmax_raw(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Result<ProbDist> {
    if logits.is_empty() {
        return Err(Error::Dimension("softmax of an empty vector".into()));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Argument("softmax of non-finite logits".into()));
    }
    Ok(ProbDist(softmax_raw(logits)))
}

/// Hellinger distance `(1/√2)·‖√p − √q‖₂`, in `[0, 1]`.
pub fn hellinger(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension(format!(
            "hellinger of lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    Ok(hellinger_raw(p.probs(), q.probs()))
}

pub(crate) fn hellinger_raw(p: &[f64], q: &[f64]) -> f64 {
    let s: f64 = p
        .iter()
        .zip(q)
        .map(|(a, b)| {
            let d = a.clamp(0.0, 1.0).sqrt() - b.clamp(0.0, 1.0).sqrt();
            d * d
        })
        .sum();
    (s.sqrt() / std::f64::consts::SQRT_2).min(1.0)
}

/// Shannon entropy in nats, with `0·ln 0 = 0`.
pub fn entropy(p: &ProbDist) -> f64 {
    entropy_raw(p.probs())
}

pub(crate) fn entropy_raw(p: &[f64]) -> f64 {
    -p.iter()
        .map(|&v| v.clamp(0.0, 1.0))
        .filter(|&v| v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "cosine of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector("zero-norm vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Angle in radians between two nonzero vectors, in `[0, π]`.
pub fn angle_between(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(cosine(a, b)?.acos())
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population variance (divides by `n`).
pub fn population_variance(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::Dimension("variance of an empty sequence".into()));
    }
    let m = mean(xs);
    Ok(xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64)
}

/// Index of the maximum, ties broken by the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Linear-interpolation percentile (`p` in `[0, 100]`) of unsorted data.
pub fn percentile(xs: &[f64], p: f64) -> f64 {
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    percentile_sorted(&sorted, p)
}

pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = (p / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, LN_2};

    fn pd(v: &[f64]) -> ProbDist {
        ProbDist::new(v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0; 4]).unwrap();
        assert!(p.probs().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let p = softmax(&[LN_2, 0.0]).unwrap();
        assert!((p.probs()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.probs()[1] - 1.0 / 3.0).abs() < 1e-15);

        // e/(e+1) evaluated from the max-subtracted form [0, -1].
        let e = std::f64::consts::E;
        let p = softmax(&[1000.0, 999.0]).unwrap();
        assert!((p.probs()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p.probs()[0] - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!((p.probs()[1] - 0.268_941_421_369_995_1).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_empty() {
        assert!(matches!(softmax(&[]), Err(Error::Dimension(_))));
    }

    #[test]
    fn hellinger_examples() {
        let p = pd(&[0.3, 0.7]);
        assert_eq!(hellinger(&p, &p).unwrap(), 0.0);
        assert!((hellinger(&pd(&[1.0, 0.0]), &pd(&[0.0, 1.0])).unwrap() - 1.0).abs() < 1e-15);
        // (1/√2)·sqrt((√.5-√.9)² + (√.5-√.1)²)
        let direct =
            ((0.5f64.sqrt() - 0.9f64.sqrt()).powi(2) + (0.5f64.sqrt() - 0.1f64.sqrt()).powi(2)).sqrt() / 2f64.sqrt();
        let h = hellinger(&pd(&[0.5, 0.5]), &pd(&[0.9, 0.1])).unwrap();
        assert!((h - direct).abs() < 1e-15);
        assert!((h - 0.3249).abs() < 1e-4);
        assert!(hellinger(&pd(&[1.0]), &pd(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&pd(&[0.0, 1.0, 0.0])), 0.0);
        assert!((entropy(&ProbDist::uniform(4)) - 4f64.ln()).abs() < 1e-15);
        let direct = -(0.75 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert!((entropy(&pd(&[0.75, 0.25])) - direct).abs() < 1e-15);
        assert!((direct - 0.5623).abs() < 1e-4);
    }

    #[test]
    fn angle_examples() {
        assert_eq!(angle_between(&[0.3, -2.0], &[0.3, -2.0]).unwrap(), 0.0);
        assert!((angle_between(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - FRAC_PI_2).abs() < 1e-15);
        assert!((angle_between(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - FRAC_PI_4).abs() < 1e-15);
        assert!(matches!(
            angle_between(&[0.0, 0.0], &[1.0, 1.0]),
            Err(Error::DegenerateVector(_))
        ));
    }

    #[test]
    fn variance_examples() {
        assert_eq!(population_variance(&[4.2, 4.2, 4.2]).unwrap(), 0.0);
        assert_eq!(population_variance(&[7.0]).unwrap(), 0.0);
        assert!((population_variance(&[1.0, 2.0, 3.0]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(population_variance(&[]).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn percentile_endpoints() {
        let xs = [3.0, 1.0, 2.0, 5.0];
        assert_eq!(percentile(&xs, 100.0), 5.0);
        assert_eq!(percentile(&xs, 0.0), 1.0);
        assert_eq!(percentile(&xs, 50.0), 2.5);
    }

    fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..10.0, n).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(v in prop::collection::vec(-50.0f64..50.0, 1..12), c in -100.0f64..100.0) {
            let p = softmax(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = softmax(&shifted).unwrap();
            prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (a, b) in p.probs().iter().zip(q.probs()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn hellinger_metric(p in simplex(5), q in simplex(5), r in simplex(5)) {
            let (p, q, r) = (pd(&p), pd(&q), pd(&r));
            let pq = hellinger(&p, &q).unwrap();
            prop_assert!((pq - hellinger(&q, &p).unwrap()).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&pq));
            prop_assert!(pq <= hellinger(&p, &r).unwrap() + hellinger(&r, &q).unwrap() + 1e-12);
            prop_assert!(hellinger(&p, &p).unwrap() < 1e-12);
        }

        #[test]
        fn angle_scale_invariant(a in prop::collection::vec(-5.0f64..5.0, 3),
                                 b in prop::collection::vec(-5.0f64..5.0, 3),
                                 s in 0.01f64..100.0, t in 0.01f64..100.0) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let sa: Vec<f64> = a.iter().map(|x| x * s).collect();
            let tb: Vec<f64> = b.iter().map(|x| x * t).collect();
            let d = angle_between(&a, &b).unwrap() - angle_between(&sa, &tb).unwrap();
            // acos is ill-conditioned next to 0 and π; compare cosines there.
            let dc = cosine(&a, &b).unwrap() - cosine(&sa, &tb).unwrap();
            prop_assert!(d.abs() < 1e-10 || dc.abs() < 1e-12);
        }

        #[test]
        fn variance_shift_and_scale(xs in prop::collection::vec(-10.0f64..10.0, 1..20),
                                    c in -100.0f64..100.0, s in -5.0f64..5.0) {
            let v = population_variance(&xs).unwrap();
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let scaled: Vec<f64> = xs.iter().map(|x| x * s).collect();
            prop_assert!((population_variance(&shifted).unwrap() - v).abs() < 1e-9);
            prop_assert!((population_variance(&scaled).unwrap() - s * s * v).abs() < 1e-9 * (1.0 + s * s * v));
        }
    }
}
