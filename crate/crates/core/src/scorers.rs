//! Post-hoc OOD scores. Every method returns an "ID-ness" score: higher
//! means more in-distribution.
//!
//! A scorer reads one or more *channels*, each a (feature, logit, head)
//! triple. The joint channel uses the concatenated embeddings and the joint
//! head; the per-modality source uses one channel per modality and averages
//! the channel scores.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{ForwardCache, Linear, ModelParams};
use crate::numkit::{logsumexp, norm, percentile, softmax_raw, sq_dist, Mat64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "MSP")]
    Msp,
    MaxLogit,
    Energy,
    Mahalanobis,
    #[serde(rename = "ReAct")]
    React,
    #[serde(rename = "ASH")]
    Ash,
    #[serde(rename = "GEN")]
    Gen,
    #[serde(rename = "KNN")]
    Knn,
    #[serde(rename = "VIM")]
    Vim,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Msp,
        Method::MaxLogit,
        Method::Energy,
        Method::Mahalanobis,
        Method::React,
        Method::Ash,
        Method::Gen,
        Method::Knn,
        Method::Vim,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Msp => "MSP",
            Method::MaxLogit => "MaxLogit",
            Method::Energy => "Energy",
            Method::Mahalanobis => "Mahalanobis",
            Method::React => "ReAct",
            Method::Ash => "ASH",
            Method::Gen => "GEN",
            Method::Knn => "KNN",
            Method::Vim => "VIM",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    /// Case-insensitive method name.
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Argument(format!("unknown scoring method '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputSource {
    #[default]
    Joint,
    PerModalitySum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerSpec {
    pub method: Method,
    /// Energy temperature (Energy, ReAct, ASH).
    pub temperature: f64,
    pub react_percentile: f64,
    pub ash_keep_percent: f64,
    pub gen_gamma: f64,
    /// `None` means `min(100, C)`.
    pub gen_top_m: Option<usize>,
    pub knn_k: usize,
    /// `None` means `min(d − C, ⌊d/2⌋)` for feature width `d`.
    pub vim_dim: Option<usize>,
    pub input_source: InputSource,
}

impl Default for ScorerSpec {
    fn default() -> Self {
        ScorerSpec::new(Method::Msp)
    }
}

impl ScorerSpec {
    pub fn new(method: Method) -> Self {
        ScorerSpec {
            method,
            temperature: 1.0,
            react_percentile: 90.0,
            ash_keep_percent: 10.0,
            gen_gamma: 0.1,
            gen_top_m: None,
            knn_k: 10,
            vim_dim: None,
            input_source: InputSource::Joint,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pct = |name: &str, v: f64| {
            if v > 0.0 && v <= 100.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be in (0, 100], got {v}")))
            }
        };
        pct("react_percentile", self.react_percentile)?;
        pct("ash_keep_percent", self.ash_keep_percent)?;
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.gen_gamma > 0.0) {
            return Err(Error::Config(format!("gen_gamma must be > 0, got {}", self.gen_gamma)));
        }
        if self.knn_k == 0 || self.gen_top_m == Some(0) || self.vim_dim == Some(0) {
            return Err(Error::Config("knn_k, gen_top_m and vim_dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// Fitted state of one channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Fitted {
    None,
    Mahalanobis {
        /// Row `c` is class `c`'s mean.
        means: Mat64,
        /// Inverse of the shared covariance.
        precision: Mat64,
    },
    React {
        threshold: f64,
    },
    Knn {
        /// ℓ2-normalised training features, one per row.
        bank: Mat64,
    },
    Vim {
        mean: Vec<f64>,
        /// `d × D`, orthonormal columns spanning the principal subspace.
        basis: Mat64,
        alpha: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    /// Read-only copy of the head that maps this channel's features to logits.
    pub head: Linear,
    pub fitted: Fitted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerModel {
    pub spec: ScorerSpec,
    pub channels: Vec<Channel>,
}

/// Features and logits of one channel for a whole batch.
struct ChannelData {
    features: Mat64,
    logits: Mat64,
}

fn channel_data(cache: &ForwardCache, source: InputSource) -> Vec<ChannelData> {
    match source {
        InputSource::Joint => vec![ChannelData {
            features: cache.joint_input.clone(),
            logits: cache.joint_logits.clone(),
        }],
        InputSource::PerModalitySum => cache
            .modalities
            .iter()
            .map(|m| ChannelData {
                features: m.embedding.clone(),
                logits: m.logits.clone(),
            })
            .collect(),
    }
}

fn heads(params: &ModelParams, source: InputSource) -> Vec<Linear> {
    match source {
        InputSource::Joint => vec![params.joint.clone()],
        InputSource::PerModalitySum => params.heads.clone(),
    }
}

fn to_dmatrix(m: &Mat64) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn from_dmatrix(m: &DMatrix<f64>) -> Mat64 {
    let mut out = Mat64::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.set(i, j, m[(i, j)]);
        }
    }
    out
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

fn mat_vec(m: &Mat64, v: &[f64]) -> Vec<f64> {
    m.iter_rows()
        .map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn fit_mahalanobis(features: &Mat64, labels: &[usize], classes: usize) -> Result<Fitted> {
    let d = features.cols();
    let mut means = Mat64::zeros(classes, d);
    let mut counts = vec![0usize; classes];
    for (row, &y) in features.iter_rows().zip(labels) {
        counts[y] += 1;
        means.row_mut(y).iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    if let Some(c) = counts.iter().position(|&n| n < 2) {
        return Err(Error::Fit(format!(
            "class {c} has {} training samples; need >= 2",
            counts[c]
        )));
    }
    for (c, &n) in counts.iter().enumerate() {
        means.row_mut(c).iter_mut().for_each(|m| *m /= n as f64);
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for (row, &y) in features.iter_rows().zip(labels) {
        let dev = nalgebra::DVector::from_iterator(d, row.iter().zip(means.row(y)).map(|(a, b)| a - b));
        cov += &dev * dev.transpose();
    }
    cov /= labels.len() as f64;
    for i in 0..d {
        cov[(i, i)] += 1e-6;
    }
    let precision = cov
        .cholesky()
        .ok_or_else(|| Error::Fit("shared covariance is singular despite the ridge".into()))?
        .inverse();
    Ok(Fitted::Mahalanobis {
        means,
        precision: from_dmatrix(&precision),
    })
}

/// Eigenvectors of the symmetric `cov`, sorted by decreasing eigenvalue.
fn sorted_eigenvectors(cov: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_columns(
        &order
            .iter()
            .map(|&i| eig.eigenvectors.column(i).into_owned())
            .collect::<Vec<_>>(),
    );
    (values, vectors)
}

fn vim_residual(mean: &[f64], basis: &Mat64, f: &[f64]) -> f64 {
    let centered: Vec<f64> = f.iter().zip(mean).map(|(a, b)| a - b).collect();
    // r = x − B(Bᵀx)
    let dim = basis.cols();
    let mut coeff = vec![0.0; dim];
    for (i, row) in basis.iter_rows().enumerate() {
        for (c, b) in coeff.iter_mut().zip(row) {
            *c += b * centered[i];
        }
    }
    let mut sq = 0.0;
    for (i, row) in basis.iter_rows().enumerate() {
        let proj: f64 = row.iter().zip(&coeff).map(|(b, c)| b * c).sum();
        sq += (centered[i] - proj).powi(2);
    }
    sq.sqrt()
}

fn fit_vim(data: &ChannelData, dim: Option<usize>, classes: usize) -> Result<Fitted> {
    let (n, d) = (data.features.rows(), data.features.cols());
    let default_dim = d.saturating_sub(classes).min(d / 2).max(1);
    let dim = dim.unwrap_or(default_dim);
    if dim > d {
        return Err(Error::Fit(format!(
            "VIM subspace dimension {dim} exceeds feature width {d}"
        )));
    }
    let x = to_dmatrix(&data.features);
    let mean: Vec<f64> = (0..d).map(|j| x.column(j).sum() / n as f64).collect();
    let mut centered = x.clone();
    for j in 0..d {
        centered.column_mut(j).add_scalar_mut(-mean[j]);
    }
    let cov = centered.transpose() * &centered / n as f64;
    let (_, vectors) = sorted_eigenvectors(cov);
    let basis = from_dmatrix(&vectors.columns(0, dim).into_owned());
    let mean_max_logit = data
        .logits
        .iter_rows()
        .map(|z| z.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / n as f64;
    let mean_residual = data
        .features
        .iter_rows()
        .map(|f| vim_residual(&mean, &basis, f))
        .sum::<f64>()
        / n as f64;
    // A full-rank subspace leaves only round-off residuals; the virtual logit is then switched off.
    let alpha = if mean_residual > 1e-12 * (1.0 + norm(&mean)) {
        mean_max_logit / mean_residual
    } else {
        0.0
    };
    Ok(Fitted::Vim { mean, basis, alpha })
}

/// Fits `spec` on training outputs (`cache` from `id_train`, class-index labels).
pub fn fit_scorer(
    spec: &ScorerSpec,
    params: &ModelParams,
    cache: &ForwardCache,
    labels: &[usize],
) -> Result<ScorerModel> {
    spec.validate()?;
    if labels.len() != cache.len() || cache.is_empty() {
        return Err(Error::Fit(format!(
            "{} labels for {} training samples",
            labels.len(),
            cache.len()
        )));
    }
    let classes = params.dims.classes;
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Fit(format!("training label {y} out of range")));
    }
    let channels = channel_data(cache, spec.input_source)
        .into_iter()
        .zip(heads(params, spec.input_source))
        .map(|(data, head)| {
            if head.inputs() != data.features.cols() || head.outputs() != data.logits.cols() {
                return Err(Error::Dimension(
                    "network head does not match the cached outputs".into(),
                ));
            }
            let fitted = match spec.method {
                Method::Msp | Method::MaxLogit | Method::Energy | Method::Ash | Method::Gen => Fitted::None,
                Method::Mahalanobis => fit_mahalanobis(&data.features, labels, classes)?,
                Method::React => Fitted::React {
                    threshold: percentile(data.features.data(), spec.react_percentile),
                },
                Method::Knn => {
                    let rows: Vec<Vec<f64>> = data.features.iter_rows().map(unit).collect();
                    Fitted::Knn {
                        bank: Mat64::from_rows(&rows)?,
                    }
                }
                Method::Vim => fit_vim(&data, spec.vim_dim, classes)?,
            };
            Ok(Channel { head, fitted })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScorerModel { spec: *spec, channels })
}

fn energy(logits: &[f64], t: f64) -> f64 {
    let scaled: Vec<f64> = logits.iter().map(|z| z / t).collect();
    t * logsumexp(&scaled)
}

fn ash_prune(features: &[f64], keep_percent: f64) -> Vec<f64> {
    let cut = percentile(features, 100.0 - keep_percent);
    let before: f64 = features.iter().sum();
    let pruned: Vec<f64> = features.iter().map(|&v| if v >= cut { v } else { 0.0 }).collect();
    let after: f64 = pruned.iter().sum();
    let ratio = before / after;
    if after == 0.0 || !ratio.is_finite() {
        return pruned;
    }
    pruned.into_iter().map(|v| v * ratio).collect()
}

impl ScorerModel {
    pub fn method(&self) -> Method {
        self.spec.method
    }

    fn score_channel(&self, channel: &Channel, features: &[f64], logits: &[f64]) -> Result<f64> {
        if features.len() != channel.head.inputs() || logits.len() != channel.head.outputs() {
            return Err(Error::Dimension(format!(
                "expected {} features and {} logits, got {} and {}",
                channel.head.inputs(),
                channel.head.outputs(),
                features.len(),
                logits.len()
            )));
        }
        let spec = &self.spec;
        let t = spec.temperature;
        let score = match (&spec.method, &channel.fitted) {
            (Method::Msp, _) => softmax_raw(logits).into_iter().fold(0.0, f64::max),
            (Method::MaxLogit, _) => logits.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            (Method::Energy, _) => energy(logits, t),
            (Method::Mahalanobis, Fitted::Mahalanobis { means, precision }) => {
                let best = means
                    .iter_rows()
                    .map(|mu| {
                        let dev: Vec<f64> = features.iter().zip(mu).map(|(a, b)| a - b).collect();
                        dev.iter()
                            .zip(mat_vec(precision, &dev))
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min);
                -best
            }
            (Method::React, Fitted::React { threshold }) => {
                let clamped: Vec<f64> = features.iter().map(|&v| v.min(*threshold)).collect();
                energy(&channel.head.apply(&clamped), t)
            }
            (Method::Ash, _) => energy(&channel.head.apply(&ash_prune(features, spec.ash_keep_percent)), t),
            (Method::Gen, _) => {
                let mut p = softmax_raw(logits);
                p.sort_by(|a, b| b.total_cmp(a));
                let m = spec.gen_top_m.unwrap_or(100).min(p.len());
                let g = spec.gen_gamma;
                -p[..m].iter().map(|&v| v.powf(g) * (1.0 - v).powf(g)).sum::<f64>()
            }
            (Method::Knn, Fitted::Knn { bank }) => {
                let q = unit(features);
                let mut d: Vec<f64> = bank.iter_rows().map(|b| sq_dist(&q, b)).collect();
                let k = spec.knn_k.min(d.len());
                d.select_nth_unstable_by(k - 1, f64::total_cmp);
                -d[k - 1].sqrt()
            }
            (Method::Vim, Fitted::Vim { mean, basis, alpha }) => {
                logsumexp(logits) - alpha * vim_residual(mean, basis, features)
            }
            (m, _) => return Err(Error::Invariant(format!("{m} scorer is missing its fitted state"))),
        };
        Ok(score)
    }

    /// Score of one sample given the joint-channel features and logits.
    pub fn score(&self, features: &[f64], logits: &[f64]) -> Result<f64> {
        if self.channels.len() != 1 {
            return Err(Error::Argument(
                "per-modality scorers need a forward cache; use score_batch".into(),
            ));
        }
        self.score_channel(&self.channels[0], features, logits)
    }

    /// Score of sample `i` of `cache`.
    pub fn score_sample(&self, cache: &ForwardCache, i: usize) -> Result<f64> {
        let data = channel_data_row(cache, self.spec.input_source, i);
        if data.len() != self.channels.len() {
            return Err(Error::Dimension(
                "forward cache does not match the fitted scorer".into(),
            ));
        }
        let mut total = 0.0;
        for (channel, (f, z)) in self.channels.iter().zip(&data) {
            total += self.score_channel(channel, f, z)?;
        }
        Ok(total / self.channels.len() as f64)
    }

    pub fn score_batch(&self, cache: &ForwardCache) -> Result<Vec<f64>> {
        (0..cache.len())
            .into_par_iter()
            .map(|i| self.score_sample(cache, i))
            .collect()
    }
}

fn channel_data_row(cache: &ForwardCache, source: InputSource, i: usize) -> Vec<(&[f64], &[f64])> {
    match source {
        InputSource::Joint => vec![(cache.joint_input.row(i), cache.joint_logits.row(i))],
        InputSource::PerModalitySum => cache
            .modalities
            .iter()
            .map(|m| (m.embedding.row(i), m.logits.row(i)))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub sample_index: usize,
    pub split: String,
    pub method: String,
    pub score: f64,
}

/// Writes `(sample_index, split, method, score)` rows.
pub fn write_scores_csv(path: &Path, rows: &[ScoreRow]) -> Result<()> {
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
