//! Synthetic multimodal benchmarks with controllable intra-class variability.
//!
//! Every class owns one unit-norm anchor per modality. Anchors of the same
//! class are tied across modalities through a shared latent vector, so the
//! modalities agree about class identity to a degree set by
//! `modality_correlation`. Samples are either *core* (anchor plus isotropic
//! noise) or *peripheral* (wider noise plus a class-specific offset), which is
//! what produces intra-class variability. Near-OOD classes are extra anchors
//! from the same family; far-OOD samples come from anchors scaled by 3 with
//! doubled covariance.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonio;
use crate::numkit::{norm, Mat64};
use crate::rng::{SeededRng, Stream, RNG_ALGORITHM};

/// Label carried by every OOD sample.
pub const OOD_LABEL: i64 = -1;

pub const DATASET_SCHEMA_VERSION: u64 = 1;

/// Scale applied to far-OOD anchors.
pub const FAR_ANCHOR_SCALE: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_modalities: usize,
    pub feature_dims: Vec<usize>,
    pub num_id_classes: usize,
    pub samples_per_class_train: usize,
    pub samples_per_class_test: usize,
    pub num_near_ood_classes: usize,
    pub num_far_ood_samples: usize,
    pub intra_class_spread: f64,
    pub peripheral_fraction: f64,
    pub peripheral_scale: f64,
    pub modality_correlation: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_modalities: 2,
            feature_dims: vec![16, 16],
            num_id_classes: 3,
            samples_per_class_train: 200,
            samples_per_class_test: 100,
            num_near_ood_classes: 3,
            num_far_ood_samples: 300,
            intra_class_spread: 0.35,
            peripheral_fraction: 0.3,
            peripheral_scale: 3.0,
            modality_correlation: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_modalities < 2 {
            return bad(format!("num_modalities must be >= 2, got {}", self.num_modalities));
        }
        if self.feature_dims.len() != self.num_modalities {
            return bad(format!(
                "feature_dims has {} entries for {} modalities",
                self.feature_dims.len(),
                self.num_modalities
            ));
        }
        if self.feature_dims.contains(&0) {
            return bad("feature dimensions must be positive".into());
        }
        for (name, v) in [
            ("num_id_classes", self.num_id_classes),
            ("samples_per_class_train", self.samples_per_class_train),
            ("samples_per_class_test", self.samples_per_class_test),
            ("num_near_ood_classes", self.num_near_ood_classes),
            ("num_far_ood_samples", self.num_far_ood_samples),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.intra_class_spread >= 0.0 && self.intra_class_spread.is_finite()) {
            return bad(format!(
                "intra_class_spread must be >= 0, got {}",
                self.intra_class_spread
            ));
        }
        if !(0.0..=1.0).contains(&self.peripheral_fraction) {
            return bad(format!(
                "peripheral_fraction must lie in [0,1], got {}",
                self.peripheral_fraction
            ));
        }
        if !(self.peripheral_scale >= 1.0 && self.peripheral_scale.is_finite()) {
            return bad(format!("peripheral_scale must be >= 1, got {}", self.peripheral_scale));
        }
        if !(0.0..=1.0).contains(&self.modality_correlation) {
            return bad(format!(
                "modality_correlation must lie in [0,1], got {}",
                self.modality_correlation
            ));
        }
        Ok(())
    }

    /// Number of far-OOD anchor families.
    pub fn num_far_ood_classes(&self) -> usize {
        self.num_near_ood_classes
    }
}

/// Per-modality feature matrices (one row per sample) and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalBatch {
    pub modalities: Vec<Mat64>,
    pub labels: Vec<i64>,
}

impl MultimodalBatch {
    pub fn new(modalities: Vec<Mat64>, labels: Vec<i64>) -> Result<Self> {
        let b = MultimodalBatch { modalities, labels };
        b.check_shape()?;
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn select(&self, idx: &[usize]) -> MultimodalBatch {
        MultimodalBatch {
            modalities: self.modalities.iter().map(|m| m.select_rows(idx)).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Labels as class indices; fails on the OOD sentinel.
    pub fn class_labels(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .map(|&l| usize::try_from(l).map_err(|_| Error::Argument(format!("label {l} is not an ID class"))))
            .collect()
    }

    fn check_shape(&self) -> Result<()> {
        for (k, m) in self.modalities.iter().enumerate() {
            if m.rows() != self.labels.len() {
                return Err(Error::Dimension(format!(
                    "modality {k} has {} rows for {} labels",
                    m.rows(),
                    self.labels.len()
                )));
            }
            if !m.is_finite() {
                return Err(Error::Invariant(format!("modality {k} has non-finite features")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub id_train: MultimodalBatch,
    pub id_test: MultimodalBatch,
    pub near_ood: MultimodalBatch,
    pub far_ood: MultimodalBatch,
}

/// Anchors and offsets for every generated class family.
#[derive(Debug, Clone)]
pub struct Anchors {
    /// `[class][modality] -> unit vector`; ID classes first, then near-OOD, then far-OOD.
    pub anchors: Vec<Vec<Vec<f64>>>,
    /// Unit offset directions used by peripheral samples, same indexing.
    pub offsets: Vec<Vec<Vec<f64>>>,
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    if n == 0.0 {
        return v;
    }
    v.into_iter().map(|x| x / n).collect()
}

fn draw_anchors(config: &SynthConfig, rng: &mut SeededRng) -> Anchors {
    let latent_dim = *config.feature_dims.iter().min().expect("validated");
    let projections: Vec<Mat64> = config
        .feature_dims
        .iter()
        .map(|&d| Mat64::from_vec(d, latent_dim, rng.normal_vec(d * latent_dim)).expect("sized"))
        .collect();
    let rho = config.modality_correlation;
    let families = config.num_id_classes + config.num_near_ood_classes + config.num_far_ood_classes();
    let mut anchors = Vec::with_capacity(families);
    let mut offsets = Vec::with_capacity(families);
    for _ in 0..families {
        let latent = rng.normal_vec(latent_dim);
        let mut per_mod = Vec::with_capacity(config.num_modalities);
        let mut per_off = Vec::with_capacity(config.num_modalities);
        for (proj, &d) in projections.iter().zip(&config.feature_dims) {
            let shared = unit(proj.affine(&latent, &vec![0.0; d]));
            let own = unit(rng.normal_vec(d));
            let mixed: Vec<f64> = shared
                .iter()
                .zip(&own)
                .map(|(s, o)| rho * s + (1.0 - rho) * o)
                .collect();
            let anchor = if norm(&mixed) > 1e-12 { unit(mixed) } else { shared };
            per_mod.push(anchor);
            per_off.push(unit(rng.normal_vec(d)));
        }
        anchors.push(per_mod);
        offsets.push(per_off);
    }
    Anchors { anchors, offsets }
}

/// Regenerates the class anchors that [`generate`] uses for `config`.
pub fn class_anchors(config: &SynthConfig) -> Result<Anchors> {
    config.validate()?;
    let mut rng = SeededRng::new(config.seed, Stream::Data);
    Ok(draw_anchors(config, &mut rng))
}

struct SampleSpec<'a> {
    anchor: &'a [Vec<f64>],
    offset: &'a [Vec<f64>],
    anchor_scale: f64,
    noise: f64,
    peripheral: bool,
}

fn draw_sample(spec: &SampleSpec<'_>, cfg: &SynthConfig, rng: &mut SeededRng, rows: &mut [Vec<f64>]) {
    for (k, row) in rows.iter_mut().enumerate() {
        let d = spec.anchor[k].len();
        let (noise, shift) = if spec.peripheral {
            let s = spec.noise * cfg.peripheral_scale;
            // Offset length is half the expected norm of the peripheral noise.
            (s, 0.5 * s * (d as f64).sqrt())
        } else {
            (spec.noise, 0.0)
        };
        for j in 0..d {
            let z = rng.normal();
            row.push(spec.anchor_scale * spec.anchor[k][j] + noise * z + shift * spec.offset[k][j]);
        }
    }
}

fn class_block(
    cfg: &SynthConfig,
    anchors: &Anchors,
    classes: &[(usize, i64)],
    per_class: usize,
    rng: &mut SeededRng,
) -> MultimodalBatch {
    let n = classes.len() * per_class;
    let mut rows: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(n); cfg.num_modalities];
    let mut labels = Vec::with_capacity(n);
    let n_core = per_class - (cfg.peripheral_fraction * per_class as f64).round() as usize;
    for &(family, label) in classes {
        for i in 0..per_class {
            let spec = SampleSpec {
                anchor: &anchors.anchors[family],
                offset: &anchors.offsets[family],
                anchor_scale: 1.0,
                noise: cfg.intra_class_spread,
                peripheral: i >= n_core,
            };
            let mut sample = vec![Vec::new(); cfg.num_modalities];
            draw_sample(&spec, cfg, rng, &mut sample);
            for (k, r) in sample.into_iter().enumerate() {
                rows[k].push(r);
            }
            labels.push(label);
        }
    }
    to_batch(rows, labels)
}

fn to_batch(rows: Vec<Vec<Vec<f64>>>, labels: Vec<i64>) -> MultimodalBatch {
    MultimodalBatch {
        modalities: rows
            .iter()
            .map(|r| Mat64::from_rows(r).expect("uniform row lengths"))
            .collect(),
        labels,
    }
}

/// Generates the four dataset splits; a pure function of `config`.
pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = SeededRng::new(config.seed, Stream::Data);
    let anchors = draw_anchors(config, &mut rng);
    let c = config.num_id_classes;
    let id_classes: Vec<(usize, i64)> = (0..c).map(|y| (y, y as i64)).collect();
    let id_train = class_block(config, &anchors, &id_classes, config.samples_per_class_train, &mut rng);
    let id_test = class_block(config, &anchors, &id_classes, config.samples_per_class_test, &mut rng);
    let near_classes: Vec<(usize, i64)> = (c..c + config.num_near_ood_classes).map(|f| (f, OOD_LABEL)).collect();
    let near_ood = class_block(config, &anchors, &near_classes, config.samples_per_class_test, &mut rng);

    let far_first = c + config.num_near_ood_classes;
    let far_families = config.num_far_ood_classes();
    let mut rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); config.num_modalities];
    for i in 0..config.num_far_ood_samples {
        let family = far_first + i % far_families;
        let spec = SampleSpec {
            anchor: &anchors.anchors[family],
            offset: &anchors.offsets[family],
            anchor_scale: FAR_ANCHOR_SCALE,
            noise: config.intra_class_spread * std::f64::consts::SQRT_2,
            peripheral: false,
        };
        let mut sample = vec![Vec::new(); config.num_modalities];
        draw_sample(&spec, config, &mut rng, &mut sample);
        for (k, r) in sample.into_iter().enumerate() {
            rows[k].push(r);
        }
    }
    let far_ood = to_batch(rows, vec![OOD_LABEL; config.num_far_ood_samples]);

    let ds = Dataset {
        config: config.clone(),
        id_train,
        id_test,
        near_ood,
        far_ood,
    };
    ds.validate()?;
    Ok(ds)
}

impl Dataset {
    /// Checks labels, row counts and feature dimensions against the config.
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        let c = cfg.num_id_classes as i64;
        let splits = [
            (
                "id_train",
                &self.id_train,
                cfg.num_id_classes * cfg.samples_per_class_train,
                true,
            ),
            (
                "id_test",
                &self.id_test,
                cfg.num_id_classes * cfg.samples_per_class_test,
                true,
            ),
            (
                "near_ood",
                &self.near_ood,
                cfg.num_near_ood_classes * cfg.samples_per_class_test,
                false,
            ),
            ("far_ood", &self.far_ood, cfg.num_far_ood_samples, false),
        ];
        for (name, batch, rows, is_id) in splits {
            batch
                .check_shape()
                .map_err(|e| Error::Invariant(format!("{name}: {e}")))?;
            if batch.len() != rows {
                return Err(Error::Invariant(format!(
                    "{name} has {} rows, expected {rows}",
                    batch.len()
                )));
            }
            if batch.num_modalities() != cfg.num_modalities {
                return Err(Error::Invariant(format!(
                    "{name} has {} modalities, expected {}",
                    batch.num_modalities(),
                    cfg.num_modalities
                )));
            }
            for (k, m) in batch.modalities.iter().enumerate() {
                if m.cols() != cfg.feature_dims[k] && !batch.is_empty() {
                    return Err(Error::Invariant(format!(
                        "{name} modality {k} has dimension {}, expected {}",
                        m.cols(),
                        cfg.feature_dims[k]
                    )));
                }
            }
            for &l in &batch.labels {
                let ok = if is_id { (0..c).contains(&l) } else { l == OOD_LABEL };
                if !ok {
                    return Err(Error::Invariant(format!("{name} has invalid label {l}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct BatchFile {
    labels: Vec<i64>,
    modalities: Vec<Vec<Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
struct SplitsFile {
    id_train: BatchFile,
    id_test: BatchFile,
    near_ood: BatchFile,
    far_ood: BatchFile,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    schema_version: u64,
    rng: String,
    config: SynthConfig,
    splits: SplitsFile,
}

impl From<&MultimodalBatch> for BatchFile {
    fn from(b: &MultimodalBatch) -> Self {
        BatchFile {
            labels: b.labels.clone(),
            modalities: b.modalities.iter().map(Mat64::to_rows).collect(),
        }
    }
}

impl BatchFile {
    fn into_batch(self, dims: &[usize]) -> Result<MultimodalBatch> {
        let modalities = self
            .modalities
            .iter()
            .zip(dims)
            .map(|(rows, &d)| {
                if rows.is_empty() {
                    Ok(Mat64::zeros(0, d))
                } else {
                    Mat64::from_rows(rows)
                }
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Invariant(e.to_string()))?;
        if modalities.len() != self.modalities.len() {
            return Err(Error::Invariant("modality count does not match config".into()));
        }
        Ok(MultimodalBatch {
            modalities,
            labels: self.labels,
        })
    }
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let file = DatasetFile {
        schema_version: DATASET_SCHEMA_VERSION,
        rng: RNG_ALGORITHM.to_string(),
        config: ds.config.clone(),
        splits: SplitsFile {
            id_train: (&ds.id_train).into(),
            id_test: (&ds.id_test).into(),
            near_ood: (&ds.near_ood).into(),
            far_ood: (&ds.far_ood).into(),
        },
    };
    jsonio::write_json(path, &file, false)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let value = jsonio::read_value(path)?;
    jsonio::check_schema(&value, DATASET_SCHEMA_VERSION)?;
    let file: DatasetFile = serde_json::from_value(value)?;
    let dims = file.config.feature_dims.clone();
    let ds = Dataset {
        config: file.config,
        id_train: file.splits.id_train.into_batch(&dims)?,
        id_test: file.splits.id_test.into_batch(&dims)?,
        near_ood: file.splits.near_ood.into_batch(&dims)?,
        far_ood: file.splits.far_ood.into_batch(&dims)?,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::sq_dist;

    fn small() -> SynthConfig {
        SynthConfig {
            num_id_classes: 3,
            samples_per_class_train: 10,
            samples_per_class_test: 5,
            num_near_ood_classes: 2,
            num_far_ood_samples: 7,
            feature_dims: vec![4, 6],
            seed: 11,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let sa = jsonio::to_string(&BatchFile::from(&a.id_train), false).unwrap();
        let sb = jsonio::to_string(&BatchFile::from(&b.id_train), false).unwrap();
        assert_eq!(sa, sb);
        let other = generate(&SynthConfig { seed: 12, ..small() }).unwrap();
        assert_ne!(a.id_train, other.id_train);
    }

    #[test]
    fn zero_noise_gives_anchors() {
        let cfg = SynthConfig {
            intra_class_spread: 0.0,
            peripheral_fraction: 0.0,
            ..small()
        };
        let ds = generate(&cfg).unwrap();
        let anchors = class_anchors(&cfg).unwrap();
        for (i, &y) in ds.id_train.labels.iter().enumerate() {
            for k in 0..2 {
                assert_eq!(ds.id_train.modalities[k].row(i), &anchors.anchors[y as usize][k][..]);
            }
        }
    }

    #[test]
    fn bookkeeping() {
        let ds = generate(&small()).unwrap();
        assert_eq!(ds.id_train.len(), 30);
        for k in 0..2 {
            assert_eq!(ds.id_train.modalities[k].rows(), 30);
        }
        for y in 0..3 {
            assert_eq!(ds.id_train.labels.iter().filter(|&&l| l == y).count(), 10);
        }
        assert_eq!(ds.near_ood.len(), 10);
        assert_eq!(ds.far_ood.len(), 7);
        assert!(ds
            .near_ood
            .labels
            .iter()
            .chain(&ds.far_ood.labels)
            .all(|&l| l == OOD_LABEL));
    }

    #[test]
    fn anchors_are_unit_norm() {
        let a = class_anchors(&small()).unwrap();
        for fam in &a.anchors {
            for v in fam {
                assert!((norm(v) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nearest_anchor_separates_low_noise() {
        let cfg = SynthConfig {
            intra_class_spread: 0.01,
            samples_per_class_test: 100,
            ..SynthConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let anchors = class_anchors(&cfg).unwrap();
        for (i, &y) in ds.id_test.labels.iter().enumerate() {
            let nearest = (0..cfg.num_id_classes)
                .min_by(|&a, &b| {
                    let da: f64 = (0..2)
                        .map(|k| sq_dist(ds.id_test.modalities[k].row(i), &anchors.anchors[a][k]))
                        .sum();
                    let db: f64 = (0..2)
                        .map(|k| sq_dist(ds.id_test.modalities[k].row(i), &anchors.anchors[b][k]))
                        .sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(nearest as i64, y);
        }
    }

    #[test]
    fn far_ood_has_larger_norm() {
        let cfg = SynthConfig {
            num_far_ood_samples: 600,
            ..SynthConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let mean_norm = |b: &MultimodalBatch| {
            let m = &b.modalities[0];
            m.iter_rows().map(norm).sum::<f64>() / m.rows() as f64
        };
        assert!(mean_norm(&ds.far_ood) > mean_norm(&ds.id_train));
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = small();
        cfg.feature_dims = vec![4];
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
        let cfg = SynthConfig {
            peripheral_scale: 0.5,
            ..small()
        };
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
        let cfg = SynthConfig {
            num_modalities: 1,
            feature_dims: vec![4],
            ..small()
        };
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&small()).unwrap();
        for name in ["d.json", "d.json.gz"] {
            let p = dir.path().join(name);
            save_dataset(&ds, &p).unwrap();
            assert_eq!(load_dataset(&p).unwrap(), ds);
        }
    }

    #[test]
    fn load_rejects_version_and_bad_labels() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&small()).unwrap();
        let p = dir.path().join("d.json");
        save_dataset(&ds, &p).unwrap();
        let mut v = jsonio::read_value(&p).unwrap();

        let mut wrong = v.clone();
        wrong["schema_version"] = 2.into();
        jsonio::write_json(&p, &wrong, false).unwrap();
        assert!(matches!(load_dataset(&p), Err(Error::SchemaVersion { found: 2, .. })));

        v["splits"]["id_train"]["labels"][0] = 3.into();
        jsonio::write_json(&p, &v, false).unwrap();
        assert!(matches!(load_dataset(&p), Err(Error::Invariant(_))));
    }
}
