use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::datagen::{self, Dataset, SynthConfig};
use crate::dpuloss::{LossWeights, Terms};
use crate::error::{Error, Result};
use crate::jsonio;
use crate::netcore::{AdamWConfig, ModelDims};
use crate::protolab::{UpdateMode, DEFAULT_BETA, DEFAULT_GAMMA, DEFAULT_NEIGHBORS, DEFAULT_RATE_CAP};
use crate::scorers::{Method, ScorerSpec};

/// Ablation switch for one training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    /// Full objective with adaptive intensification.
    Dpu,
    BaseOnly,
    /// Intensification rate fixed at this value for the whole run.
    FixedRate(f64),
    NoCsct,
    NoAos,
}

impl Variant {
    pub fn terms(self) -> Terms {
        match self {
            Variant::Dpu | Variant::FixedRate(_) => Terms::ALL,
            Variant::BaseOnly => Terms::BASE_ONLY,
            Variant::NoCsct => Terms {
                csct: false,
                ..Terms::ALL
            },
            Variant::NoAos => Terms {
                aos: false,
                ..Terms::ALL
            },
        }
    }

    /// Loss weights with the variant's rate override applied.
    pub fn weights(self, base: &LossWeights) -> LossWeights {
        match self {
            Variant::FixedRate(v) => LossWeights {
                fixed_rate: Some(v),
                ..*base
            },
            _ => *base,
        }
    }

    /// Whether the run needs prototypes (and so the contrastive statistics).
    pub fn uses_prototypes(self) -> bool {
        let t = self.terms();
        t.csct || t.pdi || t.aos
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Dpu => f.write_str("dpu"),
            Variant::BaseOnly => f.write_str("base-only"),
            Variant::FixedRate(v) => write!(f, "fixed-rate({v})"),
            Variant::NoCsct => f.write_str("no-csct"),
            Variant::NoAos => f.write_str("no-aos"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "dpu" => return Ok(Variant::Dpu),
            "base-only" => return Ok(Variant::BaseOnly),
            "no-csct" => return Ok(Variant::NoCsct),
            "no-aos" => return Ok(Variant::NoAos),
            _ => {}
        }
        let rate = s
            .strip_prefix("fixed-rate(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| {
                Error::Argument(format!(
                    "unknown variant '{s}' (expected dpu, base-only, fixed-rate(<v>), no-csct or no-aos)"
                ))
            })?;
        let v: f64 = rate
            .trim()
            .parse()
            .map_err(|_| Error::Argument(format!("bad rate in variant '{s}'")))?;
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::Argument(format!("fixed rate must be finite and >= 0, got {v}")));
        }
        Ok(Variant::FixedRate(v))
    }
}

impl Serialize for Variant {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Either an inline generator config or a path to a saved dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetSource {
    Path(PathBuf),
    Inline(SynthConfig),
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Inline(SynthConfig::default())
    }
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSource::Inline(cfg) => datagen::generate(cfg),
            DatasetSource::Path(p) => datagen::load_dataset(p),
        }
    }

    /// Short identifier used in reports: `synthetic` or the file stem.
    pub fn name(&self) -> String {
        match self {
            DatasetSource::Inline(_) => "synthetic".into(),
            DatasetSource::Path(p) => {
                let name = p.file_name().and_then(|s| s.to_str()).unwrap_or("dataset");
                let name = name.strip_suffix(".gz").unwrap_or(name);
                name.strip_suffix(".json").unwrap_or(name).to_string()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub embed: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { hidden: 32, embed: 16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrototypeConfig {
    pub beta: f64,
    pub gamma: f64,
    pub rate_cap: f64,
    pub mode: UpdateMode,
    /// Outlier partners are drawn from this many nearest classes.
    pub neighbors: usize,
    pub eta_alpha: f64,
    pub eta_beta: f64,
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        PrototypeConfig {
            beta: DEFAULT_BETA,
            gamma: DEFAULT_GAMMA,
            rate_cap: DEFAULT_RATE_CAP,
            mode: UpdateMode::default(),
            neighbors: DEFAULT_NEIGHBORS,
            eta_alpha: 10.0,
            eta_beta: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optimizer: AdamWConfig,
    pub prototypes: PrototypeConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub scorers: Vec<ScorerSpec>,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetSource::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            optimizer: AdamWConfig {
                lr: DEFAULT_RUN_LR,
                ..AdamWConfig::default()
            },
            prototypes: PrototypeConfig::default(),
            epochs: 30,
            batch_size: 64,
            scorers: Method::ALL.into_iter().map(ScorerSpec::new).collect(),
            variants: vec![Variant::Dpu],
            seeds: vec![0],
            output_dir: PathBuf::from("runs"),
        }
    }
}

/// Learning rate for synthetic-data runs (see the README for why it differs
/// from the optimizer's own default).
pub const DEFAULT_RUN_LR: f64 = 1e-3;

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        if self.scorers.is_empty() {
            return Err(Error::Config("at least one scorer is required".into()));
        }
        if self.model.hidden == 0 || self.model.embed == 0 {
            return Err(Error::Config("model widths must be >= 1".into()));
        }
        for s in &self.scorers {
            s.validate()?;
        }
        self.loss.validate()?;
        let o = &self.optimizer;
        if !(o.lr >= 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::Config("optimizer settings out of range".into()));
        }
        let p = &self.prototypes;
        if !(0.0..=1.0).contains(&p.beta) || !(p.gamma >= 0.0) || !(p.rate_cap > 0.0) {
            return Err(Error::Config("prototype settings out of range".into()));
        }
        if !(p.eta_alpha > 0.0 && p.eta_beta > 0.0) {
            return Err(Error::Config("Beta parameters for η must be > 0".into()));
        }
        if let DatasetSource::Inline(c) = &self.dataset {
            c.validate()?;
        }
        Ok(())
    }

    pub fn dims(&self, dataset: &Dataset) -> ModelDims {
        ModelDims::new(
            dataset.config.feature_dims.clone(),
            self.model.hidden,
            self.model.embed,
            dataset.config.num_id_classes,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = jsonio::read_json(path)?;
        Ok(cfg)
    }

    /// Applies `key.path=value` overrides; `value` is parsed as JSON and
    /// falls back to a plain string.
    pub fn with_overrides(self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut value = serde_json::to_value(&self)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("override produced an invalid config: {e}")))?;
        Ok(cfg)
    }
}

pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Argument(format!("override '{assignment}' is not key.path=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Argument(format!("bad override key '{path}'")));
    }
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        if !node.is_object() {
            return Err(Error::Argument(format!("override '{path}' walks into a non-object")));
        }
        node = node
            .as_object_mut()
            .expect("checked")
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    match node.as_object_mut() {
        Some(obj) => {
            obj.insert(keys[keys.len() - 1].to_string(), parsed);
            Ok(())
        }
        None => Err(Error::Argument(format!("override '{path}' walks into a non-object"))),
    }
}
