use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonio;
use crate::protolab::PrototypeStore;

use super::{AdamWState, ModelDims, ModelParams};

pub const CHECKPOINT_SCHEMA_VERSION: u64 = 1;

/// Saved training state: parameters, optimizer moments and prototypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u64,
    pub dims: ModelDims,
    pub params: ModelParams,
    pub optimizer: AdamWState,
    pub step: u64,
    pub prototypes: Option<PrototypeStore>,
}

impl Checkpoint {
    pub fn new(params: ModelParams, optimizer: AdamWState, prototypes: Option<PrototypeStore>) -> Self {
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            dims: params.dims.clone(),
            step: optimizer.step,
            params,
            optimizer,
            prototypes,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        jsonio::write_json(path, self, false)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let value = jsonio::read_value(path)?;
        jsonio::check_schema(&value, CHECKPOINT_SCHEMA_VERSION)?;
        let ck: Checkpoint = serde_json::from_value(value)?;
        ck.validate()?;
        Ok(ck)
    }

    fn validate(&self) -> Result<()> {
        let expected = ModelParams::zeros(&self.dims);
        let shapes_ok = |p: &ModelParams| {
            p.dims == self.dims
                && p.tensors()
                    .iter()
                    .zip(expected.tensors())
                    .all(|(a, b)| a.len() == b.len())
                && p.tensors().len() == expected.tensors().len()
        };
        if !shapes_ok(&self.params)
            || !shapes_ok(&self.optimizer.first_moment)
            || !shapes_ok(&self.optimizer.second_moment)
        {
            return Err(Error::Invariant("checkpoint tensors do not match its dims".into()));
        }
        if !self.params.is_finite() {
            return Err(Error::Invariant("checkpoint parameters are not finite".into()));
        }
        if let Some(store) = &self.prototypes {
            store.validate()?;
        }
        Ok(())
    }
}
