//! Versioned JSON container for parameter stores.
//!
//! Floats are written with shortest round-trip formatting and parsed with
//! `serde_json`'s exact float parser, so save/load is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NumError, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "numkit-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub fingerprint: String,
    pub seed: u64,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub header: CheckpointHeader,
    /// Named parameter groups, e.g. `"encoder"`, `"decoder"`.
    pub groups: BTreeMap<String, Vec<ParamRecord>>,
}

impl Checkpoint {
    pub fn new(header: CheckpointHeader) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            header,
            groups: BTreeMap::new(),
        }
    }

    pub fn with_group(mut self, name: &str, store: &ParamStore) -> Self {
        self.insert_group(name, store);
        self
    }

    pub fn insert_group(&mut self, name: &str, store: &ParamStore) {
        let records = store
            .iter()
            .map(|p| ParamRecord {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                values: p.value.data().to_vec(),
            })
            .collect();
        self.groups.insert(name.to_string(), records);
    }

    /// Overwrites the values of `store` (built with the same architecture) from group `name`.
    pub fn restore_group(&self, name: &str, store: &mut ParamStore) -> Result<()> {
        let records = self
            .groups
            .get(name)
            .ok_or_else(|| NumError::Checkpoint(format!("missing parameter group {name:?}")))?;
        if records.len() != store.len() {
            return Err(NumError::Checkpoint(format!(
                "group {name:?} has {} parameters, model expects {}",
                records.len(),
                store.len()
            )));
        }
        for (rec, p) in records.iter().zip(store.iter_mut()) {
            if rec.name != p.name || rec.shape != p.value.shape() {
                return Err(NumError::Checkpoint(format!(
                    "parameter {} {:?} does not match model {} {:?}",
                    rec.name,
                    rec.shape,
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = Tensor::new(rec.shape.clone(), rec.values.clone())?;
            p.grad = Tensor::zeros(&rec.shape);
        }
        Ok(())
    }

    pub fn meta<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .header
            .meta
            .get(key)
            .ok_or_else(|| NumError::Checkpoint(format!("header is missing {key:?}")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(NumError::Checkpoint(format!(
                "unknown format {:?}",
                ck.format
            )));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(NumError::Checkpoint(format!(
                "unsupported version {}",
                ck.version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_json()?.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
