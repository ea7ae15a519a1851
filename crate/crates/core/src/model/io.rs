//! JSON weight files.
//!
//! ```json
//! {
//!   "format": "ctxpatch",
//!   "version": 1,
//!   "role": "weights",
//!   "config": { "variant": "gemma", "d_model": 32, ... },
//!   "tensors": {
//!     "embed": { "shape": [100, 32], "data": [ ... ] },
//!     "blocks.0.attn.W_q": { "shape": [32, 32], "data": [ ... ] },
//!     ...
//!   }
//! }
//! ```
//!
//! Matrices are row-major. A patch file has the same layout with
//! `"role": "+delta"` and only the tensors it changes. Numbers are written
//! with the shortest decimal form that round-trips, so `f64` values survive
//! a save/load cycle bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamRef;
use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};

pub const FORMAT: &str = "ctxpatch";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "weights")]
    Weights,
    #[serde(rename = "+delta")]
    Delta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFile {
    pub format: String,
    pub version: u32,
    pub role: Role,
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, TensorRecord>,
}

impl TensorRecord {
    pub fn from_param(p: ParamRef<'_>) -> Self {
        Self {
            shape: p.shape(),
            data: p.data().to_vec(),
        }
    }
}

impl WeightFile {
    pub fn new(role: Role, config: ModelConfig) -> Self {
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            role,
            config,
            tensors: BTreeMap::new(),
        }
    }

    pub fn check_header(&self, role: Role) -> Result<()> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Validation(format!(
                "unsupported file format {} v{}",
                self.format, self.version
            )));
        }
        if self.role != role {
            return Err(Error::Validation(format!(
                "expected role {role:?}, file has {:?}",
                self.role
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        for (name, t) in &self.tensors {
            if t.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::Parameter {
                    name: name.clone(),
                    reason: "cannot serialize non-finite values".into(),
                });
            }
        }
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

impl ModelParams {
    pub fn to_weight_file(&self) -> WeightFile {
        let mut file = WeightFile::new(Role::Weights, self.config.clone());
        for (name, p) in self.params() {
            file.tensors.insert(name, TensorRecord::from_param(p));
        }
        file
    }

    /// Builds a model from a weight file, requiring every tensor to be
    /// present with the shape the config implies and finite entries.
    pub fn from_weight_file(file: &WeightFile) -> Result<Self> {
        file.check_header(Role::Weights)?;
        let mut model = ModelParams::zeros(file.config.clone())?;
        let mut seen = 0;
        for (name, mut p) in model.params_mut() {
            let rec = file.tensors.get(&name).ok_or_else(|| Error::Parameter {
                name: name.clone(),
                reason: "missing".into(),
            })?;
            p.fill_from(&name, &rec.shape, &rec.data)?;
            seen += 1;
        }
        if seen != file.tensors.len() {
            let known: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
            let extra = file.tensors.keys().find(|k| !known.contains(k)).cloned().unwrap_or_default();
            return Err(Error::Parameter {
                name: extra,
                reason: "not a parameter of this architecture".into(),
            });
        }
        model.check_finite()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_weight_file().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_weight_file(&WeightFile::read(path)?)
    }
}
