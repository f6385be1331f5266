//! Run configuration: every tunable of the pipeline in one structure,
//! loadable from TOML with dotted `key=value` overrides.
//!
//! ```
//! use pvag::config::RunConfig;
//!
//! let mut cfg = RunConfig::default();
//! cfg.set("train.epochs", "30").unwrap();
//! cfg.set("sampling.strategy", "fps").unwrap();
//! assert_eq!(cfg.train.epochs, 30);
//! assert!(cfg.set("train.epoch", "3").is_err());
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::classifier::{ModelConfig, TrainConfig};
use crate::event_io::SynthConfig;
use crate::graph::GraphConfig;
use crate::sampling::SamplingConfig;
use crate::voxelizer::VoxelizationConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset manifest; relative sample paths resolve against its folder.
    pub manifest: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: PathBuf::from("data/manifest.json"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub sampling: SamplingConfig,
    pub voxel: VoxelizationConfig,
    pub graph: GraphConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Lower-case hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunConfig {
    /// Parses TOML, or JSON when the file name ends in `.json`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.sampling.validate()?;
        self.voxel.validate()?;
        self.graph.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Sets the field named by a dotted `key`. The value is read as JSON
    /// when it parses as JSON and as a bare string otherwise. Only the type
    /// is checked here; cross-field rules are left to [`RunConfig::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self).expect("config serializes");
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        if slot.is_object() {
            return Err(Error::Config(format!("`{key}` is a section, not a value")));
        }
        *slot = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        let updated: RunConfig = serde_json::from_value(root)
            .map_err(|e| Error::Config(format!("bad value `{value}` for `{key}`: {e}")))?;
        *self = updated;
        Ok(())
    }

    /// Applies `key=value` strings in order, then validates the result.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(key.trim(), value.trim())?;
        }
        self.validate()
    }

    /// Every leaf key with its current value, in sorted key order.
    pub fn entries(&self) -> Vec<(String, String)> {
        fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
            match v {
                Value::Object(map) => {
                    for (k, child) in map {
                        let key = if prefix.is_empty() {
                            k.clone()
                        } else {
                            format!("{prefix}.{k}")
                        };
                        walk(&key, child, out);
                    }
                }
                leaf => out.push((prefix.to_string(), leaf.to_string())),
            }
        }
        let mut out = Vec::new();
        walk("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    /// Hash of the canonical JSON form of the whole configuration.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Hash of everything that shapes a sample's graphs.
    pub fn preprocess_hash(&self) -> String {
        let key = serde_json::json!({
            "sampling": self.sampling,
            "voxel": self.voxel,
            "graph": self.graph,
            "branch_mode": self.train.branch_mode,
        });
        sha256_hex(key.to_string().as_bytes())
    }

    /// Hash of everything a trained model depends on at inference time.
    /// Checkpoints carry it; evaluation refuses a mismatch.
    pub fn pipeline_hash(&self) -> [u8; 32] {
        let key = serde_json::json!({
            "sampling": self.sampling,
            "voxel": self.voxel,
            "graph": self.graph,
            "model": self.model,
            "branch_mode": self.train.branch_mode,
        });
        Sha256::digest(key.to_string().as_bytes()).into()
    }
}
