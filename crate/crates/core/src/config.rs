//! Top-level JSON configuration shared by the command-line tools.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::synth::SynthConfig;
use crate::training::TrainConfig;

/// Every section is optional in the file; missing fields take defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<AppConfig> {
        Self::load_with(path, &[])
    }

    /// Load `path` and apply `key.path=value` overrides, where `value` is
    /// JSON or, failing that, a bare string.
    pub fn load_with(path: &Path, overrides: &[String]) -> Result<AppConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut value: Value =
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: AppConfig =
            serde_json::from_value(value).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self).expect("config serialises");
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
    let new = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for part in key.split('.') {
        if !node.is_object() {
            return Err(Error::config(format!("override `{key}` descends into a non-object")));
        }
        node = node
            .as_object_mut()
            .expect("checked above")
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    *node = new;
    Ok(())
}
