//! Run manifests and layered configuration (defaults, then a JSON file, then flags).

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Written next to every command's outputs. Feeding it back through
/// `--config` reproduces the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    /// Fully resolved settings of the command.
    pub config: serde_json::Value,
    pub artifacts: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: &impl Serialize, artifacts: Vec<PathBuf>) -> Result<Self> {
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            config: serde_json::to_value(config)?,
            artifacts,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// The contents of a `--config` file: either a bare settings object or a
/// manifest from an earlier run.
pub struct ConfigFile {
    pub settings: serde_json::Value,
    pub seed: Option<u64>,
}

pub fn read_config(path: &Path, command: &str) -> Result<ConfigFile> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    if let Ok(m) = serde_json::from_value::<RunManifest>(value.clone()) {
        if m.command != command {
            anyhow::bail!(crate::UsageError(format!(
                "{} is a manifest for `{}`, not `{command}`",
                path.display(),
                m.command
            )));
        }
        return Ok(ConfigFile {
            settings: m.config,
            seed: Some(m.seed),
        });
    }
    Ok(ConfigFile {
        settings: value,
        seed: None,
    })
}

/// Settings from `defaults`, overlaid by the config file when given.
pub fn layered<T: Serialize + DeserializeOwned>(defaults: T, file: Option<&ConfigFile>) -> Result<T> {
    let Some(file) = file else {
        return Ok(defaults);
    };
    let mut base = serde_json::to_value(&defaults)?;
    merge(&mut base, &file.settings);
    serde_json::from_value(base).map_err(|e| crate::UsageError(format!("invalid config: {e}")).into())
}

fn merge(base: &mut serde_json::Value, over: &serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}
