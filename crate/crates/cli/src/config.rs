//! Run configuration: a flat JSON object with dotted `section.field` keys.
//! Defaults come first, then the file, then command-line overrides; keys the
//! defaults do not define are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ccnet_core::augment::AugmentationConfig;
use ccnet_core::training::TrainConfig;
use ccnet_core::ModelConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Which records of the manifest are trained on.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Train on this fold's training split and validate on its test split;
    /// all records are trained on when unset.
    pub fold: Option<usize>,
    pub fold_seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub aug: AugmentationConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub paths: PathsConfig,
}

pub type FlatConfig = BTreeMap<String, Value>;

fn flatten(cfg: &RunConfig) -> Result<FlatConfig> {
    let Value::Object(sections) = serde_json::to_value(cfg)? else {
        unreachable!("config serializes to an object")
    };
    let mut flat = FlatConfig::new();
    for (section, fields) in sections {
        let Value::Object(fields) = fields else { unreachable!("sections are objects") };
        for (k, v) in fields {
            flat.insert(format!("{section}.{k}"), v);
        }
    }
    Ok(flat)
}

fn unflatten(flat: &FlatConfig) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let (section, field) = key.split_once('.').expect("dotted key");
        root.entry(section)
            .or_insert_with(|| Value::Object(Map::new()))
            .as_object_mut()
            .expect("section object")
            .insert(field.to_string(), v.clone());
    }
    Value::Object(root)
}

/// A `key=value` override; the value is JSON when it parses, a string
/// otherwise.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s.split_once('=').with_context(|| format!("override `{s}` is not key=value"))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

/// Defaults, overlaid by the file at `file` (if any), overlaid by
/// `overrides`. Returns the typed config and its flat form.
pub fn resolve(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<(RunConfig, FlatConfig)> {
    let mut flat = flatten(&RunConfig::default())?;
    let mut set = |key: &str, v: Value, origin: &str| -> Result<()> {
        match flat.get_mut(key) {
            Some(slot) => {
                *slot = v;
                Ok(())
            }
            None => bail!("unknown config key `{key}` ({origin})"),
        }
    };
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let doc: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let Value::Object(map) = doc else { bail!("config {} must be a JSON object", path.display()) };
        for (k, v) in map {
            set(&k, v, &path.display().to_string())?;
        }
    }
    for (k, v) in overrides {
        set(k, v.clone(), "command line")?;
    }
    let cfg: RunConfig = serde_json::from_value(unflatten(&flat)).context("invalid config value")?;
    // Re-flatten so the echo shows normalized values.
    let flat = flatten(&cfg)?;
    Ok((cfg, flat))
}

pub fn write_resolved(flat: &FlatConfig, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(flat)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
