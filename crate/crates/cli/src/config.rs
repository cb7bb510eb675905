use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use maskdepth::trainer::TrainConfig;
use serde_json::{Map, Value};

use crate::UsageError;

/// Reads a TOML or JSON (by `.json` extension) config file as a JSON object.
pub fn read_config_file(path: &Path) -> Result<Map<String, Value>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value: Value = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))?
    } else {
        let t: toml::Value = toml::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        serde_json::to_value(t)?
    };
    match value {
        Value::Object(m) => Ok(m),
        _ => Err(UsageError(format!("{}: config must be a table of keys", path.display())).into()),
    }
}

/// Flag values override file values, which override defaults.
pub fn resolve(file: Option<&Path>, overrides: Map<String, Value>) -> Result<TrainConfig> {
    let mut merged = match file {
        Some(p) => read_config_file(p)?,
        None => Map::new(),
    };
    merged.extend(overrides);
    let cfg: TrainConfig =
        serde_json::from_value(Value::Object(merged)).map_err(|e| UsageError(format!("config: {e}")))?;
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(cfg)
}
