use std::path::Path;

use agile_core::bench::BenchConfig;
use serde_json::Value;

use crate::{usage, Failure, Global};

/// Overlay `patch` onto `base`: objects merge key by key, anything else replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn read_overlay(path: &Path) -> Result<Value, Failure> {
    if !path.exists() {
        return Err(usage(format!("config file not found: {}", path.display())));
    }
    let text =
        std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
}

/// Defaults (desk-scale or full), the config file on top, then `--seed`.
pub fn resolve(global: &Global) -> Result<BenchConfig, Failure> {
    let base = if global.desk_scale { BenchConfig::desk_scale() } else { BenchConfig::default() };
    let mut config = match &global.config {
        Some(path) => {
            let mut value = serde_json::to_value(&base).map_err(anyhow::Error::from)?;
            merge(&mut value, read_overlay(path)?);
            serde_json::from_value(value).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?
        }
        None => base,
    };
    if let Some(seed) = global.seed {
        config = config.with_seed(seed);
    }
    config
        .validate()
        .map_err(|e| usage(format!("invalid configuration: {e}")))?;
    Ok(config)
}
