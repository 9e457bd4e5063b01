//! Config files, `--set` overrides and the resolved-config snapshot.

use std::fs;
use std::path::Path;

use air_core::engine::AdaptationConfig;
use air_core::AirError;
use serde_json::{Map, Value};

use crate::CliError;

pub const DEFAULT_BACKEND: &str = "toy";
pub const BACKENDS: [&str; 1] = ["toy"];

/// Keys whose float values are fractions of `t_adapt`.
const FRACTION_KEYS: [&str; 2] = ["t_thresh", "t_int"];

#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedConfig {
    pub adaptation: AdaptationConfig,
    pub backend: String,
}

impl ResolvedConfig {
    /// JSON snapshot that parses back to the same config.
    pub fn snapshot(&self) -> Result<String, CliError> {
        let mut map = to_map(&self.adaptation)?;
        map.insert("backend".into(), Value::String(self.backend.clone()));
        serde_json::to_string_pretty(&Value::Object(map)).map_err(|e| CliError::Runtime(e.into()))
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<(), CliError> {
        let mut text = self.snapshot()?;
        text.push('\n');
        fs::write(path, text).map_err(|e| CliError::Runtime(e.into()))
    }
}

fn to_map(cfg: &AdaptationConfig) -> Result<Map<String, Value>, CliError> {
    match serde_json::to_value(cfg) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => unreachable!("config serializes to an object"),
        Err(e) => Err(CliError::Runtime(e.into())),
    }
}

/// Parses `key=value`. Values are read as JSON when possible, otherwise as
/// plain strings, so `t_int=0.25` is a number and `target_text=baby` a string.
pub fn parse_override(s: &str) -> Result<(String, Value), CliError> {
    let (key, value) = s
        .split_once('=')
        .ok_or_else(|| CliError::Parse(format!("override `{s}` is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(CliError::Parse(format!("override `{s}` has an empty key")));
    }
    let value = serde_json::from_str(value.trim()).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((key.to_string(), value))
}

/// Reads the JSON config at `path` (if any), applies overrides last, fills
/// defaults and validates.
///
/// `t_thresh` and `t_int` given as integers are absolute iteration counts;
/// given as floats they are fractions of `t_adapt`. Unspecified, they default
/// to 50% and 10% of `t_adapt`.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<ResolvedConfig, CliError> {
    let mut user = Map::new();
    if let Some(p) = path {
        let text = fs::read_to_string(p).map_err(|e| CliError::Parse(format!("{}: {e}", p.display())))?;
        match serde_json::from_str::<Value>(&text) {
            Ok(Value::Object(m)) => user.extend(m),
            Ok(_) => return Err(CliError::Parse(format!("{}: top level must be an object", p.display()))),
            Err(e) => return Err(CliError::Parse(format!("{}: {e}", p.display()))),
        }
    }
    for o in overrides {
        let (k, v) = parse_override(o)?;
        user.insert(k, v);
    }
    resolve(user)
}

fn resolve(mut user: Map<String, Value>) -> Result<ResolvedConfig, CliError> {
    let backend = match user.remove("backend") {
        None => DEFAULT_BACKEND.to_string(),
        Some(Value::String(s)) => s,
        Some(v) => return Err(config_err("backend", format!("expected a string, got {v}"))),
    };
    if !BACKENDS.contains(&backend.as_str()) {
        return Err(config_err(
            "backend",
            format!("unknown backend `{backend}`; available: {}", BACKENDS.join(", ")),
        ));
    }

    let t_adapt = match user.remove("t_adapt") {
        None => AdaptationConfig::default().t_adapt,
        Some(v) => v
            .as_u64()
            .ok_or_else(|| config_err("t_adapt", format!("expected a non-negative integer, got {v}")))?
            as usize,
    };
    let defaults = to_map(&AdaptationConfig::with_t_adapt(t_adapt))?;

    let mut merged = defaults.clone();
    for (key, value) in user {
        let Some(default) = defaults.get(&key) else {
            return Err(CliError::UnknownKey(key));
        };
        let value = if FRACTION_KEYS.contains(&key.as_str()) {
            absolute_iterations(&key, &value, t_adapt)?
        } else if default.is_string() && !value.is_string() {
            // `--set target_text=1` should still be a description.
            match value {
                Value::Number(n) => Value::String(n.to_string()),
                Value::Bool(b) => Value::String(b.to_string()),
                other => other,
            }
        } else {
            value
        };
        // Type-check each key on its own so the error names the field.
        let mut single = defaults.clone();
        single.insert(key.clone(), value.clone());
        if let Err(e) = serde_json::from_value::<AdaptationConfig>(Value::Object(single)) {
            return Err(config_err(&key, e.to_string()));
        }
        merged.insert(key, value);
    }

    let adaptation: AdaptationConfig =
        serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Parse(e.to_string()))?;
    adaptation.validate().map_err(CliError::from_validation)?;
    Ok(ResolvedConfig { adaptation, backend })
}

fn absolute_iterations(key: &str, value: &Value, t_adapt: usize) -> Result<Value, CliError> {
    if let Some(n) = value.as_u64() {
        return Ok(Value::from(n));
    }
    match value.as_f64() {
        Some(f) if (0.0..=1.0).contains(&f) => Ok(Value::from((t_adapt as f64 * f).round() as u64)),
        Some(f) => Err(config_err(
            key,
            format!("fraction of t_adapt must be in [0, 1], got {f}"),
        )),
        None => Err(config_err(
            key,
            format!("expected an integer or a fraction, got {value}"),
        )),
    }
}

fn config_err(field: impl Into<String>, reason: impl Into<String>) -> CliError {
    CliError::Config(AirError::config(field, reason))
}
