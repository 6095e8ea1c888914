//! Layered configuration: defaults, then an optional network preset, then a config file,
//! then `--set` overrides, then dedicated flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use compose_core::config::RunConfig;
use compose_core::net::NetworkConfig;
use serde_json::{json, Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// 480-pixel input, full channel widths.
    Full,
    /// 124-pixel input with narrow layers.
    Compact,
    /// 28-pixel input on a 5 × 5 grid.
    Tiny,
}

impl Preset {
    pub fn layer(self) -> Value {
        let network = match self {
            Preset::Full => NetworkConfig::default(),
            Preset::Compact => NetworkConfig::compact(),
            Preset::Tiny => NetworkConfig::tiny(),
        };
        json!({
            "pipeline": {
                "scene": { "input_size": network.input_size },
                "grid": { "size": network.grid_size },
            },
            "eval": { "grid": { "size": network.grid_size } },
            "network": network,
        })
    }
}

/// Parses a JSON or TOML config file; the format follows the extension, JSON by default.
pub fn read_config_file(path: &Path) -> Result<Value> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    let v: Value = if is_toml {
        toml::from_str(&text).with_context(|| format!("parsing {} as TOML", path.display()))?
    } else {
        serde_json::from_str(&text).with_context(|| format!("parsing {} as JSON", path.display()))?
    };
    if !v.is_object() {
        bail!("{} must hold a table of settings", path.display());
    }
    Ok(v)
}

/// `a.b.c=value` as `{"a": {"b": {"c": value}}}`. The value is read as JSON when it parses,
/// as a string otherwise.
pub fn parse_assignment(s: &str) -> Result<Value> {
    let (key, raw) = s
        .split_once('=')
        .with_context(|| format!("expected KEY=VALUE, got {s:?}"))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        bail!("invalid key in {s:?}");
    }
    let mut v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    for part in key.rsplit('.') {
        let mut m = Map::new();
        m.insert(part.to_string(), v);
        v = Value::Object(m);
    }
    Ok(v)
}

/// Sets a dotted key in an override layer.
pub fn put(layer: &mut Value, key: &str, value: Value) {
    let mut cur = layer;
    let parts: Vec<&str> = key.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        if !cur.get(*p).is_some_and(Value::is_object) {
            cur[*p] = json!({});
        }
        cur = &mut cur[*p];
    }
    cur[parts[parts.len() - 1]] = value;
}

pub fn resolve(
    preset: Option<Preset>,
    file: Option<&Path>,
    assignments: &[String],
    flags: Value,
) -> Result<RunConfig> {
    let mut layers = Vec::new();
    if let Some(p) = preset {
        layers.push(p.layer());
    }
    if let Some(f) = file {
        layers.push(read_config_file(f)?);
    }
    for a in assignments {
        layers.push(parse_assignment(a)?);
    }
    layers.push(flags);
    Ok(RunConfig::layered(layers)?)
}
