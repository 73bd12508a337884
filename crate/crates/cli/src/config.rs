//! Layered configuration: defaults, then a JSON file, then flags.
//!
//! The file is a JSON object whose top-level keys are training fields, with
//! optional `tsne` and `synth` sections. Keys match the flag names with `-`
//! written as `_`.

use std::path::Path;

use patchgrid_core::{AugmentKind, GridSpec};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

pub const SECTIONS: [&str; 2] = ["tsne", "synth"];

#[derive(Clone, Debug, Default)]
pub struct ConfigFile {
    pub train: Map<String, Value>,
    pub tsne: Map<String, Value>,
    pub synth: Map<String, Value>,
}

impl ConfigFile {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let mut map = match serde_json::from_str(&text) {
            Ok(Value::Object(map)) => map,
            Ok(_) => return Err(CliError::Usage(format!("{}: config must be a JSON object", path.display()))),
            Err(e) => return Err(CliError::Usage(format!("{}: {e}", path.display()))),
        };
        let mut section = |name: &str| match map.remove(name) {
            None => Ok(Map::new()),
            Some(Value::Object(m)) => Ok(m),
            Some(_) => Err(CliError::Usage(format!("{}: `{name}` must be an object", path.display()))),
        };
        let tsne = section(SECTIONS[0])?;
        let synth = section(SECTIONS[1])?;
        Ok(Self { train: map, tsne, synth })
    }
}

/// Collects the flags that were given into a JSON object.
#[derive(Clone, Debug, Default)]
pub struct Flags(pub Map<String, Value>);

impl Flags {
    pub fn set<V: Serialize>(&mut self, key: &str, value: Option<V>) -> &mut Self {
        if let Some(v) = value {
            self.0.insert(key.into(), serde_json::to_value(v).expect("flag values serialize"));
        }
        self
    }
}

fn dims(text: &str) -> Option<(usize, usize)> {
    let (a, b) = text.split_once(['x', 'X'])?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

/// Writes `value` under `key`, expanding the string shorthands
/// `augment: "color"`, `grid: "5x8"`, `input_size: "64x64"` and
/// `head: "knn"` (with `k`, default 5).
fn overlay(merged: &mut Map<String, Value>, key: &str, value: &Value) -> Result<(), CliError> {
    let key = key.replace('-', "_");
    let usage = |m: String| CliError::Usage(m);
    match (key.as_str(), value) {
        ("augment", Value::String(s)) => {
            let kind: AugmentKind = s.parse().map_err(|e: patchgrid_core::Error| usage(e.to_string()))?;
            let slot = merged.entry("augment").or_insert_with(|| Value::Object(Map::new()));
            slot["kind"] = serde_json::to_value(kind).expect("enum serializes");
        }
        ("grid", Value::String(s)) => {
            let discard =
                merged.get("grid").and_then(|g| g.get("discard_top")).and_then(Value::as_bool).unwrap_or(true);
            let grid = GridSpec::parse(s, discard).map_err(|e| usage(e.to_string()))?;
            merged.insert(key, serde_json::to_value(grid).expect("grid serializes"));
        }
        ("skip_top", Value::Bool(b)) => {
            let slot = merged.entry("grid").or_insert_with(|| Value::Object(Map::new()));
            slot["discard_top"] = Value::Bool(*b);
        }
        ("input_size", Value::String(s)) => {
            let (h, w) = dims(s).ok_or_else(|| usage(format!("input_size `{s}` is not HxW")))?;
            merged.insert(key, serde_json::json!([h, w]));
        }
        ("head", Value::String(s)) if s == "knn" => {
            merged.insert(key, serde_json::json!({ "knn": { "k": 5 } }));
        }
        ("k", Value::Number(n)) => {
            merged.insert("head".into(), serde_json::json!({ "knn": { "k": n } }));
        }
        _ => {
            merged.insert(key, value.clone());
        }
    }
    Ok(())
}

/// Defaults overlaid with the file layer and then the flag layer.
pub fn resolve<T: Serialize + DeserializeOwned>(
    defaults: &T,
    file: &Map<String, Value>,
    flags: &Flags,
) -> Result<T, CliError> {
    let mut merged = match serde_json::to_value(defaults).map_err(|e| CliError::Usage(e.to_string()))? {
        Value::Object(m) => m,
        _ => unreachable!("configs serialize to objects"),
    };
    // `head` before `k` so that a bare `k` refines the chosen head.
    for layer in [file, &flags.0] {
        let mut keys: Vec<&String> = layer.keys().collect();
        keys.sort_by_key(|k| (k.as_str() == "k", k.as_str()));
        for k in keys {
            overlay(&mut merged, k, &layer[k])?;
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Usage(format!("configuration: {e}")))
}
