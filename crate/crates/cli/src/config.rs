//! Flat dotted-key configuration: defaults, file, `--set` and flag overrides.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::CliError;

/// Resolved settings keyed by dotted path, in sorted order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlatConfig(pub BTreeMap<String, Value>);

fn flatten_into(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, x, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

/// Objects become dotted keys; arrays and scalars are leaves.
pub fn flatten(v: &Value) -> BTreeMap<String, Value> {
    let mut out = BTreeMap::new();
    flatten_into("", v, &mut out);
    out
}

/// Inverse of [`flatten`].
pub fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("dotted keys never collide with leaves");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

/// Parses a `--set` value: JSON when it parses, a plain string otherwise.
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl FlatConfig {
    pub fn from_defaults<T: Serialize>(defaults: &T) -> Self {
        Self(flatten(&serde_json::to_value(defaults).expect("defaults serialize")))
    }

    /// Replaces an existing key; unknown keys are a config error.
    pub fn set(&mut self, key: &str, value: Value) -> Result<(), CliError> {
        match self.0.get_mut(key) {
            Some(slot) => {
                *slot = value;
                Ok(())
            }
            None => Err(CliError::config(format!("unknown config key `{key}`"))),
        }
    }

    /// Applies every key of a JSON config file. Nested objects are accepted
    /// and flattened.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("config {} is not valid JSON: {e}", path.display())))?;
        if !v.is_object() {
            return Err(CliError::config(format!("config {} must be a JSON object", path.display())));
        }
        for (k, x) in flatten(&v) {
            self.set(&k, x)?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides.
    pub fn apply_sets(&mut self, sets: &[String]) -> Result<(), CliError> {
        for s in sets {
            let (k, v) = s.split_once('=').ok_or_else(|| CliError::config(format!("--set expects key=value, got `{s}`")))?;
            self.set(k.trim(), parse_value(v.trim()))?;
        }
        Ok(())
    }

    pub fn to_typed<T: DeserializeOwned>(&self) -> Result<T, CliError> {
        serde_json::from_value(unflatten(&self.0)).map_err(|e| CliError::config(format!("invalid configuration: {e}")))
    }

    /// Pretty JSON object with one dotted key per line.
    pub fn to_json(&self) -> String {
        let m: Map<String, Value> = self.0.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let mut s = serde_json::to_string_pretty(&Value::Object(m)).expect("json values serialize");
        s.push('\n');
        s
    }
}
