//! Flat dotted-key configuration: `scene.*`, `train.*` and `eval.*`.
//!
//! Defaults come from the library structs, a JSON file may override any key,
//! and command-line flags override the file.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use ssg_core::synthetic::SceneConfig;
use ssg_core::train::TrainConfig;

use crate::CliError;

/// Evaluation settings that are not part of the checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub salience_rank: bool,
    pub top_k: usize,
    pub iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let o = ssg_core::train::EvalOptions::default();
        Self {
            salience_rank: o.salience_rank,
            top_k: o.top_k,
            iou: o.iou,
        }
    }
}

impl EvalConfig {
    pub fn options(&self) -> ssg_core::train::EvalOptions {
        ssg_core::train::EvalOptions {
            salience_rank: self.salience_rank,
            top_k: self.top_k,
            iou: self.iou,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatConfig {
    values: BTreeMap<String, Value>,
}

fn section<T: Serialize>(prefix: &str, value: &T, out: &mut BTreeMap<String, Value>) {
    let Value::Object(map) = serde_json::to_value(value).expect("config serializes") else {
        unreachable!("config structs serialize to objects")
    };
    for (k, v) in map {
        out.insert(format!("{prefix}.{k}"), v);
    }
}

impl Default for FlatConfig {
    fn default() -> Self {
        let mut values = BTreeMap::new();
        section("scene", &SceneConfig::default(), &mut values);
        section("train", &TrainConfig::default(), &mut values);
        section("eval", &EvalConfig::default(), &mut values);
        Self { values }
    }
}

impl FlatConfig {
    /// Defaults overlaid with an optional JSON file.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            let parsed: Value = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let Value::Object(map) = parsed else {
                return Err(CliError::Usage(format!("{}: config must be a JSON object", path.display())));
            };
            for (k, v) in map {
                cfg.set(&k, v)?;
            }
        }
        Ok(cfg)
    }

    /// Overrides one key; unknown keys and type changes are rejected.
    pub fn set(&mut self, key: &str, value: Value) -> Result<(), CliError> {
        let Some(old) = self.values.get(key) else {
            return Err(CliError::Usage(format!("unknown config key `{key}`")));
        };
        let same_kind = matches!(
            (old, &value),
            (Value::Bool(_), Value::Bool(_)) | (Value::Number(_), Value::Number(_)) | (Value::String(_), Value::String(_))
        );
        if !same_kind {
            return Err(CliError::Usage(format!(
                "config key `{key}` expects a value like {old}, got {value}"
            )));
        }
        self.values.insert(key.to_string(), value);
        Ok(())
    }

    pub fn set_opt<T: Serialize>(&mut self, key: &str, value: Option<T>) -> Result<(), CliError> {
        match value {
            Some(v) => self.set(key, serde_json::to_value(v).expect("flag serializes")),
            None => Ok(()),
        }
    }

    /// Sets a boolean to `false` when a `--no-*` flag is present.
    pub fn disable_if(&mut self, key: &str, flag: bool) -> Result<(), CliError> {
        if flag {
            self.set(key, Value::Bool(false))?;
        }
        Ok(())
    }

    fn extract<T: DeserializeOwned>(&self, prefix: &str) -> Result<T, CliError> {
        let dotted = format!("{prefix}.");
        let map: Map<String, Value> = self
            .values
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&dotted).map(|k| (k.to_string(), v.clone())))
            .collect();
        serde_json::from_value(Value::Object(map)).map_err(|e| CliError::Usage(format!("{prefix} config: {e}")))
    }

    pub fn scene(&self) -> Result<SceneConfig, CliError> {
        self.extract("scene")
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        self.extract("train")
    }

    pub fn eval(&self) -> Result<EvalConfig, CliError> {
        self.extract("eval")
    }

    /// The keys of one section, for echoing into manifests.
    pub fn section_json(&self, prefixes: &[&str]) -> Value {
        Value::Object(
            self.values
                .iter()
                .filter(|(k, _)| prefixes.iter().any(|p| k.split('.').next() == Some(p)))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        )
    }
}

/// SHA-256 of the compact JSON encoding (keys in sorted order).
pub fn hash_json(value: &Value) -> String {
    let text = serde_json::to_string(value).expect("json serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_sections() {
        let cfg = FlatConfig::default();
        assert_eq!(cfg.scene().unwrap(), SceneConfig::default());
        assert_eq!(cfg.train().unwrap(), TrainConfig::default());
        assert_eq!(cfg.eval().unwrap(), EvalConfig::default());
    }

    #[test]
    fn overrides_are_checked() {
        let mut cfg = FlatConfig::default();
        cfg.set("train.beta", serde_json::json!(0.5)).unwrap();
        assert_eq!(cfg.train().unwrap().beta, 0.5);
        assert!(cfg.set("train.betta", serde_json::json!(0.5)).is_err());
        assert!(cfg.set("train.isd", serde_json::json!(1)).is_err());
        cfg.set("train.epochs", serde_json::json!(-1)).unwrap();
        assert!(cfg.train().is_err());
    }

    #[test]
    fn hash_depends_on_values_only() {
        let a = FlatConfig::default().section_json(&["train"]);
        let mut cfg = FlatConfig::default();
        assert_eq!(hash_json(&a), hash_json(&cfg.section_json(&["train"])));
        cfg.set("train.seed", serde_json::json!(7)).unwrap();
        assert_ne!(hash_json(&a), hash_json(&cfg.section_json(&["train"])));
    }
}
