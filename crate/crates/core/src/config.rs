//! Run configuration files: one TOML document with optional `[data]`,
//! `[network]` and `[train]` tables plus a top-level `seed`.
//!
//! ```toml
//! seed = 7
//!
//! [data]
//! height = 32
//! # ...
//!
//! [network]
//! [[network.layers]]
//! type = "dam_conv"
//! out_channels = 4
//! # ...
//!
//! [train]
//! iterations = 500
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::NetworkSpec;
use crate::synth::GenConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: Option<GenConfig>,
    pub network: Option<NetworkSpec>,
    pub train: Option<TrainConfig>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::with_overrides(text, &[])
    }

    /// Parses `text` after applying `key.path=value` overrides. Values are
    /// read as TOML (`3`, `0.5`, `true`, `[1, 2]`); anything else is taken
    /// as a string.
    pub fn with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            let value = parse_value(raw.trim());
            set_path(&mut table, key.trim(), value)?;
        }
        table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::with_overrides(&text, overrides)
    }

    pub fn data(&self) -> Result<&GenConfig> {
        self.data
            .as_ref()
            .ok_or_else(|| Error::Config("config has no [data] table".into()))
    }

    pub fn network(&self) -> Result<&NetworkSpec> {
        self.network
            .as_ref()
            .ok_or_else(|| Error::Config("config has no [network] table".into()))
    }

    pub fn train(&self) -> Result<&TrainConfig> {
        self.train
            .as_ref()
            .ok_or_else(|| Error::Config("config has no [train] table".into()))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| Error::Config("empty override key".into()))?;
    let mut current = table;
    for part in parts {
        current = current
            .entry(part)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {part} is not a table")))?;
    }
    current.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = r#"
        seed = 3
        [train]
        iterations = 10
    "#;

    #[test]
    fn tables_are_optional() {
        let cfg = RunConfig::from_toml(TEXT).unwrap();
        assert_eq!(cfg.seed, 3);
        assert!(cfg.data().is_err());
        assert_eq!(cfg.train().unwrap().iterations, 10);
    }

    #[test]
    fn overrides_replace_and_create_keys() {
        let cfg = RunConfig::with_overrides(
            TEXT,
            &[
                "seed=9".into(),
                "train.iterations = 0".into(),
                "train.select=f1".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        let train = cfg.train().unwrap();
        assert_eq!(train.iterations, 0);
        assert_eq!(train.select, crate::train::Selection::F1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sede = 1").is_err());
        assert!(RunConfig::with_overrides(TEXT, &["seed".into()]).is_err());
    }
}
