//! Experiment configuration: TOML sections `[data]`, `[model]`, `[train]`
//! and `[eval]`, layered as built-in defaults < file < command-line overrides.
//!
//! Model defaults depend on the architecture, so the `[model]` base is built
//! from the final `architecture` and `compression_ratio` before the user's
//! values are laid over it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::dataset::SamplingConfig;
use crate::error::{Error, Result};
use crate::model::{Architecture, ModelConfig};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Split evaluated by `eval`: `test` or `val`.
    pub split: String,
    pub chunk_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { split: "test".into(), chunk_size: 250 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: SamplingConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: SamplingConfig::default(),
            model: ModelConfig::extend_nlnet(16),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Parses one `dotted.key=value` override. Values are read as TOML literals,
/// falling back to a bare string (`model.architecture=csinet`).
pub fn parse_override(text: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{text}' is not of the form key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key '{key}' has an empty segment")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((path, value))
}

fn set_path(table: &mut Table, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cursor = table;
    for seg in parents {
        let entry = cursor.entry(seg.clone()).or_insert_with(|| Value::Table(Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("'{seg}' in '{}' is not a section", path.join("."))))?;
    }
    cursor.insert(last.clone(), value);
    Ok(())
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn to_table<T: Serialize>(value: &T) -> Result<Table> {
    Table::try_from(value).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
}

/// User-supplied layers, before defaults are applied.
#[derive(Debug, Clone, Default)]
pub struct ConfigLayers {
    table: Table,
}

impl ConfigLayers {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let table: Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(ConfigLayers { table })
    }

    pub fn set(&mut self, path: &[&str], value: Value) -> Result<()> {
        let path: Vec<String> = path.iter().map(|s| s.to_string()).collect();
        set_path(&mut self.table, &path, value)
    }

    pub fn apply_override(&mut self, text: &str) -> Result<()> {
        let (path, value) = parse_override(text)?;
        set_path(&mut self.table, &path, value)
    }

    fn model_value(&self, key: &str) -> Option<&Value> {
        self.table.get("model")?.as_table()?.get(key)
    }

    /// Resolves the layers over defaults and validates the result.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let architecture = match self.model_value("architecture") {
            Some(Value::String(s)) => Architecture::parse(s)?,
            Some(other) => return Err(Error::Config(format!("model.architecture must be a string, got {other}"))),
            None => Architecture::ExtendNlNet,
        };
        let cr = match self.model_value("compression_ratio") {
            Some(Value::Integer(n)) if *n > 0 => *n as usize,
            Some(other) => return Err(Error::Config(format!("model.compression_ratio must be a positive integer, got {other}"))),
            None => 16,
        };
        let mut base = to_table(&ExperimentConfig {
            model: ModelConfig::new(architecture, cr),
            ..ExperimentConfig::default()
        })?;
        let mut user = self.table.clone();
        if let Some(Value::Table(model)) = user.get_mut("model") {
            model.insert("architecture".into(), Value::String(architecture.name().into()));
        }
        merge(&mut base, user);
        let config: ExperimentConfig = Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let t = self.data.template;
        if self.model.height * self.model.width != t.n_bs_antennas * t.n_user_antennas {
            return Err(Error::Config(format!(
                "model image {}×{} does not hold {}×{} channel entries",
                self.model.height, self.model.width, t.n_user_antennas, t.n_bs_antennas
            )));
        }
        if !matches!(self.eval.split.as_str(), "test" | "val") {
            return Err(Error::Config(format!("eval.split must be 'test' or 'val', got '{}'", self.eval.split)));
        }
        if self.eval.chunk_size == 0 {
            return Err(Error::Config("eval.chunk_size must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        ConfigLayers::from_toml(text)?.resolve()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn overrides_win_and_parse_types() {
        let mut layers = ConfigLayers::from_toml("[train]\nepochs = 5\n[data]\nn_train = 7\n").unwrap();
        layers.apply_override("train.epochs=2").unwrap();
        layers.apply_override("train.optimizer.learning_rate=5e-4").unwrap();
        layers.apply_override("model.architecture=csinet").unwrap();
        let c = layers.resolve().unwrap();
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.data.n_train, 7);
        assert_eq!(c.train.optimizer.learning_rate, 5e-4);
        assert_eq!(c.model, ModelConfig::csinet(16));
    }

    #[test]
    fn architecture_switch_rebuilds_model_defaults() {
        let c = ExperimentConfig::from_toml("[model]\narchitecture = \"csinet\"\ncompression_ratio = 64\n").unwrap();
        assert_eq!(c.model.refine_kernels, [3, 3, 3]);
        assert_eq!(c.model.encoder_nonlocal_blocks, 0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("[train]\nepocs = 3\n").is_err());
        assert!(ExperimentConfig::from_toml("[nope]\nx = 1\n").is_err());
        let mut layers = ConfigLayers::default();
        layers.apply_override("data.r_range.mid=3").unwrap();
        assert!(layers.resolve().is_err());
        assert!(parse_override("train.epochs").is_err());
        assert!(parse_override("train..epochs=1").is_err());
    }

    #[test]
    fn optional_clipping_can_be_enabled() {
        let c = ExperimentConfig::from_toml("[train]\nclip_grad_norm = 1.5\n").unwrap();
        assert_eq!(c.train.clip_grad_norm, Some(1.5));
    }

    #[test]
    fn mismatched_image_size_is_rejected() {
        assert!(ExperimentConfig::from_toml("[data.template]\nn_bs_antennas = 512\n").is_err());
    }
}
