//! Run configuration: a TOML tree with defaults for every key, plus flat
//! dotted-key overrides (`planner.population=256`) applied before typing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::envs::DistractorConfig;
use crate::error::{Error, Result};
use crate::losses::LossCoefficients;
use crate::planner::PlanConfig;
use crate::trainer::TrainConfig;

/// Network widths; input and action sizes come from the task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelWidths {
    pub latent_dim: usize,
    pub hidden_dim: usize,
}

impl Default for ModelWidths {
    fn default() -> Self {
        ModelWidths { latent_dim: 16, hidden_dim: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub name: String,
    pub distractors: DistractorConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig { name: "pendulum".into(), distractors: DistractorConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub output_dir: String,
    pub env: EnvConfig,
    pub model: ModelWidths,
    pub train: TrainConfig,
    pub loss: LossCoefficients,
    pub planner: PlanConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seeds: vec![1],
            output_dir: "runs".into(),
            env: EnvConfig::default(),
            model: ModelWidths::default(),
            train: TrainConfig::default(),
            loss: LossCoefficients::default(),
            planner: PlanConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse TOML text, apply `key=value` overrides and validate.
    pub fn from_toml_with(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut tree: toml::Table = text.parse().map_err(|e: toml::de::Error| config_parse_error(text, e))?;
        for (key, value) in overrides {
            apply_override(&mut tree, key, value)?;
        }
        let cfg: RunConfig = toml::Value::Table(tree).try_into().map_err(|e: toml::de::Error| Error::Config {
            key: "<config>".into(),
            msg: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config { key: "<config>".into(), msg: e.to_string() })
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config { key: "seeds".into(), msg: "need at least one seed".into() });
        }
        if self.model.latent_dim == 0 || self.model.hidden_dim == 0 {
            return Err(Error::Config { key: "model".into(), msg: "widths must be positive".into() });
        }
        self.env.distractors.validate()?;
        self.train.validate()?;
        self.planner.validate()?;
        self.loss.validate()
    }
}

/// Line and column of a TOML parse failure.
fn config_parse_error(text: &str, e: toml::de::Error) -> Error {
    let line = e.span().map(|s| text[..s.start.min(text.len())].lines().count().max(1)).unwrap_or(0);
    Error::Parse { line, msg: e.message().to_string() }
}

/// Set `a.b.c = value` inside the tree. The value is read as a TOML
/// literal (`512`, `0.5`, `true`, `[1, 2]`, `"x"`); anything that does not
/// parse is taken as a bare string.
pub fn apply_override(tree: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config { key: key.into(), msg: "malformed dotted key".into() });
    }
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let mut node = tree;
    for p in &parts[..parts.len() - 1] {
        let entry = node.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config { key: key.into(), msg: format!("`{p}` is not a table") }),
        };
    }
    node.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

/// Split `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::Config { key: s.into(), msg: "expected key=value".into() }),
    }
}
