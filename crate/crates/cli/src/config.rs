use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use clumo_core::continual::TrainConfig;
use clumo_core::datagen::{domain_letter, StreamConfig};
use clumo_core::encoders::ModelDims;

use crate::CliError;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "CLUMO_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "clumo-out";

/// Everything one experiment needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// One run per seed; each seed drives both data generation and training.
    pub seeds: Vec<u64>,
    /// Domain letters in training order, e.g. `"badc"`. Defaults to the canonical order.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task_order: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub train: TrainConfig,
    pub stream: StreamConfig,
    pub model: ModelDims,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            task_order: None,
            out_dir: None,
            train: TrainConfig::default(),
            stream: StreamConfig::default(),
            model: ModelDims::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses a config document; unknown keys are rejected by name.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let value: toml::Table = text.parse().map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        Self::from_value(toml::Value::Table(value))
    }

    fn from_value(value: toml::Value) -> Result<Self, CliError> {
        let config: Self = value
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("invalid config: {}", e.message())))?;
        config.validate()?;
        Ok(config)
    }

    /// Loads `path` (or defaults when `None`) and applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut value = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                toml::Value::Table(
                    text.parse::<toml::Table>()
                        .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", p.display())))?,
                )
            }
            None => toml::Value::try_from(Self::default()).expect("defaults serialize"),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::Usage("config needs at least one seed".into()));
        }
        self.train.validate()?;
        self.stream.validate()?;
        self.model.validate()?;
        if let Some(order) = &self.task_order {
            let mut letters: Vec<char> = order.chars().collect();
            let canonical = self.canonical_order();
            letters.sort_unstable();
            let mut expected: Vec<char> = canonical.chars().collect();
            expected.sort_unstable();
            if letters != expected {
                return Err(CliError::Usage(format!(
                    "task_order `{order}` must be a permutation of `{canonical}`"
                )));
            }
        }
        Ok(())
    }

    pub fn canonical_order(&self) -> String {
        (0..self.stream.num_tasks).map(domain_letter).collect()
    }

    pub fn order(&self) -> String {
        self.task_order.clone().unwrap_or_else(|| self.canonical_order())
    }

    /// `--out`, then the config, then the environment, then `clumo-out`.
    pub fn resolve_out_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.out_dir.clone())
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }
}

/// Sets a dotted path such as `train.lr=0.1`. The value is read as TOML and
/// falls back to a plain string.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{assignment}` is not key=value")))?;
    let path = path.trim();
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Usage(format!("override key `{path}` is malformed")));
    }
    let value = parse_value(raw.trim());
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("override `{path}`: `{key}` is not a section")))?;
        node = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| CliError::Usage(format!("override `{path}` does not name a field")))?;
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
