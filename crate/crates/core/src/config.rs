//! Run configuration: one flat key-value file with dotted sections.
//!
//! Keys mirror the serialized field paths of [`RunConfig`], e.g.
//! `train.lr`, `model.n_layers`, `eval.mock_error_rate`. A file may use TOML
//! tables (`[train]` then `lr = 1e-3`) or dotted keys directly; both flatten
//! to the same key set. Unknown keys are rejected by name.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action_space::MatchConfig;
use crate::controller::RemoteConfig;
use crate::encoders::EncoderConfig;
use crate::model::ModelConfig;
use crate::synthetic::SyntheticConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {reason}")]
    InvalidValue { key: String, reason: String },
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("inconsistent config: {0}")]
    Inconsistent(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Mock,
    Remote,
}

impl std::str::FromStr for GeneratorKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mock" => Ok(Self::Mock),
            "remote" => Ok(Self::Remote),
            other => Err(format!("unknown generator {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_episodes: usize,
    pub val_episodes: usize,
    pub test_episodes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_episodes: 2000,
            val_episodes: 200,
            test_episodes: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub generator: GeneratorKind,
    pub mock_error_rate: f64,
    pub include_long_press: bool,
    pub restrict_clickable: bool,
    pub exclude_small_bins: bool,
    pub matching: MatchConfig,
    pub remote: RemoteConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorKind::Mock,
            mock_error_rate: 0.0,
            include_long_press: true,
            restrict_clickable: false,
            exclude_small_bins: false,
            matching: MatchConfig::default(),
            remote: RemoteConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub data: DataConfig,
    pub synthetic: SyntheticConfig,
    pub encoder: EncoderConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            data: DataConfig::default(),
            synthetic: SyntheticConfig::default(),
            encoder: EncoderConfig::default(),
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Keys that default to absent and so never appear in a serialized default.
const OPTIONAL_KEYS: &[&str] = &["train.max_updates", "model.target_hidden"];

fn flatten(prefix: &str, value: &toml::Value, out: &mut BTreeMap<String, toml::Value>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

fn insert_dotted(root: &mut toml::Table, key: &str, value: toml::Value) {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut table = root;
    for p in parts {
        table = table
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .expect("sections are tables");
    }
    table.insert(last.to_string(), value);
}

impl RunConfig {
    /// Every documented key with its default value.
    pub fn documented_keys() -> BTreeMap<String, toml::Value> {
        let mut keys = BTreeMap::new();
        let v = toml::Value::try_from(RunConfig::default()).expect("default config serializes");
        flatten("", &v, &mut keys);
        keys
    }

    /// Applies `key = value` overrides on top of `self`.
    pub fn apply(&self, overrides: &BTreeMap<String, toml::Value>) -> Result<RunConfig, ConfigError> {
        let known = Self::documented_keys();
        for key in overrides.keys() {
            if !known.contains_key(key) && !OPTIONAL_KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey(key.clone()));
            }
        }
        let mut root = match toml::Value::try_from(self).expect("config serializes") {
            toml::Value::Table(t) => t,
            _ => unreachable!("config serializes to a table"),
        };
        for (k, v) in overrides {
            insert_dotted(&mut root, k, v.clone());
        }
        let cfg: RunConfig = toml::Value::Table(root).try_into().map_err(|e: toml::de::Error| {
            let reason = e.message().to_string();
            let key = overrides
                .keys()
                .find(|k| reason.contains(k.rsplit('.').next().unwrap_or(k)))
                .cloned()
                .unwrap_or_default();
            ConfigError::InvalidValue { key, reason }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(s: &str) -> Result<RunConfig, ConfigError> {
        let value: toml::Table = toml::from_str(s).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let mut flat = BTreeMap::new();
        flatten("", &toml::Value::Table(value), &mut flat);
        RunConfig::default().apply(&flat)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig, ConfigError> {
        let s = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Cross-section consistency.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Inconsistent(m));
        if self.model.d_model != self.encoder.d_model {
            return bad(format!(
                "model.d_model {} differs from encoder.d_model {}",
                self.model.d_model, self.encoder.d_model
            ));
        }
        if self.synthetic.image_dim != self.encoder.image_dim {
            return bad(format!(
                "synthetic.image_dim {} differs from encoder.image_dim {}",
                self.synthetic.image_dim, self.encoder.image_dim
            ));
        }
        if self.synthetic.max_elements > self.encoder.max_elements {
            return bad("synthetic.max_elements exceeds encoder.max_elements".into());
        }
        if self.synthetic.max_steps > self.encoder.max_steps {
            return bad("synthetic.max_steps exceeds encoder.max_steps".into());
        }
        if !(0.0..=1.0).contains(&self.eval.mock_error_rate) {
            return Err(ConfigError::InvalidValue {
                key: "eval.mock_error_rate".into(),
                reason: "must lie in [0, 1]".into(),
            });
        }
        Ok(())
    }
}
