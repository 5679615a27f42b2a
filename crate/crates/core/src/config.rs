//! One TOML file configures every subsystem. Each section is overlaid onto
//! that subsystem's defaults, so a file only needs the keys it changes.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_pipeline::PipelineConfig;
use crate::grpo::TrainConfig;
use crate::layout::SamplingConfig;
use crate::reasoning::RemoteConfig;
use crate::synthetic_env::EnvConfig;

pub const CONFIG_ENV_VAR: &str = "SLOWFAST_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid [{section}] section: {message}")]
    Section { section: &'static str, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlowfastConfig {
    pub layout: SamplingConfig,
    pub remote: RemoteConfig,
    pub train: TrainConfig,
    pub env: EnvConfig,
    pub pipeline: PipelineConfig,
}

impl Default for SlowfastConfig {
    /// Training defaults to the synthetic-policy step size.
    fn default() -> Self {
        Self {
            layout: SamplingConfig::default(),
            remote: RemoteConfig::default(),
            train: TrainConfig::synthetic(),
            env: EnvConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

fn overlay<T: Serialize + DeserializeOwned + Clone>(
    base: &T,
    patch: Option<toml::Value>,
    section: &'static str,
) -> Result<T, ConfigError> {
    let Some(patch) = patch else {
        return Ok(base.clone());
    };
    let toml::Value::Table(patch) = patch else {
        return Err(ConfigError::Section {
            section,
            message: "expected a table".into(),
        });
    };
    let mut merged = match toml::Value::try_from(base).map_err(|e| section_err(section, e))? {
        toml::Value::Table(t) => t,
        _ => toml::Table::new(),
    };
    merged.extend(patch);
    toml::Value::Table(merged)
        .try_into()
        .map_err(|e| section_err(section, e))
}

fn section_err(section: &'static str, e: impl std::fmt::Display) -> ConfigError {
    ConfigError::Section {
        section,
        message: e.to_string(),
    }
}

impl SlowfastConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        if let Some(unknown) = table
            .keys()
            .find(|k| !["layout", "remote", "train", "env", "pipeline"].contains(&k.as_str()))
        {
            return Err(ConfigError::Parse(format!("unknown section [{unknown}]")));
        }
        let base = Self::default();
        let cfg = Self {
            layout: overlay(&base.layout, table.remove("layout"), "layout")?,
            remote: overlay(&base.remote, table.remove("remote"), "remote")?,
            train: overlay(&base.train, table.remove("train"), "train")?,
            env: overlay(&base.env, table.remove("env"), "env")?,
            pipeline: overlay(&base.pipeline, table.remove("pipeline"), "pipeline")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// Loads `explicit`, else the file named by `SLOWFAST_CONFIG`, else defaults.
    pub fn load(explicit: Option<&Path>) -> Result<(Self, Option<PathBuf>), ConfigError> {
        let path = explicit
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(CONFIG_ENV_VAR).map(PathBuf::from));
        match path {
            Some(p) => Ok((Self::from_file(&p)?, Some(p))),
            None => Ok((Self::default(), None)),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.layout.validate().map_err(|e| section_err("layout", e))?;
        self.train.validate().map_err(|e| section_err("train", e))?;
        self.env.validate().map_err(|e| section_err("env", e))?;
        if !(0.0..=1.0).contains(&self.pipeline.no_clip_probability) {
            return Err(section_err("pipeline", "no_clip_probability must be within [0, 1]"));
        }
        if !(self.remote.timeout_s.is_finite() && self.remote.timeout_s > 0.0) {
            return Err(section_err("remote", "timeout_s must be positive"));
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
