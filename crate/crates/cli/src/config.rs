//! The JSON run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use pda_core::synthetic::GaussianPdaConfig;
use pda_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileFormat {
    Binary,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LipschitzMode {
    Empirical,
    Certified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub lipschitz: LipschitzMode,
    pub lipschitz_pairs: usize,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            lipschitz: LipschitzMode::Empirical,
            lipschitz_pairs: 1000,
        }
    }
}

/// One config file drives every command. Seeds live only at the top level
/// and are copied into the sections that need one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Directory holding `manifest.json` and the feature files.
    pub task_dir: PathBuf,
    /// Directory for reports, snapshots and metrics.
    pub output_dir: PathBuf,
    #[serde(default = "default_format")]
    pub feature_format: FileFormat,
    #[serde(default)]
    pub generate: Option<GaussianPdaConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub evaluate: EvaluateSection,
}

fn default_format() -> FileFormat {
    FileFormat::Binary
}

impl RunConfig {
    /// Parse, apply the seed override, and resolve relative paths against
    /// the config file's directory.
    pub fn load(path: &Path, seed_override: Option<u64>) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, seed_override)
    }

    pub fn parse(text: &str, base: &Path, seed_override: Option<u64>) -> CliResult<Self> {
        let mut value: Value =
            serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let root = value
            .as_object_mut()
            .ok_or_else(|| CliError::Config("top level must be a JSON object".into()))?;
        for section in ["generate", "train"] {
            if root.get(section).and_then(|s| s.get("seed")).is_some() {
                return Err(CliError::Config(format!(
                    "{section}.seed: set the seed at the top level"
                )));
            }
        }
        if let Some(seed) = seed_override {
            root.insert("seed".into(), seed.into());
        }
        let seed = root.get("seed").cloned().unwrap_or(Value::Null);
        for section in ["generate", "train"] {
            if let Some(Value::Object(s)) = root.get_mut(section) {
                s.insert("seed".into(), seed.clone());
            }
        }
        let mut cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        cfg.task_dir = base.join(&cfg.task_dir);
        cfg.output_dir = base.join(&cfg.output_dir);
        if let Some(g) = &cfg.generate {
            g.validate()?;
        }
        cfg.train.validate()?;
        if cfg.evaluate.lipschitz_pairs == 0 {
            return Err(CliError::Config(
                "evaluate.lipschitz_pairs must be at least 1".into(),
            ));
        }
        Ok(cfg)
    }

    /// The config as recorded in output headers: seeds resolved, paths as given.
    pub fn provenance(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
