//! The shared TOML config file and its merge with command-line flags.
//!
//! Every key is optional. Relative paths are resolved against the directory
//! holding the config file.

use std::path::{Path, PathBuf};

use anyhow::Context;
use gatedrag::pipeline::PipelineConfig;
use serde::Deserialize;

use crate::InputError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    /// Root seed; every component seed is derived from it.
    pub seed: Option<u64>,
    pub paths: PathsConfig,
    pub backend: BackendConfig,
    pub bm25: Bm25Config,
    pub pipeline: PipelineConfig,
    pub prober: ProberConfig,
    pub analysis: AnalysisConfig,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub ensemble: Option<PathBuf>,
    pub samples: Option<PathBuf>,
    pub logs: Option<PathBuf>,
    pub few_shot: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    /// Scripted mock file.
    pub replay: Option<PathBuf>,
    /// Sidecar base URL.
    pub url: Option<String>,
    pub timeout_secs: Option<u64>,
    pub max_attempts: Option<u32>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bm25Config {
    pub k1: Option<f64>,
    pub b: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProberConfig {
    pub hidden_width: Option<usize>,
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub holdout_fraction: Option<f64>,
    pub balance_classes: Option<bool>,
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub k: Option<usize>,
    pub after_round: Option<usize>,
}

impl CliConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| InputError::new(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: CliConfig = toml::from_str(&text)
            .map_err(|e| InputError::new(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_relative(base);
        Ok(cfg)
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        let p = &mut self.paths;
        for slot in [
            &mut p.corpus,
            &mut p.dataset,
            &mut p.index,
            &mut p.ensemble,
            &mut p.samples,
            &mut p.logs,
            &mut p.few_shot,
        ] {
            fix(slot);
        }
        fix(&mut self.backend.replay);
    }
}

/// Flag value if given, else the config value; the path must exist.
pub fn existing(flag: Option<PathBuf>, config: &Option<PathBuf>, what: &str) -> anyhow::Result<PathBuf> {
    let path = flag
        .or_else(|| config.clone())
        .ok_or_else(|| InputError::new(format!("no {what} path given (flag or config)")))?;
    if !path.exists() {
        return Err(InputError::new(format!("{what} not found: {}", path.display())).into());
    }
    Ok(path)
}

/// Flag value if given, else the config value.
pub fn output(flag: Option<PathBuf>, config: &Option<PathBuf>, what: &str) -> anyhow::Result<PathBuf> {
    flag.or_else(|| config.clone())
        .ok_or_else(|| InputError::new(format!("no {what} output path given (--out or config)")).into())
}

pub fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
