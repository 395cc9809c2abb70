use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use biasprobe_core::{FeatureKind, Strength};
use serde::{Deserialize, Serialize};

use crate::args::BackendArg;

/// A usage or configuration problem (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Defaults read from `--config`. Keys mirror the long flag names.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub manifest: Option<PathBuf>,
    pub perturbed: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub features: Option<Vec<String>>,
    pub strengths: Option<Vec<String>>,
    pub backend: Option<BackendArg>,
    pub endpoint: Option<String>,
    pub replay: Option<Vec<PathBuf>>,
    pub prompts: Option<Vec<PathBuf>>,
    pub k: Option<usize>,
    pub alpha: Option<f64>,
    pub workers: Option<usize>,
    pub lenient: Option<bool>,
    pub probe: Option<PathBuf>,
    pub benchmark: Option<String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
    }
}

pub fn required<T>(flag: Option<T>, file: Option<T>, name: &str) -> Result<T> {
    flag.or(file).ok_or_else(|| usage(format!("--{name} is required")))
}

pub fn parse_features(raw: Option<Vec<String>>) -> Result<Vec<FeatureKind>> {
    match raw {
        None => Ok(FeatureKind::ALL.to_vec()),
        Some(v) => v
            .iter()
            .map(|s| s.trim().parse::<FeatureKind>().map_err(|e| usage(e.to_string())))
            .collect(),
    }
}

pub fn parse_strengths(raw: Option<Vec<String>>) -> Result<Vec<Strength>> {
    match raw {
        None => Ok(Strength::ALL.to_vec()),
        Some(v) => v
            .iter()
            .map(|s| s.trim().parse::<Strength>().map_err(|e| usage(e.to_string())))
            .collect(),
    }
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Writes the resolved configuration of a run into its output directory.
pub fn write_echo<T: Serialize>(out: &Path, command: &str, resolved: &T) -> Result<()> {
    #[derive(Serialize)]
    struct Echo<'a, T> {
        command: &'a str,
        version: &'a str,
        config: &'a T,
    }
    let echo = Echo {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config: resolved,
    };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&echo)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

/// 2 for usage and input problems, 1 for evaluation failures.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    use biasprobe_core::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io { .. } | E::Manifest { .. } | E::DuplicateImageId(_) | E::Annotation { .. } | E::Json(_) => 2,
                _ => 1,
            };
        }
    }
    1
}
