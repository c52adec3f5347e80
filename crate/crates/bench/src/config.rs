//! JSON configuration files for the `bench`, `sweep`, and `train`
//! subcommands.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use malloc_core::backbone::ModelConfig;
use malloc_core::policy::CachePolicyConfig;

fn default_epochs() -> usize {
    3
}
fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}
fn default_batch() -> usize {
    8
}
fn default_lr() -> f64 {
    5e-4
}
fn default_batch_users() -> usize {
    8
}
fn default_test_fraction() -> f64 {
    0.1
}

/// Benchmark matrix: one dataset, one model shape, a list of cache
/// policies, and the seeds to repeat each scenario over. Omitted fields
/// fall back to the defaults documented on each accessor.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    /// Path to the interaction CSV, relative to the config file.
    pub dataset: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    pub policies: Vec<CachePolicyConfig>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Measurement batch size for resource accounting.
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Users per optimizer step during training.
    #[serde(default = "default_batch_users")]
    pub batch_users: usize,
    /// Held-out trailing fraction of each user's sequence.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

impl BenchConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        let mut config: BenchConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", path.display()))?;
        if config.policies.is_empty() {
            bail!("{}: policies list is empty", path.display());
        }
        if config.seeds.is_empty() {
            bail!("{}: seeds list is empty", path.display());
        }
        // Dataset paths travel with the config file.
        if config.dataset.is_relative() {
            if let Some(dir) = path.parent() {
                config.dataset = dir.join(&config.dataset);
            }
        }
        Ok(config)
    }
}

/// Training configuration file for the `train` subcommand.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFileConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch_users")]
    pub batch_users: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Trailing per-user fraction to keep out of training (0 disables).
    /// Match it to `eval --test-fraction` for leak-free held-out metrics.
    #[serde(default)]
    pub holdout_fraction: f64,
}

fn default_seed() -> u64 {
    1
}

impl TrainFileConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
