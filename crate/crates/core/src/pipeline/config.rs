//! Pipeline configuration: one JSON file plus `UNSPARSE_*` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pruning::PruneHyper;
use crate::quant::QuantMode;
use crate::trainer::{DatasetConfig, ModelSpec, SplitKind, TrainingConfig};

use super::bench::BenchConfig;

pub const ENV_SEED: &str = "UNSPARSE_SEED";
pub const ENV_WORKERS: &str = "UNSPARSE_WORKERS";
pub const ENV_OUT: &str = "UNSPARSE_OUT";
pub const ENV_ITERATIONS: &str = "UNSPARSE_N_IT";

fn default_seed() -> u64 {
    0
}

fn default_workers() -> usize {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("unsparse-out")
}

fn default_pretrain() -> bool {
    true
}

fn default_checkpoint_every() -> usize {
    10
}

/// Search hyperparameters plus checkpointing cadence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSection {
    #[serde(flatten)]
    pub hyper: PruneHyper,
    /// Train the dense model for `training.epochs` before searching.
    #[serde(default = "default_pretrain")]
    pub pretrain: bool,
    /// Write the resumable state every this many iterations (0: only at
    /// the end).
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

impl Default for PruneSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults parse")
    }
}

fn default_modes() -> Vec<QuantMode> {
    vec![QuantMode::Passthrough, QuantMode::Half, QuantMode::Codebook]
}

fn default_split() -> SplitKind {
    SplitKind::Test
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizeSection {
    #[serde(default = "default_modes")]
    pub modes: Vec<QuantMode>,
    /// Split the accuracy delta is measured on.
    #[serde(default = "default_split")]
    pub split: SplitKind,
}

impl Default for QuantizeSection {
    fn default() -> Self {
        QuantizeSection { modes: default_modes(), split: default_split() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Optional label carried into reports.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Rayon worker threads; 0 uses every core.
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub dataset: Option<DatasetConfig>,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub prune: PruneSection,
    #[serde(default)]
    pub quantize: QuantizeSection,
    #[serde(default)]
    pub bench: Option<BenchConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults parse")
    }
}

/// Values that take precedence over the file. Command-line values beat
/// environment values.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    pub iterations: Option<usize>,
}

fn env_parse<V: std::str::FromStr>(key: &str, lookup: &dyn Fn(&str) -> Option<String>) -> Result<Option<V>> {
    match lookup(key) {
        None => Ok(None),
        Some(s) if s.trim().is_empty() => Ok(None),
        Some(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{key}={s:?} does not parse"))),
    }
}

impl Overrides {
    /// Reads the `UNSPARSE_*` variables through `lookup`.
    pub fn from_lookup(lookup: &dyn Fn(&str) -> Option<String>) -> Result<Self> {
        Ok(Overrides {
            seed: env_parse(ENV_SEED, lookup)?,
            workers: env_parse(ENV_WORKERS, lookup)?,
            out: lookup(ENV_OUT).filter(|s| !s.is_empty()).map(PathBuf::from),
            iterations: env_parse(ENV_ITERATIONS, lookup)?,
        })
    }

    pub fn from_env() -> Result<Self> {
        Self::from_lookup(&|k| std::env::var(k).ok())
    }

    /// `self` where set, `fallback` otherwise.
    pub fn or(self, fallback: Overrides) -> Overrides {
        Overrides {
            seed: self.seed.or(fallback.seed),
            workers: self.workers.or(fallback.workers),
            out: self.out.or(fallback.out),
            iterations: self.iterations.or(fallback.iterations),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: PipelineConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path`; a relative `out` is resolved against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::from_json(&text)?;
        if config.out.is_relative() {
            if let Some(dir) = path.parent() {
                config.out = dir.join(&config.out);
            }
        }
        Ok(config)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(workers) = o.workers {
            self.workers = workers;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(n) = o.iterations {
            self.prune.hyper.iterations = n;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.prune.hyper.validate()?;
        if self.training.batch_size == 0 || self.training.lr <= 0.0 {
            return Err(Error::Config("training batch size and learning rate must be positive".into()));
        }
        if let Some(b) = &self.bench {
            b.validate()?;
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<&ModelSpec> {
        self.model.as_ref().ok_or_else(|| Error::Config("configuration has no model section".into()))
    }

    pub fn dataset_config(&self) -> Result<&DatasetConfig> {
        self.dataset.as_ref().ok_or_else(|| Error::Config("configuration has no dataset section".into()))
    }

    pub fn bench_config(&self) -> Result<&BenchConfig> {
        self.bench.as_ref().ok_or_else(|| Error::Config("configuration has no bench section".into()))
    }
}

/// Independent stream seeds derived from the run seed (splitmix64).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub mod streams {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const PRETRAIN: u64 = 3;
    pub const SEARCH: u64 = 4;
    pub const BENCH: u64 = 5;
}
