//! Run configuration files.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use compressive::data::{TokenKind, BYTE_VOCAB};
use compressive::model::ModelConfig;
use compressive::training::TrainSchedule;
use serde::{Deserialize, Serialize};

/// Environment variable naming the root that relative output directories
/// are resolved against.
pub const OUT_ROOT_VAR: &str = "COMPRESSIVE_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Where metrics and checkpoints go; `--out` takes precedence.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub model: ModelConfig,
    #[serde(default)]
    pub schedule: TrainSchedule,
    pub data: DataConfig,
    pub run: RunSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_kind")]
    pub kind: TokenKind,
    pub train: PathBuf,
    pub valid: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
}

fn default_kind() -> TokenKind {
    TokenKind::Char
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub batch: usize,
    pub steps: u64,
    /// Save a checkpoint every this many applied updates; 0 saves only at the end.
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Validation windows scored after training; all when absent.
    #[serde(default)]
    pub eval_windows: Option<usize>,
    /// Whether the compression network receives optimizer updates.
    #[serde(default = "yes")]
    pub train_compression: bool,
    /// Log an update line every this many steps; 0 is silent.
    #[serde(default = "hundred")]
    pub log_every: u64,
}

fn yes() -> bool {
    true
}

fn hundred() -> u64 {
    100
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("invalid run configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative data paths are taken from its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("in {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.data.train);
        fix(&mut cfg.data.valid);
        if let Some(t) = cfg.data.test.as_mut() {
            fix(t);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        if self.run.batch == 0 {
            bail!("run.batch must be positive");
        }
        if self.data.kind == TokenKind::Char && self.model.vocab_size < BYTE_VOCAB {
            bail!(
                "model.vocab_size {} is below the {BYTE_VOCAB} byte values of a character corpus",
                self.model.vocab_size
            );
        }
        Ok(())
    }

    /// Checks that every data path exists, naming the key that does not.
    pub fn check_paths(&self) -> Result<()> {
        let mut keys = vec![("data.train", &self.data.train), ("data.valid", &self.data.valid)];
        if let Some(t) = &self.data.test {
            keys.push(("data.test", t));
        }
        for (key, path) in keys {
            if !path.is_file() {
                bail!("{key}: corpus file {} does not exist", path.display());
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing run configuration")
    }
}

/// `--out` wins, then the config's `out_dir`, then `fallback`; relative
/// results are placed under `$COMPRESSIVE_OUT` when it is set.
pub fn resolve_out(flag: Option<&Path>, configured: Option<&Path>, fallback: &str) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    let dir = configured.map_or_else(|| PathBuf::from(fallback), Path::to_path_buf);
    match std::env::var_os(OUT_ROOT_VAR) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir,
    }
}
