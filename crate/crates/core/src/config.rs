//! TOML pipeline configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compress::CompressConfig;
use crate::error::{CoreError, Result};
use crate::stage1::{DeployMode, Stage1Config};
use crate::stage2::{Stage2Config, UnseenConfig};
use crate::synth::SynthConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// JSON-lines or CSV message log read by `ingest`.
    pub records: Option<PathBuf>,
    /// Optional `message_id,label` sidecar for `records`.
    pub labels: Option<PathBuf>,
    /// Normalization statistics; defaults to `<out_dir>/norm.fids`.
    pub norm_stats: Option<PathBuf>,
    pub window: usize,
    pub stride: usize,
    /// Train and validation fractions; the remainder is the test split.
    pub split: [f64; 2],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            records: None,
            labels: None,
            norm_stats: None,
            window: 20,
            stride: 20,
            split: [0.6, 0.2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub repetitions: usize,
    pub warmup: usize,
    pub environment: String,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            repetitions: 5,
            warmup: 1,
            environment: "desk".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub mode: DeployMode,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub unseen: UnseenConfig,
    pub compress: CompressConfig,
    pub bench: BenchConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            mode: DeployMode::BandLlUl,
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            unseen: UnseenConfig::default(),
            compress: CompressConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))
    }

    /// Reads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.out_dir);
        for p in [&mut cfg.data.records, &mut cfg.data.labels, &mut cfg.data.norm_stats]
            .into_iter()
            .flatten()
        {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Copies the run seed into every seeded component.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.stage1.optimizer.seed = seed;
        self.stage2.optimizer.seed = seed;
        self.compress.prune.seed = seed;
    }

    pub fn norm_stats_path(&self) -> PathBuf {
        self.data
            .norm_stats
            .clone()
            .unwrap_or_else(|| self.out_dir.join("norm.fids"))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.window == 0 || d.stride == 0 {
            return Err(CoreError::Config("window and stride must be positive".into()));
        }
        if self.stage1.window != d.window || self.stage2.window != d.window {
            return Err(CoreError::Config(format!(
                "stage windows ({}, {}) differ from data.window {}",
                self.stage1.window, self.stage2.window, d.window
            )));
        }
        let [tr, va] = d.split;
        if !(tr > 0.0 && va >= 0.0 && tr + va <= 1.0) {
            return Err(CoreError::Config(format!("bad split {:?}", d.split)));
        }
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.compress.prune.validate()?;
        if !((2..=8).contains(&self.compress.bits) || self.compress.bits == 32) {
            return Err(CoreError::Config(format!(
                "bits {} must be in 2..=8 or 32",
                self.compress.bits
            )));
        }
        if self.bench.repetitions == 0 {
            return Err(CoreError::Config("bench.repetitions must be positive".into()));
        }
        Ok(())
    }
}
