//! TOML run configuration. Every table and key is optional and unknown
//! keys are rejected.
//!
//! ```toml
//! out_dir = "runs/demo"      # default "out"
//! detect_k = 8.0             # region detector threshold in MADs
//!
//! [generator]
//! max_resolution = 32        # power of two in [8, 64]
//! channels = [64, 64, 32, 16]  # per resolution from 4x4; default by resolution
//! latent_dim = 64
//! mapping_layers = 3
//! norm = "PIN"               # IN, PN, PIN or AdaIN at every site
//! norm_kinds = ["IN", "PIN"] # optional per-site override, one per site
//! noise = true
//! seed = 0
//!
//! [train]
//! steps = 2000
//! batch_size = 8
//! lr = 0.001
//! optimizer = "adam"         # or "sgd"
//! seed = 0
//! checkpoint_interval = 100
//!
//! [data]
//! n_images = 256
//! seed = 0
//! ```

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;

use pinlab_core::dissect::DEFAULT_K;
use pinlab_core::generator::{GeneratorConfig, NormKind};
use pinlab_core::training::{OptimizerKind, SyntheticDatasetSpec, TrainConfig};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSection {
    pub max_resolution: usize,
    pub channels: Option<Vec<usize>>,
    pub latent_dim: usize,
    pub mapping_layers: usize,
    pub norm: String,
    pub norm_kinds: Option<Vec<String>>,
    pub noise: bool,
    pub seed: u64,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        Self {
            max_resolution: 32,
            channels: None,
            latent_dim: 64,
            mapping_layers: 3,
            norm: "PIN".into(),
            norm_kinds: None,
            noise: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: String,
    pub seed: u64,
    pub checkpoint_interval: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            optimizer: t.optimizer.to_string(),
            seed: t.seed,
            checkpoint_interval: t.checkpoint_interval,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n_images: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { n_images: 256, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub detect_k: f64,
    pub generator: GeneratorSection,
    pub train: TrainSection,
    pub data: DataSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            detect_k: DEFAULT_K,
            generator: GeneratorSection::default(),
            train: TrainSection::default(),
            data: DataSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("invalid run config")?;
        cfg.generator_config()?;
        cfg.train_config()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn generator_config(&self) -> Result<GeneratorConfig> {
        let g = &self.generator;
        let kind: NormKind = g.norm.parse()?;
        let mut cfg = GeneratorConfig::new(g.max_resolution, kind)?;
        if let Some(ch) = &g.channels {
            cfg.channels = ch.clone();
        }
        if let Some(kinds) = &g.norm_kinds {
            cfg.norm_kinds = kinds
                .iter()
                .map(|k| k.parse())
                .collect::<Result<_, _>>()?;
        }
        cfg.latent_dim = g.latent_dim;
        cfg.mapping_layers = g.mapping_layers;
        cfg.noise_enabled = g.noise;
        cfg.seed = g.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            optimizer: t.optimizer.parse::<OptimizerKind>()?,
            seed: t.seed,
            checkpoint_interval: t.checkpoint_interval,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dataset(&self) -> SyntheticDatasetSpec {
        SyntheticDatasetSpec::new(self.generator.max_resolution, self.data.n_images, self.data.seed)
    }
}
