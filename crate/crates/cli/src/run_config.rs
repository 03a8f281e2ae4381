//! JSON run configuration. Unknown keys are rejected and every seed must be
//! given explicitly. Relative paths are resolved against the directory of the
//! config file.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cyclevae::data::{generate_toy_sprites, load_mnist_idx, split_dataset, LabeledImageDataset, ToySpriteConfig};
use cyclevae::{ModelConfig, ProbeConfig, TrainConfig};
use serde::{Deserialize, Serialize};

fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MnistSpec {
    pub images: PathBuf,
    pub labels: PathBuf,
    /// Keep only the first `limit` images.
    #[serde(default)]
    pub limit: Option<usize>,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    /// Seed of the train/val/test partition.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    pub sprites: ToySpriteConfig,
    /// Seed of both rendering and the partition.
    pub seed: u64,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default)]
    pub disjoint_identities: bool,
}

/// `{"mnist": {...}}` or `{"toy": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSpec {
    Mnist(MnistSpec),
    Toy(ToySpec),
}

impl DatasetSpec {
    /// Loads or renders the images and tags the splits.
    pub fn load(&self, base: &Path) -> Result<LabeledImageDataset> {
        match self {
            DatasetSpec::Mnist(m) => {
                let mut ds = load_mnist_idx(&base.join(&m.images), &base.join(&m.labels))?;
                if let Some(n) = m.limit {
                    ds.truncate(n);
                }
                Ok(split_dataset(ds, m.split, m.seed, false)?)
            }
            DatasetSpec::Toy(t) => {
                let set = generate_toy_sprites(&t.sprites, t.seed)?;
                if set.clamped > 0 {
                    eprintln!("warning: {} sprite placements clamped to stay on the canvas", set.clamped);
                }
                Ok(split_dataset(set.dataset, t.split, t.seed, t.disjoint_identities)?)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub output_dir: PathBuf,
}

impl RunConfig {
    /// Reads, parses and validates; returns the config and its directory.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let config: Self = serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        config.model.validate()?;
        config.train.validate()?;
        config.probe.validate()?;
        if let DatasetSpec::Toy(t) = &config.dataset {
            t.sprites.validate()?;
            if (t.sprites.channels, t.sprites.image_size) != (config.model.image_channels, config.model.image_size) {
                bail!(
                    "toy images are {}x{} px with {} channels but the model expects {}x{} with {}",
                    t.sprites.image_size,
                    t.sprites.image_size,
                    t.sprites.channels,
                    config.model.image_size,
                    config.model.image_size,
                    config.model.image_channels
                );
            }
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((config, base))
    }

    pub fn output_dir(&self, base: &Path) -> PathBuf {
        base.join(&self.output_dir)
    }
}

/// Input of `make-toy-data`: `{"sprites": {...}, "seed": n}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyDataConfig {
    pub sprites: ToySpriteConfig,
    pub seed: u64,
}
