//! Hyperparameter records shared by training, evaluation and the CLI.
//!
//! All of them deserialize from JSON with unknown keys rejected. Seeds have
//! no default and must always be given.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use cyclevae_autograd::conv2d_output_size;

/// Convolution geometry used by every encoder and decoder block.
pub const KERNEL_SIZE: usize = 5;
pub const STRIDE: usize = 2;
pub const PADDING: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_channels: usize,
    pub image_size: usize,
    /// Unspecified latent dimension.
    pub z_dim: usize,
    /// Specified latent dimension.
    pub s_dim: usize,
    /// Output channels of each encoder conv block; its length is the number
    /// of conv blocks on both sides.
    pub trunk_channels: Vec<usize>,
    /// Width of each decoder input branch.
    #[serde(default = "default_branch_width")]
    pub branch_width: usize,
}

fn default_branch_width() -> usize {
    256
}

impl ModelConfig {
    /// 28x28 grayscale, three conv blocks.
    pub fn mnist(z_dim: usize, s_dim: usize) -> Self {
        Self {
            image_channels: 1,
            image_size: 28,
            z_dim,
            s_dim,
            trunk_channels: vec![32, 64, 128],
            branch_width: 256,
        }
    }

    /// 64x64 colour, four conv blocks.
    pub fn sprites(z_dim: usize, s_dim: usize) -> Self {
        Self {
            image_channels: 3,
            image_size: 64,
            z_dim,
            s_dim,
            trunk_channels: vec![32, 64, 128, 256],
            branch_width: 256,
        }
    }

    pub fn conv_blocks(&self) -> usize {
        self.trunk_channels.len()
    }

    /// Spatial size entering each encoder block, followed by the size of the
    /// final feature map.
    pub fn spatial_sizes(&self) -> Result<Vec<usize>> {
        let mut sizes = vec![self.image_size];
        for _ in 0..self.conv_blocks() {
            let prev = *sizes.last().unwrap();
            let next = conv2d_output_size(prev, KERNEL_SIZE, STRIDE, PADDING)
                .map_err(|e| Error::Config(format!("image size {} too small for {} conv blocks: {e}", self.image_size, self.conv_blocks())))?;
            sizes.push(next);
        }
        Ok(sizes)
    }

    pub fn feature_size(&self) -> Result<usize> {
        let last = *self.spatial_sizes()?.last().unwrap();
        Ok(self.trunk_channels.last().copied().unwrap_or(0) * last * last)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.z_dim == 0 || self.s_dim == 0 {
            return bad(format!("z_dim and s_dim must be >= 1 (got {} and {})", self.z_dim, self.s_dim));
        }
        if self.image_channels == 0 {
            return bad("image_channels must be >= 1".into());
        }
        if self.trunk_channels.is_empty() || self.trunk_channels.contains(&0) {
            return bad(format!("trunk_channels must be non-empty and positive, got {:?}", self.trunk_channels));
        }
        if self.branch_width == 0 {
            return bad("branch_width must be >= 1".into());
        }
        let sizes = self.spatial_sizes()?;
        // every block must actually downsample
        if sizes.windows(2).any(|w| w[1] >= w[0] && w[0] > 1) {
            return bad(format!("image size {} does not halve through {} blocks", self.image_size, self.conv_blocks()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "one")]
    pub kl_weight: f64,
    #[serde(default = "one")]
    pub reverse_weight: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            kl_weight: 1.0,
            reverse_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("kl_weight", self.kl_weight), ("reverse_weight", self.reverse_weight)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub loss_weights: LossWeights,
    pub seed: u64,
    /// Iterations between checkpoints; 0 disables intermediate checkpoints.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub precision: Precision,
}

fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    2e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl TrainConfig {
    pub fn new(iterations: usize, seed: u64) -> Self {
        Self {
            iterations,
            batch_size: default_batch(),
            learning_rate: default_lr(),
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            loss_weights: LossWeights::default(),
            seed,
            checkpoint_every: 0,
            precision: Precision::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.iterations == 0 {
            return bad("iterations must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and > 0, got {}", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be > 0, got {}", self.adam_eps));
        }
        self.loss_weights.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "default_hidden")]
    pub hidden_units: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_probe_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_probe_batch")]
    pub batch_size: usize,
    /// Rescale each feature to zero mean and unit variance (training
    /// statistics) before the first layer, so accuracies do not depend on
    /// the arbitrary scale of an embedding.
    #[serde(default = "default_true")]
    pub standardize: bool,
    pub seed: u64,
}

fn default_hidden() -> usize {
    256
}
fn default_epochs() -> usize {
    30
}
fn default_probe_lr() -> f64 {
    1e-3
}
fn default_true() -> bool {
    true
}
fn default_probe_batch() -> usize {
    64
}

impl ProbeConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            hidden_units: default_hidden(),
            epochs: default_epochs(),
            learning_rate: default_probe_lr(),
            batch_size: default_probe_batch(),
            standardize: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_units == 0 || self.batch_size == 0 {
            return Err(Error::Config("probe hidden_units and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("probe learning_rate must be > 0, got {}", self.learning_rate)));
        }
        Ok(())
    }
}
