//! Cycle-consistent VAE for separating specified factors of variation (the
//! ones shared by a labelled pair) from unspecified ones, trained with only
//! pairwise similarity supervision.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod generation;
pub mod gradcheck;
pub mod image_io;
pub mod losses;
pub mod model;
pub mod train;

pub use cyclevae_autograd as autograd;
pub use config::{LossWeights, ModelConfig, Precision, ProbeConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::{LatentBatch, LatentCode, ModelParams};
pub use checkpoint::Checkpoint;
pub use train::{fit, TrainLog, Trainer};
pub use eval::{evaluate, EvalReport};
