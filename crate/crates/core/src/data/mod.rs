//! Labelled image collections, their sources and pair sampling.
//!
//! Labels are only ever used as pairwise-similarity supervision during
//! training (two images share a class or not) and as probe targets during
//! evaluation.

mod idx;
mod pairs;
mod split;
mod sprites;

pub use idx::{load_mnist_idx, parse_idx_images, parse_idx_labels, write_idx_images, write_idx_labels, IMAGES_MAGIC, LABELS_MAGIC};
pub use pairs::{sample_similar_pair_batch, PairBatch, PairSampler};
pub use split::split_dataset;
pub use sprites::{generate_toy_sprites, sprite_identity, write_toy_sprites, ShapeKind, SpriteIdentity, SpriteSet, ToySpriteConfig};

use cyclevae_autograd::{Scalar, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Images in `[0, 1]`, stored as one flat `[n, c, h, w]` buffer, with class
/// labels and a split tag per image.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageDataset {
    channels: usize,
    height: usize,
    width: usize,
    pixels: Vec<f32>,
    labels: Vec<u32>,
    num_classes: usize,
    splits: Vec<Split>,
}

impl LabeledImageDataset {
    /// Every image starts in the training split.
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<f32>, labels: Vec<u32>) -> Result<Self> {
        let size = channels * height * width;
        if size == 0 {
            return Err(Error::Consistency("image geometry must be non-empty".into()));
        }
        if pixels.len() != labels.len() * size {
            return Err(Error::Consistency(format!(
                "{} pixels do not hold {} images of {channels}x{height}x{width}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Consistency(format!("pixel value {p} outside [0, 1]")));
        }
        let num_classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
        let splits = vec![Split::Train; labels.len()];
        Ok(Self {
            channels,
            height,
            width,
            pixels,
            labels,
            num_classes,
            splits,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn split_of(&self, i: usize) -> Split {
        self.splits[i]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub(crate) fn set_splits(&mut self, splits: Vec<Split>) {
        assert_eq!(splits.len(), self.len());
        self.splits = splits;
    }

    /// Keeps the first `n` images (or all when fewer).
    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            self.pixels.truncate(n * self.image_len());
            self.labels.truncate(n);
            self.splits.truncate(n);
            self.num_classes = self.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
        }
    }

    /// Stacks the selected images into a `[k, c, h, w]` tensor.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&p| T::from_f32(p).unwrap()));
        }
        Ok(Tensor::new(vec![indices.len(), self.channels, self.height, self.width], data)?)
    }
}
