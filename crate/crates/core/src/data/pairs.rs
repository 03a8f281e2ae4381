use std::collections::BTreeMap;

use rand::Rng;

use super::{LabeledImageDataset, Split};
use crate::error::{Error, Result};

/// Index pairs; `first[i]` and `second[i]` share a class label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairBatch {
    pub first: Vec<usize>,
    pub second: Vec<usize>,
}

/// Draws same-class pairs from one split: a class uniformly among those
/// with at least two members, then two distinct members uniformly.
#[derive(Debug, Clone)]
pub struct PairSampler {
    classes: Vec<Vec<usize>>,
}

impl PairSampler {
    pub fn new(dataset: &LabeledImageDataset, split: Split) -> Result<Self> {
        let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for i in dataset.indices(split) {
            by_class.entry(dataset.label(i)).or_default().push(i);
        }
        let classes: Vec<Vec<usize>> = by_class.into_values().filter(|m| m.len() >= 2).collect();
        if classes.is_empty() {
            return Err(Error::Sampling(format!(
                "no class in the {} split has two or more images",
                split.name()
            )));
        }
        Ok(Self { classes })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn sample(&self, batch_size: usize, rng: &mut impl Rng) -> PairBatch {
        let mut first = Vec::with_capacity(batch_size);
        let mut second = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let members = &self.classes[rng.gen_range(0..self.classes.len())];
            let a = rng.gen_range(0..members.len());
            let mut b = rng.gen_range(0..members.len() - 1);
            if b >= a {
                b += 1;
            }
            first.push(members[a]);
            second.push(members[b]);
        }
        PairBatch { first, second }
    }
}

/// Convenience wrapper around [`PairSampler`].
pub fn sample_similar_pair_batch(
    dataset: &LabeledImageDataset,
    split: Split,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<PairBatch> {
    Ok(PairSampler::new(dataset, split)?.sample(batch_size, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pairs_share_labels_and_are_distinct() {
        let labels: Vec<u32> = (0..50).map(|i| (i * 7 % 5) as u32).collect();
        let ds = LabeledImageDataset::new(1, 1, 1, vec![0.0; 50], labels).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = sample_similar_pair_batch(&ds, Split::Train, 500, &mut rng).unwrap();
        for (&a, &b) in batch.first.iter().zip(&batch.second) {
            assert_eq!(ds.label(a), ds.label(b));
            assert_ne!(a, b);
        }
    }

    #[test]
    fn two_member_class_pairs_both() {
        let ds = LabeledImageDataset::new(1, 1, 1, vec![0.0; 3], vec![0, 1, 1]).unwrap();
        let sampler = PairSampler::new(&ds, Split::Train).unwrap();
        assert_eq!(sampler.num_classes(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sampler.sample(20, &mut rng);
        for (&a, &b) in batch.first.iter().zip(&batch.second) {
            let mut p = [a, b];
            p.sort();
            assert_eq!(p, [1, 2]);
        }
    }

    #[test]
    fn singleton_classes_are_an_error() {
        let ds = LabeledImageDataset::new(1, 1, 1, vec![0.0; 3], vec![0, 1, 2]).unwrap();
        assert!(matches!(PairSampler::new(&ds, Split::Train), Err(Error::Sampling(_))));
        assert!(matches!(PairSampler::new(&ds, Split::Test), Err(Error::Sampling(_))));
    }
}
