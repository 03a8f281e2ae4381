use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{LabeledImageDataset, Split};
use crate::error::{Error, Result};

/// Tags every image as train, val or test.
///
/// `fractions` are the (train, val, test) shares and must sum to one. With
/// `disjoint_identities` whole classes are assigned to a split, so no class
/// appears in two splits; otherwise images are shuffled individually.
pub fn split_dataset(
    mut dataset: LabeledImageDataset,
    fractions: [f64; 3],
    seed: u64,
    disjoint_identities: bool,
) -> Result<LabeledImageDataset> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    let n = dataset.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = vec![Split::Train; n];
    if disjoint_identities {
        let mut classes: Vec<u32> = dataset.labels().to_vec();
        classes.sort_unstable();
        classes.dedup();
        classes.shuffle(&mut rng);
        let mut counts = vec![0usize; dataset.num_classes()];
        for &l in dataset.labels() {
            counts[l as usize] += 1;
        }
        let train_end = fractions[0] * n as f64;
        let val_end = (fractions[0] + fractions[1]) * n as f64;
        let mut assigned = 0usize;
        let mut class_split = vec![Split::Train; dataset.num_classes()];
        for &c in &classes {
            let mid = assigned as f64 + counts[c as usize] as f64 / 2.0;
            class_split[c as usize] = if mid < train_end {
                Split::Train
            } else if mid < val_end {
                Split::Val
            } else {
                Split::Test
            };
            assigned += counts[c as usize];
        }
        for (i, s) in splits.iter_mut().enumerate() {
            *s = class_split[dataset.label(i) as usize];
        }
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let n_train = (fractions[0] * n as f64).round() as usize;
        let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
        for (rank, &i) in order.iter().enumerate() {
            splits[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    dataset.set_splits(splits);
    Ok(dataset)
}
