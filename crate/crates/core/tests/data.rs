use std::fs;

use cyclevae::data::{
    generate_toy_sprites, load_mnist_idx, sample_similar_pair_batch, split_dataset, sprite_identity, write_idx_images, write_idx_labels,
    LabeledImageDataset, PairSampler, Split, ToySpriteConfig, LABELS_MAGIC,
};
use cyclevae::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn idx_files_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (imgs, labs) = (dir.path().join("images"), dir.path().join("labels"));
    let pixels: Vec<u8> = (0..5 * 4 * 3).map(|i| (i * 37 % 256) as u8).collect();
    let labels = vec![3u8, 1, 4, 1, 5];
    write_idx_images(&imgs, 4, 3, &pixels).unwrap();
    write_idx_labels(&labs, &labels).unwrap();
    let ds = load_mnist_idx(&imgs, &labs).unwrap();
    assert_eq!((ds.len(), ds.channels(), ds.height(), ds.width()), (5, 1, 4, 3));
    let back: Vec<u8> = ds.pixels().iter().map(|&p| (p * 255.0).round() as u8).collect();
    assert_eq!(back, pixels);
    assert_eq!(ds.labels(), [3, 1, 4, 1, 5]);
    let full = pixels.iter().position(|&p| p == 255);
    if let Some(i) = full {
        assert_eq!(ds.pixels()[i], 1.0);
    }
    write_idx_images(&imgs, 1, 1, &[255, 0, 0, 0, 0]).unwrap();
    assert_eq!(load_mnist_idx(&imgs, &labs).unwrap().pixels()[0], 1.0);
}

#[test]
fn header_count_decides_the_image_count() {
    let dir = tempfile::tempdir().unwrap();
    let (imgs, labs) = (dir.path().join("images"), dir.path().join("labels"));
    write_idx_images(&imgs, 28, 28, &vec![7u8; 60 * 784]).unwrap();
    write_idx_labels(&labs, &[0u8; 60]).unwrap();
    let ds = load_mnist_idx(&imgs, &labs).unwrap();
    assert_eq!((ds.len(), ds.height(), ds.width()), (60, 28, 28));
}

#[test]
fn wrong_label_magic_names_the_expected_value() {
    let dir = tempfile::tempdir().unwrap();
    let (imgs, labs) = (dir.path().join("images"), dir.path().join("labels"));
    write_idx_images(&imgs, 2, 2, &[0u8; 8]).unwrap();
    let mut bytes = 2051u32.to_be_bytes().to_vec();
    bytes.extend(2u32.to_be_bytes());
    bytes.extend([0u8, 1]);
    fs::write(&labs, bytes).unwrap();
    let err = load_mnist_idx(&imgs, &labs).unwrap_err();
    assert!(matches!(err, Error::BadMagic { expected: LABELS_MAGIC, found: 2051, .. }));
    assert!(err.to_string().contains("2049"), "{err}");
}

fn balanced(n: usize, classes: u32) -> LabeledImageDataset {
    let labels: Vec<u32> = (0..n as u32).map(|i| i % classes).collect();
    LabeledImageDataset::new(1, 1, 1, (0..n).map(|i| i as f32 / n as f32).collect(), labels).unwrap()
}

#[test]
fn split_sizes_disjointness_and_determinism() {
    let ds = balanced(1000, 10);
    let s = split_dataset(ds.clone(), [0.8, 0.1, 0.1], 3, false).unwrap();
    let sizes: Vec<usize> = Split::ALL.iter().map(|&sp| s.indices(sp).len()).collect();
    assert_eq!(sizes, [800, 100, 100]);
    assert_eq!(s, split_dataset(ds.clone(), [0.8, 0.1, 0.1], 3, false).unwrap());
    assert_ne!(s, split_dataset(ds.clone(), [0.8, 0.1, 0.1], 4, false).unwrap());

    let d = split_dataset(ds, [0.8, 0.1, 0.1], 3, true).unwrap();
    let ids = |sp: Split| d.indices(sp).iter().map(|&i| d.label(i)).collect::<std::collections::BTreeSet<_>>();
    let (tr, va, te) = (ids(Split::Train), ids(Split::Val), ids(Split::Test));
    assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
    assert_eq!(tr.len() + va.len() + te.len(), 10);
}

#[test]
fn classes_are_drawn_uniformly() {
    let ds = split_dataset(balanced(1000, 10), [1.0, 0.0, 0.0], 1, false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = sample_similar_pair_batch(&ds, Split::Train, 10_000, &mut rng).unwrap();
    let mut counts = [0usize; 10];
    for (&a, &b) in batch.first.iter().zip(&batch.second) {
        assert_eq!(ds.label(a), ds.label(b));
        assert_ne!(a, b);
        counts[ds.label(a) as usize] += 1;
    }
    for c in counts {
        assert!((c as f64 / 10_000.0 - 0.1).abs() <= 0.02, "{counts:?}");
    }
}

#[test]
fn a_two_member_class_pairs_its_two_images() {
    let ds = LabeledImageDataset::new(1, 1, 1, vec![0.0, 0.5, 1.0], vec![0, 0, 1]).unwrap();
    let ds = split_dataset(ds, [1.0, 0.0, 0.0], 0, false).unwrap();
    let sampler = PairSampler::new(&ds, Split::Train).unwrap();
    assert_eq!(sampler.num_classes(), 1);
    let b = sampler.sample(20, &mut ChaCha8Rng::seed_from_u64(1));
    for (&x, &y) in b.first.iter().zip(&b.second) {
        assert_eq!([x.min(y), x.max(y)], [0, 1]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn pairs_always_share_labels(labels in proptest::collection::vec(0u32..6, 4..60), seed in any::<u64>()) {
        let n = labels.len();
        let ds = LabeledImageDataset::new(1, 1, 1, vec![0.0; n], labels).unwrap();
        let ds = split_dataset(ds, [1.0, 0.0, 0.0], seed, false).unwrap();
        match PairSampler::new(&ds, Split::Train) {
            Ok(s) => {
                let b = s.sample(32, &mut ChaCha8Rng::seed_from_u64(seed));
                for (&x, &y) in b.first.iter().zip(&b.second) {
                    prop_assert_eq!(ds.label(x), ds.label(y));
                    prop_assert_ne!(x, y);
                }
            }
            Err(e) => prop_assert!(matches!(e, Error::Sampling(_))),
        }
    }
}

#[test]
fn sprite_counts_and_identity_factors() {
    let mut c = ToySpriteConfig::new(10, 100, 16);
    c.channels = 1;
    let set = generate_toy_sprites(&c, 8).unwrap();
    assert_eq!(set.dataset.len(), 1000);
    assert_eq!(set.dataset.num_classes(), 10);
    for (id, ident) in set.identities.iter().enumerate() {
        assert_eq!(*ident, sprite_identity(8, id));
    }

    c.vary_nuisance = false;
    c.images_per_identity = 3;
    let fixed = generate_toy_sprites(&c, 8).unwrap().dataset;
    assert_eq!(fixed.image(0), fixed.image(2));
    assert_ne!(fixed.image(0), fixed.image(3));
    assert!(fixed.pixels().iter().all(|&p| (0.0..=1.0).contains(&p)));
}

#[test]
fn bundled_mnist_subset_loads_when_present() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let (imgs, labs) = (root.join("images-idx3-ubyte"), root.join("labels-idx1-ubyte"));
    if !imgs.exists() {
        eprintln!("skipping: run scripts/fetch_mnist.sh to fetch the MNIST subset");
        return;
    }
    let ds = load_mnist_idx(&imgs, &labs).unwrap();
    assert_eq!((ds.height(), ds.width(), ds.num_classes()), (28, 28, 10));
    assert!(ds.pixels().iter().all(|&p| (0.0..=1.0).contains(&p)));
}
