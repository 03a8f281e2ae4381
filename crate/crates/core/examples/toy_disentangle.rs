//! Trains on toy sprites and prints probe accuracies.
//!
//! `cargo run --release -p cyclevae --example toy_disentangle -- [iterations] [reverse_weight] [seed] [batch]`

use cyclevae::data::{generate_toy_sprites, split_dataset, ToySpriteConfig};
use cyclevae::{evaluate, fit, ModelConfig, ProbeConfig, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let iterations: usize = arg(0, "3000").parse().unwrap();
    let reverse_weight: f64 = arg(1, "1").parse().unwrap();
    let seed: u64 = arg(2, "1").parse().unwrap();
    let batch: usize = arg(3, "32").parse().unwrap();

    let mut sprites = ToySpriteConfig::new(10, 200, 28);
    sprites.channels = 1;
    let data = generate_toy_sprites(&sprites, seed).unwrap().dataset;
    let data = split_dataset(data, [0.8, 0.1, 0.1], seed, false).unwrap();
    let model = ModelConfig {
        image_channels: 1,
        image_size: 28,
        z_dim: 16,
        s_dim: 16,
        trunk_channels: vec![16, 32, 64],
        branch_width: 256,
    };
    let mut train = TrainConfig::new(iterations, seed);
    train.batch_size = batch;
    train.loss_weights.reverse_weight = reverse_weight;
    let (params, log) = fit(&data, &model, &train).unwrap();
    let k = (iterations / 10).max(1);
    let mean = |r: &[cyclevae::train::TrainRecord]| r.iter().map(|r| r.forward_loss).sum::<f64>() / r.len() as f64;
    let recs = &log.records;
    println!("forward loss first 10% {:.2} last 10% {:.2}", mean(&recs[..k]), mean(&recs[recs.len() - k..]));
    let last = recs.last().unwrap();
    println!("last: kl {:.2} recon {:.2} reverse {:.4}", last.kl, last.recon, last.reverse_loss);
    let report = evaluate(&params, &data, &ProbeConfig::new(seed)).unwrap();
    print!("{}", report.to_table());
}
