//! Trains on the bundled MNIST subset and prints probe accuracies.
//!
//! `cargo run --release -p cyclevae --example mnist_run -- [iterations] [learning_rate] [kl_weight] [reverse_weight] [batch]`

use cyclevae::data::{load_mnist_idx, split_dataset};
use cyclevae::{evaluate, fit, ModelConfig, ProbeConfig, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let iterations: usize = arg(0, "8000").parse().unwrap();
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let data = load_mnist_idx(root.join("images-idx3-ubyte"), root.join("labels-idx1-ubyte")).unwrap();
    let data = split_dataset(data, [0.8, 0.1, 0.1], 1, false).unwrap();
    let mut model = ModelConfig::mnist(16, 16);
    model.trunk_channels = vec![16, 32, 64];
    let mut train = TrainConfig::new(iterations, 1);
    train.learning_rate = arg(1, "2e-4").parse().unwrap();
    train.loss_weights.kl_weight = arg(2, "1").parse().unwrap();
    train.loss_weights.reverse_weight = arg(3, "1").parse().unwrap();
    train.batch_size = arg(4, "32").parse().unwrap();
    let start = std::time::Instant::now();
    let (params, log) = fit(&data, &model, &train).unwrap();
    let last = log.records.last().unwrap();
    println!(
        "{:.0}s last: forward {:.2} kl {:.2} recon {:.2} reverse {:.4}",
        start.elapsed().as_secs_f64(),
        last.forward_loss,
        last.kl,
        last.recon,
        last.reverse_loss
    );
    print!("{}", evaluate(&params, &data, &ProbeConfig::new(1)).unwrap().to_table());
}
