//! Times training iterations on toy sprites.
//!
//! `cargo run --release -p cyclevae --example train_speed -- <size> <channels> <batch> <trunk,channels> [iters]`

use std::time::Instant;

use cyclevae::data::{generate_toy_sprites, ToySpriteConfig};
use cyclevae::{ModelConfig, TrainConfig, Trainer};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let size: usize = arg(0, "28").parse().unwrap();
    let channels: usize = arg(1, "1").parse().unwrap();
    let batch: usize = arg(2, "32").parse().unwrap();
    let trunk: Vec<usize> = arg(3, "16,32,64").split(',').map(|s| s.parse().unwrap()).collect();
    let iters: usize = arg(4, "10").parse().unwrap();

    let mut sprites = ToySpriteConfig::new(10, 50, size);
    sprites.channels = channels;
    let data = generate_toy_sprites(&sprites, 0).unwrap().dataset;
    let model = ModelConfig {
        image_channels: channels,
        image_size: size,
        z_dim: 16,
        s_dim: 16,
        trunk_channels: trunk,
        branch_width: 256,
    };
    let mut config = TrainConfig::new(iters, 0);
    config.batch_size = batch;
    let mut trainer = Trainer::<f32>::new(&data, &model, config).unwrap();
    let start = Instant::now();
    for _ in 0..iters {
        let r = trainer.step().unwrap();
        println!("{} fwd {:.2} rev {:.4} {:.0} ms", r.iteration, r.forward_loss, r.reverse_loss, r.wall_ms);
    }
    println!("mean {:.1} ms/iter", start.elapsed().as_secs_f64() * 1e3 / iters as f64);
}
