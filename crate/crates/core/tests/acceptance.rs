//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs every criterion by default; pass criterion numbers to run a subset,
//! e.g. `cargo test --release -p cyclevae --test acceptance -- 1 2 8`.
//! Failures are reported but only fail the process with `--strict`, so the
//! workspace test run completes and shows every line.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use cyclevae::autograd::{op_suite, Graph, Tensor};
use cyclevae::checkpoint::Checkpoint;
use cyclevae::data::{generate_toy_sprites, load_mnist_idx, split_dataset, LabeledImageDataset, Split, ToySpriteConfig};
use cyclevae::generation::{interpolation_grid, swap_grid};
use cyclevae::gradcheck::model_suite;
use cyclevae::image_io::{quantize, read_pgm, write_image, ImageFormat};
use cyclevae::losses::{kl_standard_normal, reverse_cycle_loss, reverse_cycle_means};
use cyclevae::model::{standard_normal, Role};
use cyclevae::train::{train_step_reverse, AdamState};
use cyclevae::{evaluate, EvalReport, ModelConfig, ModelParams, ProbeConfig, TrainConfig, TrainLog, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OP_TOL: f64 = 1e-4;
const MODEL_TOL: f64 = 1e-3;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn within(limit_s: u64, elapsed: Duration) -> (bool, String) {
    (elapsed <= Duration::from_secs(limit_s), format!("{:.1}s of {limit_s}s", elapsed.as_secs_f64()))
}

fn tiny() -> ModelConfig {
    ModelConfig {
        image_channels: 1,
        image_size: 8,
        z_dim: 3,
        s_dim: 2,
        trunk_channels: vec![3, 4],
        branch_width: 5,
    }
}

fn noise_images(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(&[n, 1, size, size], |_| rng.gen_range(0.0..1.0))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let ops = op_suite(None).expect("op suite");
    let models = model_suite(None).expect("model suite");
    let op_worst = ops.iter().map(|c| (c.report.max_rel_error, c.op.name())).fold((0.0, ""), |a, b| if b.0 > a.0 { b } else { a });
    let model_worst = models.iter().map(|c| (c.report.max_rel_error, c.name)).fold((0.0, ""), |a, b| if b.0 > a.0 { b } else { a });
    let (fast, time) = within(120, start.elapsed());
    let pass = op_worst.0 < OP_TOL && model_worst.0 < MODEL_TOL && models.len() == 3 && fast;
    outcome(
        pass,
        format!(
            "{} ops, worst {} {:.2e} (< {OP_TOL:e}); losses worst {} {:.2e} (< {MODEL_TOL:e}); {time}",
            ops.len(),
            op_worst.1,
            op_worst.0,
            model_worst.1,
            model_worst.0
        ),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut kl_ok = true;
    let mut zeros = 0;
    for i in 0..100 {
        for j in 0..100 {
            let mu = if i == 50 { 0.0 } else { -4.0 + 8.0 * i as f64 / 99.0 };
            let lv = if j == 50 { 0.0 } else { -6.0 + 12.0 * j as f64 / 99.0 };
            let mut g = Graph::<f64>::new();
            let m = g.constant(Tensor::new(vec![1, 1], vec![mu]).unwrap());
            let l = g.constant(Tensor::new(vec![1, 1], vec![lv]).unwrap());
            let kl = kl_standard_normal(&mut g, m, l).unwrap();
            let v = g.value(kl).data()[0];
            kl_ok &= v >= 0.0;
            if v == 0.0 {
                zeros += 1;
                kl_ok &= mu == 0.0 && lv == 0.0;
            }
        }
    }
    kl_ok &= zeros == 1;

    let params = ModelParams::<f64>::init(&tiny(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut self_zero = true;
    let mut triangle = true;
    for _ in 0..100 {
        let (x1, x2) = (noise_images(4, 8, &mut rng), noise_images(4, 8, &mut rng));
        let z: Tensor<f64> = standard_normal(&[4, 3], &mut rng);
        let mut g = Graph::new();
        let model = params.bind(&mut g, false).unwrap();
        let (a, b, zv) = (g.constant(x1), g.constant(x2), g.constant(z.clone()));
        let same = reverse_cycle_loss(&mut g, &model, a, a, zv).unwrap();
        self_zero &= g.value(same).data()[0] == 0.0;
        let pairwise = reverse_cycle_loss(&mut g, &model, a, b, zv).unwrap();
        let (m1, m2) = reverse_cycle_means(&mut g, &model, a, b, zv).unwrap();
        let absolute: f64 = z
            .data()
            .iter()
            .zip(g.value(m1).data())
            .zip(g.value(m2).data())
            .map(|((z, p), q)| (z - p).abs() + (z - q).abs())
            .sum::<f64>()
            / 4.0;
        triangle &= g.value(pairwise).data()[0] <= absolute;
    }
    let (fast, time) = within(60, start.elapsed());
    outcome(
        kl_ok && self_zero && triangle && fast,
        format!("KL grid 1e4 points ok={kl_ok}; reverse(x,x)=0 ok={self_zero}; pairwise<=absolute on 100 batches ok={triangle}; {time}"),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig {
        image_size: 12,
        trunk_channels: vec![4, 6],
        branch_width: 8,
        ..tiny()
    };
    let mut params = ModelParams::<f32>::init(&cfg, 3).unwrap();
    let mut state = AdamState::new(&params);
    let train = TrainConfig::new(1, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let snapshot = |p: &ModelParams<f32>, r: Role| -> Vec<Vec<f32>> {
        p.blocks().iter().filter(|b| b.role() == r).map(|b| b.tensor.data().to_vec()).collect()
    };
    let decoder = snapshot(&params, Role::Decoder);
    let (mut dec_ok, mut enc_ok, mut nonzero) = (true, true, 0);
    for step in 0..200 {
        let enc_before = snapshot(&params, Role::Encoder);
        let x1: Tensor<f32> = Tensor::from_fn(&[4, 1, 12, 12], |_| rng.gen_range(0.0..1.0));
        // every tenth step uses identical batches, which has zero gradient
        let x2 = if step % 10 == 0 { x1.clone() } else { Tensor::from_fn(&[4, 1, 12, 12], |_| rng.gen_range(0.0..1.0)) };
        let loss = train_step_reverse(&mut params, &mut state, &x1, &x2, &train, &mut rng).unwrap();
        dec_ok &= snapshot(&params, Role::Decoder) == decoder;
        let moved = snapshot(&params, Role::Encoder) != enc_before;
        if loss > 0.0 {
            nonzero += 1;
            enc_ok &= moved;
        }
    }
    let (fast, time) = within(120, start.elapsed());
    outcome(
        dec_ok && enc_ok && nonzero >= 150 && fast,
        format!("200 reverse steps: decoder bitwise unchanged={dec_ok}; encoder moved on all {nonzero} nonzero-loss steps={enc_ok}; {time}"),
    )
}

/// Shared configuration of criteria 4, 6 and 7: default sprites and trainer
/// settings, with batch 32 and a narrower trunk to fit the time budget on one core.
fn toy_setup() -> (LabeledImageDataset, ModelConfig, TrainConfig, ProbeConfig) {
    let sprites = ToySpriteConfig::new(10, 200, 28);
    let data = generate_toy_sprites(&sprites, 1).unwrap().dataset;
    let data = split_dataset(data, [0.8, 0.1, 0.1], 1, false).unwrap();
    let model = ModelConfig {
        image_channels: sprites.channels,
        image_size: 28,
        z_dim: 16,
        s_dim: 16,
        trunk_channels: vec![16, 32, 64],
        branch_width: 256,
    };
    let mut train = TrainConfig::new(3000, 1);
    train.batch_size = 32;
    (data, model, train, ProbeConfig::new(1))
}

struct ToyRun {
    report: EvalReport,
    log: TrainLog,
    checkpoint: Vec<u8>,
    elapsed: Duration,
}

fn toy_run(reverse_weight: f64) -> ToyRun {
    let (data, model, mut train, probe) = toy_setup();
    train.loss_weights.reverse_weight = reverse_weight;
    let start = Instant::now();
    let mut trainer = Trainer::<f32>::new(&data, &model, train).unwrap();
    let mut log = TrainLog::default();
    trainer.run(&mut log, |_| Ok(())).unwrap();
    let checkpoint = trainer.checkpoint().to_bytes();
    let report = evaluate(&Checkpoint::from_bytes(&checkpoint).unwrap().params, &data, &probe).unwrap();
    ToyRun {
        report,
        log,
        checkpoint,
        elapsed: start.elapsed(),
    }
}

fn accuracies(r: &EvalReport) -> String {
    format!("z test {:.1}%, s test {:.1}%", 100.0 * r.z_test_acc, 100.0 * r.s_test_acc)
}

fn criterion_4(run: &ToyRun) -> Outcome {
    let r = &run.report;
    let (fast, time) = within(15 * 60, run.elapsed);
    let chance = 1.0 / 10.0;
    outcome(
        r.s_test_acc >= 0.95 && r.z_test_acc <= chance + 0.15 && fast,
        format!("{} (need s >= 95%, z <= 25%); {time}", accuracies(r)),
    )
}

fn criterion_6(full: &ToyRun, ablated: &ToyRun) -> Outcome {
    let gain = 100.0 * (ablated.report.z_test_acc - full.report.z_test_acc);
    let (fast, time) = within(15 * 60, ablated.elapsed);
    outcome(
        gain >= 10.0 && fast,
        format!(
            "reverse_weight=0: {}; z gain {gain:+.1} points over the full run (need >= +10); {time}",
            accuracies(&ablated.report)
        ),
    )
}

fn criterion_7(first: &ToyRun, second: &ToyRun) -> Outcome {
    let logs = first.log.loss_trace() == second.log.loss_trace();
    let ckpt = first.checkpoint == second.checkpoint;
    outcome(
        logs && ckpt,
        format!(
            "TrainLogs identical={logs} ({} records); checkpoints bitwise identical={ckpt} ({} bytes)",
            first.log.records.len(),
            first.checkpoint.len()
        ),
    )
}

fn criterion_5() -> Outcome {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let (imgs, labs) = (root.join("images-idx3-ubyte"), root.join("labels-idx1-ubyte"));
    let data = match load_mnist_idx(&imgs, &labs) {
        Ok(d) => d,
        Err(e) => return outcome(false, format!("MNIST unavailable ({e}); run scripts/fetch_mnist.sh")),
    };
    let mut data = data;
    data.truncate(10_000);
    let data = split_dataset(data, [0.8, 0.1, 0.1], 1, false).unwrap();
    let mut model = ModelConfig::mnist(16, 16);
    model.trunk_channels = vec![16, 32, 64];
    let mut train = TrainConfig::new(8000, 1);
    train.batch_size = 32;
    let start = Instant::now();
    let (params, _) = cyclevae::fit(&data, &model, &train).unwrap();
    let report = evaluate(&params, &data, &ProbeConfig::new(1)).unwrap();
    let (fast, time) = within(45 * 60, start.elapsed());
    outcome(
        report.s_test_acc >= 0.90 && report.z_test_acc <= 0.45 && fast,
        format!(
            "{} images ({} train), {} (need s >= 90%, z <= 45%); {time}",
            data.len(),
            data.indices(Split::Train).len(),
            accuracies(&report)
        ),
    )
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig {
        image_size: 28,
        z_dim: 16,
        s_dim: 16,
        trunk_channels: vec![8, 16, 32],
        branch_width: 64,
        ..tiny()
    };
    let params = ModelParams::<f32>::init(&cfg, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let imgs: Tensor<f32> = Tensor::from_fn(&[6, 1, 28, 28], |_| rng.gen_range(0.0..1.0));
    let recon = params.reconstruct(&imgs).unwrap();
    let cell = |i: usize| &recon.data()[i * 784..(i + 1) * 784];
    let grid = swap_grid(&imgs, &imgs, &params).unwrap();
    let diagonal = (0..6).all(|i| grid.cell(i, i) == cell(i));

    let one = |i: usize| Tensor::new(vec![1, 1, 28, 28], imgs.data()[i * 784..(i + 1) * 784].to_vec()).unwrap();
    let interp = interpolation_grid(&one(0), &one(1), 8, &params).unwrap();
    let corners = interp.cell(0, 0) == cell(0) && interp.cell(7, 7) == cell(1);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("grid.pgm");
    let (h, w, canvas) = grid.to_canvas();
    write_image(&path, 1, h, w, &canvas, ImageFormat::Pgm).unwrap();
    let back = read_pgm(&path).unwrap();
    let expect: Vec<u8> = canvas.iter().map(|&p| quantize(p).unwrap()).collect();
    let roundtrip = (back.height, back.width) == (h, w) && back.bytes == expect;
    let (fast, time) = within(60, start.elapsed());
    outcome(
        diagonal && corners && roundtrip && fast,
        format!("self-swap diagonal={diagonal}; interpolation corners={corners}; PGM roundtrip={roundtrip}; {time}"),
    )
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let strict = args.iter().any(|a| a == "--strict");
    let wanted: Vec<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let run = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let mut results: Vec<(u32, Outcome)> = Vec::new();
    let mut report = |n: u32, o: Outcome| {
        println!("criterion {n}: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o));
    };
    for (n, f) in [(1, criterion_1 as fn() -> Outcome), (2, criterion_2), (3, criterion_3), (8, criterion_8)] {
        if run(n) {
            report(n, f());
        }
    }
    if run(4) || run(6) || run(7) {
        let full = toy_run(1.0);
        if run(4) {
            report(4, criterion_4(&full));
        }
        if run(6) {
            report(6, criterion_6(&full, &toy_run(0.0)));
        }
        if run(7) {
            report(7, criterion_7(&full, &toy_run(1.0)));
        }
    }
    if run(5) {
        report(5, criterion_5());
    }
    let failed: Vec<u32> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    println!("acceptance: {} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
    }
    if failed.is_empty() || !strict {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
