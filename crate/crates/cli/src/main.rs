//! `cyclevae` command-line interface.

mod run_config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use cyclevae::autograd::{op_suite, OpKind, Scalar};
use cyclevae::data::{generate_toy_sprites, write_toy_sprites, LabeledImageDataset, Split};
use cyclevae::eval::{extract_embeddings, pca_project_2d, EmbeddingSource};
use cyclevae::generation::{conditional_sample, interpolation_grid, swap_grid};
use cyclevae::gradcheck::{model_suite, MODEL_TOLERANCE, OP_TOLERANCE};
use cyclevae::{evaluate, Checkpoint, Precision, TrainLog, Trainer};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use run_config::{RunConfig, ToyDataConfig};

#[derive(Parser)]
#[command(name = "cyclevae", version, about = "Cycle-consistent VAE with a specified/unspecified latent split")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes model.ckpt and train_log.tsv to the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit classifier probes on z and s and report test accuracies.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides the probe seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a swap, interpolation or conditional-sampling grid from test images.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        seed: u64,
        /// Grid rows and columns (swap), or sources and samples (sample).
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Interpolation steps along each axis.
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every op and both losses.
    Gradcheck {
        /// Corrupts the backward pass of one op; for testing the checker.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Render a toy sprite dataset to images/ and labels.csv.
    MakeToyData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Swap,
    Interp,
    Sample,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Swap => "swap",
            Mode::Interp => "interp",
            Mode::Sample => "sample",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Train { config, resume, out } => cmd_train(&config, resume.as_deref(), out),
        Command::Eval {
            config,
            checkpoint,
            seed,
            out,
        } => cmd_eval(&config, &checkpoint, seed, out),
        Command::Generate {
            config,
            checkpoint,
            mode,
            seed,
            count,
            steps,
            out,
        } => cmd_generate(&config, &checkpoint, mode, seed, count, steps, out),
        Command::Gradcheck { corrupt } => cmd_gradcheck(corrupt.as_deref()),
        Command::MakeToyData { config, out } => cmd_make_toy_data(&config, &out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

/// `CYCLEVAE_THREADS` caps the rayon pool; unset means one thread per core.
fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("CYCLEVAE_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("CYCLEVAE_THREADS must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn load_data(config: &RunConfig, base: &Path) -> Result<LabeledImageDataset> {
    config.dataset.load(base).context("cannot load dataset")
}

fn cmd_train(config_path: &Path, resume: Option<&Path>, out: Option<PathBuf>) -> Result<ExitCode> {
    let (config, base) = RunConfig::load(config_path)?;
    let out = out.unwrap_or_else(|| config.output_dir(&base));
    let data = load_data(&config, &base)?;
    fs::create_dir_all(out.join("checkpoints")).with_context(|| format!("cannot create {}", out.display()))?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&config)?)?;
    let resume = resume.map(Checkpoint::load).transpose()?;
    if let Some(ckpt) = &resume {
        if ckpt.params.config() != &config.model {
            bail!("checkpoint model does not match the config's model section");
        }
    }
    let log = match config.train.precision {
        Precision::F32 => train_with::<f32>(&config, &data, resume.as_ref(), &out)?,
        Precision::F64 => train_with::<f64>(&config, &data, resume.as_ref(), &out)?,
    };
    if let Some(last) = log.records.last() {
        println!(
            "trained {} iterations: forward_loss={:.4} reverse_loss={:.6}",
            last.iteration, last.forward_loss, last.reverse_loss
        );
    }
    println!("wrote {}", out.join("model.ckpt").display());
    Ok(ExitCode::SUCCESS)
}

fn train_with<T: Scalar>(config: &RunConfig, data: &LabeledImageDataset, resume: Option<&Checkpoint>, out: &Path) -> Result<TrainLog> {
    let mut trainer = match resume {
        Some(ckpt) => Trainer::<T>::resume(data, ckpt, config.train.clone())?,
        None => Trainer::<T>::new(data, &config.model, config.train.clone())?,
    };
    let total = config.train.iterations as u64;
    let every = config.train.checkpoint_every as u64;
    let report_every = (total / 20).max(1);
    let log_path = out.join("train_log.tsv");
    let mut log = TrainLog::default();
    while trainer.iteration() < total {
        let record = trainer.step()?;
        let it = record.iteration;
        if it % report_every == 0 || it == total {
            eprintln!(
                "iter {it}/{total} forward={:.3} kl={:.3} recon={:.3} reverse={:.5}",
                record.forward_loss, record.kl, record.recon, record.reverse_loss
            );
        }
        log.push(record);
        if every > 0 && it % every == 0 {
            trainer.checkpoint().save(&out.join("checkpoints").join(format!("iter_{it:07}.ckpt")))?;
            log.write(&log_path)?;
        }
    }
    trainer.checkpoint().save(&out.join("model.ckpt"))?;
    log.write(&log_path)?;
    Ok(log)
}

fn load_model(config: &RunConfig, checkpoint: &Path) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(checkpoint)?;
    if ckpt.params.config() != &config.model {
        bail!("{} was trained with a different model configuration", checkpoint.display());
    }
    Ok(ckpt)
}

fn cmd_eval(config_path: &Path, checkpoint: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<ExitCode> {
    let (config, base) = RunConfig::load(config_path)?;
    let out = out.unwrap_or_else(|| config.output_dir(&base));
    let ckpt = load_model(&config, checkpoint)?;
    let data = load_data(&config, &base)?;
    let mut probe = config.probe.clone();
    if let Some(seed) = seed {
        probe.seed = seed;
    }
    let report = evaluate(&ckpt.params, &data, &probe)?;
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    report.write(&out, "eval")?;

    let test = data.indices(Split::Test);
    for source in [EmbeddingSource::ZSpace, EmbeddingSource::SSpace] {
        let emb = extract_embeddings(&ckpt.params, &data, &test, source)?;
        let proj = pca_project_2d(&emb)?;
        let mut tsv = String::from("x\ty\tlabel\n");
        for (p, l) in proj.points.iter().zip(&emb.labels) {
            tsv.push_str(&format!("{}\t{}\t{l}\n", p[0], p[1]));
        }
        let name = match source {
            EmbeddingSource::ZSpace => "pca_z.tsv",
            EmbeddingSource::SSpace => "pca_s.tsv",
        };
        fs::write(out.join(name), tsv)?;
    }
    print!("{}", report.to_table());
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    config_path: &Path,
    checkpoint: &Path,
    mode: Mode,
    seed: u64,
    count: usize,
    steps: usize,
    out: Option<PathBuf>,
) -> Result<ExitCode> {
    let (config, base) = RunConfig::load(config_path)?;
    let out = out.unwrap_or_else(|| config.output_dir(&base));
    let ckpt = load_model(&config, checkpoint)?;
    let data = load_data(&config, &base)?;
    let params = &ckpt.params;
    if count == 0 {
        bail!("--count must be >= 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test = data.indices(Split::Test);
    if test.is_empty() {
        bail!("the test split is empty");
    }
    test.shuffle(&mut rng);
    let pick = |n: usize| -> Vec<usize> { test.iter().cycle().take(n).copied().collect() };
    let grid = match mode {
        Mode::Swap => {
            let rows = data.batch::<f32>(&pick(count))?;
            let cols = data.batch::<f32>(&pick(2 * count)[count..])?;
            swap_grid(&rows, &cols, params)?
        }
        Mode::Interp => {
            let a = test[0];
            let b = test.iter().copied().find(|&i| data.label(i) != data.label(a)).unwrap_or(test[test.len() - 1]);
            interpolation_grid(&data.batch::<f32>(&[a])?, &data.batch::<f32>(&[b])?, steps, params)?
        }
        Mode::Sample => conditional_sample(&data.batch::<f32>(&pick(count))?, count, params, &mut rng)?,
    };
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    let path = grid.write_named(&out, mode.name(), seed)?;
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(corrupt: Option<&str>) -> Result<ExitCode> {
    let fault = corrupt
        .map(|name| OpKind::from_name(name).with_context(|| format!("unknown op {name:?}")))
        .transpose()?;
    let mut failed = Vec::new();
    for check in op_suite(fault)? {
        let err = check.report.max_rel_error;
        let ok = err < OP_TOLERANCE;
        println!("op\t{}\t{err:.3e}\t{}", check.op.name(), if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed.push(check.op.name().to_string());
        }
    }
    for check in model_suite(fault)? {
        let err = check.report.max_rel_error;
        let ok = err < MODEL_TOLERANCE;
        println!("model\t{}\t{err:.3e}\t{}", check.name, if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed.push(check.name.to_string());
        }
    }
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error: gradient check failed for {}", failed.join(", "));
        Ok(ExitCode::FAILURE)
    }
}

fn cmd_make_toy_data(config_path: &Path, out: &Path) -> Result<ExitCode> {
    let text = fs::read_to_string(config_path).with_context(|| format!("cannot read config {}", config_path.display()))?;
    let config: ToyDataConfig = serde_json::from_str(&text).with_context(|| format!("invalid config {}", config_path.display()))?;
    let set = generate_toy_sprites(&config.sprites, config.seed)?;
    if set.clamped > 0 {
        eprintln!("warning: {} sprite placements clamped to stay on the canvas", set.clamped);
    }
    let n = write_toy_sprites(&set.dataset, out)?;
    println!("wrote {n} images to {}", out.display());
    Ok(ExitCode::SUCCESS)
}
