//! Alternating optimization: every iteration runs one forward-cycle step that
//! updates the whole model, then one reverse-cycle step that updates only the
//! encoder.
//!
//! All randomness of iteration `i` (pair sampling, posterior noise, prior
//! draws, reverse-cycle images) comes from one generator seeded with the run
//! seed on stream `i + 1`, so a run resumed from a checkpoint replays exactly
//! the remaining iterations. Stream 0 is used by parameter initialization.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use cyclevae_autograd::{Graph, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, OptimizerStates};
use crate::config::{ModelConfig, Precision, TrainConfig};
use crate::data::{LabeledImageDataset, PairSampler, Split};
use crate::error::{io_err, Error, Result};
use crate::losses::{forward_cycle_loss, reverse_cycle_loss};
use crate::model::{standard_normal, ModelParams, Role};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            learning_rate: c.learning_rate,
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
        }
    }
}

/// First and second moments per parameter block, in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.blocks().iter().map(|b| Tensor::zeros(b.tensor.shape())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn cast<U: Scalar>(&self) -> AdamState<U> {
        AdamState {
            step: self.step,
            m: self.m.iter().map(Tensor::cast).collect(),
            v: self.v.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Which parameter blocks an update may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateMask {
    All,
    EncoderOnly,
}

impl UpdateMask {
    fn allows(self, role: Role) -> bool {
        self == UpdateMask::All || role == Role::Encoder
    }
}

/// One bias-corrected Adam step. Masked-out blocks keep their values and
/// moments untouched; the step counter advances once per call.
pub fn adam_update<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    config: &AdamConfig,
    mask: UpdateMask,
) -> Result<()> {
    let blocks = params.blocks().len();
    if grads.len() != blocks || state.m.len() != blocks || state.v.len() != blocks {
        return Err(Error::Consistency(format!(
            "adam_update: {blocks} parameter blocks, {} gradients, {} moments",
            grads.len(),
            state.m.len()
        )));
    }
    for ((b, g), (m, v)) in params.blocks().iter().zip(grads).zip(state.m.iter().zip(&state.v)) {
        let shape = b.tensor.shape();
        if g.shape() != shape || m.shape() != shape || v.shape() != shape {
            return Err(Error::Consistency(format!(
                "adam_update: block {} has shape {shape:?} but gradient {:?}",
                b.name,
                g.shape()
            )));
        }
    }
    state.step += 1;
    for (i, block) in params.blocks_mut().iter_mut().enumerate() {
        if mask.allows(block.role()) {
            adam_apply(block.tensor.data_mut(), grads[i].data(), state.m[i].data_mut(), state.v[i].data_mut(), state.step, config);
        }
    }
    Ok(())
}

/// Element-wise Adam update for step `step` (1-based).
pub(crate) fn adam_apply<T: Scalar>(p: &mut [T], g: &[T], m: &mut [T], v: &mut [T], step: u64, config: &AdamConfig) {
    let t = step as i32;
    let c = |x: f64| T::from_f64_lossy(x);
    let (b1, b2, eps, lr) = (c(config.beta1), c(config.beta2), c(config.eps), c(config.learning_rate));
    let bc1 = c(1.0 - config.beta1.powi(t));
    let bc2 = c(1.0 - config.beta2.powi(t));
    let one = T::one();
    for j in 0..p.len() {
        m[j] = b1 * m[j] + (one - b1) * g[j];
        v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
        let m_hat = m[j] / bc1;
        let v_hat = v[j] / bc2;
        p[j] = p[j] - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardMetrics {
    pub total: f64,
    pub kl: f64,
    pub recon: f64,
}

/// Forward cycle on same-class pairs `(x1[i], x2[i])`; updates every block.
pub fn train_step_forward<T: Scalar>(
    params: &mut ModelParams<T>,
    state: &mut AdamState<T>,
    x1: &Tensor<T>,
    x2: &Tensor<T>,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<ForwardMetrics> {
    let batch = x1.shape()[0];
    let z_dim = params.config().z_dim;
    let noise1 = standard_normal(&[batch, z_dim], rng);
    let noise2 = standard_normal(&[batch, z_dim], rng);
    let mut g = Graph::new();
    let model = params.bind(&mut g, true)?;
    let (v1, v2) = (g.constant(x1.clone()), g.constant(x2.clone()));
    let terms = forward_cycle_loss(&mut g, &model, v1, v2, noise1, noise2, &config.loss_weights)?;
    let grads = g.backward(terms.total)?;
    let grads: Vec<Tensor<T>> = model.vars().iter().map(|&v| grads.wrt(&g, v)).collect();
    let read = |v| g.value(v).data()[0].to_f64_lossy();
    let metrics = ForwardMetrics {
        total: read(terms.total),
        kl: read(terms.kl),
        recon: read(terms.recon),
    };
    adam_update(params, &grads, state, &AdamConfig::from(config), UpdateMask::All)?;
    Ok(metrics)
}

/// Reverse cycle on two independently drawn batches. Gradients flow through
/// the decoder but only encoder blocks are updated. Returns the unweighted
/// loss. With `reverse_weight == 0` the loss is evaluated and nothing is
/// updated.
pub fn train_step_reverse<T: Scalar>(
    params: &mut ModelParams<T>,
    state: &mut AdamState<T>,
    x1: &Tensor<T>,
    x2: &Tensor<T>,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    let batch = x1.shape()[0];
    let z = standard_normal(&[batch, params.config().z_dim], rng);
    let weight = config.loss_weights.reverse_weight;
    let mut g = Graph::new();
    let model = params.bind(&mut g, weight > 0.0)?;
    let (v1, v2, zv) = (g.constant(x1.clone()), g.constant(x2.clone()), g.constant(z));
    let loss = reverse_cycle_loss(&mut g, &model, v1, v2, zv)?;
    let value = g.value(loss).data()[0].to_f64_lossy();
    if weight > 0.0 {
        let weighted = g.scale(loss, weight)?;
        let grads = g.backward(weighted)?;
        let grads: Vec<Tensor<T>> = model.vars().iter().map(|&v| grads.wrt(&g, v)).collect();
        adam_update(params, &grads, state, &AdamConfig::from(config), UpdateMask::EncoderOnly)?;
    }
    Ok(value)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    /// 1-based index of the completed iteration.
    pub iteration: u64,
    pub forward_loss: f64,
    pub kl: f64,
    pub recon: f64,
    pub reverse_loss: f64,
    pub wall_ms: f64,
}

/// Per-iteration records. Written as tab-separated text with the header
/// `iteration forward_loss kl recon reverse_loss wall_ms`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub const HEADER: &'static str = "iteration\tforward_loss\tkl\trecon\treverse_loss\twall_ms";

    pub fn push(&mut self, record: TrainRecord) {
        if let Some(last) = self.records.last() {
            assert!(record.iteration > last.iteration, "iterations must increase");
        }
        self.records.push(record);
    }

    /// Loss columns only; wall-clock time is excluded.
    pub fn loss_trace(&self) -> Vec<[f64; 4]> {
        self.records.iter().map(|r| [r.forward_loss, r.kl, r.recon, r.reverse_loss]).collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.records {
            // {:?} prints the shortest representation that parses back exactly
            writeln!(
                s,
                "{}\t{:?}\t{:?}\t{:?}\t{:?}\t{:.3}",
                r.iteration, r.forward_loss, r.kl, r.recon, r.reverse_loss, r.wall_ms
            )
            .unwrap();
        }
        s
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(Self::HEADER) {
            return Err(Error::Format("train log header mismatch".into()));
        }
        let mut log = Self::default();
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Format(format!("train log line {}: {line:?}", n + 2));
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            log.records.push(TrainRecord {
                iteration: f[0].parse().map_err(|_| bad())?,
                forward_loss: num(1)?,
                kl: num(2)?,
                recon: num(3)?,
                reverse_loss: num(4)?,
                wall_ms: num(5)?,
            });
        }
        Ok(log)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(io_err(path))
    }
}

/// Checks that the training split can supply same-class pairs.
pub fn check_trainable(dataset: &LabeledImageDataset) -> Result<()> {
    let mut counts = vec![0usize; dataset.num_classes()];
    for i in dataset.indices(Split::Train) {
        counts[dataset.label(i) as usize] += 1;
    }
    let present: Vec<(usize, usize)> = counts.iter().copied().enumerate().filter(|&(_, c)| c > 0).collect();
    if present.len() < 2 {
        return Err(Error::Config(format!(
            "training split needs at least 2 classes, found {}",
            present.len()
        )));
    }
    if let Some(&(class, count)) = present.iter().find(|&&(_, c)| c < 2) {
        return Err(Error::Config(format!(
            "training split needs at least 2 images per class, class {class} has {count}"
        )));
    }
    Ok(())
}

/// Owns the parameters and optimizer states of one run.
pub struct Trainer<'a, T: Scalar> {
    dataset: &'a LabeledImageDataset,
    sampler: PairSampler,
    train: Vec<usize>,
    config: TrainConfig,
    params: ModelParams<T>,
    forward: AdamState<T>,
    reverse: AdamState<T>,
    iteration: u64,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(dataset: &'a LabeledImageDataset, model: &ModelConfig, config: TrainConfig) -> Result<Self> {
        model.validate()?;
        let params = ModelParams::init(model, config.seed)?;
        let forward = AdamState::new(&params);
        let reverse = AdamState::new(&params);
        Self::assemble(dataset, config, params, forward, reverse, 0)
    }

    /// Continues from a checkpoint that carries optimizer state.
    pub fn resume(dataset: &'a LabeledImageDataset, checkpoint: &Checkpoint, config: TrainConfig) -> Result<Self> {
        let opt = checkpoint
            .optimizer
            .as_ref()
            .ok_or_else(|| Error::Config("checkpoint has no optimizer state to resume from".into()))?;
        Self::assemble(
            dataset,
            config,
            checkpoint.params.cast(),
            opt.forward.cast(),
            opt.reverse.cast(),
            checkpoint.iteration,
        )
    }

    fn assemble(
        dataset: &'a LabeledImageDataset,
        config: TrainConfig,
        params: ModelParams<T>,
        forward: AdamState<T>,
        reverse: AdamState<T>,
        iteration: u64,
    ) -> Result<Self> {
        config.validate()?;
        check_trainable(dataset)?;
        let c = params.config();
        if (dataset.channels(), dataset.height(), dataset.width()) != (c.image_channels, c.image_size, c.image_size) {
            return Err(Error::Config(format!(
                "dataset images are {}x{}x{} but the model expects {}x{}x{}",
                dataset.channels(),
                dataset.height(),
                dataset.width(),
                c.image_channels,
                c.image_size,
                c.image_size
            )));
        }
        Ok(Self {
            sampler: PairSampler::new(dataset, Split::Train)?,
            train: dataset.indices(Split::Train),
            dataset,
            config,
            params,
            forward,
            reverse,
            iteration,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn into_params(self) -> ModelParams<T> {
        self.params
    }

    pub fn optimizer_states(&self) -> (&AdamState<T>, &AdamState<T>) {
        (&self.forward, &self.reverse)
    }

    /// Single-precision snapshot including optimizer state.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.cast(),
            iteration: self.iteration,
            optimizer: Some(OptimizerStates {
                forward: self.forward.cast(),
                reverse: self.reverse.cast(),
            }),
        }
    }

    /// One forward step followed by one reverse step.
    pub fn step(&mut self) -> Result<TrainRecord> {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.iteration + 1);
        let b = self.config.batch_size;

        let pairs = self.sampler.sample(b, &mut rng);
        let x1 = self.dataset.batch::<T>(&pairs.first)?;
        let x2 = self.dataset.batch::<T>(&pairs.second)?;
        let fwd = train_step_forward(&mut self.params, &mut self.forward, &x1, &x2, &self.config, &mut rng)?;

        let pick: Vec<usize> = (0..2 * b).map(|_| self.train[rng.gen_range(0..self.train.len())]).collect();
        let y1 = self.dataset.batch::<T>(&pick[..b])?;
        let y2 = self.dataset.batch::<T>(&pick[b..])?;
        let rev = train_step_reverse(&mut self.params, &mut self.reverse, &y1, &y2, &self.config, &mut rng)?;

        self.iteration += 1;
        let record = TrainRecord {
            iteration: self.iteration,
            forward_loss: fwd.total,
            kl: fwd.kl,
            recon: fwd.recon,
            reverse_loss: rev,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        if [record.forward_loss, record.reverse_loss].iter().any(|v| !v.is_finite()) {
            return Err(Error::Consistency(format!("non-finite loss at iteration {}", self.iteration)));
        }
        Ok(record)
    }

    /// Runs until `config.iterations` iterations are complete, calling
    /// `on_checkpoint` every `checkpoint_every` iterations.
    pub fn run(&mut self, log: &mut TrainLog, mut on_checkpoint: impl FnMut(&Self) -> Result<()>) -> Result<()> {
        while self.iteration < self.config.iterations as u64 {
            let record = self.step()?;
            log.push(record);
            let every = self.config.checkpoint_every as u64;
            if every > 0 && self.iteration % every == 0 {
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }
}

/// Trains from scratch at the configured precision. Parameters are returned
/// in single precision.
pub fn fit(dataset: &LabeledImageDataset, model: &ModelConfig, config: &TrainConfig) -> Result<(ModelParams<f32>, TrainLog)> {
    let mut log = TrainLog::default();
    let params = match config.precision {
        Precision::F32 => {
            let mut t = Trainer::<f32>::new(dataset, model, config.clone())?;
            t.run(&mut log, |_| Ok(()))?;
            t.into_params()
        }
        Precision::F64 => {
            let mut t = Trainer::<f64>::new(dataset, model, config.clone())?;
            t.run(&mut log, |_| Ok(()))?;
            t.into_params().cast()
        }
    };
    Ok((params, log))
}
