//! Disentanglement probes: small classifiers trained on the `z` and `s`
//! embeddings of the training split and scored on the test split. A good
//! model puts the class into `s` (high accuracy) and keeps it out of `z`
//! (accuracy near chance).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use cyclevae_autograd::{Graph, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ProbeConfig;
use crate::data::{LabeledImageDataset, Split};
use crate::error::{io_err, Error, Result};
use crate::model::ModelParams;
use crate::train::{adam_apply, AdamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    /// Posterior mean of the unspecified code.
    ZSpace,
    /// Specified code.
    SSpace,
}

/// Row-major `[n, dim]` embeddings with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub vectors: Vec<f64>,
    pub dim: usize,
    pub labels: Vec<u32>,
    pub source: EmbeddingSource,
}

impl EmbeddingMatrix {
    pub fn new(vectors: Vec<f64>, dim: usize, labels: Vec<u32>, source: EmbeddingSource) -> Result<Self> {
        if dim == 0 || vectors.len() != dim * labels.len() {
            return Err(Error::Consistency(format!(
                "{} values do not form {} rows of dimension {dim}",
                vectors.len(),
                labels.len()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Consistency("embeddings contain non-finite values".into()));
        }
        Ok(Self { vectors, dim, labels, source })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }
}

const ENCODE_CHUNK: usize = 256;

/// `z` (posterior mean) and `s` embeddings of the selected images; row `i`
/// belongs to `indices[i]`.
pub fn extract_both(params: &ModelParams<f32>, dataset: &LabeledImageDataset, indices: &[usize]) -> Result<(EmbeddingMatrix, EmbeddingMatrix)> {
    let c = params.config();
    if (dataset.channels(), dataset.height(), dataset.width()) != (c.image_channels, c.image_size, c.image_size) {
        return Err(Error::Consistency(format!(
            "dataset images are {}x{}x{}, model expects {}x{}x{}",
            dataset.channels(),
            dataset.height(),
            dataset.width(),
            c.image_channels,
            c.image_size,
            c.image_size
        )));
    }
    let mut z = Vec::with_capacity(indices.len() * c.z_dim);
    let mut s = Vec::with_capacity(indices.len() * c.s_dim);
    for chunk in indices.chunks(ENCODE_CHUNK) {
        let codes = params.encode(&dataset.batch::<f32>(chunk)?)?;
        z.extend(codes.mu.data().iter().map(|&v| v as f64));
        s.extend(codes.s.data().iter().map(|&v| v as f64));
    }
    let labels: Vec<u32> = indices.iter().map(|&i| dataset.label(i)).collect();
    Ok((
        EmbeddingMatrix::new(z, c.z_dim, labels.clone(), EmbeddingSource::ZSpace)?,
        EmbeddingMatrix::new(s, c.s_dim, labels, EmbeddingSource::SSpace)?,
    ))
}

pub fn extract_embeddings(
    params: &ModelParams<f32>,
    dataset: &LabeledImageDataset,
    indices: &[usize],
    source: EmbeddingSource,
) -> Result<EmbeddingMatrix> {
    let (z, s) = extract_both(params, dataset, indices)?;
    Ok(match source {
        EmbeddingSource::ZSpace => z,
        EmbeddingSource::SSpace => s,
    })
}

/// Two-layer classifier: optional standardization, linear, ReLU, linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub layers: [Tensor<f64>; 4],
    pub num_classes: usize,
}

impl Probe {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn standardize(&self, e: &EmbeddingMatrix, rows: &[usize]) -> Tensor<f64> {
        let d = self.dim();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend(e.row(r).iter().enumerate().map(|(j, &v)| (v - self.mean[j]) * self.inv_std[j]));
        }
        Tensor::new(vec![rows.len(), d], data).expect("row geometry")
    }

    fn logits(&self, g: &mut Graph<f64>, x: Tensor<f64>, trainable: bool) -> Result<(Var4, cyclevae_autograd::Var)> {
        let vars: Var4 = std::array::from_fn(|i| {
            if trainable {
                g.param(self.layers[i].clone())
            } else {
                g.constant(self.layers[i].clone())
            }
        });
        let x = g.constant(x);
        let h = g.linear(x, vars[0], vars[1])?;
        let h = g.relu(h)?;
        let out = g.linear(h, vars[2], vars[3])?;
        Ok((vars, out))
    }

    /// Arg-max class per row, ties going to the lowest index.
    pub fn predict(&self, e: &EmbeddingMatrix) -> Result<Vec<usize>> {
        if e.dim != self.dim() {
            return Err(Error::Consistency(format!("probe expects dimension {}, embeddings have {}", self.dim(), e.dim)));
        }
        let rows: Vec<usize> = (0..e.len()).collect();
        let mut preds = Vec::with_capacity(e.len());
        for chunk in rows.chunks(1024) {
            let mut g = Graph::new();
            let (_, out) = self.logits(&mut g, self.standardize(e, chunk), false)?;
            preds.extend(g.value(out).data().chunks(self.num_classes).map(argmax));
        }
        Ok(preds)
    }
}

type Var4 = [cyclevae_autograd::Var; 4];

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains a probe with softmax cross-entropy and Adam. With
/// `config.standardize` features are standardized with the training
/// statistics; otherwise they are used as is.
pub fn train_probe(train: &EmbeddingMatrix, config: &ProbeConfig) -> Result<Probe> {
    config.validate()?;
    let mut classes: Vec<u32> = train.labels.clone();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Config(format!("probe needs at least 2 classes, found {}", classes.len())));
    }
    let num_classes = *classes.last().unwrap() as usize + 1;
    let (n, d, h) = (train.len(), train.dim, config.hidden_units);

    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for i in 0..n {
        for (j, &v) in train.row(i).iter().enumerate() {
            mean[j] += v / n as f64;
        }
    }
    for i in 0..n {
        for (j, &v) in train.row(i).iter().enumerate() {
            var[j] += (v - mean[j]).powi(2) / n as f64;
        }
    }
    // constant features are centred but not rescaled
    let inv_std = var.iter().map(|&v| if v > 1e-24 { 1.0 / v.sqrt() } else { 1.0 }).collect();
    let (mean, inv_std) = if config.standardize { (mean, inv_std) } else { (vec![0.0; d], vec![1.0; d]) };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut uniform = |shape: &[usize], fan_in: usize| {
        let b = 1.0 / (fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| rng.gen_range(-b..b))
    };
    let layers = [uniform(&[h, d], d), Tensor::zeros(&[h]), uniform(&[num_classes, h], h), Tensor::zeros(&[num_classes])];
    let mut probe = Probe {
        mean,
        inv_std,
        layers,
        num_classes,
    };
    let adam = AdamConfig {
        learning_rate: config.learning_rate,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    let mut m: Vec<Vec<f64>> = probe.layers.iter().map(|t| vec![0.0; t.numel()]).collect();
    let mut v = m.clone();
    let mut step = 0;
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut g = Graph::new();
            let (vars, out) = probe.logits(&mut g, probe.standardize(train, batch), true)?;
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i] as usize).collect();
            let loss = g.softmax_cross_entropy(out, &labels)?;
            let grads = g.backward(loss)?;
            step += 1;
            for (k, &var) in vars.iter().enumerate() {
                let gk = grads.wrt(&g, var);
                adam_apply(probe.layers[k].data_mut(), gk.data(), &mut m[k], &mut v[k], step, &adam);
            }
        }
    }
    Ok(probe)
}

/// Fraction of rows whose predicted class equals the label.
pub fn probe_accuracy(probe: &Probe, e: &EmbeddingMatrix) -> Result<f64> {
    if e.is_empty() {
        return Err(Error::Consistency("no embeddings to score".into()));
    }
    let preds = probe.predict(e)?;
    let hits = preds.iter().zip(&e.labels).filter(|(&p, &l)| p == l as usize).count();
    Ok(hits as f64 / e.len() as f64)
}

/// Table 1 style summary of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub z_dim: usize,
    pub s_dim: usize,
    pub z_train_acc: f64,
    pub z_test_acc: f64,
    pub s_train_acc: f64,
    pub s_test_acc: f64,
    pub probe: ProbeConfig,
    pub train_images: usize,
    pub test_images: usize,
}

impl EvalReport {
    pub const COLUMNS: [&'static str; 6] = ["z dim", "s dim", "z train acc.", "z test acc.", "s train acc.", "s test acc."];

    /// Accuracies are printed as percentages.
    pub fn to_table(&self) -> String {
        let cells = [
            self.z_dim.to_string(),
            self.s_dim.to_string(),
            format!("{:.2}", 100.0 * self.z_train_acc),
            format!("{:.2}", 100.0 * self.z_test_acc),
            format!("{:.2}", 100.0 * self.s_train_acc),
            format!("{:.2}", 100.0 * self.s_test_acc),
        ];
        let widths: Vec<usize> = Self::COLUMNS.iter().zip(&cells).map(|(c, v)| c.len().max(v.len())).collect();
        let line = |items: &[String]| {
            let parts: Vec<String> = items.iter().zip(&widths).map(|(s, &w)| format!("{s:>w$}")).collect();
            format!("| {} |\n", parts.join(" | "))
        };
        let header: Vec<String> = Self::COLUMNS.iter().map(|s| s.to_string()).collect();
        let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
        let mut out = line(&header);
        out.push_str(&line(&rule));
        out.push_str(&line(&cells));
        out
    }

    /// `key=value` lines, accuracies as fractions.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("z_train_acc", self.z_train_acc),
            ("z_test_acc", self.z_test_acc),
            ("s_train_acc", self.s_train_acc),
            ("s_test_acc", self.s_test_acc),
        ] {
            writeln!(s, "{k}={v:?}").unwrap();
        }
        writeln!(s, "z_dim={}\ns_dim={}", self.z_dim, self.s_dim).unwrap();
        writeln!(s, "train_images={}\ntest_images={}", self.train_images, self.test_images).unwrap();
        writeln!(
            s,
            "probe_hidden_units={}\nprobe_epochs={}\nprobe_learning_rate={:?}\nprobe_batch_size={}\nprobe_standardize={}\nprobe_seed={}",
            self.probe.hidden_units,
            self.probe.epochs,
            self.probe.learning_rate,
            self.probe.batch_size,
            self.probe.standardize,
            self.probe.seed
        )
        .unwrap();
        s
    }

    /// Writes `<stem>.txt` (table) and `<stem>.kv` next to each other.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        for (ext, body) in [("txt", self.to_table()), ("kv", self.to_kv())] {
            let path = dir.join(format!("{stem}.{ext}"));
            fs::write(&path, body).map_err(io_err(&path))?;
        }
        Ok(())
    }
}

/// Trains probes on the training split and scores both splits.
pub fn evaluate(params: &ModelParams<f32>, dataset: &LabeledImageDataset, probe: &ProbeConfig) -> Result<EvalReport> {
    let train = dataset.indices(Split::Train);
    let test = dataset.indices(Split::Test);
    if test.is_empty() {
        return Err(Error::Config("dataset has an empty test split".into()));
    }
    let (z_train, s_train) = extract_both(params, dataset, &train)?;
    let (z_test, s_test) = extract_both(params, dataset, &test)?;
    let pz = train_probe(&z_train, probe)?;
    let ps = train_probe(&s_train, probe)?;
    Ok(EvalReport {
        z_dim: params.config().z_dim,
        s_dim: params.config().s_dim,
        z_train_acc: probe_accuracy(&pz, &z_train)?,
        z_test_acc: probe_accuracy(&pz, &z_test)?,
        s_train_acc: probe_accuracy(&ps, &s_train)?,
        s_test_acc: probe_accuracy(&ps, &s_test)?,
        probe: probe.clone(),
        train_images: train.len(),
        test_images: test.len(),
    })
}

/// Top-two principal component scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection2d {
    pub points: Vec<[f64; 2]>,
    /// Set when all rows are identical; `points` are then all zero.
    pub degenerate: bool,
}

/// Projects centred rows onto the two leading principal axes. Each axis is
/// oriented so its largest-magnitude loading is positive.
pub fn pca_project_2d(e: &EmbeddingMatrix) -> Result<Projection2d> {
    let (n, d) = (e.len(), e.dim);
    if n < 2 {
        return Err(Error::Consistency(format!("projection needs at least 2 rows, got {n}")));
    }
    let x = DMatrix::from_row_slice(n, d, &e.vectors);
    let mean = x.row_mean();
    let centred = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let scale = e.vectors.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    if centred.iter().all(|v| v.abs() <= 1e-12 * scale) {
        return Ok(Projection2d {
            points: vec![[0.0; 2]; n],
            degenerate: true,
        });
    }
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut points = vec![[0.0; 2]; n];
    for (axis, &k) in order.iter().take(2).enumerate() {
        let mut dir = eig.eigenvectors.column(k).into_owned();
        let lead = dir.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        if lead < 0.0 {
            dir = -dir;
        }
        let scores = &centred * dir;
        for i in 0..n {
            points[i][axis] = scores[i];
        }
    }
    Ok(Projection2d { points, degenerate: false })
}
