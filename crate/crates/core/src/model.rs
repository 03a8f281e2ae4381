//! Encoder `Enc(x) = (f_z(x), f_s(x))` with a shared convolutional trunk,
//! the conditional decoder `Dec(z, s)` and the reparameterized sampler.
//!
//! Encoder: `conv_blocks` x (conv 5x5 stride 2 -> instance norm -> ReLU),
//! flatten, then three fully-connected heads for `mu`, `log_var` (log of the
//! posterior variance) and `s`.
//!
//! Decoder: `z` and `s` each go through a fully-connected branch with ReLU,
//! the branches are concatenated, projected and reshaped to the trunk's final
//! feature map, then `conv_blocks` transposed convolutions bring the image
//! back to full size. All but the last are followed by instance norm and
//! ReLU; the last one has a bias and a logistic sigmoid.

use cyclevae_autograd::{Graph, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, KERNEL_SIZE, PADDING, STRIDE};
use crate::error::{Error, Result};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Which half of the network a parameter block belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Encoder,
    Decoder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

impl<T> ParamBlock<T> {
    pub fn role(&self) -> Role {
        if self.name.starts_with("enc.") {
            Role::Encoder
        } else {
            Role::Decoder
        }
    }
}

/// Encoder and decoder weights in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    config: ModelConfig,
    blocks: Vec<ParamBlock<T>>,
}

/// Names and shapes of every parameter block, in declaration order.
pub fn param_layout(config: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
    config.validate()?;
    let sizes = config.spatial_sizes()?;
    let feat = config.feature_size()?;
    let k = KERNEL_SIZE;
    let ch = &config.trunk_channels;
    let blocks = ch.len();
    let last = *sizes.last().unwrap();
    let mut out = Vec::new();
    for i in 0..blocks {
        let cin = if i == 0 { config.image_channels } else { ch[i - 1] };
        out.push((format!("enc.conv{i}.weight"), vec![ch[i], cin, k, k]));
    }
    for (head, dim) in [("mu", config.z_dim), ("logvar", config.z_dim), ("s", config.s_dim)] {
        out.push((format!("enc.{head}.weight"), vec![dim, feat]));
        out.push((format!("enc.{head}.bias"), vec![dim]));
    }
    let w = config.branch_width;
    out.push(("dec.z.weight".into(), vec![w, config.z_dim]));
    out.push(("dec.z.bias".into(), vec![w]));
    out.push(("dec.s.weight".into(), vec![w, config.s_dim]));
    out.push(("dec.s.bias".into(), vec![w]));
    out.push(("dec.fc.weight".into(), vec![ch[blocks - 1] * last * last, 2 * w]));
    out.push(("dec.fc.bias".into(), vec![ch[blocks - 1] * last * last]));
    for j in 0..blocks {
        // mirrors encoder block (blocks - 1 - j)
        let i = blocks - 1 - j;
        let cout = if i == 0 { config.image_channels } else { ch[i - 1] };
        out.push((format!("dec.deconv{j}.weight"), vec![ch[i], cout, k, k]));
    }
    out.push((format!("dec.deconv{}.bias", blocks - 1), vec![config.image_channels]));
    Ok(out)
}

impl<T: Scalar> ModelParams<T> {
    /// Fresh parameters: weights uniform in `+-1/sqrt(fan_in)`, biases zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = param_layout(config)?
            .into_iter()
            .map(|(name, shape)| {
                let tensor = if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    let bound = 1.0 / (fan_in(&name, &shape) as f64).sqrt();
                    Tensor::from_fn(&shape, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
                };
                ParamBlock { name, tensor }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            blocks,
        })
    }

    /// Assembles parameters from named blocks, checking names and shapes
    /// against the layout of `config`.
    pub fn from_blocks(config: ModelConfig, blocks: Vec<ParamBlock<T>>) -> Result<Self> {
        let layout = param_layout(&config)?;
        if layout.len() != blocks.len() {
            return Err(Error::Consistency(format!(
                "expected {} parameter blocks, found {}",
                layout.len(),
                blocks.len()
            )));
        }
        for ((name, shape), block) in layout.iter().zip(&blocks) {
            if name != &block.name || shape.as_slice() != block.tensor.shape() {
                return Err(Error::Consistency(format!(
                    "parameter block {} {:?} does not match expected {name} {shape:?}",
                    block.name,
                    block.tensor.shape()
                )));
            }
            if !block.tensor.is_finite() {
                return Err(Error::Consistency(format!("parameter block {name} has non-finite values")));
            }
        }
        Ok(Self { config, blocks })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[ParamBlock<T>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock<T>] {
        &mut self.blocks
    }

    pub fn num_scalars(&self) -> usize {
        self.blocks.iter().map(|b| b.tensor.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| ParamBlock {
                    name: b.name.clone(),
                    tensor: b.tensor.cast(),
                })
                .collect(),
        }
    }

    /// Records every block as a graph leaf. With `trainable == false` the
    /// leaves are constants and no parameter gradients are produced.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<BoundModel> {
        let vars = self
            .blocks
            .iter()
            .map(|b| {
                if trainable {
                    g.param(b.tensor.clone())
                } else {
                    g.constant(b.tensor.clone())
                }
            })
            .collect();
        let sizes = self.config.spatial_sizes()?;
        Ok(BoundModel {
            config: self.config.clone(),
            sizes,
            vars,
        })
    }

    /// Posterior parameters and specified code of every image in `x`.
    pub fn encode(&self, x: &Tensor<T>) -> Result<LatentBatch<T>> {
        let mut g = Graph::new();
        let model = self.bind(&mut g, false)?;
        let xv = g.constant(x.clone());
        let enc = model.encode(&mut g, xv)?;
        Ok(LatentBatch {
            mu: g.value(enc.mu).clone(),
            log_var: g.value(enc.log_var).clone(),
            s: g.value(enc.s).clone(),
        })
    }

    /// Decodes `z` `[batch, z_dim]` with `s` `[batch, s_dim]` into images.
    pub fn decode(&self, z: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let model = self.bind(&mut g, false)?;
        let (zv, sv) = (g.constant(z.clone()), g.constant(s.clone()));
        let out = model.decode(&mut g, zv, sv)?;
        Ok(g.value(out).clone())
    }

    /// `Dec(mu(x), f_s(x))`.
    pub fn reconstruct(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let codes = self.encode(x)?;
        self.decode(&codes.mu, &codes.s)
    }
}

fn fan_in(name: &str, shape: &[usize]) -> usize {
    if name.contains("deconv") {
        // each output pixel of a stride-2 transposed conv sees ~k*k/4 taps per input channel
        (shape[0] * shape[2] * shape[3] / (STRIDE * STRIDE)).max(1)
    } else {
        shape[1..].iter().product()
    }
}

/// Per-batch encoder outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch<T> {
    pub mu: Tensor<T>,
    pub log_var: Tensor<T>,
    pub s: Tensor<T>,
}

/// Encoder output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode<T> {
    pub mu: Vec<T>,
    pub log_var: Vec<T>,
    pub s: Vec<T>,
}

impl<T: Scalar> LatentBatch<T> {
    pub fn len(&self) -> usize {
        self.mu.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn code(&self, i: usize) -> LatentCode<T> {
        let row = |t: &Tensor<T>| {
            let d = t.shape()[1];
            t.data()[i * d..(i + 1) * d].to_vec()
        };
        LatentCode {
            mu: row(&self.mu),
            log_var: row(&self.log_var),
            s: row(&self.s),
        }
    }
}

/// Encoder outputs as graph values.
#[derive(Debug, Clone, Copy)]
pub struct EncodedVars {
    pub mu: Var,
    pub log_var: Var,
    pub s: Var,
}

/// Parameters recorded on a graph, ready to build encoder/decoder passes.
pub struct BoundModel {
    config: ModelConfig,
    sizes: Vec<usize>,
    vars: Vec<Var>,
}

impl BoundModel {
    /// Wraps parameter values already recorded on a graph, in declaration order.
    pub fn from_vars<T: Scalar>(g: &Graph<T>, config: &ModelConfig, vars: Vec<Var>) -> Result<Self> {
        let layout = param_layout(config)?;
        if layout.len() != vars.len() {
            return Err(Error::Consistency(format!("expected {} parameter values, got {}", layout.len(), vars.len())));
        }
        for ((name, shape), &v) in layout.iter().zip(&vars) {
            if g.shape(v) != shape.as_slice() {
                return Err(Error::Consistency(format!("{name} has shape {:?}, expected {shape:?}", g.shape(v))));
            }
        }
        Ok(Self {
            config: config.clone(),
            sizes: config.spatial_sizes()?,
            vars,
        })
    }

    fn blocks(&self) -> usize {
        self.config.conv_blocks()
    }

    fn head(&self, offset: usize) -> (Var, Var) {
        let base = self.blocks() + 2 * offset;
        (self.vars[base], self.vars[base + 1])
    }

    /// Parameter leaves in declaration order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<EncodedVars> {
        let c = &self.config;
        let expect = [c.image_channels, c.image_size, c.image_size];
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1..] != expect {
            return Err(Error::Tensor(cyclevae_autograd::TensorError::Dimension {
                op: "encode",
                msg: format!("input shape {shape:?} does not match [batch, {}, {}, {}]", expect[0], expect[1], expect[2]),
            }));
        }
        let batch = shape[0];
        let mut h = x;
        for i in 0..self.blocks() {
            h = g.conv2d(h, self.vars[i], None, STRIDE, PADDING)?;
            h = g.instance_norm(h, INSTANCE_NORM_EPS)?;
            h = g.relu(h)?;
        }
        let flat = g.reshape(h, &[batch, c.feature_size()?])?;
        let (mw, mb) = self.head(0);
        let (lw, lb) = self.head(1);
        let (sw, sb) = self.head(2);
        Ok(EncodedVars {
            mu: g.linear(flat, mw, mb)?,
            log_var: g.linear(flat, lw, lb)?,
            s: g.linear(flat, sw, sb)?,
        })
    }

    pub fn decode<T: Scalar>(&self, g: &mut Graph<T>, z: Var, s: Var) -> Result<Var> {
        let c = &self.config;
        let (zs, ss) = (g.shape(z), g.shape(s));
        if zs.len() != 2 || ss.len() != 2 || zs[1] != c.z_dim || ss[1] != c.s_dim || zs[0] != ss[0] {
            return Err(Error::Tensor(cyclevae_autograd::TensorError::Dimension {
                op: "decode",
                msg: format!("z {zs:?} and s {ss:?} must be [batch, {}] and [batch, {}]", c.z_dim, c.s_dim),
            }));
        }
        let batch = zs[0];
        let base = self.blocks() + 6;
        let zh = g.linear(z, self.vars[base], self.vars[base + 1])?;
        let zh = g.relu(zh)?;
        let sh = g.linear(s, self.vars[base + 2], self.vars[base + 3])?;
        let sh = g.relu(sh)?;
        let joined = g.concat(zh, sh)?;
        let h = g.linear(joined, self.vars[base + 4], self.vars[base + 5])?;
        let h = g.relu(h)?;
        let blocks = self.blocks();
        let last = self.sizes[blocks];
        let mut h = g.reshape(h, &[batch, c.trunk_channels[blocks - 1], last, last])?;
        let deconv = base + 6;
        for j in 0..blocks {
            let i = blocks - 1 - j;
            let (from, to) = (self.sizes[i + 1], self.sizes[i]);
            let output_padding = to - ((from - 1) * STRIDE + KERNEL_SIZE - 2 * PADDING);
            if j + 1 == blocks {
                let bias = self.vars[deconv + blocks];
                h = g.conv2d_transpose(h, self.vars[deconv + j], Some(bias), STRIDE, PADDING, output_padding)?;
                h = g.sigmoid(h)?;
            } else {
                h = g.conv2d_transpose(h, self.vars[deconv + j], None, STRIDE, PADDING, output_padding)?;
                h = g.instance_norm(h, INSTANCE_NORM_EPS)?;
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// `z = mu + exp(0.5 * log_var) * noise`; `noise` enters as a constant.
pub fn reparameterize<T: Scalar>(g: &mut Graph<T>, mu: Var, log_var: Var, noise: Tensor<T>) -> Result<Var> {
    if g.shape(mu) != g.shape(log_var) || g.shape(mu) != noise.shape() {
        return Err(Error::Tensor(cyclevae_autograd::TensorError::Dimension {
            op: "reparameterize",
            msg: format!(
                "mu {:?}, log_var {:?} and noise {:?} must have equal shapes",
                g.shape(mu),
                g.shape(log_var),
                noise.shape()
            ),
        }));
    }
    let half = g.scale(log_var, 0.5)?;
    let std = g.exp(half)?;
    let eps = g.constant(noise);
    let spread = g.mul(std, eps)?;
    Ok(g.add(mu, spread)?)
}

/// Standard normal draws shaped `shape`.
pub fn standard_normal<T: Scalar>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.sample(rand_distr::StandardNormal)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_channels: 1,
            image_size: 8,
            z_dim: 3,
            s_dim: 2,
            trunk_channels: vec![2, 3],
            branch_width: 4,
        }
    }

    #[test]
    fn layout_order_and_shapes() {
        let layout = param_layout(&ModelConfig::mnist(16, 16)).unwrap();
        let names: Vec<&str> = layout.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            [
                "enc.conv0.weight",
                "enc.conv1.weight",
                "enc.conv2.weight",
                "enc.mu.weight",
                "enc.mu.bias",
                "enc.logvar.weight",
                "enc.logvar.bias",
                "enc.s.weight",
                "enc.s.bias",
                "dec.z.weight",
                "dec.z.bias",
                "dec.s.weight",
                "dec.s.bias",
                "dec.fc.weight",
                "dec.fc.bias",
                "dec.deconv0.weight",
                "dec.deconv1.weight",
                "dec.deconv2.weight",
                "dec.deconv2.bias",
            ]
        );
        assert_eq!(layout[0].1, vec![32, 1, 5, 5]);
        assert_eq!(layout[13].1, vec![128 * 16, 512]);
        assert_eq!(layout[15].1, vec![128, 64, 5, 5]);
        assert_eq!(layout[17].1, vec![32, 1, 5, 5]);
    }

    #[test]
    fn init_is_seeded_and_biases_zero() {
        let a = ModelParams::<f64>::init(&tiny(), 3).unwrap();
        let b = ModelParams::<f64>::init(&tiny(), 3).unwrap();
        let c = ModelParams::<f64>::init(&tiny(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for block in a.blocks() {
            if block.name.ends_with(".bias") {
                assert!(block.tensor.data().iter().all(|&v| v == 0.0));
            } else {
                assert!(block.tensor.data().iter().any(|&v| v != 0.0));
            }
        }
    }

    #[test]
    fn roles_split_encoder_and_decoder() {
        let p = ModelParams::<f32>::init(&tiny(), 0).unwrap();
        let enc = p.blocks().iter().filter(|b| b.role() == Role::Encoder).count();
        assert_eq!(enc, 2 + 6);
        assert_eq!(p.blocks().len() - enc, 6 + 2 + 1);
    }

    #[test]
    fn reparameterize_examples() {
        let mut g = Graph::<f64>::new();
        let mu = g.constant(Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap());
        let lv = g.constant(Tensor::zeros(&[1, 3]));
        let z = reparameterize(&mut g, mu, lv, Tensor::zeros(&[1, 3])).unwrap();
        assert_eq!(g.value(z).data(), &[0.5, -1.0, 2.0]);
        let z = reparameterize(&mut g, mu, lv, Tensor::full(&[1, 3], 1.0)).unwrap();
        assert_eq!(g.value(z).data(), &[1.5, 0.0, 3.0]);
        let lv = g.constant(Tensor::full(&[1, 3], -40.0));
        // sigma = e^-20, so the deviation is e^-20 * |noise|: below 1e-8 up to |noise| ~ 4.85
        let z = reparameterize(&mut g, mu, lv, Tensor::full(&[1, 3], 4.0)).unwrap();
        for (a, b) in g.value(z).data().iter().zip([0.5, -1.0, 2.0]) {
            assert!((a - b).abs() < 1e-8);
        }
        let z = reparameterize(&mut g, mu, lv, Tensor::full(&[1, 3], 6.0)).unwrap();
        for (a, b) in g.value(z).data().iter().zip([0.5, -1.0, 2.0]) {
            assert!((a - b).abs() <= 6.0 * (-20f64).exp() * (1.0 + 1e-6) + 4.0 * f64::EPSILON);
        }
        let bad = g.constant(Tensor::zeros(&[1, 2]));
        assert!(reparameterize(&mut g, mu, bad, Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn reparameterize_gradients_skip_noise() {
        let mut g = Graph::<f64>::new();
        let mu = g.param(Tensor::new(vec![1, 2], vec![0.1, 0.2]).unwrap());
        let lv = g.param(Tensor::new(vec![1, 2], vec![0.4, -0.6]).unwrap());
        let noise = Tensor::new(vec![1, 2], vec![1.5, -0.5]).unwrap();
        let z = reparameterize(&mut g, mu, lv, noise).unwrap();
        let loss = g.sum(z).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(mu).unwrap(), &[1.0, 1.0]);
        let d = grads.get(lv).unwrap();
        assert!((d[0] - 0.5 * (0.2f64).exp() * 1.5).abs() < 1e-12);
        assert!((d[1] - 0.5 * (-0.3f64).exp() * -0.5).abs() < 1e-12);
    }
}
