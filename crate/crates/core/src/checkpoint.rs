//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "CVAECKPT"
//! version      u32      1
//! config       u32 x 6  image_channels, image_size, z_dim, s_dim, branch_width, conv blocks
//!              u32 x N  trunk channels
//! iteration    u64      completed training iterations
//! steps        u64 x 2  forward and reverse optimizer step counters
//! block count  u32
//! blocks       name_len u32, name bytes (UTF-8), ndim u32, dims u32 x ndim,
//!              data f32 x prod(dims)
//! ```
//!
//! Parameter blocks come first, in declaration order. Optimizer moments, when
//! present, follow as `opt.<forward|reverse>.<m|v>.<param name>`.

use std::fs;
use std::path::Path;

use cyclevae_autograd::Tensor;

use crate::config::ModelConfig;
use crate::error::{io_err, Error, Result};
use crate::model::{ModelParams, ParamBlock};
use crate::train::AdamState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CVAECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Optimizer state of both alternating steps.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerStates {
    pub forward: AdamState<f32>,
    pub reverse: AdamState<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub iteration: u64,
    pub optimizer: Option<OptimizerStates>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let c = self.params.config();
        for v in [c.image_channels, c.image_size, c.z_dim, c.s_dim, c.branch_width, c.trunk_channels.len()] {
            put_u32(&mut out, v as u32);
        }
        for &ch in &c.trunk_channels {
            put_u32(&mut out, ch as u32);
        }
        out.extend_from_slice(&self.iteration.to_le_bytes());
        let (fs, rs) = self.optimizer.as_ref().map_or((0, 0), |o| (o.forward.step, o.reverse.step));
        out.extend_from_slice(&fs.to_le_bytes());
        out.extend_from_slice(&rs.to_le_bytes());

        let mut blocks: Vec<(String, &Tensor<f32>)> = self.params.blocks().iter().map(|b| (b.name.clone(), &b.tensor)).collect();
        if let Some(opt) = &self.optimizer {
            for (tag, state) in [("forward", &opt.forward), ("reverse", &opt.reverse)] {
                for (moment, list) in [("m", &state.m), ("v", &state.v)] {
                    for (b, t) in self.params.blocks().iter().zip(list) {
                        blocks.push((format!("opt.{tag}.{moment}.{}", b.name), t));
                    }
                }
            }
        }
        put_u32(&mut out, blocks.len() as u32);
        for (name, t) in blocks {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut head = [0usize; 6];
        for h in &mut head {
            *h = r.u32()? as usize;
        }
        if head[5] > 64 {
            return Err(Error::Format(format!("implausible block count {} in header", head[5])));
        }
        let trunk_channels = (0..head[5]).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        let config = ModelConfig {
            image_channels: head[0],
            image_size: head[1],
            z_dim: head[2],
            s_dim: head[3],
            branch_width: head[4],
            trunk_channels,
        };
        config.validate().map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let iteration = r.u64()?;
        let forward_step = r.u64()?;
        let reverse_step = r.u64()?;
        let count = r.u32()? as usize;
        let mut blocks = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("block name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(Error::Format(format!("block {name} has {ndim} dimensions")));
            }
            let dims: Vec<usize> = (0..ndim).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("block too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            blocks.push(ParamBlock {
                name,
                tensor: Tensor::new(dims, data)?,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after last block", bytes.len() - r.pos)));
        }
        let n_params = crate::model::param_layout(&config)?.len();
        if blocks.len() != n_params && blocks.len() != 5 * n_params {
            return Err(Error::Format(format!(
                "{} blocks do not match {n_params} parameters (with or without optimizer state)",
                blocks.len()
            )));
        }
        let opt_blocks = blocks.split_off(n_params);
        let params = ModelParams::from_blocks(config, blocks)?;
        let optimizer = if opt_blocks.is_empty() {
            None
        } else {
            let mut groups = opt_blocks.chunks(n_params).enumerate().map(|(gi, chunk)| {
                let prefix = ["opt.forward.m.", "opt.forward.v.", "opt.reverse.m.", "opt.reverse.v."][gi];
                chunk
                    .iter()
                    .zip(params.blocks())
                    .map(|(b, p)| {
                        if b.name.strip_prefix(prefix) != Some(p.name.as_str()) || b.tensor.shape() != p.tensor.shape() {
                            return Err(Error::Format(format!("unexpected optimizer block {}", b.name)));
                        }
                        Ok(b.tensor.clone())
                    })
                    .collect::<Result<Vec<_>>>()
            });
            let mut next = || groups.next().expect("four groups");
            let (fm, fv, rm, rv) = (next()?, next()?, next()?, next()?);
            Some(OptimizerStates {
                forward: AdamState { step: forward_step, m: fm, v: fv },
                reverse: AdamState { step: reverse_step, m: rm, v: rv },
            })
        };
        Ok(Self { params, iteration, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

/// Saves bare parameters (no optimizer state, iteration 0).
pub fn save_params(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    Checkpoint {
        params: params.clone(),
        iteration: 0,
        optimizer: None,
    }
    .save(path)
}

pub fn load_params(path: &Path) -> Result<ModelParams<f32>> {
    Ok(Checkpoint::load(path)?.params)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("truncated checkpoint at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
