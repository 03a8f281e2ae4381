//! Finite-difference checks of whole-model objectives on a downscaled
//! configuration, in double precision.

use cyclevae_autograd::{grad_check_with_fault, GradCheckReport, Graph, OpKind, Tensor, Var};

use crate::config::{LossWeights, ModelConfig};
use crate::error::Result;
use crate::losses::{forward_cycle_loss, reverse_cycle_loss};
use crate::model::{reparameterize, BoundModel, ModelParams};

/// Tolerance for single operations.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for whole-model objectives.
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Central-difference step for whole-model checks.
pub const MODEL_EPS: f64 = 1e-5;

/// 8x8 grey images, two conv blocks.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_channels: 1,
        image_size: 8,
        z_dim: 3,
        s_dim: 2,
        trunk_channels: vec![3, 4],
        branch_width: 5,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheck {
    pub name: &'static str,
    /// Worst report over all parameter blocks (and the input, where checked).
    pub report: GradCheckReport,
}

type Objective<'a> = dyn Fn(&mut Graph<f64>, &BoundModel, Var) -> std::result::Result<Var, cyclevae_autograd::TensorError> + 'a;

/// Gradient check of `objective(model, x)` with respect to every parameter
/// block and, when `wrt_input`, the input batch `x`.
fn check_objective(params: &ModelParams<f64>, x: &Tensor<f64>, objective: &Objective, wrt_input: bool, fault: Option<OpKind>) -> Result<GradCheckReport> {
    let config = params.config();
    let mut reports = Vec::new();
    for k in 0..params.blocks().len() {
        let f = |g: &mut Graph<f64>, p: Var| {
            let vars = params
                .blocks()
                .iter()
                .enumerate()
                .map(|(j, b)| if j == k { p } else { g.constant(b.tensor.clone()) })
                .collect();
            let model = BoundModel::from_vars(g, config, vars)?;
            let xv = g.constant(x.clone());
            objective(g, &model, xv)
        };
        reports.push(grad_check_with_fault(f, &params.blocks()[k].tensor, MODEL_EPS, fault)?);
    }
    if wrt_input {
        let f = |g: &mut Graph<f64>, xv: Var| {
            let model = params.bind(g, false)?;
            objective(g, &model, xv)
        };
        reports.push(grad_check_with_fault(f, x, MODEL_EPS, fault)?);
    }
    Ok(reports
        .into_iter()
        .reduce(|a, b| if b.max_rel_error > a.max_rel_error { b } else { a })
        .expect("model has parameters"))
}

fn images(n: usize, seed: u64) -> Tensor<f64> {
    let c = tiny_config();
    let raw = cyclevae_autograd::gradcheck::fixture(&[n, c.image_channels, c.image_size, c.image_size], seed);
    // map [-1, 1] into (0, 1)
    Tensor::new(raw.shape().to_vec(), raw.data().iter().map(|v| 0.5 + 0.45 * v).collect()).expect("shape")
}

/// Checks the composed encoder/decoder, the forward-cycle loss and the
/// reverse-cycle loss on the tiny configuration.
pub fn model_suite(fault: Option<OpKind>) -> Result<Vec<ModelCheck>> {
    let config = tiny_config();
    let params = ModelParams::<f64>::init(&config, 11)?;
    let b = 2;
    let x1 = images(b, 3);
    let x2 = images(b, 8);
    let fixture = cyclevae_autograd::gradcheck::fixture;
    let noise1 = fixture(&[b, config.z_dim], 4);
    let noise2 = fixture(&[b, config.z_dim], 5);
    let prior = fixture(&[b, config.z_dim], 6);
    let readout_w = fixture(&[b, config.image_channels, config.image_size, config.image_size], 7);
    let weights = LossWeights::default();

    let encode_decode = |g: &mut Graph<f64>, m: &BoundModel, x: Var| {
        let e = m.encode(g, x)?;
        let z = reparameterize(g, e.mu, e.log_var, noise1.clone())?;
        let x2v = g.constant(x2.clone());
        let s_other = m.encode(g, x2v)?.s;
        let out = m.decode(g, z, s_other)?;
        let w = g.constant(readout_w.clone());
        let p = g.mul(out, w)?;
        g.sum(p)
    };
    let forward = |g: &mut Graph<f64>, m: &BoundModel, x: Var| {
        let x2v = g.constant(x2.clone());
        Ok(forward_cycle_loss(g, m, x, x2v, noise1.clone(), noise2.clone(), &weights)?.total)
    };
    let reverse = |g: &mut Graph<f64>, m: &BoundModel, x: Var| {
        let x2v = g.constant(x2.clone());
        let z = g.constant(prior.clone());
        Ok(reverse_cycle_loss(g, m, x, x2v, z)?)
    };
    Ok(vec![
        ModelCheck {
            name: "encode_decode",
            report: check_objective(&params, &x1, &encode_decode, true, fault)?,
        },
        ModelCheck {
            name: "forward_cycle_loss",
            report: check_objective(&params, &x1, &forward, true, fault)?,
        },
        ModelCheck {
            name: "reverse_cycle_loss",
            report: check_objective(&params, &x1, &reverse, true, fault)?,
        },
    ])
}
