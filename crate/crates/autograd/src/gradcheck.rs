//! Central finite-difference check of reverse-mode gradients.

use crate::{Graph, OpKind, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst component.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares the backward gradient of the scalar function `f` at `point`
/// against central differences with step `eps`, component by component.
///
/// The relative error of a component is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>,
{
    grad_check_with_fault(f, point, eps, None)
}

/// Same as [`grad_check`], with the backward rule of `fault` corrupted in the
/// analytic pass.
pub fn grad_check_with_fault<F>(
    f: F,
    point: &Tensor<f64>,
    eps: f64,
    fault: Option<OpKind>,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(TensorError::Usage(format!("finite-difference step {eps} outside [1e-6, 1e-3]")));
    }
    let mut g = Graph::new();
    g.inject_fault(fault);
    let x = g.param(point.clone());
    let out = f(&mut g, x)?;
    if g.value(out).numel() != 1 {
        return Err(TensorError::Usage(format!(
            "gradient check needs a scalar function, got shape {:?}",
            g.shape(out)
        )));
    }
    let analytic = g.backward(out)?.wrt(&g, x);

    let eval = |p: Tensor<f64>| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let x = g.param(p);
        let out = f(&mut g, x)?;
        Ok(g.value(out).data()[0])
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: point.numel(),
    };
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = relative_error(a, numeric);
        if err > report.max_rel_error || i == 0 {
            report = GradCheckReport {
                max_rel_error: err.max(report.max_rel_error),
                worst_index: i,
                analytic: a,
                numeric,
                checked: report.checked,
            };
        }
    }
    Ok(report)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Step used by [`op_suite`].
pub const SUITE_EPS: f64 = 1e-6;

/// Result of checking one operation.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub op: OpKind,
    /// Worst report over every differentiable argument of the op.
    pub report: GradCheckReport,
}

/// Deterministic values in `[-1, -0.1] U [0.1, 1]`, away from the kinks of
/// `relu` and `abs`.
pub fn fixture(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
    Tensor::from_fn(shape, |_| {
        // splitmix64
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        let u = (z >> 11) as f64 / (1u64 << 53) as f64;
        let mag = 0.1 + 0.9 * (2.0 * u - 1.0).abs();
        if u < 0.5 {
            -mag
        } else {
            mag
        }
    })
}

fn readout(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var, TensorError> {
    let w = g.constant(fixture(g.shape(y), seed));
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn worst(reports: Vec<GradCheckReport>) -> GradCheckReport {
    reports
        .into_iter()
        .reduce(|a, b| if b.max_rel_error > a.max_rel_error { b } else { a })
        .expect("at least one check")
}

/// Checks every differentiable op once, in [`OpKind::DIFFERENTIABLE`] order,
/// on small double-precision inputs. With `fault` set, that op's backward
/// rule is corrupted in the analytic pass.
pub fn op_suite(fault: Option<OpKind>) -> Result<Vec<OpCheck>, TensorError> {
    let eps = SUITE_EPS;
    let chk = |f: &dyn Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>, p: &Tensor<f64>| grad_check_with_fault(f, p, eps, fault);
    let x4 = fixture(&[2, 3, 3, 3], 1);
    let mut out = Vec::new();
    for op in OpKind::DIFFERENTIABLE {
        let reports = match op {
            OpKind::Linear => {
                let (w0, b0, x0) = (fixture(&[4, 3], 2), fixture(&[4], 3), fixture(&[2, 3], 4));
                vec![
                    chk(&|g, x| { let (w, b) = (g.constant(w0.clone()), g.constant(b0.clone())); let y = g.linear(x, w, b)?; readout(g, y, 5) }, &x0)?,
                    chk(&|g, w| { let (x, b) = (g.constant(x0.clone()), g.constant(b0.clone())); let y = g.linear(x, w, b)?; readout(g, y, 5) }, &w0)?,
                    chk(&|g, b| { let (x, w) = (g.constant(x0.clone()), g.constant(w0.clone())); let y = g.linear(x, w, b)?; readout(g, y, 5) }, &b0)?,
                ]
            }
            OpKind::Conv2d => {
                let (k0, b0, x0) = (fixture(&[3, 2, 3, 3], 6), fixture(&[3], 7), fixture(&[2, 2, 7, 7], 8));
                vec![
                    chk(&|g, x| { let (k, b) = (g.constant(k0.clone()), g.constant(b0.clone())); let y = g.conv2d(x, k, Some(b), 2, 1)?; readout(g, y, 9) }, &x0)?,
                    chk(&|g, k| { let (x, b) = (g.constant(x0.clone()), g.constant(b0.clone())); let y = g.conv2d(x, k, Some(b), 2, 1)?; readout(g, y, 9) }, &k0)?,
                    chk(&|g, b| { let (x, k) = (g.constant(x0.clone()), g.constant(k0.clone())); let y = g.conv2d(x, k, Some(b), 2, 1)?; readout(g, y, 9) }, &b0)?,
                ]
            }
            OpKind::ConvTranspose2d => {
                let (k0, b0, x0) = (fixture(&[2, 3, 5, 5], 10), fixture(&[3], 11), fixture(&[2, 2, 4, 4], 12));
                vec![
                    chk(&|g, x| { let (k, b) = (g.constant(k0.clone()), g.constant(b0.clone())); let y = g.conv2d_transpose(x, k, Some(b), 2, 2, 1)?; readout(g, y, 13) }, &x0)?,
                    chk(&|g, k| { let (x, b) = (g.constant(x0.clone()), g.constant(b0.clone())); let y = g.conv2d_transpose(x, k, Some(b), 2, 2, 1)?; readout(g, y, 13) }, &k0)?,
                    chk(&|g, b| { let (x, k) = (g.constant(x0.clone()), g.constant(k0.clone())); let y = g.conv2d_transpose(x, k, Some(b), 2, 2, 1)?; readout(g, y, 13) }, &b0)?,
                ]
            }
            OpKind::InstanceNorm => vec![chk(&|g, x| { let y = g.instance_norm(x, 1e-5)?; readout(g, y, 14) }, &x4)?],
            OpKind::Relu => vec![chk(&|g, x| { let y = g.relu(x)?; readout(g, y, 15) }, &x4)?],
            OpKind::Sigmoid => vec![chk(&|g, x| { let y = g.sigmoid(x)?; readout(g, y, 16) }, &x4)?],
            OpKind::Exp => vec![chk(&|g, x| { let y = g.exp(x)?; readout(g, y, 17) }, &x4)?],
            OpKind::Abs => vec![chk(&|g, x| { let y = g.abs(x)?; readout(g, y, 18) }, &x4)?],
            OpKind::Square => vec![chk(&|g, x| { let y = g.square(x)?; readout(g, y, 19) }, &x4)?],
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                let c0 = fixture(&[2, 3, 3, 3], 20);
                let apply = move |g: &mut Graph<f64>, a: Var, b: Var| match op {
                    OpKind::Add => g.add(a, b),
                    OpKind::Sub => g.sub(a, b),
                    _ => g.mul(a, b),
                };
                vec![
                    chk(&|g, x| { let c = g.constant(c0.clone()); let y = apply(g, x, c)?; readout(g, y, 21) }, &x4)?,
                    chk(&|g, x| { let c = g.constant(c0.clone()); let y = apply(g, c, x)?; readout(g, y, 21) }, &x4)?,
                ]
            }
            OpKind::Scale => vec![chk(&|g, x| { let y = g.scale(x, -0.7)?; readout(g, y, 22) }, &x4)?],
            OpKind::AddScalar => vec![chk(&|g, x| { let y = g.add_scalar(x, 2.0)?; readout(g, y, 23) }, &x4)?],
            OpKind::Sum => vec![chk(&|g, x| { let y = g.sum(x)?; g.square(y) }, &x4)?],
            OpKind::Reshape => vec![chk(&|g, x| { let y = g.reshape(x, &[6, 9])?; readout(g, y, 24) }, &x4)?],
            OpKind::Concat => {
                let (a0, m0) = (fixture(&[3, 2], 25), fixture(&[3, 4], 26));
                vec![
                    chk(&|g, x| { let m = g.constant(m0.clone()); let y = g.concat(x, m)?; readout(g, y, 27) }, &a0)?,
                    chk(&|g, x| { let a = g.constant(a0.clone()); let y = g.concat(a, x)?; readout(g, y, 27) }, &m0)?,
                ]
            }
            OpKind::SoftmaxCrossEntropy => {
                vec![chk(&|g, x| { let y = g.scale(x, 3.0)?; g.softmax_cross_entropy(y, &[0, 2, 1, 2]) }, &fixture(&[4, 3], 28))?]
            }
            OpKind::Leaf => continue,
        };
        out.push(OpCheck { op, report: worst(reports) });
    }
    Ok(out)
}
