//! Objective terms. Every loss is a batch mean of per-example quantities.

use cyclevae_autograd::{Graph, Scalar, Tensor, Var};

use crate::config::LossWeights;
use crate::error::{Error, Result};
use crate::model::{reparameterize, BoundModel};

fn batch_of<T: Scalar>(g: &Graph<T>, v: Var) -> usize {
    g.shape(v)[0]
}

/// `0.5 * sum_d (mu^2 + exp(log_var) - log_var - 1)`, averaged over the batch.
pub fn kl_standard_normal<T: Scalar>(g: &mut Graph<T>, mu: Var, log_var: Var) -> Result<Var> {
    let mu2 = g.square(mu)?;
    let var = g.exp(log_var)?;
    let t = g.add(mu2, var)?;
    let t = g.sub(t, log_var)?;
    let t = g.add_scalar(t, -1.0)?;
    let total = g.sum(t)?;
    Ok(g.scale(total, 0.5 / batch_of(g, mu) as f64)?)
}

/// Sum of squared pixel differences per image, averaged over the batch.
pub fn reconstruction_l2<T: Scalar>(g: &mut Graph<T>, x_hat: Var, x: Var) -> Result<Var> {
    let d = g.sub(x_hat, x)?;
    let d2 = g.square(d)?;
    let total = g.sum(d2)?;
    Ok(g.scale(total, 1.0 / batch_of(g, x) as f64)?)
}

/// L1 distance between rows, averaged over the batch.
pub fn l1_distance<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d = g.abs(d)?;
    let total = g.sum(d)?;
    Ok(g.scale(total, 1.0 / batch_of(g, a) as f64)?)
}

/// Graph values of the forward-cycle objective and its parts.
#[derive(Debug, Clone, Copy)]
pub struct ForwardTerms {
    pub total: Var,
    /// `KL(z1) + KL(z2)`, unweighted.
    pub kl: Var,
    /// `L2(x1', x1) + L2(x2', x2)`.
    pub recon: Var,
}

fn check_pairs<T: Scalar>(g: &Graph<T>, x1: Var, x2: Var, op: &str) -> Result<()> {
    if g.shape(x1) != g.shape(x2) {
        return Err(Error::Consistency(format!(
            "{op}: batches have shapes {:?} and {:?}",
            g.shape(x1),
            g.shape(x2)
        )));
    }
    Ok(())
}

/// Forward cycle on a batch of same-class pairs.
///
/// Both images are encoded, `z1`, `z2` are drawn from their posteriors with
/// the given standard normal `noise1`, `noise2`, and the specified codes are
/// swapped: `x1' = Dec(z1, s2)`, `x2' = Dec(z2, s1)`. The result is
/// `L2(x1', x1) + L2(x2', x2) + kl_weight * (KL(z1) + KL(z2))`.
pub fn forward_cycle_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &BoundModel,
    x1: Var,
    x2: Var,
    noise1: Tensor<T>,
    noise2: Tensor<T>,
    weights: &LossWeights,
) -> Result<ForwardTerms> {
    forward_cycle_impl(g, model, x1, x2, noise1, noise2, weights, true)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn forward_cycle_impl<T: Scalar>(
    g: &mut Graph<T>,
    model: &BoundModel,
    x1: Var,
    x2: Var,
    noise1: Tensor<T>,
    noise2: Tensor<T>,
    weights: &LossWeights,
    swap: bool,
) -> Result<ForwardTerms> {
    check_pairs(g, x1, x2, "forward_cycle_loss")?;
    let e1 = model.encode(g, x1)?;
    let e2 = model.encode(g, x2)?;
    let z1 = reparameterize(g, e1.mu, e1.log_var, noise1)?;
    let z2 = reparameterize(g, e2.mu, e2.log_var, noise2)?;
    let (s_for_1, s_for_2) = if swap { (e2.s, e1.s) } else { (e1.s, e2.s) };
    let x1p = model.decode(g, z1, s_for_1)?;
    let x2p = model.decode(g, z2, s_for_2)?;
    let r1 = reconstruction_l2(g, x1p, x1)?;
    let r2 = reconstruction_l2(g, x2p, x2)?;
    let recon = g.add(r1, r2)?;
    let k1 = kl_standard_normal(g, e1.mu, e1.log_var)?;
    let k2 = kl_standard_normal(g, e2.mu, e2.log_var)?;
    let kl = g.add(k1, k2)?;
    let weighted = g.scale(kl, weights.kl_weight)?;
    let total = g.add(recon, weighted)?;
    Ok(ForwardTerms { total, kl, recon })
}

/// Same terms without swapping `s`: the plain VAE objective on both batches.
#[doc(hidden)]
pub fn unswapped_vae_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &BoundModel,
    x1: Var,
    x2: Var,
    noise1: Tensor<T>,
    noise2: Tensor<T>,
    weights: &LossWeights,
) -> Result<ForwardTerms> {
    forward_cycle_impl(g, model, x1, x2, noise1, noise2, weights, false)
}

/// Pairwise reverse cycle.
///
/// `x1'' = Dec(z, f_s(x1))`, `x2'' = Dec(z, f_s(x2))` for one prior sample
/// `z` per row; both are re-encoded and the posterior means compared:
/// `mean_b |mu(x1'') - mu(x2'')|_1`.
pub fn reverse_cycle_loss<T: Scalar>(g: &mut Graph<T>, model: &BoundModel, x1: Var, x2: Var, z: Var) -> Result<Var> {
    let (m1, m2) = reverse_cycle_means(g, model, x1, x2, z)?;
    l1_distance(g, m1, m2)
}

/// Posterior means of the two re-encoded reverse-cycle images.
pub fn reverse_cycle_means<T: Scalar>(g: &mut Graph<T>, model: &BoundModel, x1: Var, x2: Var, z: Var) -> Result<(Var, Var)> {
    check_pairs(g, x1, x2, "reverse_cycle_loss")?;
    if g.shape(z)[0] != batch_of(g, x1) {
        return Err(Error::Consistency(format!(
            "reverse_cycle_loss: {} prior samples for a batch of {}",
            g.shape(z)[0],
            batch_of(g, x1)
        )));
    }
    let s1 = model.encode(g, x1)?.s;
    let s2 = model.encode(g, x2)?.s;
    let x1pp = model.decode(g, z, s1)?;
    let x2pp = model.decode(g, z, s2)?;
    let m1 = model.encode(g, x1pp)?.mu;
    let m2 = model.encode(g, x2pp)?.mu;
    Ok((m1, m2))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(g: &Graph<f64>, v: Var) -> f64 {
        g.value(v).data()[0]
    }

    fn vec1(g: &mut Graph<f64>, data: &[f64]) -> Var {
        g.constant(Tensor::new(vec![1, data.len()], data.to_vec()).unwrap())
    }

    #[test]
    fn kl_examples() {
        let mut g = Graph::new();
        let (mu, lv) = (vec1(&mut g, &[0.0, 0.0]), vec1(&mut g, &[0.0, 0.0]));
        let k = kl_standard_normal(&mut g, mu, lv).unwrap();
        assert_eq!(scalar(&g, k), 0.0);

        let (mu, lv) = (vec1(&mut g, &[1.0]), vec1(&mut g, &[0.0]));
        let k = kl_standard_normal(&mut g, mu, lv).unwrap();
        assert_eq!(scalar(&g, k), 0.5);

        let (mu, lv) = (vec1(&mut g, &[0.0]), vec1(&mut g, &[2f64.ln()]));
        let k = kl_standard_normal(&mut g, mu, lv).unwrap();
        assert!((scalar(&g, k) - 0.5 * (1.0 - 2f64.ln())).abs() < 1e-15);
        assert!((scalar(&g, k) - 0.1534).abs() < 1e-4);

        let bad = vec1(&mut g, &[0.0, 1.0]);
        assert!(kl_standard_normal(&mut g, mu, bad).is_err());
    }

    #[test]
    fn reconstruction_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 1, 28, 28], |i| (i % 7) as f64 / 7.0));
        let r = reconstruction_l2(&mut g, x, x).unwrap();
        assert_eq!(scalar(&g, r), 0.0);
        let shifted = g.add_scalar(x, 1.0).unwrap();
        let r = reconstruction_l2(&mut g, shifted, x).unwrap();
        assert!((scalar(&g, r) - 784.0).abs() < 1e-9);
        let r2 = reconstruction_l2(&mut g, x, shifted).unwrap();
        assert_eq!(scalar(&g, r), scalar(&g, r2));

        let two = g.constant(Tensor::zeros(&[2, 1, 28, 28]));
        assert!(reconstruction_l2(&mut g, two, x).is_err());
    }

    #[test]
    fn reconstruction_averages_over_batch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[2, 1, 2, 2], 0.5));
        let b = g.constant(Tensor::zeros(&[2, 1, 2, 2]));
        let r = reconstruction_l2(&mut g, a, b).unwrap();
        assert_eq!(scalar(&g, r), 1.0);
    }
}
