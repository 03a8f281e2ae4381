use cyclevae::autograd::{Graph, Tensor, Var};
use cyclevae::losses::{forward_cycle_loss, kl_standard_normal, reconstruction_l2, reverse_cycle_loss, reverse_cycle_means, unswapped_vae_loss};
use cyclevae::model::standard_normal;
use cyclevae::{LossWeights, ModelConfig, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

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

fn images(n: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(&[n, 1, 8, 8], |_| rng.gen_range(0.0..1.0))
}

fn value(g: &Graph<f64>, v: Var) -> f64 {
    g.value(v).data()[0]
}

fn kl_oracle(mu: f64, lv: f64) -> f64 {
    0.5 * (mu * mu + lv.exp() - lv - 1.0)
}

#[test]
fn kl_is_nonnegative_and_zero_only_at_the_prior() {
    let n = 100;
    let grid = |k: usize, lo: f64, hi: f64| if k == n / 2 { 0.0 } else { lo + (hi - lo) * k as f64 / (n - 1) as f64 };
    let mut mus = Vec::new();
    let mut lvs = Vec::new();
    for i in 0..n {
        for j in 0..n {
            mus.push(grid(i, -4.0, 4.0));
            lvs.push(grid(j, -6.0, 6.0));
        }
    }
    let mut zeros = 0;
    for (mu, lv) in mus.iter().zip(&lvs) {
        let mut g = Graph::<f64>::new();
        let m = g.constant(Tensor::new(vec![1, 1], vec![*mu]).unwrap());
        let l = g.constant(Tensor::new(vec![1, 1], vec![*lv]).unwrap());
        let kl = kl_standard_normal(&mut g, m, l).unwrap();
        let v = value(&g, kl);
        assert!((v - kl_oracle(*mu, *lv)).abs() <= 1e-12 * (1.0 + v.abs()));
        assert!(v >= 0.0);
        if v == 0.0 {
            zeros += 1;
            assert_eq!((*mu, *lv), (0.0, 0.0));
        }
    }
    assert_eq!(zeros, 1);
    assert_eq!(mus.len(), 10_000);
}

#[test]
fn kl_and_reconstruction_closed_forms() {
    let mut g = Graph::<f64>::new();
    let mu = g.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
    let lv = g.constant(Tensor::new(vec![1, 2], vec![0.0, 2f64.ln()]).unwrap());
    let kl = kl_standard_normal(&mut g, mu, lv).unwrap();
    assert!((value(&g, kl) - (0.5 + 0.5 * (1.0 - 2f64.ln()))).abs() < 1e-12);

    let x = g.constant(Tensor::full(&[1, 1, 28, 28], 0.25));
    let y = g.constant(Tensor::full(&[1, 1, 28, 28], 1.25));
    let r = reconstruction_l2(&mut g, y, x).unwrap();
    let r2 = reconstruction_l2(&mut g, x, y).unwrap();
    assert_eq!(value(&g, r), 784.0);
    assert_eq!(value(&g, r2), 784.0);
}

#[test]
fn reverse_loss_vanishes_on_identical_batches() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..5 {
        let params = ModelParams::<f64>::init(&cfg, seed).unwrap();
        let x = images(4, &mut rng);
        let z: Tensor<f64> = standard_normal(&[4, 3], &mut rng);
        let mut g = Graph::new();
        let model = params.bind(&mut g, true).unwrap();
        let (a, b, zv) = (g.constant(x.clone()), g.constant(x), g.constant(z));
        let loss = reverse_cycle_loss(&mut g, &model, a, b, zv).unwrap();
        assert_eq!(value(&g, loss), 0.0);
    }
}

#[test]
fn reverse_loss_is_symmetric_and_positive_for_distinct_inputs() {
    let cfg = tiny();
    let params = ModelParams::<f64>::init(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (x1, x2) = (images(4, &mut rng), images(4, &mut rng));
    let z: Tensor<f64> = standard_normal(&[4, 3], &mut rng);
    let mut g = Graph::new();
    let model = params.bind(&mut g, false).unwrap();
    let (a, b, zv) = (g.constant(x1), g.constant(x2), g.constant(z));
    let ab = reverse_cycle_loss(&mut g, &model, a, b, zv).unwrap();
    let ba = reverse_cycle_loss(&mut g, &model, b, a, zv).unwrap();
    assert_eq!(value(&g, ab), value(&g, ba));
    assert!(value(&g, ab) > 0.0);
}

/// `mean_b (|z - mu1''|_1 + |z - mu2''|_1)`, computed outside the graph.
fn absolute_oracle(z: &[f64], m1: &[f64], m2: &[f64], batch: usize) -> f64 {
    let total: f64 = z.iter().zip(m1).zip(m2).map(|((z, a), b)| (z - a).abs() + (z - b).abs()).sum();
    total / batch as f64
}

#[test]
fn pairwise_reverse_loss_never_exceeds_the_absolute_form() {
    let cfg = tiny();
    let params = ModelParams::<f64>::init(&cfg, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let (x1, x2) = (images(3, &mut rng), images(3, &mut rng));
        let z: Tensor<f64> = standard_normal(&[3, 3], &mut rng);
        let mut g = Graph::new();
        let model = params.bind(&mut g, false).unwrap();
        let (a, b, zv) = (g.constant(x1), g.constant(x2), g.constant(z.clone()));
        let pairwise = reverse_cycle_loss(&mut g, &model, a, b, zv).unwrap();
        let (m1, m2) = reverse_cycle_means(&mut g, &model, a, b, zv).unwrap();
        let absolute = absolute_oracle(z.data(), g.value(m1).data(), g.value(m2).data(), 3);
        assert!(value(&g, pairwise) <= absolute + 1e-12);
    }
}

#[test]
fn identical_pairs_make_the_swap_a_no_op() {
    let cfg = tiny();
    let params = ModelParams::<f64>::init(&cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = images(3, &mut rng);
    let n1: Tensor<f64> = standard_normal(&[3, 3], &mut rng);
    let n2: Tensor<f64> = standard_normal(&[3, 3], &mut rng);
    let w = LossWeights::default();
    let mut g = Graph::new();
    let model = params.bind(&mut g, true).unwrap();
    let (a, b) = (g.constant(x.clone()), g.constant(x));
    let swapped = forward_cycle_loss(&mut g, &model, a, b, n1.clone(), n2.clone(), &w).unwrap();
    let plain = unswapped_vae_loss(&mut g, &model, a, b, n1, n2, &w).unwrap();
    assert_eq!(value(&g, swapped.total), value(&g, plain.total));
    assert!(value(&g, swapped.total) >= 0.0);
}

#[test]
fn zero_kl_weight_leaves_pure_reconstruction() {
    let cfg = tiny();
    let params = ModelParams::<f64>::init(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (x1, x2) = (images(2, &mut rng), images(2, &mut rng));
    let n1: Tensor<f64> = standard_normal(&[2, 3], &mut rng);
    let n2: Tensor<f64> = standard_normal(&[2, 3], &mut rng);
    let w = LossWeights {
        kl_weight: 0.0,
        ..LossWeights::default()
    };
    let mut g = Graph::new();
    let model = params.bind(&mut g, true).unwrap();
    let (a, b) = (g.constant(x1), g.constant(x2));
    let t = forward_cycle_loss(&mut g, &model, a, b, n1, n2, &w).unwrap();
    assert_eq!(value(&g, t.total), value(&g, t.recon));
    assert!(value(&g, t.kl) > 0.0);
}
