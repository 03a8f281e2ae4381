use std::fs;

use cyclevae::autograd::Tensor;
use cyclevae::generation::{conditional_sample, interpolation_grid, swap_grid};
use cyclevae::image_io::{quantize, read_pgm, write_image, ImageFormat};
use cyclevae::model::standard_normal;
use cyclevae::{ModelConfig, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup() -> (ModelParams<f32>, Tensor<f32>) {
    let cfg = ModelConfig {
        image_channels: 1,
        image_size: 12,
        z_dim: 6,
        s_dim: 3,
        trunk_channels: vec![3, 4],
        branch_width: 8,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let imgs = Tensor::from_fn(&[5, 1, 12, 12], |_| rng.gen_range(0.0..1.0));
    (ModelParams::init(&cfg, 9).unwrap(), imgs)
}

fn one(imgs: &Tensor<f32>, i: usize) -> Tensor<f32> {
    Tensor::new(vec![1, 1, 12, 12], imgs.data()[i * 144..(i + 1) * 144].to_vec()).unwrap()
}

#[test]
fn swap_grid_layout_diagonal_and_determinism() {
    let (params, imgs) = setup();
    let g = swap_grid(&imgs, &imgs, &params).unwrap();
    assert_eq!((g.rows, g.cols), (5, 5));
    assert_eq!(g.layout_dims(), (6, 6));
    let recon = params.reconstruct(&imgs).unwrap();
    for i in 0..5 {
        assert_eq!(g.cell(i, i), &recon.data()[i * 144..(i + 1) * 144]);
    }
    assert_eq!(g, swap_grid(&imgs, &imgs, &params).unwrap());
}

#[test]
fn interpolation_midpoint_is_the_affine_average() {
    let (params, imgs) = setup();
    let (a, b) = (one(&imgs, 0), one(&imgs, 1));
    let g = interpolation_grid(&a, &b, 3, &params).unwrap();
    let (ca, cb) = (params.encode(&a).unwrap(), params.encode(&b).unwrap());
    let mid = |x: &Tensor<f32>, y: &Tensor<f32>| {
        let v: Vec<f32> = x.data().iter().zip(y.data()).map(|(p, q)| if p == q { *p } else { 0.5 * p + 0.5 * q }).collect();
        Tensor::new(x.shape().to_vec(), v).unwrap()
    };
    let expect = params.decode(&mid(&ca.mu, &cb.mu), &mid(&ca.s, &cb.s)).unwrap();
    assert_eq!(g.cell(1, 1), expect.data());
    assert_eq!(g.cell(0, 0), params.reconstruct(&a).unwrap().data());
    assert_eq!(g.cell(2, 2), params.reconstruct(&b).unwrap().data());
}

#[test]
fn conditional_samples_use_seeded_prior_draws() {
    let (params, imgs) = setup();
    let n = 400;
    let grid = conditional_sample(&imgs, n, &params, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
    assert_eq!((grid.rows, grid.cols), (5, n));
    assert_eq!(grid, conditional_sample(&imgs, n, &params, &mut ChaCha8Rng::seed_from_u64(21)).unwrap());

    let draws: Tensor<f32> = standard_normal(&[n, 6], &mut ChaCha8Rng::seed_from_u64(21));
    let mean = draws.data().iter().map(|&v| v as f64).sum::<f64>() / (n * 6) as f64;
    assert!(mean.abs() <= 4.0 / ((n * 6) as f64).sqrt(), "{mean}");

    let s = params.encode(&one(&imgs, 2)).unwrap().s;
    let z = Tensor::new(vec![1, 6], draws.data()[6 * 7..6 * 8].to_vec()).unwrap();
    assert_eq!(grid.cell(2, 7), params.decode(&z, &s).unwrap().data());
}

#[test]
fn pgm_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.pgm");
    let pixels: Vec<f32> = (0..35).map(|i| i as f32 / 34.0).collect();
    write_image(&path, 1, 5, 7, &pixels, ImageFormat::Pgm).unwrap();
    let img = read_pgm(&path).unwrap();
    assert_eq!((img.width, img.height), (7, 5));
    let expect: Vec<u8> = pixels.iter().map(|&p| quantize(p).unwrap()).collect();
    assert_eq!(img.bytes, expect);
    assert_eq!((quantize(1.0).unwrap(), quantize(0.5).unwrap(), quantize(0.0).unwrap()), (255, 128, 0));
    assert!(fs::read(&path).unwrap().starts_with(b"P5"));
}
