#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svg_core::tensor::{Graph, Tensor, Var};

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// `|g_ad - g_fd| / max(1, |g_fd|)`.
pub fn rel_err(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / fd.abs().max(1.0)
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Central finite differences of a scalar function of several tensors,
/// evaluated purely through forward values.
pub fn numeric_gradients(inputs: &[Tensor], f: &dyn Fn(&[Tensor]) -> f64) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        let mut gi = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let mut probe = inputs.to_vec();
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + FD_EPS;
            let up = f(&probe);
            probe[i].data_mut()[j] = orig - FD_EPS;
            let down = f(&probe);
            gi.push((up - down) / (2.0 * FD_EPS));
        }
        out.push(gi);
    }
    out
}

/// Max relative error between backward gradients and finite differences for
/// a loss built by `build` over leaves bound to `inputs`.
pub fn gradient_check(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).unwrap();

    let forward = |ts: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).item()
    };
    let numeric = numeric_gradients(inputs, &forward);
    let mut worst: f64 = 0.0;
    for (v, fd) in vars.iter().zip(&numeric) {
        let ad = grads.get(*v).unwrap();
        for (a, n) in ad.data().iter().zip(fd) {
            worst = worst.max(rel_err(*a, *n));
        }
    }
    worst
}

use svg_core::config::{Mode, ModelConfig};

/// Smallest valid geometry: 8x8 frames, one stride-2 stage.
pub fn tiny_config(mode: Mode) -> ModelConfig {
    ModelConfig {
        mode,
        frame_size: 8,
        channels: vec![3],
        embed_dim: 5,
        predictor_out: 4,
        latent_dim: 2,
        predictor_cells: 6,
        predictor_layers: 2,
        posterior_cells: 5,
        prior_cells: 4,
        ..ModelConfig::default()
    }
}

/// `len` frames `[batch x 1 x size x size]` with pixels in [0, 1].
pub fn random_frames(len: usize, batch: usize, size: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| Tensor::from_fn(&[batch, 1, size, size], |_| rng.random_range(0.0..1.0)))
        .collect()
}

/// One `[batch x dim]` standard-normal tensor per step `t = 1..len`.
pub fn fixed_noise(len: usize, batch: usize, dim: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (1..len)
        .map(|_| svg_core::models::standard_normal(batch, dim, &mut rng))
        .collect()
}

/// SSIM evaluated window by window with the full 2-D Gaussian weights,
/// independent of the separable implementation.
pub fn brute_force_ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let (k, sigma) = (11usize, 1.5f64);
    let c = (k / 2) as f64;
    let mut weights = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let (di, dj) = (i as f64 - c, j as f64 - c);
            weights[i * k + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
        }
    }
    let norm: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|v| *v /= norm);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for y in 0..=h - k {
        for x in 0..=w - k {
            let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let wt = weights[i * k + j];
                    let (p, q) = (a[(y + i) * w + x + j], b[(y + i) * w + x + j]);
                    ma += wt * p;
                    mb += wt * q;
                    aa += wt * p * p;
                    bb += wt * q * q;
                    ab += wt * p * q;
                }
            }
            let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

pub fn random_image(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0.0..1.0)).collect()
}
