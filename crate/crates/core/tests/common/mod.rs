//! Plain-loop reference implementations shared by the integration tests.
#![allow(dead_code)]

use bridgeseg::nn::AttentionParams;
use bridgeseg::params::Module;
use bridgeseg::Tensor64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn normal(shape: &[usize], scale: f64, seed: u64) -> Tensor64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor64::new(shape, data).unwrap()
}

/// Adds N(0, scale²) noise to every parameter.
pub fn jitter<M: Module<f64>>(m: &mut M, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    m.visit_params_mut("", &mut |_, t| {
        for v in t.data_mut() {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    });
}

/// `x [rows, cin] · w [cin, cout] + b`.
pub fn affine(x: &[f64], rows: usize, w: &[f64], cin: usize, cout: usize, b: Option<&[f64]>) -> Vec<f64> {
    let mut y = vec![0.0; rows * cout];
    for r in 0..rows {
        for o in 0..cout {
            let mut s = b.map_or(0.0, |b| b[o]);
            for i in 0..cin {
                s += x[r * cin + i] * w[i * cout + o];
            }
            y[r * cout + o] = s;
        }
    }
    y
}

pub fn layernorm_rows(x: &[f64], width: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(width) {
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let sd = (var + eps).sqrt();
        out.extend(row.iter().enumerate().map(|(i, v)| (v - mean) / sd * gamma[i] + beta[i]));
    }
    out
}

/// Φ by Simpson's rule on the standard normal density.
pub fn normal_cdf(x: f64) -> f64 {
    let steps = 4000;
    let h = x / steps as f64;
    let pdf = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(0.0) + pdf(x);
    for i in 1..steps {
        s += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    0.5 + s * h / 3.0
}

pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// Textbook multi-head attention for a single batch item: queries from
/// `x [L, C]`, keys and values from `kv [Lk, C]`, heads taking contiguous
/// channel blocks, scores scaled by `1/√(C/heads)`.
pub fn dense_mha(x: &[f64], l: usize, kv: &[f64], lk: usize, c: usize, heads: usize, a: &AttentionParams<f64>) -> Vec<f64> {
    let q = affine(x, l, a.wq.weight.data(), c, c, None);
    let k = affine(kv, lk, a.wk.weight.data(), c, c, None);
    let v = affine(kv, lk, a.wv.weight.data(), c, c, None);
    let dh = c / heads;
    let mut ctx = vec![0.0; l * c];
    for h in 0..heads {
        for i in 0..l {
            let mut scores: Vec<f64> = (0..lk)
                .map(|j| (0..dh).map(|d| q[i * c + h * dh + d] * k[j * c + h * dh + d]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - m).exp();
                z += *s;
            }
            for d in 0..dh {
                ctx[i * c + h * dh + d] = (0..lk).map(|j| scores[j] / z * v[j * c + h * dh + d]).sum();
            }
        }
    }
    affine(&ctx, l, a.wo.weight.data(), c, c, a.wo.bias.as_ref().map(|b| b.data()))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
