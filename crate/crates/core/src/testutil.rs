//! Shared fixtures and independent f64 oracles for unit tests.

use crate::backbone::{BackboneConfig, LN_EPS};
use crate::params::{BackboneParams, LayerParams, LnParams};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub fn micro_cfg() -> BackboneConfig {
    BackboneConfig {
        image_h: 8,
        image_w: 8,
        patch_size: 8,
        channels: 1,
        embed_dim: 8,
        num_layers: 1,
        num_heads: 2,
        ffn_dim: 16,
        num_classes: 4,
    }
}

pub fn desk_cfg() -> BackboneConfig {
    BackboneConfig {
        image_h: 32,
        image_w: 16,
        patch_size: 8,
        channels: 1,
        embed_dim: 64,
        num_layers: 4,
        num_heads: 4,
        ffn_dim: 128,
        num_classes: 8,
    }
}

pub fn init_backbone(cfg: &BackboneConfig, rng: &mut Rng) -> BackboneParams<Tensor> {
    crate::backbone::init_params(cfg, rng)
}

/// A layer whose attention and FFN weights are all zero, so the block
/// reduces to the residual identity.
pub fn zero_layer(d: usize, ffn_dim: usize) -> LayerParams<Tensor> {
    LayerParams {
        ln1: LnParams::init(d),
        wq: Tensor::zeros(vec![d, d]),
        bq: Tensor::zeros(vec![d]),
        wk: Tensor::zeros(vec![d, d]),
        bk: Tensor::zeros(vec![d]),
        wv: Tensor::zeros(vec![d, d]),
        bv: Tensor::zeros(vec![d]),
        wo: Tensor::zeros(vec![d, d]),
        bo: Tensor::zeros(vec![d]),
        ln2: LnParams::init(d),
        ffn_w1: Tensor::zeros(vec![d, ffn_dim]),
        ffn_b1: Tensor::zeros(vec![ffn_dim]),
        ffn_w2: Tensor::zeros(vec![ffn_dim, d]),
        ffn_b2: Tensor::zeros(vec![d]),
    }
}

pub fn random_image(cfg: &BackboneConfig, rng: &mut Rng) -> Tensor {
    let n = cfg.channels * cfg.image_h * cfg.image_w;
    let data: Vec<f32> = (0..n).map(|_| rng.uniform(0.0, 1.0)).collect();
    Tensor::from_vec(vec![cfg.channels, cfg.image_h, cfg.image_w], data).unwrap()
}

/// Naive per-head multi-head attention in f64, independent of the tape.
pub fn mha_oracle(
    q_in: &[f64],
    a: usize,
    k_in: &[f64],
    v_in: &[f64],
    b: usize,
    d: usize,
    heads: usize,
    lw: &LayerParams<Tensor>,
) -> Vec<f64> {
    let dk = d / heads;
    let proj = |x: &[f64], rows: usize, w: &Tensor, bias: &Tensor| -> Vec<f64> {
        let mut out = vec![0f64; rows * d];
        for r in 0..rows {
            for c in 0..d {
                let mut acc = bias.data()[c] as f64;
                for i in 0..d {
                    acc += x[r * d + i] * w.data()[i * d + c] as f64;
                }
                out[r * d + c] = acc;
            }
        }
        out
    };
    let q = proj(q_in, a, &lw.wq, &lw.bq);
    let k = proj(k_in, b, &lw.wk, &lw.bk);
    let v = proj(v_in, b, &lw.wv, &lw.bv);
    let mut ctx = vec![0f64; a * d];
    for h in 0..heads {
        for r in 0..a {
            let mut scores = vec![0f64; b];
            for s in 0..b {
                let mut acc = 0f64;
                for i in 0..dk {
                    acc += q[r * d + h * dk + i] * k[s * d + h * dk + i];
                }
                scores[s] = acc / (dk as f64).sqrt();
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for s in 0..b {
                let p = (scores[s] - m).exp() / denom;
                for i in 0..dk {
                    ctx[r * d + h * dk + i] += p * v[s * d + h * dk + i];
                }
            }
        }
    }
    let mut out = vec![0f64; a * d];
    for r in 0..a {
        for c in 0..d {
            let mut acc = lw.bo.data()[c] as f64;
            for i in 0..d {
                acc += ctx[r * d + i] * lw.wo.data()[i * d + c] as f64;
            }
            out[r * d + c] = acc;
        }
    }
    out
}

/// Row-wise LayerNorm in f64.
pub fn ln_oracle(x: &[f64], d: usize, gamma: &Tensor, beta: &Tensor) -> Vec<f64> {
    let rows = x.len() / d;
    let mut out = vec![0f64; x.len()];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        for c in 0..d {
            out[r * d + c] = (row[c] - mean) * rstd * gamma.data()[c] as f64 + beta.data()[c] as f64;
        }
    }
    out
}

/// `x W + b` in f64 against f32 weights.
pub fn linear_oracle(x: &[f64], rows: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0f64; rows * dout];
    for r in 0..rows {
        for c in 0..dout {
            let mut acc = b.data()[c] as f64;
            for i in 0..din {
                acc += x[r * din + i] * w.data()[i * dout + c] as f64;
            }
            out[r * dout + c] = acc;
        }
    }
    out
}

/// Exact (erf-based) GELU, written against libm directly so the oracle does
/// not share code with the tape's implementation.
pub fn gelu64(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Full pre-norm block in f64: `z + MHA(LN1(z))`, then `+ FFN(LN2(.))`.
/// For the X-layer variant pass `cross` inputs; `None` reproduces the
/// instance layer.
pub fn block_oracle(
    z: &[f64],
    rows: usize,
    d: usize,
    heads: usize,
    lw: &LayerParams<Tensor>,
    cross: Option<(&[f64], &[f64], usize)>,
) -> Vec<f64> {
    let n1 = ln_oracle(z, d, &lw.ln1.gamma, &lw.ln1.beta);
    let mut att = mha_oracle(&n1, rows, &n1, &n1, rows, d, heads, lw);
    if let Some((q, k, krows)) = cross {
        let qn = ln_oracle(q, d, &lw.ln1.gamma, &lw.ln1.beta);
        let kn = ln_oracle(k, d, &lw.ln1.gamma, &lw.ln1.beta);
        let cross_att = mha_oracle(&qn, rows, &kn, &kn, krows, d, heads, lw);
        for (a, c) in att.iter_mut().zip(cross_att) {
            *a += c;
        }
    }
    let z1: Vec<f64> = z.iter().zip(&att).map(|(a, b)| a + b).collect();
    let n2 = ln_oracle(&z1, d, &lw.ln2.gamma, &lw.ln2.beta);
    let hidden: Vec<f64> = linear_oracle(&n2, rows, &lw.ffn_w1, &lw.ffn_b1)
        .into_iter()
        .map(gelu64)
        .collect();
    let f = linear_oracle(&hidden, rows, &lw.ffn_w2, &lw.ffn_b2);
    z1.iter().zip(&f).map(|(a, b)| a + b).collect()
}

/// Convenience: widen an f32 slice to f64.
pub fn to64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}
