//! Plain-loop f64 encoder forward, written independently of the tape so it
//! can serve as a high-precision finite-difference oracle.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use specssl::params::Bound;
use specssl::transformer::{EncoderConfig, TokenBatch};
use specssl::{Tape, Tensor};

pub type Params = HashMap<String, Vec<f64>>;

fn linear(x: &[f64], rows: usize, w: &[f64], inp: usize, out: usize, b: Option<&[f64]>) -> Vec<f64> {
    let mut y = vec![0.0; rows * out];
    for r in 0..rows {
        for o in 0..out {
            let mut s = b.map_or(0.0, |b| b[o]);
            for i in 0..inp {
                s += x[r * inp + i] * w[i * out + o];
            }
            y[r * out + o] = s;
        }
    }
    y
}

fn layer_norm(x: &[f64], d: usize, g: &[f64], b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (row, out) in x.chunks(d).zip(y.chunks_mut(d)) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + 1e-5).sqrt();
        for j in 0..d {
            out[j] = (row[j] - mean) * rs * g[j] + b[j];
        }
    }
    y
}

fn gelu(v: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * v * (1.0 + (c * (v + 0.044715 * v.powi(3))).tanh())
}

/// Token outputs `[B x n x d]` (summary token first in spatial mode).
pub fn encoder_forward(cfg: &EncoderConfig, tokens: &TokenBatch, p: &Params) -> Vec<f64> {
    let d = cfg.embed_dim;
    let (b, n0, t) = (tokens.raw.shape()[0], tokens.raw.shape()[1], tokens.raw.shape()[2]);
    let raw: Vec<f64> = tokens.raw.data().iter().map(|&v| v as f64).collect();
    let pos: Vec<f64> = tokens.positions.data().iter().map(|&v| v as f64).collect();
    let mut x = linear(&raw, b * n0, &p["embed.w"], t, d, Some(&p["embed.b"]));
    for (i, v) in x.iter_mut().enumerate() {
        *v += pos[i % pos.len()];
    }
    let n = n0 + usize::from(tokens.summary);
    if tokens.summary {
        let mut with = Vec::with_capacity(b * n * d);
        for s in 0..b {
            with.extend_from_slice(&p["summary"]);
            with.extend_from_slice(&x[s * n0 * d..(s + 1) * n0 * d]);
        }
        x = with;
    }
    let heads = cfg.num_heads;
    let dh = d / heads;
    for blk in 0..cfg.num_blocks {
        let g = |name: &str| &p[&format!("blocks.{blk}.{name}")];
        let q = linear(&x, b * n, g("attn.wq"), d, d, None);
        let k = linear(&x, b * n, g("attn.wk"), d, d, None);
        let v = linear(&x, b * n, g("attn.wv"), d, d, None);
        let mut cat = vec![0.0; b * n * d];
        for s in 0..b {
            for h in 0..heads {
                for i in 0..n {
                    let at = |m: &[f64], r: usize, c: usize| m[(s * n + r) * d + h * dh + c];
                    let scores: Vec<f64> = (0..n)
                        .map(|j| (0..dh).map(|c| at(&q, i, c) * at(&k, j, c)).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|z| (z - max).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for c in 0..dh {
                        cat[(s * n + i) * d + h * dh + c] = (0..n).map(|j| e[j] / z * at(&v, j, c)).sum();
                    }
                }
            }
        }
        let msa = linear(&cat, b * n, g("attn.wo"), d, d, None);
        let res: Vec<f64> = msa.iter().zip(&x).map(|(a, c)| a + c).collect();
        let s1 = layer_norm(&res, d, g("ln1.g"), g("ln1.b"));
        let hidden = cfg.mlp_hidden;
        let h1: Vec<f64> = linear(&s1, b * n, g("mlp.fc1_w"), d, hidden, Some(g("mlp.fc1_b")))
            .into_iter()
            .map(gelu)
            .collect();
        let h2 = linear(&h1, b * n, g("mlp.fc2_w"), hidden, d, Some(g("mlp.fc2_b")));
        let res: Vec<f64> = s1.iter().zip(&h2).map(|(a, c)| a + c).collect();
        x = layer_norm(&res, d, g("ln2.g"), g("ln2.b"));
    }
    x
}

pub struct OracleCheck {
    /// Largest absolute gap between the tape's f32 forward and the reference.
    pub forward_gap: f64,
    /// Norm-wise relative error per parameter tensor.
    pub relative_errors: Vec<(String, f64)>,
}

/// Tape gradients of a random readout of the token outputs against central
/// differences of step `h` on the f64 reference.
pub fn check_encoder(
    cfg: &EncoderConfig,
    tokens: &TokenBatch,
    names: &[String],
    weights: &[Tensor],
    h: f64,
    seed: u64,
) -> OracleCheck {
    let mut tape = Tape::new();
    let vars: Vec<_> = weights.iter().map(|t| tape.param(t, true)).collect();
    let bound = Bound::from_vars(names, vars.clone()).unwrap();
    let out = specssl::transformer::encoder_forward(cfg, &mut tape, tokens, &bound).unwrap().tokens;
    let readout = Tensor::randn(tape.shape(out), 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let rv = tape.constant(readout.clone());
    let prod = tape.mul(out, rv).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut params: Params = names
        .iter()
        .zip(weights)
        .map(|(n, t)| (n.clone(), t.data().iter().map(|&v| v as f64).collect()))
        .collect();
    let reference = encoder_forward(cfg, tokens, &params);
    let forward_gap = reference
        .iter()
        .zip(tape.value(out))
        .map(|(a, &b)| (a - b as f64).abs())
        .fold(0.0, f64::max);
    let w: Vec<f64> = readout.data().iter().map(|&v| v as f64).collect();
    let f = |p: &Params| encoder_forward(cfg, tokens, p).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();

    let mut relative_errors = Vec::new();
    for (name, var) in names.iter().zip(&vars) {
        let analytic: Vec<f64> = match grads.get(*var) {
            Some(g) => g.iter().map(|&v| v as f64).collect(),
            None => vec![0.0; params[name].len()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            let orig = params[name][i];
            params.get_mut(name).unwrap()[i] = orig + h;
            let plus = f(&params);
            params.get_mut(name).unwrap()[i] = orig - h;
            let minus = f(&params);
            params.get_mut(name).unwrap()[i] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = analytic
            .iter()
            .map(|a| a * a)
            .sum::<f64>()
            .sqrt()
            .max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
        relative_errors.push((name.clone(), if scale < 1e-12 { 0.0 } else { diff / scale }));
    }
    OracleCheck {
        forward_gap,
        relative_errors,
    }
}
