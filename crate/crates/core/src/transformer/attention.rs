//! Scaled dot-product self-attention and its multi-head composition.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Single-head attention over `p` (`[n x d]` or `[B x n x d]`):
/// `softmax(Q K^T / sqrt(d_q)) V` with `Q = P Wq`, `K = P Wk`, `V = P Wv`.
///
/// Returns the attended values (same rank as `p`, last axis `d_v`) and the
/// attention weights `[B x n x n]`.
pub fn self_attention(tape: &mut Tape, p: Var, wq: Var, wk: Var, wv: Var) -> Result<(Var, Var)> {
    let shape = tape.shape(p).to_vec();
    let (batch, n, d) = match shape.as_slice() {
        [n, d] => (1, *n, *d),
        [b, n, d] => (*b, *n, *d),
        _ => return Err(Error::dim("self_attention", format!("expected [n,d] or [B,n,d], got {shape:?}"))),
    };
    for w in [wq, wk, wv] {
        if tape.shape(w).len() != 2 || tape.shape(w)[0] != d {
            return Err(Error::dim(
                "self_attention",
                format!("weight {:?} does not accept inputs of width {d}", tape.shape(w)),
            ));
        }
    }
    let dq = tape.shape(wq)[1];
    if tape.shape(wk)[1] != dq {
        return Err(Error::dim("self_attention", "query and key widths differ"));
    }
    let p3 = tape.reshape(p, &[batch, n, d])?;
    let q = tape.linear(p3, wq, None)?;
    let k = tape.linear(p3, wk, None)?;
    let v = tape.linear(p3, wv, None)?;
    let scores = tape.bmm(q, k, true)?;
    let scaled = tape.scale(scores, 1.0 / (dq as f32).sqrt())?;
    let attn = tape.softmax(scaled, 2, 1.0)?;
    let out = tape.bmm(attn, v, false)?;
    let out = if shape.len() == 2 {
        let dv = tape.shape(wv)[1];
        tape.reshape(out, &[n, dv])?
    } else {
        out
    };
    Ok((out, attn))
}

/// Multi-head self-attention. `wq`, `wk`, `wv` are `[d x h*d_h]` with head
/// `i` owning columns `i*d_h .. (i+1)*d_h`; the concatenated head outputs
/// are projected by `wo` (`[h*d_h x d]`).
///
/// Returns the projected output `[B x n x d]` and the attention weights
/// `[B x h x n x n]`.
pub fn multi_head(
    tape: &mut Tape,
    p: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    heads: usize,
) -> Result<(Var, Var)> {
    let shape = tape.shape(p).to_vec();
    if shape.len() != 3 {
        return Err(Error::dim("multi_head", format!("expected [B,n,d], got {shape:?}")));
    }
    let (batch, n, _) = (shape[0], shape[1], shape[2]);
    let inner = tape.shape(wq)[1];
    if heads == 0 || inner % heads != 0 {
        return Err(Error::dim("multi_head", format!("{inner} columns do not split into {heads} heads")));
    }
    if tape.shape(wo)[0] != inner {
        return Err(Error::dim(
            "multi_head",
            format!("output projection {:?} expects {} concatenated features", tape.shape(wo), inner),
        ));
    }
    let dh = inner / heads;
    let split = |tape: &mut Tape, w: Var| -> Result<Var> {
        let x = tape.linear(p, w, None)?;
        let x = tape.reshape(x, &[batch, n, heads, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[batch * heads, n, dh])
    };
    let q = split(tape, wq)?;
    let k = split(tape, wk)?;
    let v = split(tape, wv)?;
    let scores = tape.bmm(q, k, true)?;
    let scaled = tape.scale(scores, 1.0 / (dh as f32).sqrt())?;
    let attn = tape.softmax(scaled, 2, 1.0)?;
    let out = tape.bmm(attn, v, false)?;
    let out = tape.reshape(out, &[batch, heads, n, dh])?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    let out = tape.reshape(out, &[batch, n, inner])?;
    let out = tape.linear(out, wo, None)?;
    let attn = tape.reshape(attn, &[batch, heads, n, n])?;
    Ok((out, attn))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(tape: &mut Tape, shape: &[usize], data: &[f32]) -> Var {
        tape.constant(Tensor::new(shape.to_vec(), data.to_vec()).unwrap())
    }

    #[test]
    fn single_token_returns_value_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::randn(&[1, 4], 1.0, &mut rng));
        let wq = tape.constant(Tensor::randn(&[4, 3], 1.0, &mut rng));
        let wk = tape.constant(Tensor::randn(&[4, 3], 1.0, &mut rng));
        let wv = tape.constant(Tensor::randn(&[4, 3], 1.0, &mut rng));
        let (out, attn) = self_attention(&mut tape, p, wq, wk, wv).unwrap();
        let v = tape.matmul(p, wv).unwrap();
        assert_eq!(tape.value(attn), &[1.0]);
        assert_eq!(tape.value(out), tape.value(v));
    }

    #[test]
    fn identical_rows_attend_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 0.3, -1.0, 2.0]).unwrap());
        let wq = tape.constant(Tensor::randn(&[3, 2], 1.0, &mut rng));
        let wk = tape.constant(Tensor::randn(&[3, 2], 1.0, &mut rng));
        let wv = tape.constant(Tensor::randn(&[3, 2], 1.0, &mut rng));
        let (out, attn) = self_attention(&mut tape, p, wq, wk, wv).unwrap();
        assert!(tape.value(attn).iter().all(|&a| (a - 0.5).abs() < 1e-7));
        let v = tape.matmul(p, wv).unwrap();
        let vv = tape.value(v).to_vec();
        let o = tape.value(out);
        for j in 0..2 {
            let mean = 0.5 * (vv[j] + vv[2 + j]);
            assert!((o[j] - mean).abs() < 1e-6 && (o[2 + j] - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn two_token_hand_case() {
        // P = [[1,0],[0,1]], Wq = Wk = Wv = I, d_q = 2.
        // QK^T / sqrt(2) = [[1,0],[0,1]] / sqrt(2); row 0 softmax:
        // [e^(1/sqrt2), 1] / (e^(1/sqrt2) + 1).
        let mut tape = Tape::new();
        let p = c(&mut tape, &[2, 2], &[1., 0., 0., 1.]);
        let i = c(&mut tape, &[2, 2], &[1., 0., 0., 1.]);
        let (out, attn) = self_attention(&mut tape, p, i, i, i).unwrap();
        let e = (1.0f64 / 2f64.sqrt()).exp();
        let a0 = e / (e + 1.0);
        let a1 = 1.0 / (e + 1.0);
        let expected_attn = [a0, a1, a1, a0];
        for (g, w) in tape.value(attn).iter().zip(expected_attn) {
            assert!((*g as f64 - w).abs() < 1e-6);
        }
        let expected_out = [a0, a1, a1, a0];
        for (g, w) in tape.value(out).iter().zip(expected_out) {
            assert!((*g as f64 - w).abs() < 1e-6);
        }
    }

    #[test]
    fn one_head_with_identity_projection_is_self_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::randn(&[1, 5, 4], 1.0, &mut rng));
        let wq = tape.constant(Tensor::randn(&[4, 4], 0.5, &mut rng));
        let wk = tape.constant(Tensor::randn(&[4, 4], 0.5, &mut rng));
        let wv = tape.constant(Tensor::randn(&[4, 4], 0.5, &mut rng));
        let wo = tape.constant(Tensor::eye(4));
        let (mh, _) = multi_head(&mut tape, p, wq, wk, wv, wo, 1).unwrap();
        let (sa, _) = self_attention(&mut tape, p, wq, wk, wv).unwrap();
        for (a, b) in tape.value(mh).iter().zip(tape.value(sa)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn two_heads_equal_manual_concat_and_project() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, d, h) = (4, 6, 2);
        let dh = d / h;
        let p = Tensor::randn(&[1, n, d], 1.0, &mut rng);
        let ws: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[d, d], 0.5, &mut rng)).collect();
        let wo = Tensor::randn(&[d, d], 0.5, &mut rng);

        let mut tape = Tape::new();
        let pv = tape.constant(p.clone());
        let wv: Vec<Var> = ws.iter().map(|w| tape.constant(w.clone())).collect();
        let wov = tape.constant(wo.clone());
        let (mh, _) = multi_head(&mut tape, pv, wv[0], wv[1], wv[2], wov, h).unwrap();
        let mh = tape.value(mh).to_vec();

        // Independent route: slice each head's columns, attend, concat, project.
        let cols = |w: &Tensor, head: usize| {
            let mut out = vec![];
            for r in 0..d {
                out.extend_from_slice(&w.row(r)[head * dh..(head + 1) * dh]);
            }
            Tensor::new(vec![d, dh], out).unwrap()
        };
        let mut concat = vec![0.0f32; n * d];
        for head in 0..h {
            let mut tp = Tape::new();
            let pv = tp.constant(p.clone().reshape(&[n, d]).unwrap());
            let q = tp.constant(cols(&ws[0], head));
            let k = tp.constant(cols(&ws[1], head));
            let v = tp.constant(cols(&ws[2], head));
            let (a, _) = self_attention(&mut tp, pv, q, k, v).unwrap();
            for r in 0..n {
                concat[r * d + head * dh..r * d + (head + 1) * dh]
                    .copy_from_slice(&tp.value(a)[r * dh..(r + 1) * dh]);
            }
        }
        for r in 0..n {
            for j in 0..d {
                let manual: f32 = (0..d).map(|k| concat[r * d + k] * wo.row(k)[j]).sum();
                assert!((manual - mh[r * d + j]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn projection_mismatch_is_dimension_error() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::zeros(&[1, 2, 4]));
        let w = tape.constant(Tensor::zeros(&[4, 4]));
        let wo = tape.constant(Tensor::zeros(&[3, 4]));
        assert!(multi_head(&mut tape, p, w, w, w, wo, 2).is_err());
        let bad = tape.constant(Tensor::zeros(&[3, 4]));
        assert!(self_attention(&mut tape, p, bad, w, w).is_err());
    }
}
