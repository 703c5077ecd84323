//! Central-difference gradient checking against the tape's reverse pass.
//!
//! The graph built by `f` may have any output shape; it is reduced to a
//! scalar with a fixed random weighting so every output element contributes.
//! Numeric derivatives are accumulated in f64.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Step used by [`check`].
pub const DEFAULT_STEP: f32 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Norm-wise relative error `|a - n| / max(|a|, |n|)` per input.
    pub relative_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(&a, n)| (a as f64 - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n.powi(2)).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

fn readout(values: &[f32], weights: &[f32]) -> f64 {
    values.iter().zip(weights).map(|(&v, &w)| v as f64 * w as f64).sum()
}

/// Compares reverse-mode gradients of every input with central differences
/// of step `h`. `seed` picks the output weighting.
pub fn check<F>(inputs: &[Tensor], f: F, h: f32, seed: u64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t, true)).collect();
    let y = f(&mut tape, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = Tensor::randn(tape.shape(y), 1.0, &mut rng);
    let wv = tape.constant(weights.clone());
    let prod = tape.mul(y, wv)?;
    let loss = tape.sum(prod)?;
    let grads = tape.backward(loss)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tp = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|t| tp.param(t, false)).collect();
        let y = f(&mut tp, &vs)?;
        Ok(readout(tp.value(y), weights.data()))
    };

    let mut relative_errors = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..inputs[k].numel() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * h as f64));
        }
        let err = relative_error(&analytic, &numeric);
        if !err.is_finite() {
            return Err(Error::NonFinite { op: "gradcheck" });
        }
        relative_errors.push(err);
    }
    Ok(GradCheck { relative_errors })
}
