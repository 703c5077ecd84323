//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::params::ParamSet;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Apply weight decay to rank-1 tensors (biases, norm gains) too.
    pub decay_vectors: bool,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamWState {
    /// Zeroed moments mirroring `params`, with the usual
    /// `beta1 = 0.9, beta2 = 0.999, eps = 1e-8`.
    pub fn new(params: &ParamSet) -> Self {
        Self::with_betas(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &ParamSet, beta1: f32, beta2: f32, eps: f32) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamWState {
            step: 0,
            beta1,
            beta2,
            eps,
            decay_vectors: false,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn first_moments(&self) -> &[Vec<f32>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f32>] {
        &self.v
    }

    /// Restores moment buffers, e.g. from a checkpoint.
    pub fn set_moments(&mut self, step: u64, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>) -> Result<()> {
        let ok = |bufs: &Vec<Vec<f32>>| {
            bufs.len() == self.m.len() && bufs.iter().zip(&self.m).all(|(a, b)| a.len() == b.len())
        };
        if !ok(&m) || !ok(&v) {
            return Err(Error::Checkpoint("optimizer moments do not match parameters".into()));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update of every parameter carrying a gradient. Parameters without
    /// a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamSet, lr: f32, weight_decay: f32) -> Result<()> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::Parameter(format!("learning rate must be >= 0, got {lr}")));
        }
        if params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors but {} were given",
                self.m.len(),
                params.len()
            )));
        }
        for (name, t) in params.iter() {
            if let Some(g) = t.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Training(format!("non-finite gradient for parameter {name}")));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((_, tensor), (m, v)) in params.iter_mut().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let g = match tensor.grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            let decay = if tensor.rank() > 1 || self.decay_vectors {
                lr * weight_decay
            } else {
                0.0
            };
            let data = tensor.data_mut();
            for i in 0..data.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= decay * data[i];
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamWState::step`].
pub fn adamw_step(params: &mut ParamSet, state: &mut AdamWState, lr: f32, wd: f32) -> Result<()> {
    state.step(params, lr, wd)
}
