use serde::{Deserialize, Serialize};

use super::{Tensor, TensorError, TensorResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl AdamMoments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One bias-corrected Adam update of `params` in place. `step` is the
/// 1-based index of this update within the parameter group.
pub fn adam_step(
    params: &mut [f32],
    grads: &[f32],
    moments: &mut AdamMoments,
    step: u64,
    cfg: &AdamConfig,
) -> TensorResult<()> {
    let n = params.len();
    if grads.len() != n || moments.m.len() != n || moments.v.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "adam_step",
            lhs: vec![n],
            rhs: vec![grads.len(), moments.m.len(), moments.v.len()],
        });
    }
    let bc1 = 1.0 - (cfg.beta1 as f64).powi(step as i32);
    let bc2 = 1.0 - (cfg.beta2 as f64).powi(step as i32);
    let (bc1, bc2) = (bc1 as f32, bc2 as f32);
    for i in 0..n {
        let g = grads[i];
        let m = cfg.beta1 * moments.m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * moments.v[i] + (1.0 - cfg.beta2) * g * g;
        moments.m[i] = m;
        moments.v[i] = v;
        let update = (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
        params[i] -= cfg.lr * update;
    }
    Ok(())
}

/// Adam state for one parameter group. The step counter only advances when
/// this group is actually updated.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    moments: Vec<AdamMoments>,
    step: u64,
}

impl Adam {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        Self {
            moments: params
                .into_iter()
                .map(|p| AdamMoments::zeros(p.numel()))
                .collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &[AdamMoments] {
        &self.moments
    }

    /// Updates every tensor from its accumulated gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor], cfg: &AdamConfig) -> TensorResult<()> {
        if params.len() != self.moments.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam",
                lhs: vec![self.moments.len()],
                rhs: vec![params.len()],
            });
        }
        self.step += 1;
        for (p, mom) in params.iter_mut().zip(self.moments.iter_mut()) {
            let (data, grad) = p.data_and_grad_mut();
            match grad {
                Some(g) => adam_step(data, g, mom, self.step, cfg)?,
                None => {
                    let zeros = vec![0.0; data.len()];
                    adam_step(data, &zeros, mom, self.step, cfg)?
                }
            }
            super::check_finite("adam", p.data())?;
        }
        Ok(())
    }
}
