use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::model::ParamSet;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Iterations between learning-rate reductions.
    pub step_iters: usize,
    /// Multiplier applied at every reduction.
    pub lr_factor: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    /// Desk-scale defaults (batch 16, reductions every 2000 iterations).
    fn default() -> Self {
        Self {
            batch_size: 16,
            step_iters: 2000,
            ..Self::paper()
        }
    }
}

impl OptimizerConfig {
    /// Full-scale schedule: lr 1e-3, momentum 0.9, decay 5e-4, batch 128, x0.1 every 20k.
    pub fn paper() -> Self {
        Self {
            base_lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            step_iters: 20_000,
            lr_factor: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.base_lr > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.batch_size >= 1
            && self.step_iters >= 1
            && self.lr_factor > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid optimizer config {self:?}")))
        }
    }
}

/// `base_lr * lr_factor^floor(iter / step_iters)`.
pub fn lr_at(iter: usize, cfg: &OptimizerConfig) -> f64 {
    cfg.base_lr * cfg.lr_factor.powi((iter / cfg.step_iters) as i32)
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState<T> {
    velocity: Vec<Vec<T>>,
}

impl<T: Real> SgdState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        Self {
            velocity: params.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect(),
        }
    }

    pub fn velocity(&self, i: usize) -> &[T] {
        &self.velocity[i]
    }
}

/// One update `v <- m v + g + wd p; p <- p - lr(iter) v` for every parameter with a gradient.
///
/// Parameters whose gradient is `None` did not take part in the pass and are left alone.
pub fn sgd_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &[Option<Vec<T>>],
    state: &mut SgdState<T>,
    cfg: &OptimizerConfig,
    iter: usize,
) -> Result<()> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(Error::shape(
            "sgd_step",
            format!(
                "{} parameters, {} gradients, {} velocity buffers",
                params.len(),
                grads.len(),
                state.velocity.len()
            ),
        ));
    }
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        if g.len() != params.tensor(i).len() {
            return Err(Error::shape(
                "sgd_step",
                format!("gradient for `{}` has {} values, expected {}", params.name(i), g.len(), params.tensor(i).len()),
            ));
        }
        if g.iter().any(|v| !v.is_finite()) {
            let norm = g.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            return Err(Error::NonFiniteGradient {
                iteration: iter,
                param: params.name(i).to_string(),
                norm,
            });
        }
    }
    let lr = T::of(lr_at(iter, cfg));
    let momentum = T::of(cfg.momentum);
    let decay = T::of(cfg.weight_decay);
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let v = &mut state.velocity[i];
        let p = params.tensor_mut(i).data_mut();
        for ((pj, vj), &gj) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            *vj = momentum * *vj + gj + decay * *pj;
            *pj = *pj - lr * *vj;
        }
    }
    Ok(())
}
