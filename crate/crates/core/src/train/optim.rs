use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// AdamW with global-norm clipping on a warm-up + cosine schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::eps")]
    pub eps: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::clip_norm")]
    pub clip_norm: f64,
    pub max_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    #[serde(default = "defaults::final_lr_fraction")]
    pub final_lr_fraction: f64,
}

mod defaults {
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.95
    }
    pub fn eps() -> f64 {
        1e-5
    }
    pub fn weight_decay() -> f64 {
        0.1
    }
    pub fn clip_norm() -> f64 {
        1.0
    }
    pub fn final_lr_fraction() -> f64 {
        0.1
    }
}

impl OptimizerConfig {
    pub fn new(max_lr: f64, warmup_steps: u64, total_steps: u64) -> Self {
        Self {
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            eps: defaults::eps(),
            weight_decay: defaults::weight_decay(),
            clip_norm: defaults::clip_norm(),
            max_lr,
            warmup_steps,
            total_steps,
            final_lr_fraction: defaults::final_lr_fraction(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("optimizer.{field} {why}")));
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return bad("final_lr_fraction", "must lie in (0, 1]");
        }
        if self.warmup_steps >= self.total_steps {
            return bad("warmup_steps", "must be smaller than total_steps");
        }
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return bad("max_lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1/beta2", "must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps", "must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be nonnegative");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm", "must be positive");
        }
        Ok(())
    }

    pub fn lr(&self, step: u64) -> f64 {
        lr_schedule(self, step)
    }
}

/// Linear warm-up to `max_lr`, then cosine decay to `final_lr_fraction · max_lr`
/// at `total_steps`. Steps past the end stay at the floor.
pub fn lr_schedule(cfg: &OptimizerConfig, step: u64) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.max_lr * step as f64 / cfg.warmup_steps as f64;
    }
    if step >= cfg.total_steps {
        return cfg.max_lr * cfg.final_lr_fraction;
    }
    let f = cfg.final_lr_fraction;
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    cfg.max_lr * (f + (1.0 - f) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0)
}

/// First and second moment estimates, one array per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros_like(params: &ParamStore<T>) -> Self {
        let z: Vec<Tensor<T>> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { m: z.clone(), v: z }
    }
}

/// What happened to one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Applied {
        /// Global norm before clipping.
        grad_norm: f64,
        clipped: bool,
    },
    /// Some gradient entry was non-finite; nothing was updated.
    Rejected,
}

/// Global L2 norm over every gradient array.
pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// One AdamW update with bias correction for update number `step` (1-based)
/// at learning rate `lr`. Gradients are clipped to `clip_norm` in place.
pub fn optimizer_step<T: Scalar>(
    params: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    grads: &mut [Tensor<T>],
    cfg: &OptimizerConfig,
    step: u64,
    lr: f64,
) -> Result<StepOutcome> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients and {} moment arrays for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    if step == 0 {
        return Err(Error::Contract("optimizer steps are numbered from 1".into()));
    }
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Ok(StepOutcome::Rejected);
    }
    let clipped = norm > cfg.clip_norm;
    let scale = if clipped { cfg.clip_norm / norm } else { 1.0 };
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(step.min(i32::MAX as u64) as i32);
    let c2 = 1.0 - b2.powi(step.min(i32::MAX as u64) as i32);
    let decays = params.decays().to_vec();
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let wd = if decays[i] { cfg.weight_decay } else { 0.0 };
        let g = grads[i].data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, theta) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j].as_f64() * scale;
            g[j] = T::from_f64(gj);
            let mj = b1 * m[j].as_f64() + (1.0 - b1) * gj;
            let vj = b2 * v[j].as_f64() + (1.0 - b2) * gj * gj;
            m[j] = T::from_f64(mj);
            v[j] = T::from_f64(vj);
            let t = theta.as_f64();
            let update = (mj / c1) / ((vj / c2).sqrt() + cfg.eps) + wd * t;
            *theta = T::from_f64(t - lr * update);
        }
    }
    Ok(StepOutcome::Applied { grad_norm: norm, clipped })
}
