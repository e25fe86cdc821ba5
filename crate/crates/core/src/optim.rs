//! SGD with momentum and weight decay, plus the warmup / plateau / decay
//! learning-rate schedule.

use thiserror::Error;

use crate::model::{Model, ParamKind};
use crate::tensor::{Scalar, Tensor};

/// Schedule waypoints of the reference run, as fractions of its length.
pub const WARMUP_FRACTION: f64 = 50.0 / 4500.0;
pub const DECAY_START_FRACTION: f64 = 3000.0 / 4500.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("invalid optimizer configuration: {0}")]
    Config(String),
    #[error("epoch {epoch} outside schedule of {total} epochs")]
    EpochOutOfRange { epoch: usize, total: usize },
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("{what}: expected {expected} tensors, got {actual}")]
    Arity { what: &'static str, expected: usize, actual: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub warmup_epochs: usize,
    pub decay_start_epoch: usize,
    pub total_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            base_lr: 1e-3,
            peak_lr: 5e-3,
            final_lr: 1e-5,
            warmup_epochs: 50,
            decay_start_epoch: 3000,
            total_epochs: 4500,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl SgdConfig {
    /// Default rates with the waypoints rescaled to a run of `total` epochs.
    pub fn scaled_to(total: usize) -> Self {
        let (warmup, decay) = scaled_waypoints(total);
        SgdConfig {
            warmup_epochs: warmup,
            decay_start_epoch: decay,
            total_epochs: total,
            ..SgdConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: String| Err(OptimError::Config(m));
        if !(self.final_lr > 0.0 && self.final_lr <= self.base_lr && self.base_lr <= self.peak_lr) {
            return bad(format!(
                "need 0 < final_lr ≤ base_lr ≤ peak_lr, got {} / {} / {}",
                self.final_lr, self.base_lr, self.peak_lr
            ));
        }
        if self.total_epochs < 3
            || self.warmup_epochs == 0
            || self.warmup_epochs > self.decay_start_epoch
            || self.decay_start_epoch + 2 > self.total_epochs
        {
            return bad(format!(
                "need 1 ≤ warmup ({}) ≤ decay start ({}) ≤ total − 2 (total {})",
                self.warmup_epochs, self.decay_start_epoch, self.total_epochs
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad(format!(
                "momentum must be in [0, 1) and weight decay ≥ 0, got {} / {}",
                self.momentum, self.weight_decay
            ));
        }
        Ok(())
    }
}

/// `(warmup, decay_start)` for a run of `total ≥ 3` epochs.
pub fn scaled_waypoints(total: usize) -> (usize, usize) {
    let total = total.max(3);
    let warmup = ((WARMUP_FRACTION * total as f64).round() as usize).clamp(1, total - 2);
    let decay = ((DECAY_START_FRACTION * total as f64).round() as usize).clamp(warmup, total - 2);
    (warmup, decay)
}

/// Linear ramp `base → peak` over `[0, warmup]`, flat until the decay start,
/// then geometric decay reaching `final_lr` at the last epoch.
pub fn lr_schedule(epoch: usize, cfg: &SgdConfig) -> Result<f64, OptimError> {
    if epoch >= cfg.total_epochs {
        return Err(OptimError::EpochOutOfRange {
            epoch,
            total: cfg.total_epochs,
        });
    }
    let e = epoch as f64;
    if epoch < cfg.warmup_epochs {
        let f = e / cfg.warmup_epochs as f64;
        return Ok(cfg.base_lr + (cfg.peak_lr - cfg.base_lr) * f);
    }
    if epoch <= cfg.decay_start_epoch {
        return Ok(cfg.peak_lr);
    }
    let span = (cfg.total_epochs - 1 - cfg.decay_start_epoch) as f64;
    let f = (e - cfg.decay_start_epoch as f64) / span;
    Ok(cfg.peak_lr * (cfg.final_lr / cfg.peak_lr).powf(f))
}

/// One update over parallel slices:
/// `g' = g + wd·w` (where `decay[i]`), `v ← m·v + g'`, `w ← w − lr·v`.
///
/// Every gradient is checked before anything is modified, so a rejected
/// step leaves parameters and buffers untouched.
#[allow(clippy::too_many_arguments)]
pub fn sgd_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Option<&Tensor<T>>],
    velocity: &mut [Tensor<T>],
    decay: &[bool],
    names: &[&str],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<(), OptimError> {
    let n = params.len();
    for (what, len) in [("gradients", grads.len()), ("velocity", velocity.len()), ("decay mask", decay.len())] {
        if len != n {
            return Err(OptimError::Arity {
                what,
                expected: n,
                actual: len,
            });
        }
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if !g.is_finite() {
                let name = names.get(i).copied().unwrap_or("?");
                return Err(OptimError::NonFiniteGradient(name.to_string()));
            }
        }
    }
    let (lr, m, wd) = (T::from_f64_lossy(lr), T::from_f64_lossy(momentum), T::from_f64_lossy(weight_decay));
    for i in 0..n {
        let w = params[i].data_mut();
        let v = velocity[i].data_mut();
        let g = grads[i].map(|t| t.data());
        for j in 0..w.len() {
            let mut gj = g.map_or(T::zero(), |g| g[j]);
            if decay[i] {
                gj = gj + wd * w[j];
            }
            v[j] = m * v[j] + gj;
            w[j] = w[j] - lr * v[j];
        }
    }
    Ok(())
}

/// Momentum state for a [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T: Scalar> {
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(model: &Model<T>) -> Self {
        Sgd {
            velocity: model.params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect(),
        }
    }

    /// Applies one step; weight decay touches only conv and dense weights.
    pub fn step(
        &mut self,
        model: &mut Model<T>,
        grads: &[Option<&Tensor<T>>],
        lr: f64,
        cfg: &SgdConfig,
    ) -> Result<(), OptimError> {
        let decay: Vec<bool> = model.params.iter().map(|p| p.kind == ParamKind::Weight).collect();
        let names: Vec<String> = model.params.iter().map(|p| p.name.clone()).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let mut params: Vec<&mut Tensor<T>> = model.params.iter_mut().map(|p| &mut p.value).collect();
        sgd_step(
            &mut params,
            grads,
            &mut self.velocity,
            &decay,
            &names,
            lr,
            cfg.momentum,
            cfg.weight_decay,
        )
    }
}
