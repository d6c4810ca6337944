use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::{Error, Real, Result};

/// Constant learning rate until `decay_start_epoch`, then linear decay to
/// `lr_final` at `total_epochs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr_initial: f64,
    pub lr_final: f64,
    pub total_epochs: u32,
    pub decay_start_epoch: u32,
}

impl LrSchedule {
    /// Runs of 500+ epochs decay over the final 200; shorter runs over the
    /// final 40%.
    pub fn default_decay_start(total_epochs: u32) -> u32 {
        if total_epochs >= 500 {
            total_epochs - 200
        } else {
            total_epochs - (total_epochs * 2).div_ceil(5)
        }
    }

    pub fn new(lr_initial: f64, lr_final: f64, total_epochs: u32, decay_start_epoch: Option<u32>) -> Result<Self> {
        let decay_start_epoch = decay_start_epoch.unwrap_or_else(|| Self::default_decay_start(total_epochs));
        if !(lr_final <= lr_initial) || lr_final < 0.0 {
            return Err(Error::InvalidArgument(alloc::format!(
                "need 0 <= lr_final <= lr_initial, got {lr_final} and {lr_initial}"
            )));
        }
        if decay_start_epoch > total_epochs {
            return Err(Error::InvalidArgument(alloc::format!(
                "decay start {decay_start_epoch} after final epoch {total_epochs}"
            )));
        }
        Ok(Self {
            lr_initial,
            lr_final,
            total_epochs,
            decay_start_epoch,
        })
    }

    /// Learning rate at fractional epoch `epoch`.
    pub fn lr_at(&self, epoch: f64) -> f64 {
        let start = self.decay_start_epoch as f64;
        let end = self.total_epochs as f64;
        if epoch >= end {
            return self.lr_final;
        }
        if epoch <= start {
            return self.lr_initial;
        }
        let t = (epoch - start) / (end - start);
        self.lr_initial + (self.lr_final - self.lr_initial) * t
    }
}

/// Adam moments and hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub schedule: LrSchedule,
}

impl<T: Real> AdamState<T> {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(params: &ParamStore<T>, schedule: LrSchedule) -> Self {
        Self {
            beta1: Self::BETA1,
            beta2: Self::BETA2,
            eps: Self::EPS,
            step: 0,
            m: params.iter().map(|p| alloc::vec![T::zero(); p.value.len()]).collect(),
            v: params.iter().map(|p| alloc::vec![T::zero(); p.value.len()]).collect(),
            schedule,
        }
    }

    pub fn matches(&self, params: &ParamStore<T>) -> bool {
        self.m.len() == params.len()
            && params
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| m.len() == p.value.len() && v.len() == p.value.len())
    }
}

/// One bias-corrected Adam update with learning rate `lr`. Every parameter
/// must have a gradient; nothing is modified otherwise.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[Option<&[T]>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || !state.matches(params) {
        return Err(Error::Shape("optimizer state does not match parameters".into()));
    }
    for (p, g) in params.iter().zip(grads) {
        match g {
            Some(g) if g.len() == p.value.len() => {}
            _ => return Err(Error::MissingGradient(p.name.clone())),
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2) = (T::from_f64(state.beta1), T::from_f64(state.beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - state.beta1), T::from_f64(1.0 - state.beta2));
    let step_size = T::from_f64(lr / bc1);
    let inv_bc2_sqrt = T::from_f64(1.0 / bc2.sqrt());
    let eps = T::from_f64(state.eps);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].unwrap();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            *w = *w - step_size * *m / (v.sqrt() * inv_bc2_sqrt + eps);
        }
    }
    Ok(())
}
