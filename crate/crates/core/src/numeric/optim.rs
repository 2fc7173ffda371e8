use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numeric::{ParamStore, Scalar};

/// Adam moments and hyper-parameters.
///
/// Weight decay is the classic L2 form (`g += wd * p`) applied before the
/// moment update.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
    pub step: u64,
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>, base_lr: f64, weight_decay: f64) -> Self {
        let zeros = |_| Vec::new();
        OptimizerState {
            first: (0..store.len()).map(zeros).collect(),
            second: (0..store.len()).map(zeros).collect(),
            step: 0,
            base_lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn cast<U: Scalar>(&self) -> OptimizerState<U> {
        let conv = |v: &Vec<Vec<T>>| {
            v.iter()
                .map(|b| b.iter().map(|&x| U::lit(x.as_f64())).collect())
                .collect()
        };
        OptimizerState {
            first: conv(&self.first),
            second: conv(&self.second),
            step: self.step,
            base_lr: self.base_lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One bias-corrected Adam update over every trainable slot holding a
/// gradient. Gradients are cleared afterwards.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut OptimizerState<T>, lr: f64) -> Result<()> {
    if !store.iter().any(|(_, p)| p.trainable && p.grad.is_some()) {
        return Err(Error::MissingGrads);
    }
    if state.first.len() < store.len() {
        state.first.resize(store.len(), Vec::new());
        state.second.resize(store.len(), Vec::new());
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - state.beta1), T::lit(1.0 - state.beta2));
    let step_size = T::lit(lr / bc1);
    let inv_bc2 = T::lit(1.0 / bc2);
    let eps = T::lit(state.eps);
    let wd = T::lit(state.weight_decay);
    for (i, p) in store.iter_mut().enumerate() {
        let Some(grad) = p.grad.take() else {
            continue;
        };
        if !p.trainable {
            continue;
        }
        let n = p.value.numel();
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        if m.len() != n {
            *m = vec![T::zero(); n];
            *v = vec![T::zero(); n];
        }
        let data = p.value.data_mut();
        for j in 0..n {
            let g = grad[j] + wd * data[j];
            m[j] = b1 * m[j] + one_b1 * g;
            v[j] = b2 * v[j] + one_b2 * g * g;
            let denom = (v[j] * inv_bc2).sqrt() + eps;
            data[j] -= step_size * m[j] / denom;
        }
    }
    Ok(())
}

/// Linear warm-up from 0 to `base_lr`, then cosine decay towards 0 over the
/// remaining `total_steps - warmup_steps` steps.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let remainder = total_steps.saturating_sub(warmup_steps).max(1) as f64;
    let progress = ((step - warmup_steps) as f64 / remainder).min(1.0);
    0.5 * base_lr * (1.0 + (PI * progress).cos())
}
