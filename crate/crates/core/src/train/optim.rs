use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moments per parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Float> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// `decay^(num_layers − layer_id)`; layers at or past `num_layers` get 1.
pub fn layer_lr_scale(layer_id: usize, num_layers: usize, decay: f64) -> f64 {
    decay.powi(num_layers.saturating_sub(layer_id) as i32)
}

/// One AdamW update: decoupled decay `p −= lr·wd·p` on parameters flagged
/// for decay, then the bias-corrected Adam step. `lr_scales[i]` multiplies
/// `lr` for parameter `i`. Returns the learning rate applied to each parameter.
pub fn adamw_step<T: Float>(
    store: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
    lr_scales: &[f64],
    hp: &AdamW,
) -> Result<Vec<f64>> {
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate {lr} must be positive")));
    }
    let n = store.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n || lr_scales.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{n} parameters but {} gradients, {} moments, {} lr scales",
            grads.len(),
            state.m.len(),
            lr_scales.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    let mut applied = Vec::with_capacity(n);
    for (i, p) in store.iter_mut().enumerate() {
        let g = &grads[i];
        if g.shape() != p.value.shape() || state.m[i].shape() != p.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                shapes: vec![p.value.shape().to_vec(), g.shape().to_vec()],
            });
        }
        let plr = lr * lr_scales[i];
        let wd = if p.decay { hp.weight_decay } else { 0.0 };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, x) in p.value.data_mut().iter_mut().enumerate() {
            let gj = g.data()[j].as_f64();
            let mut xv = x.as_f64();
            xv -= plr * wd * xv;
            let mj = hp.beta1 * m[j].as_f64() + (1.0 - hp.beta1) * gj;
            let vj = hp.beta2 * v[j].as_f64() + (1.0 - hp.beta2) * gj * gj;
            m[j] = T::of(mj);
            v[j] = T::of(vj);
            xv -= plr * (mj / c1) / ((vj / c2).sqrt() + hp.eps);
            *x = T::of(xv);
        }
        applied.push(plr);
    }
    Ok(applied)
}

/// Linear warmup `warmup_lr → base_lr` over `warmup_steps`, then cosine
/// decay reaching `min_lr` at the final step.
pub fn lr_schedule(
    step: usize,
    total_steps: usize,
    warmup_steps: usize,
    base_lr: f64,
    warmup_lr: f64,
    min_lr: f64,
) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::InvalidArgument(format!("step {step} outside schedule of {total_steps}")));
    }
    if step < warmup_steps {
        return Ok(warmup_lr + (base_lr - warmup_lr) * step as f64 / warmup_steps as f64);
    }
    let span = total_steps - 1 - warmup_steps;
    if span == 0 {
        return Ok(base_lr);
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    Ok(min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_scales_shrink_toward_the_input() {
        assert_eq!(layer_lr_scale(5, 5, 0.75), 1.0);
        assert_eq!(layer_lr_scale(7, 5, 0.75), 1.0);
        assert_eq!(layer_lr_scale(3, 5, 0.5), 0.25);
        assert_eq!(layer_lr_scale(0, 5, 0.5), 0.03125);
    }

    #[test]
    fn schedule_is_monotone_after_warmup() {
        let lrs: Vec<f64> = (0..50).map(|s| lr_schedule(s, 50, 5, 1e-3, 1e-6, 1e-5).unwrap()).collect();
        assert!(lrs[..6].windows(2).all(|w| w[0] < w[1]));
        assert!(lrs[5..].windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(lrs[5], 1e-3);
        assert!((lrs[49] - 1e-5).abs() < 1e-18);
        assert!(lr_schedule(50, 50, 5, 1e-3, 1e-6, 1e-5).is_err());
        assert_eq!(lr_schedule(0, 1, 0, 1e-3, 1e-6, 1e-5).unwrap(), 1e-3);
    }
}
