//! AdamW and learning-rate schedules.

use crate::error::{Error, Result};
use crate::tensor::{Param, Scalar};

/// Adam with decoupled weight decay. Moment buffers are created lazily and
/// matched to parameters by position, so callers must pass parameters in the
/// same order on every step.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr · scale_i` for parameter `i`
    /// (`scales = None` means 1 everywhere). Parameters without a gradient
    /// are left untouched.
    pub fn step(&mut self, params: &mut [&mut Param<T>], lr: f64, scales: Option<&[f64]>) {
        if self.moments.len() < params.len() {
            self.moments.resize_with(params.len(), || None);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let eps = T::lit(self.eps);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(grad) = p.grad().cloned() else { continue };
            let lr_i = lr * scales.map_or(1.0, |s| s[i]);
            let decay = if p.decay { T::lit(1.0 - lr_i * self.weight_decay) } else { T::one() };
            let step_size = T::lit(lr_i / bc1);
            let inv_bc2 = T::lit(1.0 / bc2);
            let n = grad.numel();
            let (m, v) = self.moments[i].get_or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *w = *w * decay;
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let denom = (*v * inv_bc2).sqrt() + eps;
                *w = *w - step_size * *m / denom;
            }
        }
    }
}

/// Linear warm-up to `base_lr` over the first `warmup_fraction` of steps,
/// then half-cosine decay towards zero.
pub fn cosine_lr(step: usize, total_steps: usize, warmup_fraction: f64, base_lr: f64) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::Contract(format!("step {step} outside 0..{total_steps}")));
    }
    if !(0.0..1.0).contains(&warmup_fraction) {
        return Err(Error::Config(format!("warmup fraction {warmup_fraction} outside [0, 1)")));
    }
    let warmup = (warmup_fraction * total_steps as f64).floor() as usize;
    if step < warmup {
        return Ok(base_lr * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Learning-rate multiplier `decay^(num_layers + 1 − layer_id)`, where id 0
/// is the patch embedding and `num_layers + 1` the classifier head.
pub fn layerwise_lr_scale(layer_id: usize, num_layers: usize, decay: f64) -> Result<f64> {
    if layer_id > num_layers + 1 {
        return Err(Error::Contract(format!(
            "layer id {layer_id} outside 0..={}",
            num_layers + 1
        )));
    }
    Ok(decay.powi((num_layers + 1 - layer_id) as i32))
}

/// Layer id of an encoder parameter by name: embeddings are 0, `blocks.i.*`
/// is `i + 1`, and the final norm and any head sit at `num_layers + 1`.
pub fn layer_id_for(name: &str, num_layers: usize) -> usize {
    if name.starts_with("patch_embed") || name.starts_with("cls_token") {
        0
    } else if let Some(rest) = name.strip_prefix("blocks.") {
        rest.split('.').next().and_then(|i| i.parse::<usize>().ok()).map_or(num_layers + 1, |i| i + 1)
    } else {
        num_layers + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_param(v: f64, decay: bool) -> Param<f64> {
        Param::new(Tensor::scalar(v), decay)
    }

    #[test]
    fn decay_only_step() {
        let mut p = scalar_param(1.0, true);
        p.accumulate_grad(&Tensor::scalar(0.0));
        let mut opt = AdamW::new(0.9, 0.95, 1e-8, 0.1);
        opt.step(&mut [&mut p], 0.1, None);
        assert!((p.value.data()[0] - 0.99).abs() < 1e-12);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // m = 0.1, v = 0.05; bias-corrected ratio is 1
        let mut p = scalar_param(0.0, false);
        p.accumulate_grad(&Tensor::scalar(1.0));
        let mut opt = AdamW::new(0.9, 0.95, 1e-8, 0.05);
        opt.step(&mut [&mut p], 1e-3, None);
        let want = -1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((p.value.data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn no_grad_means_no_update() {
        let mut p = scalar_param(2.0, true);
        let mut opt = AdamW::new(0.9, 0.95, 1e-8, 0.1);
        opt.step(&mut [&mut p], 0.1, None);
        assert_eq!(p.value.data()[0], 2.0);
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 0.1, 1.5e-4).unwrap(), 0.0);
        assert_eq!(cosine_lr(0, 100, 0.0, 1.5e-4).unwrap(), 1.5e-4);
        assert_eq!(cosine_lr(10, 100, 0.1, 1.5e-4).unwrap(), 1.5e-4);
        assert!((cosine_lr(55, 100, 0.1, 1.5e-4).unwrap() - 0.75e-4).abs() < 1e-18);
        assert!(cosine_lr(100, 100, 0.1, 1.5e-4).is_err());
    }

    #[test]
    fn layer_scales() {
        assert_eq!(layerwise_lr_scale(13, 12, 0.6).unwrap(), 1.0);
        assert!((layerwise_lr_scale(12, 12, 0.6).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(layerwise_lr_scale(0, 12, 1.0).unwrap(), 1.0);
        assert!(layerwise_lr_scale(14, 12, 0.6).is_err());
        assert_eq!(layer_id_for("patch_embed.weight", 6), 0);
        assert_eq!(layer_id_for("blocks.5.fc1.bias", 6), 6);
        assert_eq!(layer_id_for("norm.scale", 6), 7);
        assert_eq!(layer_id_for("head.weight", 6), 7);
    }
}
