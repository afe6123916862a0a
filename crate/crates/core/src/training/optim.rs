use std::f64::consts::PI;

use crate::autodiff::Tensor;
use crate::model::Param;

use super::TrainConfig;

/// Learning rate for update `step` of `total_steps`: a linear ramp from 0 to
/// `lr_peak` over the warm-up, then a cosine decay down to `lr_floor`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let warmup = warmup_steps(total_steps, cfg.warmup_frac);
    let step = step.min(total_steps);
    if step < warmup {
        return cfg.lr_peak * step as f64 / warmup as f64;
    }
    let span = total_steps - warmup;
    if span == 0 {
        return cfg.lr_peak;
    }
    let progress = (step - warmup) as f64 / span as f64;
    cfg.lr_floor + (cfg.lr_peak - cfg.lr_floor) * 0.5 * (1.0 + (PI * progress).cos())
}

pub fn warmup_steps(total_steps: usize, warmup_frac: f64) -> usize {
    ((total_steps as f64 * warmup_frac).round() as usize).clamp(1, total_steps.max(1))
}

/// Global L2 norm over all tensors.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let factor = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
    norm
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &[Param], weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`. Decay touches only parameters
    /// flagged with `decay`.
    pub fn step(&mut self, params: &mut [Param], grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = if p.decay { lr * self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= decay * *w;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
