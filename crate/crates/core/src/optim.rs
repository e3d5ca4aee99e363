//! AdamW, the one-cycle learning-rate schedule and epoch-level EMA.

use crate::autodiff::{ParamGrads, ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 1e-2 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros: Vec<Vec<T>> = store.entries().iter().map(|e| vec![T::zero(); e.data.len()]).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Updates the parameters in `trainable`; all others are left untouched.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: f64, trainable: &[ParamId]) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one, eps) = (T::one(), T::of(c.eps));
        let decay = T::of(1.0 - lr * c.weight_decay);
        let (lr_t, bc1, bc2) = (T::of(lr), T::of(bc1), T::of(bc2));
        for &id in trainable {
            let data = &mut store.get_mut(id).data;
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let g = grads.get(id);
            for j in 0..data.len() {
                let gj = g.map_or(T::zero(), |g| g[j]);
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] = data[j] * decay - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub final_div: f64,
    pub total_steps: usize,
}

impl Schedule {
    /// `base_lr · √B`
    pub fn peak(&self) -> f64 {
        self.base_lr * (self.batch_size as f64).sqrt()
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.total_steps as f64).round() as usize
    }

    /// Linear warmup from zero to the peak, reached at step
    /// `warmup_steps`, then cosine annealing to `peak / final_div` at the
    /// last step.
    pub fn lr(&self, step: usize) -> f64 {
        let peak = self.peak();
        let last = self.total_steps.saturating_sub(1);
        let warm = self.warmup_steps().min(last);
        if step < warm {
            return peak * step as f64 / warm as f64;
        }
        if last == warm {
            return peak;
        }
        let end = peak / self.final_div;
        let progress = (step.min(last) - warm) as f64 / (last - warm) as f64;
        end + (peak - end) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// `1 - (0.2 · N)⁻¹`, clamped at zero for fewer than five epochs.
pub fn ema_alpha(epochs: usize) -> f64 {
    if epochs == 0 {
        return 0.0;
    }
    (1.0 - 5.0 / epochs as f64).max(0.0)
}

/// `ema ← α·ema + (1-α)·θ` over the listed parameters.
pub fn ema_update<T: Scalar>(ema: &mut ParamStore<T>, current: &ParamStore<T>, alpha: f64, params: &[ParamId]) {
    let a = T::of(alpha);
    let b = T::one() - a;
    for &id in params {
        let src = &current.get(id).data;
        for (e, &s) in ema.get_mut(id).data.iter_mut().zip(src) {
            *e = a * *e + b * s;
        }
    }
}
