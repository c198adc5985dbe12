//! AdamW with decoupled weight decay, global-norm clipping, the
//! warmup-then-cosine schedule, and an EMA of parameters.

use serde::{Deserialize, Serialize};

use crate::numerics::tensor::{Scalar, Tensor};

/// Warmup/anneal schedule: linear from 0 over `warmup_steps`, then cosine to 0
/// at `total_steps`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.base_lr <= 0.0 {
            return Err(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.warmup_steps > 0 && self.warmup_steps < self.total_steps) {
            return Err(format!(
                "need 0 < warmup_steps < total_steps, got {} and {}",
                self.warmup_steps, self.total_steps
            ));
        }
        Ok(())
    }
}

/// Learning rate at `step` per the schedule.
pub fn lr_at(step: u64, cfg: &ScheduleConfig) -> f64 {
    assert!(step <= cfg.total_steps, "step {step} past total {}", cfg.total_steps);
    if step < cfg.warmup_steps {
        cfg.base_lr * step as f64 / cfg.warmup_steps as f64
    } else {
        let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
        cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// AdamW over a fixed parameter list; moment buffers mirror parameter shapes.
pub struct AdamW<T> {
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(param_shapes: &[&[usize]], weight_decay: f64) -> Self {
        AdamW {
            step: 0,
            m: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over parallel parameter/gradient lists. Weight decay is
    /// applied directly to the parameter, separate from the moment update.
    pub fn step<'a>(
        &mut self,
        params: impl Iterator<Item = &'a mut Tensor<T>>,
        grads: &[Tensor<T>],
        lr: f64,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (ob1, ob2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let eps = T::of(self.eps);
        let lr_t = T::of(lr);
        let decay = T::of(lr * self.weight_decay);
        let (inv_bc1, inv_bc2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));

        let mut count = 0;
        for (i, p) in params.enumerate() {
            let g = &grads[i];
            assert_eq!(p.shape(), g.shape(), "adamw: grad shape mismatch at {i}");
            assert_eq!(p.shape(), self.m[i].shape(), "adamw: state shape mismatch at {i}");
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + ob1 * gj;
                v[j] = b2 * v[j] + ob2 * gj * gj;
                let m_hat = m[j] * inv_bc1;
                let v_hat = v[j] * inv_bc2;
                *w = *w - lr_t * m_hat / (v_hat.sqrt() + eps) - decay * *w;
            }
            count += 1;
        }
        assert_eq!(count, grads.len(), "adamw: parameter/gradient count mismatch");
    }
}

/// Global L2 norm across all gradient tensors, accumulated in f64.
pub fn global_grad_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let x = v.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Scale all gradients by `max_norm / norm` when the global norm exceeds
/// `max_norm`; returns the pre-clip norm.
pub fn clip_grad_l2<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "clip_grad_l2: max_norm must be positive");
    let norm = global_grad_norm(grads);
    if norm > max_norm {
        let scale = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// `shadow <- decay * shadow + (1 - decay) * param`, elementwise.
pub fn ema_update<T: Scalar>(shadow: &mut Tensor<T>, param: &Tensor<T>, decay: f64) {
    assert!((0.0..=1.0).contains(&decay), "ema: decay must be in [0, 1]");
    assert_eq!(shadow.shape(), param.shape(), "ema: shape mismatch");
    let d = T::of(decay);
    let od = T::of(1.0 - decay);
    for (s, p) in shadow.data_mut().iter_mut().zip(param.data()) {
        *s = d * *s + od * *p;
    }
}

/// Exponential moving average over a parameter list, used for evaluation
/// weights while raw weights keep training.
pub struct Ema<T> {
    pub decay: f64,
    shadow: Vec<Tensor<T>>,
}

impl<T: Scalar> Ema<T> {
    pub fn new<'a>(params: impl Iterator<Item = &'a Tensor<T>>, decay: f64) -> Self {
        Ema {
            decay,
            shadow: params.cloned().collect(),
        }
    }

    pub fn update<'a>(&mut self, params: impl Iterator<Item = &'a Tensor<T>>) {
        for (s, p) in self.shadow.iter_mut().zip(params) {
            ema_update(s, p, self.decay);
        }
    }

    pub fn shadow(&self) -> &[Tensor<T>] {
        &self.shadow
    }
}
