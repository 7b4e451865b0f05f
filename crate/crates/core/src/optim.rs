use dae_tensor::{Element, Tensor};

use crate::error::{DaeError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub grad_clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip_norm: 0.0,
        }
    }
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Element> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// Restores saved moments; shapes must match `params`.
    pub fn from_state(
        config: AdamWConfig,
        params: &[Tensor<T>],
        m: Vec<Tensor<T>>,
        v: Vec<Tensor<T>>,
        step: u64,
    ) -> Result<Self> {
        let ok = m.len() == params.len()
            && v.len() == params.len()
            && params
                .iter()
                .zip(m.iter().zip(&v))
                .all(|(p, (a, b))| p.shape() == a.shape() && p.shape() == b.shape());
        if !ok {
            return Err(DaeError::Contract("optimizer state does not match parameters".into()));
        }
        Ok(Self { config, m, v, step })
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.v
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`. `names` label the parameters for
    /// error reporting; nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, names: &[String], params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(DaeError::Contract(format!(
                "{} parameters, {} gradients, {} optimizer slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let name = names.get(i).map_or("?", String::as_str);
            if p.shape() != g.shape() {
                return Err(DaeError::Contract(format!(
                    "gradient of {name} has shape {:?}, expected {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.all_finite() {
                return Err(DaeError::Numeric(format!("non-finite gradient for parameter {name}")));
            }
        }
        let clip = if self.config.grad_clip_norm > 0.0 {
            let norm = grads
                .iter()
                .flat_map(|g| g.data())
                .map(|v| v.as_f64().powi(2))
                .sum::<f64>()
                .sqrt();
            if norm > self.config.grad_clip_norm {
                self.config.grad_clip_norm / norm
            } else {
                1.0
            }
        } else {
            1.0
        };

        self.step += 1;
        let AdamWConfig {
            weight_decay,
            beta1,
            beta2,
            eps,
            ..
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let decay = 1.0 - lr * weight_decay;
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let items = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((p, &g), (m, v)) in items {
                let g = g.as_f64() * clip;
                let mi = beta1 * m.as_f64() + (1.0 - beta1) * g;
                let vi = beta2 * v.as_f64() + (1.0 - beta2) * g * g;
                let update = (mi / bc1) / ((vi / bc2).sqrt() + eps);
                *p = T::of(p.as_f64() * decay - lr * update);
                *m = T::of(mi);
                *v = T::of(vi);
            }
        }
        Ok(())
    }
}

/// Linear warm-up from 0 to `lr`, then half-cosine decay to 0 at `total`.
pub fn lr_schedule(step: u64, lr: f64, warmup: u64, total: u64) -> f64 {
    lr_schedule_at(step.min(total) as f64, lr, warmup as f64, total as f64)
}

/// [`lr_schedule`] on a continuous step axis.
pub fn lr_schedule_at(t: f64, lr: f64, warmup: f64, total: f64) -> f64 {
    if t < warmup {
        return lr * t / warmup;
    }
    if total <= warmup {
        return lr;
    }
    let progress = ((t - warmup) / (total - warmup)).min(1.0);
    lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
