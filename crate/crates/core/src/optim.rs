//! Decoupled-weight-decay Adam, global-norm clipping and the warmup-cosine schedule.

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr_peak: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimConfig {
    pub fn new(lr_peak: f64, warmup_steps: u64, total_steps: u64) -> Self {
        OptimConfig {
            lr_peak,
            weight_decay: 0.01,
            warmup_steps,
            total_steps,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.lr_peak >= 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config(
                "lr, weight_decay must be non-negative and clip_norm positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to the peak, then half-cosine decay to 0.
pub fn cosine_lr(step: u64, cfg: &OptimConfig) -> f64 {
    if step > cfg.total_steps {
        return 0.0;
    }
    if step < cfg.warmup_steps {
        return cfg.lr_peak * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps - cfg.warmup_steps;
    if span == 0 {
        return cfg.lr_peak;
    }
    let progress = (step - cfg.warmup_steps) as f64 / span as f64;
    cfg.lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub fn global_norm(groups: &[Vec<Mat>]) -> f64 {
    groups
        .iter()
        .flatten()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(groups: &mut [Vec<Mat>], max_norm: f64) -> f64 {
    let norm = global_norm(groups);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in groups.iter_mut().flatten() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

/// First and second moment estimates for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Mat> = params.values().iter().map(|p| Mat::zeros(p.dim())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One AdamW update. Parameters flagged without decay skip the shrink term.
    pub fn update(&mut self, params: &mut ParamSet, grads: &[Mat], lr: f64, cfg: &OptimConfig) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.t += 1;
        let t = self.t.min(i32::MAX as u64) as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..params.len() {
            let decay = params.decays(i);
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            m.zip_mut_with(g, |m, &g| *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g);
            let p = params.get_mut(i);
            if decay {
                p.mapv_inplace(|x| x * (1.0 - lr * cfg.weight_decay));
            }
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
            });
        }
    }
}
