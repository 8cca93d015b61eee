use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, ParamStore};
use crate::error::{Error, Result};
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Micro-batches whose gradients are summed into one update.
    pub accumulation: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            peak_lr: 2e-4,
            warmup_fraction: 0.08,
            total_steps: 200,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            clip_norm: Some(5.0),
            accumulation: 1,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config(format!(
                "warmup_fraction {} must lie strictly between 0 and 1",
                self.warmup_fraction
            )));
        }
        if self.total_steps == 0 || self.accumulation == 0 {
            return Err(Error::Config("total_steps and accumulation must be positive".into()));
        }
        if self.peak_lr < 0.0 || self.eps <= 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("invalid learning rate or Adam constants".into()));
        }
        if self.clip_norm.is_some_and(|c| c <= 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> f64 {
        self.warmup_fraction * self.total_steps as f64
    }
}

/// Linear warm-up from 0 to the peak over the first `warmup_fraction` of
/// training, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: u64, cfg: &OptimConfig) -> f64 {
    let s = step as f64;
    let total = cfg.total_steps as f64;
    let warm = cfg.warmup_steps();
    if s <= warm {
        cfg.peak_lr * s / warm
    } else if s >= total {
        0.0
    } else {
        cfg.peak_lr * (total - s) / (total - warm)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateStats {
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Bias-corrected Adam moments for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<S> {
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
    pub t: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: &ParamStore<S>) -> Self {
        let zeros = || params.ids().map(|id| vec![S::zero(); params.get(id).numel()]).collect::<Vec<_>>();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// One update. Parameters without a gradient are left untouched. A
    /// non-finite gradient aborts before any parameter changes.
    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &Grads<S>, lr: f64, cfg: &OptimConfig) -> Result<UpdateStats> {
        for (id, g) in grads.iter() {
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!(
                    "gradient of {} is {} at element {i}",
                    params.name(id),
                    g[i]
                )));
            }
        }
        let norm = grads.global_norm().as_f64();
        let factor = match cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let (b1, b2) = (S::lit(cfg.beta1), S::lit(cfg.beta2));
        let c1 = S::lit(1.0 - cfg.beta1.powi(self.t as i32));
        let c2 = S::lit(1.0 - cfg.beta2.powi(self.t as i32));
        let (lr, eps, k) = (S::lit(lr), S::lit(cfg.eps), S::lit(factor));
        for (id, g) in grads.iter() {
            let i = id.index();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = params.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g[j] * k;
                m[j] = b1 * m[j] + (S::one() - b1) * gj;
                v[j] = b2 * v[j] + (S::one() - b2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(UpdateStats {
            grad_norm: norm,
            clipped: factor < 1.0,
        })
    }
}
