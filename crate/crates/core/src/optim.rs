//! Decoupled-weight-decay adaptive optimizer with linear warm-up and
//! cosine decay.

use crate::error::{Error, Result};
use crate::vit::ViTModel;
use serde::{Deserialize, Serialize};

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_max_grad_norm() -> Option<f64> {
    Some(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Global-norm gradient clip applied before the update; disabled
    /// when absent.
    #[serde(default = "default_max_grad_norm")]
    pub max_grad_norm: Option<f64>,
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.total_steps == 0 || self.batch_size == 0 {
            return Err(Error::config("total_steps and batch_size must be positive"));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::config("warmup_steps exceeds total_steps"));
        }
        Ok(())
    }

    /// Scheduled learning rate for a zero-based step index.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Optimizer state aligned with the model's canonical parameter order.
///
/// Parameters that received no gradient in a step (unreachable from the
/// loss, e.g. key/value projections of a cross-attended layer) are
/// skipped entirely: no moment update and no decay.
pub struct AdamW {
    cfg: OptimConfig,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(model: &ViTModel, cfg: OptimConfig) -> Result<AdamW> {
        cfg.validate()?;
        let sizes: Vec<usize> = model.params().iter().map(|(_, t)| t.numel()).collect();
        Ok(AdamW {
            cfg,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn config(&self) -> &OptimConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update. `grads` must align with `model.params()` order; `None`
    /// entries are skipped.
    pub fn apply(&mut self, model: &mut ViTModel, grads: &[Option<&[f64]>]) -> Result<()> {
        let lr = self.cfg.lr_at(self.step);
        self.step += 1;
        let t = self.step as f64;
        let bias1 = 1.0 - self.cfg.beta1.powf(t);
        let bias2 = 1.0 - self.cfg.beta2.powf(t);

        let clip_scale = match self.cfg.max_grad_norm {
            Some(max) => {
                let mut sq = 0.0;
                for g in grads.iter().flatten() {
                    for v in *g {
                        sq += v * v;
                    }
                }
                let norm = sq.sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        let mut params = model.params_mut();
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (idx, (name, tensor)) in params.iter_mut().enumerate() {
            let g = match grads[idx] {
                Some(g) => g,
                None => continue,
            };
            if g.len() != tensor.numel() {
                return Err(Error::Contract(format!(
                    "gradient length {} for parameter {name} of size {}",
                    g.len(),
                    tensor.numel()
                )));
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let values = tensor.values_mut();
            for i in 0..g.len() {
                let gi = g[i] * clip_scale;
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * gi;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * gi * gi;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                values[i] -=
                    lr * (m_hat / (v_hat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * values[i]);
            }
            if !values.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite { op: "adamw_update" });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(warmup: usize, total: usize) -> OptimConfig {
        OptimConfig {
            learning_rate: 1.0,
            weight_decay: 0.0,
            warmup_steps: warmup,
            total_steps: total,
            batch_size: 1,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            max_grad_norm: None,
        }
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let c = cfg(10, 110);
        assert!((c.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((c.lr_at(9) - 1.0).abs() < 1e-12);
        assert!((c.lr_at(10) - 1.0).abs() < 1e-12);
        assert!(c.lr_at(60) < c.lr_at(10));
        assert!(c.lr_at(109) < c.lr_at(60));
        assert!(c.lr_at(109) > 0.0);
    }

    #[test]
    fn schedule_without_warmup_starts_at_base() {
        let c = cfg(0, 100);
        assert!((c.lr_at(0) - 1.0).abs() < 1e-12);
    }
}
