use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    /// Peak to zero at `total_updates`.
    Linear,
    /// Peak held after warmup.
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub peak_lr: f64,
    pub warmup_updates: usize,
    pub total_updates: usize,
    pub decay: Decay,
    pub weight_decay: f64,
    /// Decay applied directly to the weights rather than added to the gradient.
    pub decoupled_weight_decay: bool,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self::toy_pretrain()
    }
}

impl TrainSchedule {
    pub fn paper_pretrain() -> Self {
        Self { peak_lr: 5e-3, warmup_updates: 32_000, total_updates: 300_000, ..Self::toy_pretrain() }
    }

    pub fn toy_pretrain() -> Self {
        Self {
            peak_lr: 5e-4,
            warmup_updates: 100,
            total_updates: 2000,
            decay: Decay::Linear,
            weight_decay: 1e-2,
            decoupled_weight_decay: true,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
        }
    }

    /// Constant rate after a warmup over the first 10% of updates.
    pub fn finetune(peak_lr: f64, total_updates: usize) -> Self {
        Self { peak_lr, warmup_updates: total_updates / 10, total_updates, decay: Decay::Constant, ..Self::toy_pretrain() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak_lr must be positive, got {}", self.peak_lr));
        }
        if self.warmup_updates > self.total_updates {
            return bad(format!("warmup_updates {} exceeds total_updates {}", self.warmup_updates, self.total_updates));
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return bad("weight_decay and grad_clip must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad(format!("invalid Adam constants beta1={} beta2={} eps={}", self.beta1, self.beta2, self.eps));
        }
        Ok(())
    }

    /// Learning rate for the update taken at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_updates {
            return Err(Error::Invalid(format!("step {step} beyond total_updates {}", self.total_updates)));
        }
        if step < self.warmup_updates {
            return Ok(self.peak_lr * step as f64 / self.warmup_updates as f64);
        }
        Ok(match self.decay {
            Decay::Constant => self.peak_lr,
            Decay::Linear if self.total_updates == self.warmup_updates => self.peak_lr,
            Decay::Linear => {
                self.peak_lr * (self.total_updates - step) as f64 / (self.total_updates - self.warmup_updates) as f64
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn endpoints_and_midpoints() {
        let s = TrainSchedule { peak_lr: 1e-3, warmup_updates: 100, total_updates: 1000, ..Default::default() };
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(50).unwrap(), 5e-4);
        assert_eq!(s.lr_at(100).unwrap(), 1e-3);
        assert!((s.lr_at(550).unwrap() - 5e-4).abs() < 1e-15);
        assert_eq!(s.lr_at(1000).unwrap(), 0.0);
        assert!(s.lr_at(1001).is_err());
        let f = TrainSchedule::finetune(1e-4, 200);
        assert_eq!(f.warmup_updates, 20);
        assert_eq!(f.lr_at(10).unwrap(), 5e-5);
        assert_eq!(f.lr_at(200).unwrap(), 1e-4);
        let p = TrainSchedule::paper_pretrain();
        assert_eq!(p.lr_at(32_000).unwrap(), 5e-3);
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(TrainSchedule { warmup_updates: 10, total_updates: 5, ..Default::default() }.validate().is_err());
        assert!(TrainSchedule { peak_lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainSchedule::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn piecewise_linear_and_bounded(warmup in 0usize..50, extra in 0usize..200, peak in 1e-5f64..1e-1) {
            let total = warmup + extra;
            for decay in [Decay::Linear, Decay::Constant] {
                let s = TrainSchedule { peak_lr: peak, warmup_updates: warmup, total_updates: total, decay, ..Default::default() };
                let lrs: Vec<f64> = (0..=total).map(|t| s.lr_at(t).unwrap()).collect();
                let max = lrs.iter().cloned().fold(0.0, f64::max);
                prop_assert!((max - peak).abs() <= 1e-12 * peak);
                // continuity: consecutive steps never jump by more than one slope unit
                let slope = peak / warmup.max(1).min(extra.max(1)) as f64;
                for w in lrs.windows(2) {
                    prop_assert!((w[1] - w[0]).abs() <= slope * (1.0 + 1e-9));
                }
            }
        }
    }
}
