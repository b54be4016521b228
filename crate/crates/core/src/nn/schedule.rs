//! Learning-rate schedule: untuned linear warmup into cosine annealing.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    /// Warmup window in steps. The untuned rule pins this to
    /// `2 / (1 - beta2) = 2000` for Adam's default `beta2 = 0.999`;
    /// configs may override it.
    pub warmup_steps: u64,
    pub total_steps: u64,
}

/// Warmup window prescribed by the untuned linear warmup rule.
pub fn untuned_warmup_steps(beta2: f64) -> u64 {
    (2.0 / (1.0 - beta2)).round() as u64
}

impl LrSchedule {
    pub fn new(base_lr: f64, min_lr: f64, warmup_steps: u64, total_steps: u64) -> Self {
        LrSchedule { base_lr, min_lr, warmup_steps, total_steps }
    }

    /// Learning rate at `step` (0-indexed, `step < total_steps`): a linear
    /// ramp from 0 to `base_lr` over the warmup window, then cosine decay
    /// to `min_lr` at `total_steps`.
    pub fn lr(&self, step: u64) -> f64 {
        debug_assert!(step < self.total_steps.max(1), "step {step} >= total {}", self.total_steps);
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let decay_span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = (step - self.warmup_steps) as f64 / decay_span as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.min_lr + (self.base_lr - self.min_lr) * cosine
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn untuned_rule_gives_2000_for_default_beta2() {
        assert_eq!(untuned_warmup_steps(0.999), 2000);
    }

    #[test]
    fn ramp_endpoints() {
        let s = LrSchedule::new(1e-3, 1e-5, 100, 1000);
        assert_eq!(s.lr(0), 0.0);
        assert_eq!(s.lr(100), 1e-3);
        assert!((s.lr(50) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn cosine_tail_approaches_min() {
        let s = LrSchedule::new(1e-3, 1e-5, 100, 1000);
        let last = s.lr(999);
        // within one cosine increment of the floor
        let one_increment = (s.lr(998) - last).abs();
        assert!(last >= s.min_lr);
        assert!(last - s.min_lr <= one_increment + 1e-12, "last {last}");
    }

    #[test]
    fn monotone_decay_after_warmup() {
        let s = LrSchedule::new(1e-3, 1e-5, 10, 200);
        let mut prev = s.lr(10);
        for step in 11..200 {
            let lr = s.lr(step);
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }
}
