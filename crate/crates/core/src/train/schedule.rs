use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Three-phase one-cycle learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OneCycle {
    pub lr_init: f64,
    pub lr_max: f64,
    pub lr_final: f64,
    /// Fraction of the run spent rising to `lr_max`.
    pub warmup_fraction: f64,
    /// Fraction of the run after which the final linear decay starts.
    pub anneal_end_fraction: f64,
}

impl Default for OneCycle {
    fn default() -> Self {
        Self {
            lr_init: 1e-5,
            lr_max: 1e-3,
            lr_final: 1e-8,
            warmup_fraction: 0.3,
            anneal_end_fraction: 0.9,
        }
    }
}

fn lerp(a: f64, b: f64, f: f64) -> f64 {
    a * (1.0 - f) + b * f
}

impl OneCycle {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr_init > 0.0
            && self.lr_max > 0.0
            && self.lr_final >= 0.0
            && 0.0 <= self.warmup_fraction
            && self.warmup_fraction <= self.anneal_end_fraction
            && self.anneal_end_fraction <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid learning-rate schedule {self:?}")))
        }
    }

    /// Phase boundaries in iterations for a run of `total` iterations.
    pub fn boundaries(&self, total: u64) -> (u64, u64) {
        let last = total.saturating_sub(1) as f64;
        let b1 = (self.warmup_fraction * last).floor() as u64;
        let b2 = ((self.anneal_end_fraction * last).floor() as u64).max(b1);
        (b1, b2)
    }

    /// Learning rate at a real-valued position `t` in `[0, total - 1]`.
    pub fn at_position(&self, t: f64, total: u64) -> f64 {
        let last = total.saturating_sub(1) as f64;
        let (b1, b2) = self.boundaries(total);
        let (b1, b2) = (b1 as f64, b2 as f64);
        if t <= b1 {
            if b1 == 0.0 {
                return if t < b1 { self.lr_init } else { self.lr_max };
            }
            lerp(self.lr_init, self.lr_max, t / b1)
        } else if t <= b2 {
            let f = (t - b1) / (b2 - b1);
            let c = 0.5 * (1.0 + (std::f64::consts::PI * f).cos());
            lerp(self.lr_init, self.lr_max, c)
        } else {
            lerp(self.lr_init, self.lr_final, (t - b2) / (last - b2))
        }
    }

    pub fn lr(&self, iteration: u64, total: u64) -> Result<f64> {
        if iteration >= total {
            return Err(Error::Invalid(format!(
                "iteration {iteration} outside schedule of {total}"
            )));
        }
        if total == 1 {
            return Ok(self.lr_init);
        }
        Ok(self.at_position(iteration as f64, total))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        let s = OneCycle::default();
        let total = 1000;
        let (b1, b2) = s.boundaries(total);
        assert_eq!(s.lr(0, total).unwrap(), 1e-5);
        assert_eq!(s.lr(b1, total).unwrap(), 1e-3);
        assert_eq!(s.lr(b2, total).unwrap(), 1e-5);
        assert_eq!(s.lr(total - 1, total).unwrap(), 1e-8);
        assert!(s.lr(total, total).is_err());
    }

    #[test]
    fn continuous_at_boundaries() {
        let s = OneCycle::default();
        let total = 777;
        let (b1, b2) = s.boundaries(total);
        for b in [b1, b2] {
            let at = s.at_position(b as f64, total);
            for d in [1e-9, -1e-9] {
                let near = s.at_position(b as f64 + d, total);
                assert!((near - at).abs() / at < 1e-7);
            }
        }
    }
}
