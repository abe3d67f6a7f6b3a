use crate::config::ExperimentConfig;

/// Step-wise halving: `max(min, base * 2^-floor(samples / interval))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub min: f64,
    pub interval_samples: u64,
}

impl LrSchedule {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        LrSchedule {
            base: cfg.base_lr,
            min: cfg.min_lr,
            interval_samples: cfg.lr_halving_interval_samples,
        }
    }

    pub fn lr(&self, samples_seen: u64) -> f64 {
        let halvings = samples_seen / self.interval_samples.max(1);
        if halvings >= 1100 {
            return self.min;
        }
        // scaling by a power of two is exact
        let lr = self.base * 0.5f64.powi(halvings as i32);
        lr.max(self.min)
    }
}

pub fn scheduled_lr(samples_seen: u64, cfg: &ExperimentConfig) -> f64 {
    LrSchedule::from_config(cfg).lr(samples_seen)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halves_per_interval_and_clamps() {
        let s = LrSchedule {
            base: 1e-3,
            min: 2.5e-4,
            interval_samples: 10_000,
        };
        assert_eq!(s.lr(0), 1e-3);
        assert_eq!(s.lr(9_999), 1e-3);
        assert_eq!(s.lr(10_000), 5e-4);
        assert_eq!(s.lr(20_000), 2.5e-4);
        assert_eq!(s.lr(40_000), 2.5e-4);
        assert_eq!(s.lr(u64::MAX), 2.5e-4);
    }

    #[test]
    fn per_batch_interval_is_expressible() {
        // "every 1000 batches" with batches of 10
        let s = LrSchedule {
            base: 1e-3,
            min: 1e-9,
            interval_samples: 1000 * 10,
        };
        assert_eq!(s.lr(999 * 10), 1e-3);
        assert_eq!(s.lr(1000 * 10), 5e-4);
    }

    #[test]
    fn defaults_follow_config() {
        let cfg = ExperimentConfig::default();
        assert_eq!(scheduled_lr(0, &cfg), 1e-3);
        assert_eq!(scheduled_lr(10_000, &cfg), 5e-4);
        assert_eq!(scheduled_lr(40_000, &cfg), 2.5e-4);
    }
}
