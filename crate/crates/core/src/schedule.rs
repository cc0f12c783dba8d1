//! Linear warmup followed by cosine decay, indexed by fractional epoch.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub final_lr: f64,
    pub warmup_epochs: f64,
    pub epochs: f64,
}

impl LrSchedule {
    /// Learning rate at `epoch_fraction` in `[0, epochs]`: linear from 0 to
    /// `base_lr` over the warmup, then cosine from `base_lr` to `final_lr` at
    /// the last epoch. Values past the end are held at `final_lr`.
    pub fn lr_at(&self, epoch_fraction: f64) -> f64 {
        let e = epoch_fraction.max(0.0);
        if e < self.warmup_epochs {
            return self.base_lr * e / self.warmup_epochs;
        }
        let span = self.epochs - self.warmup_epochs;
        let progress = if span > 0.0 {
            ((e - self.warmup_epochs) / span).min(1.0)
        } else {
            1.0
        };
        self.final_lr + (self.base_lr - self.final_lr) * 0.5 * (1.0 + (PI * progress).cos())
    }
}
