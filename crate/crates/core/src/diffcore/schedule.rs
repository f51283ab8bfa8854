use serde::{Deserialize, Serialize};

/// Linear warmup followed by cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(peak_lr: f64, warmup_steps: u64, total_steps: u64) -> Self {
        Self { peak_lr, warmup_steps, total_steps }
    }

    /// Learning rate at optimizer step `step`; zero from `total_steps` on.
    /// Training loops query `lr_at(k + 1)` for the k-th update so the very
    /// first update already uses `peak/warmup`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step >= self.total_steps {
            return 0.0;
        }
        if step < self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps - self.warmup_steps;
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        self.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
