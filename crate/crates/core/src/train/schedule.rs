use std::f64::consts::PI;

/// Linear warmup to `max_lr`, then cosine decay to `final_ratio · max_lr`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub steps: usize,
    pub max_lr: f64,
    pub warmup_fraction: f64,
    pub final_ratio: f64,
}

impl Schedule {
    /// Last warmup step, `ceil(warmup_fraction · steps)`.
    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.steps as f64).ceil() as usize
    }

    /// Rate for 1-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let w = self.warmup_steps();
        if step <= w && w > 0 {
            return self.max_lr * step as f64 / w as f64;
        }
        let span = self.steps.saturating_sub(w).max(1);
        let progress = ((step - w) as f64 / span as f64).min(1.0);
        let min_lr = self.final_ratio * self.max_lr;
        min_lr + (self.max_lr - min_lr) * 0.5 * (1.0 + (PI * progress).cos())
    }
}

pub fn lr_at(step: usize, schedule: &Schedule) -> f64 {
    schedule.lr_at(step)
}
