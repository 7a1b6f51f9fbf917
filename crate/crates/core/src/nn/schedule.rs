use crate::error::{Error, Result};

/// Linear warm-up to `lr_max` over the first `warmup_fraction` of the run,
/// then cosine decay to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmupCosine {
    pub lr_max: f64,
    pub total_steps: usize,
    pub warmup_fraction: f64,
}

impl WarmupCosine {
    pub fn warmup_steps(&self) -> f64 {
        self.warmup_fraction * self.total_steps as f64
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::invalid(format!("step {step} outside schedule range [0, {}]", self.total_steps)));
        }
        let s = step as f64;
        let w = self.warmup_steps();
        if s < w {
            return Ok(self.lr_max * s / w);
        }
        let span = self.total_steps as f64 - w;
        if span <= 0.0 {
            return Ok(self.lr_max);
        }
        let progress = (s - w) / span;
        Ok(self.lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}
