//! Denoising representation distillation: a frozen teacher encodes clean
//! speech, a trainable student encodes the noisy mixture and learns to match.

mod losses;
mod trainer;

pub use losses::{combine_losses, kd_loss, kd_loss_value, masked_cross_entropy, ssl_loss, LossBreakdown};
pub use trainer::{fit_pseudo_labels, DrdStepLog, DrdTrainer, SslHead};

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, DEFAULT_MASK_RATIO, DEFAULT_SPAN_LENGTH};
use crate::error::{Error, Result};
use crate::nn::WarmupCosine;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    #[serde(rename = "KD")]
    Kd,
    #[serde(rename = "SSL")]
    Ssl,
    #[serde(rename = "SSL_KD")]
    SslKd,
}

impl Objective {
    pub fn uses_kd(self) -> bool {
        matches!(self, Objective::Kd | Objective::SslKd)
    }

    pub fn uses_ssl(self) -> bool {
        matches!(self, Objective::Ssl | Objective::SslKd)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    /// Copy of the teacher's weights.
    Teacher,
    /// Fresh initialisation with the encoder's own scheme.
    Scratch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DrdConfig {
    /// Student hidden state to train; `None` means the final layer.
    pub student_layer: Option<usize>,
    /// Teacher hidden state to match; `None` means the final layer.
    pub teacher_layer: Option<usize>,
    pub objective: Objective,
    pub total_steps: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub weight_decay: f64,
    pub max_grad_norm: Option<f64>,
    pub student_init: StudentInit,
    /// Also update the convolutional front end.
    pub train_cnn: bool,
    pub pseudo_label_layer: usize,
    pub codebook_size: usize,
    pub kmeans_iters: usize,
    /// Batches of clean speech used to fit the pseudo-label codebook.
    pub label_fit_batches: usize,
    pub ssl_proj_dim: usize,
    pub ssl_temperature: f64,
    pub mask_ratio: f64,
    pub mask_span: usize,
    /// Write a checkpoint every N steps (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for DrdConfig {
    fn default() -> Self {
        Self {
            student_layer: None,
            teacher_layer: None,
            objective: Objective::Kd,
            total_steps: 100_000,
            batch_size: 4,
            lr_max: 1e-4,
            warmup_fraction: 0.1,
            seed: 0,
            weight_decay: 0.01,
            max_grad_norm: Some(5.0),
            student_init: StudentInit::Teacher,
            train_cnn: true,
            pseudo_label_layer: 9,
            codebook_size: 500,
            kmeans_iters: 50,
            label_fit_batches: 16,
            ssl_proj_dim: 256,
            ssl_temperature: 0.1,
            mask_ratio: DEFAULT_MASK_RATIO,
            mask_span: DEFAULT_SPAN_LENGTH,
            checkpoint_every: 5_000,
        }
    }
}

impl DrdConfig {
    /// Desk-scale settings for the toy encoder.
    pub fn toy() -> Self {
        Self {
            total_steps: 50,
            batch_size: 4,
            lr_max: 2e-4,
            pseudo_label_layer: 2,
            codebook_size: 16,
            kmeans_iters: 20,
            label_fit_batches: 4,
            ssl_proj_dim: 32,
            checkpoint_every: 0,
            ..Self::default()
        }
    }

    pub fn student_layer(&self, enc: &EncoderConfig) -> usize {
        self.student_layer.unwrap_or(enc.n_layers)
    }

    pub fn teacher_layer(&self, enc: &EncoderConfig) -> usize {
        self.teacher_layer.unwrap_or(enc.n_layers)
    }

    pub fn schedule(&self) -> WarmupCosine {
        WarmupCosine { lr_max: self.lr_max, total_steps: self.total_steps, warmup_fraction: self.warmup_fraction }
    }

    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        let n = enc.n_layers;
        for (what, l) in [("student_layer", self.student_layer(enc)), ("teacher_layer", self.teacher_layer(enc))] {
            if l > n {
                return Err(Error::invalid(format!("{what} {l} exceeds encoder depth {n}")));
            }
        }
        if self.objective.uses_ssl() && self.pseudo_label_layer > n {
            return Err(Error::invalid(format!(
                "pseudo_label_layer {} exceeds encoder depth {n}",
                self.pseudo_label_layer
            )));
        }
        if self.total_steps == 0 || self.batch_size == 0 {
            return Err(Error::invalid("total_steps and batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::invalid("warmup_fraction must lie in [0, 1]"));
        }
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return Err(Error::invalid("lr_max must be positive"));
        }
        if self.objective.uses_ssl() && (self.codebook_size < 2 || self.ssl_temperature <= 0.0) {
            return Err(Error::invalid("SSL objective needs codebook_size >= 2 and a positive temperature"));
        }
        Ok(())
    }
}

/// Learning rate at `step` of a DRD run.
pub fn lr_at(step: usize, cfg: &DrdConfig) -> Result<f64> {
    cfg.schedule().lr_at(step)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_schedule() {
        let c = DrdConfig::default();
        assert_eq!((c.total_steps, c.batch_size, c.lr_max, c.warmup_fraction), (100_000, 4, 1e-4, 0.1));
        assert_eq!(c.student_layer(&EncoderConfig::large()), 24);
        assert_eq!(lr_at(0, &c).unwrap(), 0.0);
        assert_eq!(lr_at(10_000, &c).unwrap(), 1e-4);
        let before = lr_at(9_999, &c).unwrap();
        assert!((1e-4 - before - 1e-8).abs() < 1e-15);
        assert!(lr_at(100_001, &c).is_err());
    }

    #[test]
    fn objective_names_round_trip() {
        let j = serde_json::to_string(&Objective::SslKd).unwrap();
        assert_eq!(j, "\"SSL_KD\"");
        let mut c = DrdConfig::toy();
        c.student_layer = Some(9);
        assert!(c.validate(&EncoderConfig::toy()).is_err());
    }
}
