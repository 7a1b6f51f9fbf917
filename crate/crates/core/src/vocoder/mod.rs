//! Waveform synthesis from fused encoder features, its discriminators and
//! the adversarial training loop.

mod discriminators;
mod generator;
mod losses;
mod pipeline;
mod stft;
mod trainer;

pub use discriminators::{band_edges, DiscriminatorConfig, DiscriminatorOutput, Discriminators, Mbmsd, Mpd, SubOutput};
pub use generator::{Generator, HeadTensors, MAX_MAGNITUDE};
pub use losses::{
    adversarial_losses, feature_matching_loss, generator_total, reconstruction_loss, weighted_total, AdversarialKind,
    GanLossBreakdown, LossWeights, ADVERSARIAL_WEIGHT, FEATURE_MATCHING_WEIGHT, RECONSTRUCTION_WEIGHT,
};
pub use pipeline::{load_vocoder, Enhancer, VocoderBundle};
pub use stft::{centered_frame_count, hann_window, mel_filterbank, Istft, LogMel, MelLoss, Stft, LOG_CLAMP, MAG_EPS};
pub use trainer::{FeatureInput, VocoderStepLog, VocoderTrainConfig, VocoderTrainer};

use std::f32::consts::PI;

use candle_core::Device;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::audio_sim::{Waveform, SAMPLE_RATE};
use crate::encoder::{matrix_to_tensor, tensor_to_matrix};
use crate::error::{Error, Result};
use crate::fusion::FusedFeatures;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocoderConfig {
    /// Width of the fused input features.
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub n_blocks: usize,
    pub intermediate_dim: usize,
    pub fft_size: usize,
    pub hop: usize,
    pub attention: bool,
    pub attention_heads: usize,
    pub sample_rate: u32,
}

impl Default for VocoderConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl VocoderConfig {
    pub fn full() -> Self {
        Self {
            in_dim: 1024,
            hidden_dim: 768,
            n_blocks: 12,
            intermediate_dim: 2304,
            fft_size: 1280,
            hop: 320,
            attention: true,
            attention_heads: 1,
            sample_rate: SAMPLE_RATE,
        }
    }

    /// Matches the toy encoder (64-dim features at 250 Hz).
    pub fn toy() -> Self {
        Self { in_dim: 64, hidden_dim: 32, n_blocks: 2, intermediate_dim: 96, fft_size: 256, hop: 64, ..Self::full() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" | "large" => Ok(Self::full()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::invalid(format!("unknown vocoder preset `{other}` (full|toy)"))),
        }
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.fft_size < self.hop {
            return Err(Error::invalid(format!("fft_size {} must be at least hop {}", self.fft_size, self.hop)));
        }
        if self.fft_size % self.hop != 0 || (self.fft_size - self.hop) % 2 != 0 {
            return Err(Error::invalid("fft_size must be a multiple of hop with an even difference"));
        }
        if self.in_dim == 0 || self.hidden_dim == 0 || self.intermediate_dim == 0 {
            return Err(Error::invalid("vocoder dimensions must be positive"));
        }
        if self.attention && (self.attention_heads == 0 || self.hidden_dim % self.attention_heads != 0) {
            return Err(Error::invalid("attention_heads must divide hidden_dim"));
        }
        if self.sample_rate as usize % self.hop != 0 {
            return Err(Error::invalid(format!(
                "hop {} does not give an integer frame rate at {} Hz",
                self.hop, self.sample_rate
            )));
        }
        Ok(())
    }
}

/// Magnitude and wrapped phase, `[T, bins]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralHeadOutput {
    pub magnitude: Array2<f32>,
    pub phase: Array2<f32>,
}

fn wrap_phase(p: f32) -> f32 {
    let w = p.sin().atan2(p.cos());
    if w <= -PI {
        PI
    } else {
        w
    }
}

/// Spectral head output for one utterance.
pub fn spectral_head(features: &FusedFeatures, generator: &Generator) -> Result<SpectralHeadOutput> {
    let x = matrix_to_tensor(&features.matrix, &Device::Cpu)?;
    let h = generator.head_output(&x)?;
    Ok(SpectralHeadOutput {
        magnitude: tensor_to_matrix(&h.magnitude)?,
        phase: tensor_to_matrix(&h.phase)?.mapv(wrap_phase),
    })
}

/// Renders fused `[T, D]` features to `T * hop` samples.
pub fn synthesize(features: &FusedFeatures, cfg: &VocoderConfig, generator: &Generator) -> Result<Waveform> {
    if generator.config() != cfg {
        return Err(Error::ArchitectureMismatch("generator was built for a different vocoder config".into()));
    }
    if features.matrix.ncols() != cfg.in_dim {
        return Err(Error::shape(format!(
            "vocoder expects {}-dim features, got {}",
            cfg.in_dim,
            features.matrix.ncols()
        )));
    }
    let x = matrix_to_tensor(&features.matrix, &Device::Cpu)?;
    let y = generator.forward(&x)?.squeeze(0)?.to_vec1::<f32>()?;
    Waveform::new(y, cfg.sample_rate)
}
