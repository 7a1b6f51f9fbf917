use serde::{Deserialize, Serialize};

use crate::audio_sim::SAMPLE_RATE;
use crate::error::{Error, Result};

/// Shape of a masked-prediction speech encoder: convolutional front end,
/// convolutional positional embedding and a pre-norm transformer stack with
/// gated relative position bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub cnn_channels: Vec<usize>,
    pub cnn_kernels: Vec<usize>,
    pub cnn_strides: Vec<usize>,
    pub cnn_bias: bool,
    pub pos_conv_kernel: usize,
    pub pos_conv_groups: usize,
    pub num_buckets: usize,
    pub max_distance: usize,
    pub frame_rate_hz: f64,
    /// Pad the waveform by `receptive_field - hop` samples (split evenly) so
    /// that `frames == samples / hop` exactly.
    pub pad_input: bool,
    pub layer_norm_eps: f64,
}

impl EncoderConfig {
    /// Layout of the 24-layer, 1024-dim released checkpoint.
    pub fn large() -> Self {
        Self {
            n_layers: 24,
            model_dim: 1024,
            n_heads: 16,
            ffn_dim: 4096,
            cnn_channels: vec![512; 7],
            cnn_kernels: vec![10, 3, 3, 3, 3, 2, 2],
            cnn_strides: vec![5, 2, 2, 2, 2, 2, 2],
            cnn_bias: false,
            pos_conv_kernel: 128,
            pos_conv_groups: 16,
            num_buckets: 320,
            max_distance: 800,
            frame_rate_hz: 50.0,
            pad_input: false,
            layer_norm_eps: 1e-5,
        }
    }

    /// Four-layer, 64-dim model at hop 64 (250 Hz) that pairs with the toy
    /// vocoder preset.
    pub fn toy() -> Self {
        Self {
            n_layers: 4,
            model_dim: 64,
            n_heads: 4,
            ffn_dim: 256,
            cnn_channels: vec![32, 32, 32],
            cnn_kernels: vec![8, 4, 4],
            cnn_strides: vec![4, 4, 4],
            cnn_bias: false,
            pos_conv_kernel: 16,
            pos_conv_groups: 4,
            num_buckets: 320,
            max_distance: 800,
            frame_rate_hz: 250.0,
            pad_input: true,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "large" => Ok(Self::large()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::invalid(format!("unknown encoder preset `{other}` (expected toy|large)"))),
        }
    }

    pub fn hop(&self) -> usize {
        self.cnn_strides.iter().product()
    }

    pub fn receptive_field(&self) -> usize {
        let mut rf = 0;
        let mut jump = 1;
        for (i, (&k, &s)) in self.cnn_kernels.iter().zip(&self.cnn_strides).enumerate() {
            rf += if i == 0 { k } else { (k - 1) * jump };
            jump *= s;
        }
        rf
    }

    /// (left, right) zero padding applied to the waveform.
    pub fn input_padding(&self) -> (usize, usize) {
        if !self.pad_input {
            return (0, 0);
        }
        let total = self.receptive_field().saturating_sub(self.hop());
        (total / 2, total - total / 2)
    }

    pub fn frames_for(&self, samples: usize) -> usize {
        let (l, r) = self.input_padding();
        let mut len = samples + l + r;
        for (&k, &s) in self.cnn_kernels.iter().zip(&self.cnn_strides) {
            if len < k {
                return 0;
            }
            len = (len - k) / s + 1;
        }
        len
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.cnn_channels.len();
        if n == 0 || self.cnn_kernels.len() != n || self.cnn_strides.len() != n {
            return Err(Error::invalid("cnn_channels, cnn_kernels and cnn_strides must be non-empty and equally long"));
        }
        if self.n_layers == 0 {
            return Err(Error::invalid("encoder needs at least one transformer layer"));
        }
        if self.n_heads == 0 || self.model_dim % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "model_dim {} is not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.pos_conv_groups == 0 || self.model_dim % self.pos_conv_groups != 0 {
            return Err(Error::invalid("model_dim must be divisible by pos_conv_groups"));
        }
        let rate = self.hop() as f64 * self.frame_rate_hz;
        if (rate - SAMPLE_RATE as f64).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "hop {} at {} Hz frame rate implies {rate} Hz audio, expected {SAMPLE_RATE}",
                self.hop(),
                self.frame_rate_hz
            )));
        }
        if self.num_buckets < 4 || self.max_distance <= self.num_buckets / 4 {
            return Err(Error::invalid("relative position bucket settings are inconsistent"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_satisfy_frame_rate_contract() {
        EncoderConfig::large().validate().unwrap();
        EncoderConfig::toy().validate().unwrap();
        assert_eq!(EncoderConfig::large().hop(), 320);
        assert_eq!(EncoderConfig::large().receptive_field(), 400);
    }

    #[test]
    fn padded_front_end_gives_exact_frame_count() {
        let cfg = EncoderConfig {
            cnn_strides: vec![5, 4, 4, 4],
            cnn_kernels: vec![10, 4, 4, 4],
            cnn_channels: vec![32; 4],
            frame_rate_hz: 50.0,
            ..EncoderConfig::toy()
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.frames_for(64_000), 200);
        let toy = EncoderConfig::toy();
        for n in [64, 1000, 16_000, 16_037] {
            assert_eq!(toy.frames_for(n), n / 64);
        }
        // The unpadded large layout loses one frame at 4 s.
        assert_eq!(EncoderConfig::large().frames_for(64_000), 199);
    }

    #[test]
    fn bad_configs_rejected() {
        let mut c = EncoderConfig::toy();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::toy();
        c.frame_rate_hz = 50.0;
        assert!(c.validate().is_err());
    }
}
