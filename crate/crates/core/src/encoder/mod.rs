//! Masked-prediction speech encoder, span masking and checkpoint loading.

mod config;
mod mask;
mod model;
mod pretrained;

pub use config::EncoderConfig;
pub use mask::{make_mask, MaskSpec, DEFAULT_MASK_RATIO, DEFAULT_SPAN_LENGTH};
pub use model::{relative_position_bucket, Encoder, EncoderOutput};
pub use pretrained::{
    encoder_from_tensors, fold_weight_norm, load_encoder, save_encoder, translate_checkpoint, translate_name,
    CONFIG_KEY, TRANSLATION_TABLE,
};

use candle_core::{Device, Tensor};
use ndarray::Array2;

use crate::audio_sim::Waveform;
use crate::error::{Error, Result};

/// Frames by feature dimensions.
pub type FeatureMatrix = Array2<f32>;

/// Per-utterance activations: CNN features and every hidden state.
#[derive(Debug, Clone)]
pub struct EncoderActivations {
    pub cnn_features: FeatureMatrix,
    pub layers: Vec<FeatureMatrix>,
}

impl EncoderActivations {
    pub fn frames(&self) -> usize {
        self.cnn_features.nrows()
    }

    pub fn layer(&self, k: usize) -> Result<&FeatureMatrix> {
        self.layers.get(k).ok_or_else(|| {
            Error::invalid(format!("layer {k} requested, encoder exposes 0..={}", self.layers.len().saturating_sub(1)))
        })
    }
}

/// `[1, T, D]` (or `[T, D]`) tensor to a feature matrix.
pub fn tensor_to_matrix(t: &Tensor) -> Result<FeatureMatrix> {
    let t = match t.rank() {
        3 => t.squeeze(0)?,
        2 => t.clone(),
        r => return Err(Error::shape(format!("expected a rank 2 or 3 feature tensor, got rank {r}"))),
    };
    let (rows, cols) = t.dims2()?;
    let data: Vec<f32> = t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1()?;
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::shape(e.to_string()))
}

pub fn matrix_to_tensor(m: &FeatureMatrix, device: &Device) -> Result<Tensor> {
    let data: Vec<f32> = m.iter().copied().collect();
    Ok(Tensor::from_vec(data, (1, m.nrows(), m.ncols()), device)?)
}

/// Anything that maps a waveform to layer-wise frame features.
pub trait SpeechEncoder {
    fn n_layers(&self) -> usize;
    fn frames_for(&self, samples: usize) -> usize;
    fn activations(&self, wave: &Waveform, mask: Option<&MaskSpec>) -> Result<EncoderActivations>;
}

pub fn waveform_tensor(wave: &Waveform, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_slice(&wave.samples, (1, wave.len()), device)?)
}

impl SpeechEncoder for Encoder {
    fn n_layers(&self) -> usize {
        self.config().n_layers
    }

    fn frames_for(&self, samples: usize) -> usize {
        self.config().frames_for(samples)
    }

    fn activations(&self, wave: &Waveform, mask: Option<&MaskSpec>) -> Result<EncoderActivations> {
        let x = waveform_tensor(wave, self.device())?;
        let t = self.config().frames_for(wave.len());
        let mask = mask.map(|m| m.to_tensor(t, self.device())).transpose()?;
        let out = self.forward(&x, mask.as_ref())?;
        Ok(EncoderActivations {
            cnn_features: tensor_to_matrix(&out.cnn)?,
            layers: out.layers.iter().map(tensor_to_matrix).collect::<Result<_>>()?,
        })
    }
}
