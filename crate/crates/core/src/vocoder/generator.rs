use candle_core::{Module, Tensor, D};
use candle_nn::{Init, Linear, VarBuilder};

use super::stft::Istft;
use super::VocoderConfig;
use crate::error::{Error, Result};
use crate::nn::layers::{gelu, linear, uniform_bound, LayerNorm, MultiHeadAttention};

/// Upper bound on predicted linear magnitudes.
pub const MAX_MAGNITUDE: f64 = 100.0;

/// Depthwise 1-D convolution over `[B, T, C]` with "same" zero padding,
/// written as shifted multiply-adds.
fn depthwise_conv(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, t, c) = x.dims3()?;
    let k = weight.dim(1)?;
    let left = (k - 1) / 2;
    let padded = x.pad_with_zeros(1, left, k - 1 - left)?;
    let mut acc = bias.reshape((1, 1, c))?.broadcast_as(x.shape())?.contiguous()?;
    for j in 0..k {
        let w = weight.narrow(1, j, 1)?.reshape((1, 1, c))?;
        acc = (acc + padded.narrow(1, j, t)?.broadcast_mul(&w)?)?;
    }
    Ok(acc)
}

#[derive(Debug, Clone)]
struct ConvNeXtBlock {
    dw_weight: Tensor,
    dw_bias: Tensor,
    norm: LayerNorm,
    up: Linear,
    down: Linear,
    gamma: Tensor,
}

impl ConvNeXtBlock {
    fn new(dim: usize, inter: usize, layer_scale: f64, vb: VarBuilder) -> Result<Self> {
        let dw = vb.pp("dwconv");
        Ok(Self {
            dw_weight: dw.get_with_hints((dim, 7), "weight", uniform_bound(7))?,
            dw_bias: dw.get_with_hints(dim, "bias", Init::Const(0.0))?,
            norm: LayerNorm::new(dim, 1e-6, vb.pp("norm"))?,
            up: linear(dim, inter, true, vb.pp("pwconv1"))?,
            down: linear(inter, dim, true, vb.pp("pwconv2"))?,
            gamma: vb.get_with_hints(dim, "gamma", Init::Const(layer_scale))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = depthwise_conv(x, &self.dw_weight, &self.dw_bias)?;
        let y = self.down.forward(&gelu(&self.up.forward(&self.norm.forward(&y)?)?)?)?;
        Ok((x + y.broadcast_mul(&self.gamma)?)?)
    }
}

#[derive(Debug, Clone)]
struct AttentionBlock {
    norm: LayerNorm,
    attn: MultiHeadAttention,
}

impl AttentionBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm.forward(x)?;
        Ok((x + self.attn.forward(&h, &h)?)?)
    }
}

/// Linear magnitude and raw phase per frame and bin.
#[derive(Debug, Clone)]
pub struct HeadTensors {
    pub magnitude: Tensor,
    pub phase: Tensor,
}

/// Feature-to-waveform generator: in-projection, optional self-attention,
/// ConvNeXt stack and a magnitude/phase head feeding an inverse STFT.
#[derive(Debug, Clone)]
pub struct Generator {
    cfg: VocoderConfig,
    in_proj: Linear,
    in_norm: LayerNorm,
    attention: Option<AttentionBlock>,
    blocks: Vec<ConvNeXtBlock>,
    final_norm: LayerNorm,
    head: Linear,
    istft: Istft,
}

impl Generator {
    pub fn new(cfg: &VocoderConfig, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden_dim;
        let attention = if cfg.attention {
            Some(AttentionBlock {
                norm: LayerNorm::new(h, 1e-6, vb.pp("attn_norm"))?,
                attn: MultiHeadAttention::new(h, h, h, cfg.attention_heads, vb.pp("attn"))?,
            })
        } else {
            None
        };
        let scale = 1.0 / cfg.n_blocks.max(1) as f64;
        let blocks = (0..cfg.n_blocks)
            .map(|i| ConvNeXtBlock::new(h, cfg.intermediate_dim, scale, vb.pp(format!("blocks.{i}"))))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            in_proj: linear(cfg.in_dim, h, true, vb.pp("in_proj"))?,
            in_norm: LayerNorm::new(h, 1e-6, vb.pp("in_norm"))?,
            attention,
            blocks,
            final_norm: LayerNorm::new(h, 1e-6, vb.pp("final_norm"))?,
            head: linear(h, cfg.fft_size + 2, true, vb.pp("head"))?,
            istft: Istft::new(cfg.fft_size, cfg.hop, vb.device())?,
        })
    }

    pub fn config(&self) -> &VocoderConfig {
        &self.cfg
    }

    pub fn istft(&self) -> &Istft {
        &self.istft
    }

    /// `[B, T, in_dim]` features to spectral head outputs `[B, T, bins]`.
    pub fn head_output(&self, features: &Tensor) -> Result<HeadTensors> {
        let (_, t, d) = features.dims3()?;
        if d != self.cfg.in_dim {
            return Err(Error::shape(format!("vocoder expects {}-dim features, got {d}", self.cfg.in_dim)));
        }
        if t == 0 {
            return Err(Error::invalid("vocoder needs at least one frame"));
        }
        let mut x = self.in_norm.forward(&self.in_proj.forward(features)?)?;
        if let Some(a) = &self.attention {
            x = a.forward(&x)?;
        }
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        let out = self.head.forward(&self.final_norm.forward(&x)?)?;
        let bins = self.cfg.fft_size / 2 + 1;
        let log_mag = out.narrow(D::Minus1, 0, bins)?;
        let phase = out.narrow(D::Minus1, bins, bins)?;
        let magnitude = (log_mag.exp()? - 1.0)?.clamp(0.0, MAX_MAGNITUDE)?;
        Ok(HeadTensors { magnitude, phase })
    }

    /// `[B, T, in_dim]` to `[B, T * hop]`.
    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let h = self.head_output(features)?;
        self.istft.from_polar(&h.magnitude, &h.phase)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn depthwise_matches_direct_sum() {
        let dev = Device::Cpu;
        let x = Tensor::arange(0f32, 12.0, &dev).unwrap().reshape((1, 6, 2)).unwrap();
        let w = Tensor::from_vec(vec![1f32, 2., 3., 4., 5., 6., 7., 0., 0., 0., 0., 0., 0., 1.], (2, 7), &dev).unwrap();
        let b = Tensor::from_vec(vec![0.5f32, -0.5], 2, &dev).unwrap();
        let y: Vec<Vec<f32>> = depthwise_conv(&x, &w, &b).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
        let xs: Vec<Vec<f32>> = x.squeeze(0).unwrap().to_vec2().unwrap();
        let wv: Vec<Vec<f32>> = w.to_vec2().unwrap();
        for t in 0..6 {
            for c in 0..2 {
                let mut s = [0.5f32, -0.5][c];
                for j in 0..7 {
                    let src = t as i64 + j as i64 - 3;
                    if (0..6).contains(&src) {
                        s += wv[c][j] * xs[src as usize][c];
                    }
                }
                assert_eq!(y[t][c], s);
            }
        }
    }

    #[test]
    fn zero_features_give_silence() {
        let cfg = VocoderConfig::toy();
        let store = ParamStore::seeded(3, DType::F32);
        let g = Generator::new(&cfg, store.var_builder()).unwrap();
        let x = Tensor::zeros((1, 5, cfg.in_dim), DType::F32, &Device::Cpu).unwrap();
        let y: Vec<f32> = g.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(y.len(), 5 * cfg.hop);
        assert!(y.iter().all(|&v| v == 0.0));
    }
}
