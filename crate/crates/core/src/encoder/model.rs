use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{Conv1d, Conv1dConfig, Init, Linear, VarBuilder};

use super::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::nn::layers::{attend, conv1d, gelu, linear, LayerNorm};
use crate::nn::ParamStore;

/// Hidden states of one forward pass.
///
/// `layers[0]` is the transformer input (projected CNN features plus the
/// positional convolution), `layers[i]` the output of block `i`, and the last
/// entry carries the final layer norm.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub cnn: Tensor,
    pub layers: Vec<Tensor>,
}

#[derive(Debug, Clone)]
struct Block {
    attn_norm: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    gate: Linear,
    gate_const: Tensor,
    ffn_norm: LayerNorm,
    up: Linear,
    down: Linear,
    n_heads: usize,
}

impl Block {
    fn new(cfg: &EncoderConfig, vb: VarBuilder) -> candle_core::Result<Self> {
        let d = cfg.model_dim;
        let hd = d / cfg.n_heads;
        let attn = vb.pp("attn");
        Ok(Self {
            attn_norm: LayerNorm::new(d, cfg.layer_norm_eps, vb.pp("attn_norm"))?,
            q: linear(d, d, true, attn.pp("q"))?,
            k: linear(d, d, true, attn.pp("k"))?,
            v: linear(d, d, true, attn.pp("v"))?,
            o: linear(d, d, true, attn.pp("out"))?,
            gate: linear(hd, 8, true, attn.pp("gate"))?,
            gate_const: attn.get_with_hints((1, cfg.n_heads, 1, 1), "gate_const", Init::Const(1.0))?,
            ffn_norm: LayerNorm::new(d, cfg.layer_norm_eps, vb.pp("ffn_norm"))?,
            up: linear(d, cfg.ffn_dim, true, vb.pp("ffn").pp("up"))?,
            down: linear(cfg.ffn_dim, d, true, vb.pp("ffn").pp("down"))?,
            n_heads: cfg.n_heads,
        })
    }

    /// `pos_bias` is the ungated `[1, H, T, T]` relative position bias.
    fn forward(&self, x: &Tensor, pos_bias: &Tensor) -> candle_core::Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let h = self.n_heads;
        let xn = self.attn_norm.forward(x)?;

        let per_head = xn.reshape((b, t, h, d / h))?.transpose(1, 2)?.contiguous()?;
        let g = self.gate.forward(&per_head)?.reshape((b, h, t, 2, 4))?.sum(D::Minus1)?;
        let g = candle_nn::ops::sigmoid(&g)?;
        let gate_a = g.narrow(D::Minus1, 0, 1)?;
        let gate_b = g.narrow(D::Minus1, 1, 1)?;
        let gate = ((gate_a * (gate_b.broadcast_mul(&self.gate_const)? - 1.0)?)? + 2.0)?;
        let bias = gate.broadcast_mul(pos_bias)?;

        let ctx = attend(&self.q.forward(&xn)?, &self.k.forward(&xn)?, &self.v.forward(&xn)?, h, Some(&bias))?;
        let x = (x + self.o.forward(&ctx)?)?;
        let ff = self.down.forward(&gelu(&self.up.forward(&self.ffn_norm.forward(&x)?)?)?)?;
        x + ff
    }
}

/// Relative position bucket as in T5, with log-spaced buckets beyond
/// `num_buckets / 4` and a sign bit. Computed in f32 to match the reference
/// implementation at bucket boundaries.
pub fn relative_position_bucket(relative: i64, num_buckets: usize, max_distance: usize) -> usize {
    let half = num_buckets / 2;
    let mut bucket = if relative > 0 { half } else { 0 };
    let n = relative.unsigned_abs() as usize;
    let max_exact = half / 2;
    if n < max_exact {
        bucket += n;
    } else {
        let ratio = (n as f32 / max_exact as f32).ln();
        let scale = (max_distance as f64 / max_exact as f64).ln() as f32;
        let large = max_exact as f32 + ratio / scale * (half - max_exact) as f32;
        bucket += (large as usize).min(half - 1);
    }
    bucket
}

/// Transformer speech encoder with a convolutional waveform front end.
#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    cnn: Vec<(Conv1d, LayerNorm)>,
    proj_norm: LayerNorm,
    proj: Linear,
    mask_embedding: Tensor,
    pos_conv: Conv1d,
    rel_pos_embedding: Tensor,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    device: Device,
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let device = vb.device().clone();
        let mut cnn = Vec::with_capacity(cfg.cnn_channels.len());
        let mut in_ch = 1;
        for (i, ((&c, &k), &s)) in cfg.cnn_channels.iter().zip(&cfg.cnn_kernels).zip(&cfg.cnn_strides).enumerate() {
            let conv_cfg = Conv1dConfig { stride: s, ..Default::default() };
            let layer = vb.pp("cnn").pp(i);
            cnn.push((
                conv1d(in_ch, c, k, conv_cfg, cfg.cnn_bias, layer.pp("conv"))?,
                LayerNorm::new(c, cfg.layer_norm_eps, layer.pp("norm"))?,
            ));
            in_ch = c;
        }
        let d = cfg.model_dim;
        let pos_cfg =
            Conv1dConfig { padding: cfg.pos_conv_kernel / 2, groups: cfg.pos_conv_groups, ..Default::default() };
        let blocks = (0..cfg.n_layers)
            .map(|i| Block::new(cfg, vb.pp("blocks").pp(i)))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            proj_norm: LayerNorm::new(in_ch, cfg.layer_norm_eps, vb.pp("proj").pp("norm"))?,
            proj: linear(in_ch, d, true, vb.pp("proj").pp("linear"))?,
            mask_embedding: vb.get_with_hints(d, "mask_embedding", Init::Uniform { lo: 0.0, up: 1.0 })?,
            pos_conv: conv1d(d, d, cfg.pos_conv_kernel, pos_cfg, true, vb.pp("pos_conv"))?,
            rel_pos_embedding: vb.pp("blocks").pp(0).pp("attn").get_with_hints(
                (cfg.num_buckets, cfg.n_heads),
                "rel_pos_embedding",
                Init::Randn { mean: 0.0, stdev: 1.0 },
            )?,
            blocks,
            final_norm: LayerNorm::new(d, cfg.layer_norm_eps, vb.pp("final_norm"))?,
            cnn,
            device,
        })
    }

    /// Builds a freshly initialised encoder and returns it with its parameters.
    pub fn seeded(cfg: &EncoderConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let store = ParamStore::seeded(seed, DType::F32);
        let enc = Self::new(cfg, store.var_builder())?;
        Ok((enc, store))
    }

    /// Builds an encoder over an existing parameter set, reporting missing or
    /// mis-shaped tensors as an architecture mismatch.
    pub fn from_store(cfg: &EncoderConfig, store: &ParamStore) -> Result<Self> {
        Self::new(cfg, store.var_builder()).map_err(|e| match e {
            Error::Tensor(inner) => Error::ArchitectureMismatch(inner.to_string()),
            other => other,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn frames_for(&self, samples: usize) -> usize {
        self.cfg.frames_for(samples)
    }

    /// Projected CNN features `[B, T, D]` for a `[B, L]` waveform batch.
    pub fn cnn_features(&self, wav: &Tensor) -> Result<Tensor> {
        let (b, len) = wav.dims2()?;
        if self.cfg.frames_for(len) == 0 {
            return Err(Error::invalid(format!(
                "waveform of {len} samples is shorter than the encoder receptive field"
            )));
        }
        let (l, r) = self.cfg.input_padding();
        let mut x = wav.reshape((b, 1, len))?;
        if l + r > 0 {
            x = x.pad_with_zeros(D::Minus1, l, r)?;
        }
        for (conv, norm) in &self.cnn {
            let y = conv.forward(&x)?.transpose(1, 2)?;
            x = gelu(&norm.forward(&y)?)?.transpose(1, 2)?;
        }
        let feats = x.transpose(1, 2)?;
        Ok(self.proj.forward(&self.proj_norm.forward(&feats)?)?)
    }

    fn position_bias(&self, t: usize) -> Result<Tensor> {
        let mut idx = Vec::with_capacity(t * t);
        for q in 0..t as i64 {
            for k in 0..t as i64 {
                idx.push(relative_position_bucket(k - q, self.cfg.num_buckets, self.cfg.max_distance) as u32);
            }
        }
        let idx = Tensor::from_vec(idx, t * t, &self.device)?;
        let h = self.cfg.n_heads;
        let bias = self.rel_pos_embedding.index_select(&idx, 0)?.reshape((t, t, h))?.permute((2, 0, 1))?;
        Ok(bias.unsqueeze(0)?.contiguous()?)
    }

    /// Replaces rows of `[B, T, D]` features where `mask` (`[B, T]` or
    /// `[1, T]`, u8) is one with the mask embedding.
    pub fn apply_mask(&self, features: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (b, t, d) = features.dims3()?;
        let (mb, mt) = mask.dims2()?;
        if mt != t || (mb != b && mb != 1) {
            return Err(Error::shape(format!("mask shape ({mb}, {mt}) does not match features ({b}, {t})")));
        }
        let m = mask.unsqueeze(2)?.broadcast_as((b, t, d))?;
        let emb = self.mask_embedding.reshape((1, 1, d))?.broadcast_as((b, t, d))?;
        Ok(m.where_cond(&emb, features)?)
    }

    pub fn mask_embedding(&self) -> &Tensor {
        &self.mask_embedding
    }

    /// Runs the encoder up to and including hidden state `max_layer`
    /// (`0..=n_layers`). `mask` is a `[B, T]` or `[1, T]` u8 tensor; ones mark
    /// frames replaced by the mask embedding.
    pub fn forward_until(&self, wav: &Tensor, mask: Option<&Tensor>, max_layer: usize) -> Result<EncoderOutput> {
        if max_layer > self.cfg.n_layers {
            return Err(Error::invalid(format!(
                "layer {max_layer} requested from a {}-layer encoder",
                self.cfg.n_layers
            )));
        }
        let cnn = self.cnn_features(wav)?;
        let mut x = match mask {
            Some(m) => self.apply_mask(&cnn, m)?,
            None => cnn.clone(),
        };
        let t = cnn.dim(1)?;
        let k = self.cfg.pos_conv_kernel;
        let mut pos = self.pos_conv.forward(&x.transpose(1, 2)?)?;
        if k % 2 == 0 {
            pos = pos.narrow(D::Minus1, 0, t)?;
        }
        x = (x + gelu(&pos)?.transpose(1, 2)?)?;

        let mut layers = Vec::with_capacity(max_layer + 1);
        layers.push(x.clone());
        if max_layer > 0 {
            let bias = self.position_bias(t)?;
            for (i, block) in self.blocks.iter().take(max_layer).enumerate() {
                x = block.forward(&x, &bias)?;
                if i + 1 == self.cfg.n_layers {
                    x = self.final_norm.forward(&x)?;
                }
                layers.push(x.clone());
            }
        }
        Ok(EncoderOutput { cnn, layers })
    }

    pub fn forward(&self, wav: &Tensor, mask: Option<&Tensor>) -> Result<EncoderOutput> {
        self.forward_until(wav, mask, self.cfg.n_layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            n_layers: 2,
            model_dim: 16,
            n_heads: 2,
            ffn_dim: 32,
            cnn_channels: vec![8, 8, 8],
            pos_conv_kernel: 4,
            pos_conv_groups: 2,
            ..EncoderConfig::toy()
        }
    }

    #[test]
    fn bucket_reference_values() {
        // Positions below 80 map to themselves, with the sign in the top half.
        assert_eq!(relative_position_bucket(0, 320, 800), 0);
        assert_eq!(relative_position_bucket(-5, 320, 800), 5);
        assert_eq!(relative_position_bucket(5, 320, 800), 165);
        assert_eq!(relative_position_bucket(-79, 320, 800), 79);
        assert_eq!(relative_position_bucket(-80, 320, 800), 80);
        // log(800/80)/log(10) * 80 = 80, clamped to 159.
        assert_eq!(relative_position_bucket(-800, 320, 800), 159);
        assert_eq!(relative_position_bucket(10_000, 320, 800), 319);
        // 80 + 80 * log10(2) = 104.08
        assert_eq!(relative_position_bucket(-160, 320, 800), 104);
    }

    #[test]
    fn output_shapes_follow_frame_contract() {
        let cfg = tiny();
        let (enc, _) = Encoder::seeded(&cfg, 0).unwrap();
        let wav = Tensor::randn(0f32, 0.1, (2, 1000), &Device::Cpu).unwrap();
        let out = enc.forward(&wav, None).unwrap();
        assert_eq!(out.layers.len(), 3);
        assert_eq!(out.cnn.dims(), &[2, 15, 16]);
        for l in &out.layers {
            assert_eq!(l.dims(), &[2, 15, 16]);
        }
        let partial = enc.forward_until(&wav, None, 1).unwrap();
        let a: Vec<f32> = partial.layers[1].flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = out.layers[1].flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn masked_frames_see_the_mask_embedding() {
        let cfg = tiny();
        let (enc, _) = Encoder::seeded(&cfg, 3).unwrap();
        let a = Tensor::randn(0f32, 0.1, (1, 640), &Device::Cpu).unwrap();
        let b = Tensor::randn(0f32, 0.1, (1, 640), &Device::Cpu).unwrap();
        let all = Tensor::ones((1, 10), DType::U8, &Device::Cpu).unwrap();
        let ya = enc.forward(&a, Some(&all)).unwrap().layers[2].clone();
        let yb = enc.forward(&b, Some(&all)).unwrap().layers[2].clone();
        let diff = (ya - yb).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-6, "fully masked inputs should be indistinguishable, diff {diff}");
        let bad = Tensor::ones((1, 9), DType::U8, &Device::Cpu).unwrap();
        assert!(enc.forward(&a, Some(&bad)).is_err());
    }

    #[test]
    fn apply_mask_leaves_unmasked_rows_untouched() {
        let (enc, _) = Encoder::seeded(&tiny(), 4).unwrap();
        let feats = Tensor::randn(0f32, 1.0, (1, 6, 16), &Device::Cpu).unwrap();
        let mask = Tensor::new(&[[0u8, 1, 0, 0, 1, 0]], &Device::Cpu).unwrap();
        let out: Vec<Vec<f32>> = enc.apply_mask(&feats, &mask).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
        let orig: Vec<Vec<f32>> = feats.squeeze(0).unwrap().to_vec2().unwrap();
        let emb: Vec<f32> = enc.mask_embedding().to_vec1().unwrap();
        for (i, row) in out.iter().enumerate() {
            if i == 1 || i == 4 {
                assert_eq!(row, &emb);
            } else {
                assert_eq!(row, &orig[i]);
            }
        }
    }

    #[test]
    fn too_short_input_is_rejected() {
        let (enc, _) = Encoder::seeded(&tiny(), 0).unwrap();
        let wav = Tensor::zeros((1, 10), DType::F32, &Device::Cpu).unwrap();
        assert!(enc.forward(&wav, None).is_err());
    }
}
