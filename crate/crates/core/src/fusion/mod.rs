//! Combining the phonetic (final layer) and acoustic (first layer) streams
//! before synthesis.

use candle_core::{Module, Tensor, D};
use candle_nn::{Init, Linear, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::encoder::{matrix_to_tensor, tensor_to_matrix, FeatureMatrix};
use crate::error::{Error, Result};
use crate::nn::layers::{gelu, linear, linear_with_init, LayerNorm, MultiHeadAttention};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionScheme {
    #[default]
    Add,
    Cat,
    CrossAttention,
    #[serde(rename = "film")]
    FiLM,
    /// Phonetic stream only.
    None,
}

impl std::str::FromStr for FusionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "add" => Ok(Self::Add),
            "cat" => Ok(Self::Cat),
            "cross_attention" | "ca" => Ok(Self::CrossAttention),
            "film" => Ok(Self::FiLM),
            "none" => Ok(Self::None),
            other => {
                Err(Error::invalid(format!("unknown fusion scheme `{other}` (add|cat|cross_attention|film|none)")))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub scheme: FusionScheme,
    pub d_phonetic: usize,
    pub d_acoustic: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { scheme: FusionScheme::Add, d_phonetic: 1024, d_acoustic: 1024, n_heads: 8, ffn_mult: 4 }
    }
}

impl FusionConfig {
    pub fn output_dim(&self) -> usize {
        match self.scheme {
            FusionScheme::Cat => 2 * self.d_phonetic,
            _ => self.d_phonetic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_phonetic == 0 || self.d_acoustic == 0 {
            return Err(Error::invalid("fusion dims must be positive"));
        }
        if self.scheme == FusionScheme::CrossAttention && (self.n_heads == 0 || self.d_phonetic % self.n_heads != 0) {
            return Err(Error::invalid(format!(
                "cross-attention needs n_heads ({}) to divide d_phonetic ({})",
                self.n_heads, self.d_phonetic
            )));
        }
        Ok(())
    }
}

/// Pre-norm decoder block: the acoustic stream queries the phonetic stream.
#[derive(Debug, Clone)]
pub struct CrossAttentionBlock {
    query_proj: Option<Linear>,
    norm_q: LayerNorm,
    norm_kv: LayerNorm,
    attn: MultiHeadAttention,
    norm_ffn: LayerNorm,
    ffn_up: Linear,
    ffn_down: Linear,
}

impl CrossAttentionBlock {
    pub fn new(cfg: &FusionConfig, vb: VarBuilder) -> Result<Self> {
        let d = cfg.d_phonetic;
        let query_proj =
            if cfg.d_acoustic != d { Some(linear(cfg.d_acoustic, d, false, vb.pp("query_proj"))?) } else { None };
        Ok(Self {
            query_proj,
            norm_q: LayerNorm::new(d, 1e-5, vb.pp("norm_q"))?,
            norm_kv: LayerNorm::new(d, 1e-5, vb.pp("norm_kv"))?,
            attn: MultiHeadAttention::new(d, d, d, cfg.n_heads, vb.pp("attn"))?,
            norm_ffn: LayerNorm::new(d, 1e-5, vb.pp("norm_ffn"))?,
            ffn_up: linear(d, d * cfg.ffn_mult, true, vb.pp("ffn_up"))?,
            ffn_down: linear(d * cfg.ffn_mult, d, true, vb.pp("ffn_down"))?,
        })
    }

    fn base(&self, acoustic: &Tensor) -> Result<Tensor> {
        Ok(match &self.query_proj {
            Some(p) => p.forward(acoustic)?,
            None => acoustic.clone(),
        })
    }

    /// Attention-weighted phonetic values before the output projection.
    pub fn attention_context(&self, phonetic: &Tensor, acoustic: &Tensor) -> Result<Tensor> {
        let q = self.norm_q.forward(&self.base(acoustic)?)?;
        Ok(self.attn.context(&q, &self.norm_kv.forward(phonetic)?)?)
    }

    /// Value projections the attention context mixes.
    pub fn values(&self, phonetic: &Tensor) -> Result<Tensor> {
        Ok(self.attn.value_projection(&self.norm_kv.forward(phonetic)?)?)
    }

    pub fn forward(&self, phonetic: &Tensor, acoustic: &Tensor) -> Result<Tensor> {
        let base = self.base(acoustic)?;
        let q = self.norm_q.forward(&base)?;
        let x = (base + self.attn.forward(&q, &self.norm_kv.forward(phonetic)?)?)?;
        let ff = self.ffn_down.forward(&gelu(&self.ffn_up.forward(&self.norm_ffn.forward(&x)?)?)?)?;
        Ok((x + ff)?)
    }
}

#[derive(Debug, Clone)]
pub enum Fusion {
    Add { proj: Linear },
    Cat { proj: Linear },
    FiLM { gamma: Linear, beta: Linear },
    CrossAttention(Box<CrossAttentionBlock>),
    None,
}

impl Fusion {
    /// FiLM starts as the identity modulation (gamma = 1, beta = 0).
    pub fn new(cfg: &FusionConfig, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let (dp, da) = (cfg.d_phonetic, cfg.d_acoustic);
        Ok(match cfg.scheme {
            FusionScheme::Add => Fusion::Add { proj: linear(da, dp, false, vb.pp("proj"))? },
            FusionScheme::Cat => Fusion::Cat { proj: linear(da, dp, false, vb.pp("proj"))? },
            FusionScheme::FiLM => Fusion::FiLM {
                gamma: linear_with_init(da, dp, Init::Const(0.0), Some(Init::Const(1.0)), vb.pp("gamma"))?,
                beta: linear_with_init(da, dp, Init::Const(0.0), Some(Init::Const(0.0)), vb.pp("beta"))?,
            },
            FusionScheme::CrossAttention => {
                Fusion::CrossAttention(Box::new(CrossAttentionBlock::new(cfg, vb.pp("ca"))?))
            }
            FusionScheme::None => Fusion::None,
        })
    }

    /// Fuses `[B, T, Dp]` phonetic and `[B, T, Da]` acoustic features.
    pub fn forward(&self, phonetic: &Tensor, acoustic: &Tensor) -> Result<Tensor> {
        let (b, t, _) = phonetic.dims3()?;
        let (ab, at, _) = acoustic.dims3()?;
        if (b, t) != (ab, at) {
            return Err(Error::shape(format!(
                "phonetic ({b}, {t}) and acoustic ({ab}, {at}) streams differ in batch/frames"
            )));
        }
        Ok(match self {
            Fusion::Add { proj } => (proj.forward(acoustic)? + phonetic)?,
            Fusion::Cat { proj } => Tensor::cat(&[&proj.forward(acoustic)?, phonetic], D::Minus1)?,
            Fusion::FiLM { gamma, beta } => ((gamma.forward(acoustic)? * phonetic)? + beta.forward(acoustic)?)?,
            Fusion::CrossAttention(block) => block.forward(phonetic, acoustic)?,
            Fusion::None => phonetic.clone(),
        })
    }

    pub fn projection(&self) -> Option<&Linear> {
        match self {
            Fusion::Add { proj } | Fusion::Cat { proj } => Some(proj),
            _ => None,
        }
    }
}

/// Fused `[T, D_out]` features for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeatures {
    pub matrix: FeatureMatrix,
}

/// Matrix-level fusion for a single utterance.
pub fn fuse(
    phonetic: &FeatureMatrix,
    acoustic: &FeatureMatrix,
    cfg: &FusionConfig,
    fusion: &Fusion,
) -> Result<FusedFeatures> {
    if phonetic.nrows() != acoustic.nrows() {
        return Err(Error::shape(format!("phonetic has {} frames, acoustic {}", phonetic.nrows(), acoustic.nrows())));
    }
    if phonetic.ncols() != cfg.d_phonetic || acoustic.ncols() != cfg.d_acoustic {
        return Err(Error::shape(format!(
            "stream dims ({}, {}) do not match config ({}, {})",
            phonetic.ncols(),
            acoustic.ncols(),
            cfg.d_phonetic,
            cfg.d_acoustic
        )));
    }
    let dev = candle_core::Device::Cpu;
    let out = fusion.forward(&matrix_to_tensor(phonetic, &dev)?, &matrix_to_tensor(acoustic, &dev)?)?;
    Ok(FusedFeatures { matrix: tensor_to_matrix(&out)? })
}
