//! Thin layer constructors with explicit initialisers.
//!
//! Biases start at zero everywhere so that an all-zero input stays zero
//! through bias-carrying layers at initialisation.

use candle_core::{Module, Result, Tensor, D};
use candle_nn::{Conv1d, Conv1dConfig, Conv2d, Conv2dConfig, Init, Linear, VarBuilder};

pub fn uniform_bound(fan_in: usize) -> Init {
    let b = 1.0 / (fan_in.max(1) as f64).sqrt();
    Init::Uniform { lo: -b, up: b }
}

pub fn linear(in_dim: usize, out_dim: usize, bias: bool, vb: VarBuilder) -> Result<Linear> {
    let w = vb.get_with_hints((out_dim, in_dim), "weight", uniform_bound(in_dim))?;
    let b = if bias { Some(vb.get_with_hints(out_dim, "bias", Init::Const(0.0))?) } else { None };
    Ok(Linear::new(w, b))
}

pub fn linear_with_init(
    in_dim: usize,
    out_dim: usize,
    weight_init: Init,
    bias_init: Option<Init>,
    vb: VarBuilder,
) -> Result<Linear> {
    let w = vb.get_with_hints((out_dim, in_dim), "weight", weight_init)?;
    let b = match bias_init {
        Some(init) => Some(vb.get_with_hints(out_dim, "bias", init)?),
        None => None,
    };
    Ok(Linear::new(w, b))
}

pub fn conv1d(
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    cfg: Conv1dConfig,
    bias: bool,
    vb: VarBuilder,
) -> Result<Conv1d> {
    let fan_in = in_ch / cfg.groups * kernel;
    let w = vb.get_with_hints((out_ch, in_ch / cfg.groups, kernel), "weight", uniform_bound(fan_in))?;
    let b = if bias { Some(vb.get_with_hints(out_ch, "bias", Init::Const(0.0))?) } else { None };
    Ok(Conv1d::new(w, b, cfg))
}

pub fn conv2d(
    in_ch: usize,
    out_ch: usize,
    kernel: (usize, usize),
    cfg: Conv2dConfig,
    vb: VarBuilder,
) -> Result<Conv2d> {
    let fan_in = in_ch / cfg.groups * kernel.0 * kernel.1;
    let w = vb.get_with_hints((out_ch, in_ch / cfg.groups, kernel.0, kernel.1), "weight", uniform_bound(fan_in))?;
    let b = vb.get_with_hints(out_ch, "bias", Init::Const(0.0))?;
    Ok(Conv2d::new(w, Some(b), cfg))
}

/// Layer normalisation over the last dimension, built from primitive ops so
/// that it is differentiable.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, eps: f64, vb: VarBuilder) -> Result<Self> {
        let weight = vb.get_with_hints(dim, "weight", Init::Const(1.0))?;
        let bias = vb.get_with_hints(dim, "bias", Init::Const(0.0))?;
        Ok(Self { weight, bias, eps })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

/// Softmax attention over already-projected `[B, T, H*hd]` queries, keys and
/// values. `bias`, when given, broadcasts against the `[B, H, Tq, Tk]` scores.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor, n_heads: usize, bias: Option<&Tensor>) -> Result<Tensor> {
    let (b, tq, dim) = q.dims3()?;
    let tk = k.dim(1)?;
    let hd = dim / n_heads;
    let split =
        |x: &Tensor, t: usize| -> Result<Tensor> { x.reshape((b, t, n_heads, hd))?.transpose(1, 2)?.contiguous() };
    let q = (split(q, tq)? * (1.0 / (hd as f64).sqrt()))?;
    let k = split(k, tk)?;
    let v = split(v, tk)?;
    let mut scores = q.matmul(&k.transpose(2, 3)?.contiguous()?)?;
    if let Some(bias) = bias {
        scores = scores.broadcast_add(bias)?;
    }
    let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
    weights.matmul(&v)?.transpose(1, 2)?.reshape((b, tq, dim))
}

/// Multi-head attention with separate query and key/value input widths.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new(q_dim: usize, kv_dim: usize, dim: usize, n_heads: usize, vb: VarBuilder) -> Result<Self> {
        if n_heads == 0 || dim % n_heads != 0 {
            candle_core::bail!("attention dim {dim} is not divisible by {n_heads} heads");
        }
        Ok(Self {
            q: linear(q_dim, dim, true, vb.pp("q_proj"))?,
            k: linear(kv_dim, dim, true, vb.pp("k_proj"))?,
            v: linear(kv_dim, dim, true, vb.pp("v_proj"))?,
            o: linear(dim, dim, true, vb.pp("out_proj"))?,
            n_heads,
        })
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    /// Attention-weighted values before the output projection.
    pub fn context(&self, query: &Tensor, kv: &Tensor) -> Result<Tensor> {
        attend(&self.q.forward(query)?, &self.k.forward(kv)?, &self.v.forward(kv)?, self.n_heads, None)
    }

    pub fn value_projection(&self, kv: &Tensor) -> Result<Tensor> {
        self.v.forward(kv)
    }

    pub fn forward(&self, query: &Tensor, kv: &Tensor) -> Result<Tensor> {
        self.o.forward(&self.context(query, kv)?)
    }
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    x.gelu_erf()
}
