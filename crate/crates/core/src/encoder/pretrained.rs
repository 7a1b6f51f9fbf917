//! Loading reference-layout encoder checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};

use super::config::EncoderConfig;
use super::model::Encoder;
use crate::error::{Error, Result};
use crate::nn::{Checkpoint, ParamStore};

/// Metadata key under which native checkpoints record their encoder config.
pub const CONFIG_KEY: &str = "encoder_config";

/// Reference name fragment -> internal name fragment. `{i}` stands for a
/// layer index and is carried over unchanged.
pub const TRANSLATION_TABLE: &[(&str, &str)] = &[
    ("feature_extractor.conv_layers.{i}.conv.", "cnn.{i}.conv."),
    ("feature_extractor.conv_layers.{i}.layer_norm.", "cnn.{i}.norm."),
    ("feature_projection.layer_norm.", "proj.norm."),
    ("feature_projection.projection.", "proj.linear."),
    ("masked_spec_embed", "mask_embedding"),
    ("encoder.pos_conv_embed.conv.bias", "pos_conv.bias"),
    ("encoder.layer_norm.", "final_norm."),
    ("encoder.layers.{i}.layer_norm.", "blocks.{i}.attn_norm."),
    ("encoder.layers.{i}.attention.q_proj.", "blocks.{i}.attn.q."),
    ("encoder.layers.{i}.attention.k_proj.", "blocks.{i}.attn.k."),
    ("encoder.layers.{i}.attention.v_proj.", "blocks.{i}.attn.v."),
    ("encoder.layers.{i}.attention.out_proj.", "blocks.{i}.attn.out."),
    ("encoder.layers.{i}.attention.gru_rel_pos_linear.", "blocks.{i}.attn.gate."),
    ("encoder.layers.{i}.attention.gru_rel_pos_const", "blocks.{i}.attn.gate_const"),
    ("encoder.layers.{i}.attention.rel_attn_embed.weight", "blocks.{i}.attn.rel_pos_embedding"),
    ("encoder.layers.{i}.final_layer_norm.", "blocks.{i}.ffn_norm."),
    ("encoder.layers.{i}.feed_forward.intermediate_dense.", "blocks.{i}.ffn.up."),
    ("encoder.layers.{i}.feed_forward.output_dense.", "blocks.{i}.ffn.down."),
];

const POS_CONV_G: [&str; 2] =
    ["encoder.pos_conv_embed.conv.weight_g", "encoder.pos_conv_embed.conv.parametrizations.weight.original0"];
const POS_CONV_V: [&str; 2] =
    ["encoder.pos_conv_embed.conv.weight_v", "encoder.pos_conv_embed.conv.parametrizations.weight.original1"];

fn match_pattern(name: &str, pattern: &str) -> Option<(Option<String>, usize)> {
    match pattern.split_once("{i}") {
        None => name.starts_with(pattern).then(|| (None, pattern.len())),
        Some((pre, post)) => {
            let rest = name.strip_prefix(pre)?;
            let digits = rest.chars().take_while(char::is_ascii_digit).count();
            if digits == 0 || !rest[digits..].starts_with(post) {
                return None;
            }
            Some((Some(rest[..digits].to_string()), pre.len() + digits + post.len()))
        }
    }
}

/// Maps one reference parameter name to its internal name, or `None` for
/// tensors the encoder does not use.
pub fn translate_name(name: &str) -> Option<String> {
    let name = name.strip_prefix("wavlm.").unwrap_or(name);
    for (from, to) in TRANSLATION_TABLE {
        if let Some((idx, consumed)) = match_pattern(name, from) {
            let head = match idx {
                Some(i) => to.replace("{i}", &i),
                None => to.to_string(),
            };
            return Some(format!("{head}{}", &name[consumed..]));
        }
    }
    None
}

/// Folds a weight-normalised kernel `g * v / ||v||` where the norm runs over
/// every axis except the last (the reference positional conv normalises along
/// the kernel axis).
pub fn fold_weight_norm(g: &Tensor, v: &Tensor) -> Result<Tensor> {
    let v64 = v.to_dtype(DType::F64)?;
    let norm = v64.sqr()?.sum_keepdim(0)?.sum_keepdim(1)?.sqrt()?;
    let g64 = g.to_dtype(DType::F64)?;
    Ok(v64.broadcast_div(&norm)?.broadcast_mul(&g64)?.to_dtype(DType::F32)?)
}

fn find<'a>(tensors: &'a BTreeMap<String, Tensor>, names: &[&str]) -> Option<&'a Tensor> {
    names.iter().find_map(|n| tensors.get(*n).or_else(|| tensors.get(&format!("wavlm.{n}"))))
}

/// Translates a reference-layout tensor map into internal names.
pub fn translate_checkpoint(src: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    let mut ignored = 0usize;
    for (name, t) in src {
        match translate_name(name) {
            Some(internal) => {
                out.insert(internal, t.clone());
            }
            None => ignored += 1,
        }
    }
    if let Some(w) = find(src, &["encoder.pos_conv_embed.conv.weight"]) {
        out.insert("pos_conv.weight".into(), w.clone());
    } else {
        match (find(src, &POS_CONV_G), find(src, &POS_CONV_V)) {
            (Some(g), Some(v)) => {
                out.insert("pos_conv.weight".into(), fold_weight_norm(g, v)?);
                ignored = ignored.saturating_sub(2);
            }
            _ => {
                return Err(Error::ArchitectureMismatch(
                    "positional convolution weight (plain or weight-normalised) not found".into(),
                ))
            }
        }
    }
    tracing::debug!(translated = out.len(), ignored, "translated encoder checkpoint");
    Ok(out)
}

fn looks_like_reference(tensors: &BTreeMap<String, Tensor>) -> bool {
    tensors.keys().any(|k| k.contains("feature_extractor.") || k.contains("encoder.layers."))
}

/// Loads an encoder from a safetensors file.
///
/// Native checkpoints carry their config in metadata; reference-layout files
/// are translated and checked against `cfg`.
pub fn load_encoder(path: impl AsRef<Path>, cfg: &EncoderConfig) -> Result<(Encoder, ParamStore)> {
    let ck = Checkpoint::load(path.as_ref())?;
    let (tensors, cfg) = if looks_like_reference(&ck.tensors) {
        (translate_checkpoint(&ck.tensors)?, cfg.clone())
    } else {
        let cfg = match ck.metadata.get(CONFIG_KEY) {
            Some(json) => serde_json::from_str::<EncoderConfig>(json)
                .map_err(|e| Error::ArchitectureMismatch(format!("bad encoder config in checkpoint: {e}")))?,
            None => cfg.clone(),
        };
        // Encoder weights may sit under a prefix inside a larger checkpoint
        // (a DRD run stores its student under `student.`).
        let prefix = ["encoder.", "student."].into_iter().find(|p| ck.tensors.keys().any(|k| k.starts_with(p)));
        let tensors = match prefix {
            Some(p) => ck.with_prefix(p),
            None => ck.tensors.clone(),
        };
        (tensors, cfg)
    };
    encoder_from_tensors(&cfg, tensors)
}

/// Builds an encoder from internally named tensors, rejecting missing,
/// surplus or mis-shaped parameters.
pub fn encoder_from_tensors(cfg: &EncoderConfig, tensors: BTreeMap<String, Tensor>) -> Result<(Encoder, ParamStore)> {
    let provided: Vec<String> = tensors.keys().cloned().collect();
    let store = ParamStore::from_tensors(tensors, DType::F32)?;
    let enc = Encoder::from_store(cfg, &store)?;
    // Every provided tensor must have been claimed by the model.
    let reference = Encoder::parameter_shapes(cfg);
    if let Some(extra) = provided.iter().find(|n| !reference.contains_key(*n)) {
        return Err(Error::ArchitectureMismatch(format!("unexpected parameter `{extra}` for this encoder config")));
    }
    Ok((enc, store))
}

impl Encoder {
    /// Parameter names and shapes for `cfg`, without allocating weights.
    pub fn parameter_shapes(cfg: &EncoderConfig) -> BTreeMap<String, Vec<usize>> {
        let mut shapes = BTreeMap::new();
        let d = cfg.model_dim;
        let hd = d / cfg.n_heads.max(1);
        let mut in_ch = 1;
        for (i, (&c, &k)) in cfg.cnn_channels.iter().zip(&cfg.cnn_kernels).enumerate() {
            shapes.insert(format!("cnn.{i}.conv.weight"), vec![c, in_ch, k]);
            if cfg.cnn_bias {
                shapes.insert(format!("cnn.{i}.conv.bias"), vec![c]);
            }
            shapes.insert(format!("cnn.{i}.norm.weight"), vec![c]);
            shapes.insert(format!("cnn.{i}.norm.bias"), vec![c]);
            in_ch = c;
        }
        shapes.insert("proj.norm.weight".into(), vec![in_ch]);
        shapes.insert("proj.norm.bias".into(), vec![in_ch]);
        shapes.insert("proj.linear.weight".into(), vec![d, in_ch]);
        shapes.insert("proj.linear.bias".into(), vec![d]);
        shapes.insert("mask_embedding".into(), vec![d]);
        shapes.insert("pos_conv.weight".into(), vec![d, d / cfg.pos_conv_groups.max(1), cfg.pos_conv_kernel]);
        shapes.insert("pos_conv.bias".into(), vec![d]);
        shapes.insert("final_norm.weight".into(), vec![d]);
        shapes.insert("final_norm.bias".into(), vec![d]);
        shapes.insert("blocks.0.attn.rel_pos_embedding".into(), vec![cfg.num_buckets, cfg.n_heads]);
        for i in 0..cfg.n_layers {
            let p = format!("blocks.{i}.");
            for n in ["attn_norm", "ffn_norm"] {
                shapes.insert(format!("{p}{n}.weight"), vec![d]);
                shapes.insert(format!("{p}{n}.bias"), vec![d]);
            }
            for n in ["q", "k", "v", "out"] {
                shapes.insert(format!("{p}attn.{n}.weight"), vec![d, d]);
                shapes.insert(format!("{p}attn.{n}.bias"), vec![d]);
            }
            shapes.insert(format!("{p}attn.gate.weight"), vec![8, hd]);
            shapes.insert(format!("{p}attn.gate.bias"), vec![8]);
            shapes.insert(format!("{p}attn.gate_const"), vec![1, cfg.n_heads, 1, 1]);
            shapes.insert(format!("{p}ffn.up.weight"), vec![cfg.ffn_dim, d]);
            shapes.insert(format!("{p}ffn.up.bias"), vec![cfg.ffn_dim]);
            shapes.insert(format!("{p}ffn.down.weight"), vec![d, cfg.ffn_dim]);
            shapes.insert(format!("{p}ffn.down.bias"), vec![d]);
        }
        shapes
    }
}

/// Writes an encoder's parameters in the native layout, with its config in
/// the metadata.
pub fn save_encoder(store: &ParamStore, cfg: &EncoderConfig, path: impl AsRef<Path>) -> Result<()> {
    let mut ck = Checkpoint::new();
    ck.insert_all("", store.tensors());
    ck.metadata.insert(CONFIG_KEY.into(), serde_json::to_string(cfg)?);
    ck.save(path)
}
