use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use pase_core::audio_sim::{read_wav, resample, write_wav_pcm16};
use pase_core::fusion::FusionScheme;
use pase_core::vocoder::{load_vocoder, Enhancer};
use serde::{Deserialize, Serialize};

use crate::common::{wav_inputs, EncoderSource, Preset};
use crate::config::{config_error, resolve, write_snapshot};
use crate::Globals;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnhanceConfig {
    /// Noisy WAV files or directories of them.
    pub inputs: Vec<PathBuf>,
    /// Denoising encoder (DRD checkpoint).
    pub encoder: EncoderSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocoder_checkpoint: Option<PathBuf>,
    /// `none` drops the acoustic stream; other values must match training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusionScheme>,
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "toy")]
    preset: Preset,
    /// Noisy WAV file or directory (repeatable).
    #[arg(long = "input")]
    inputs: Vec<PathBuf>,
    /// DRD checkpoint providing the encoder.
    #[arg(long)]
    drd: Option<PathBuf>,
    #[arg(long)]
    vocoder: Option<PathBuf>,
    /// add | cat | cross_attention | film | none
    #[arg(long)]
    fusion: Option<String>,
}

pub fn run(args: EnhanceArgs, g: &Globals) -> Result<()> {
    let base = EnhanceConfig {
        inputs: Vec::new(),
        encoder: EncoderSource::for_preset(args.preset),
        vocoder_checkpoint: None,
        fusion: None,
    };
    let mut cfg = resolve(&base, args.config.as_deref())?;
    if !args.inputs.is_empty() {
        cfg.inputs = args.inputs;
    }
    if args.drd.is_some() {
        cfg.encoder.checkpoint = args.drd;
    }
    if args.vocoder.is_some() {
        cfg.vocoder_checkpoint = args.vocoder;
    }
    if let Some(f) = &args.fusion {
        cfg.fusion = Some(f.parse().map_err(|e: pase_core::Error| config_error(e.to_string()))?);
    }
    let Some(vocoder_path) = cfg.vocoder_checkpoint.clone() else {
        return Err(config_error("enhance needs a vocoder checkpoint (--vocoder)"));
    };
    if cfg.inputs.is_empty() {
        return Err(config_error("enhance needs at least one --input"));
    }
    write_snapshot(&g.output_dir, "enhance", &cfg)?;

    let (encoder, _) = cfg.encoder.load(g.asset_dir.as_deref())?;
    let bundle = load_vocoder(&vocoder_path).with_context(|| format!("loading vocoder {}", vocoder_path.display()))?;
    let sr = bundle.config.vocoder.sample_rate;
    let enhancer = Enhancer::new(encoder, bundle, cfg.fusion)?;

    let files = wav_inputs(&cfg.inputs)?;
    for file in &files {
        let mut noisy = read_wav(file)?;
        if noisy.sample_rate != sr {
            tracing::info!(file = %file.display(), from = noisy.sample_rate, to = sr, "resampling input");
            noisy = resample(&noisy, sr);
        }
        let out = enhancer.enhance(&noisy)?;
        let name = file.file_name().context("input without a file name")?;
        let target = g.output_dir.join(name);
        if target.canonicalize().ok() == file.canonicalize().ok() {
            return Err(config_error(format!("refusing to overwrite input {}", file.display())));
        }
        write_wav_pcm16(&target, &out)?;
        tracing::info!(input = %file.display(), output = %target.display(), samples_in = noisy.len(), samples_out = out.len(), "enhanced");
    }
    tracing::info!(files = files.len(), "enhancement finished");
    Ok(())
}
