use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use pase_core::drd::{DrdConfig, DrdTrainer};
use pase_core::vocoder::{VocoderTrainConfig, VocoderTrainer};
use serde::{Deserialize, Serialize};

use crate::common::{DataConfig, EncoderSource, JsonLog, Preset};
use crate::config::{config_error, resolve, write_snapshot};
use crate::Globals;

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "toy")]
    preset: Preset,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override the total number of steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrdRunConfig {
    /// Teacher weights; the student starts from them unless configured otherwise.
    pub teacher: EncoderSource,
    pub data: DataConfig,
    pub drd: DrdConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocoderRunConfig {
    /// Frozen feature encoder, normally the DRD student checkpoint.
    pub encoder: EncoderSource,
    pub data: DataConfig,
    pub vocoder: VocoderTrainConfig,
}

fn checkpoint_dir(g: &Globals) -> Result<PathBuf> {
    let dir = g.output_dir.join(CHECKPOINT_DIR);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

pub fn run_drd(args: TrainArgs, g: &Globals) -> Result<()> {
    let base = DrdRunConfig {
        teacher: EncoderSource::for_preset(args.preset),
        data: DataConfig::for_preset(args.preset),
        drd: match args.preset {
            Preset::Toy => DrdConfig::toy(),
            Preset::Full => DrdConfig::default(),
        },
    };
    let mut cfg = resolve(&base, args.config.as_deref())?;
    if let Some(n) = args.steps {
        cfg.drd.total_steps = n;
    }
    if let Some(n) = args.checkpoint_every {
        cfg.drd.checkpoint_every = n;
    }
    if let Some(s) = g.seed {
        cfg.drd.seed = s;
    }

    let (teacher, teacher_tensors) = cfg.teacher.load(g.asset_dir.as_deref())?;
    let enc_cfg = teacher.config().clone();
    drop(teacher);
    let source = cfg.data.source()?;
    let mut trainer = match &args.resume {
        Some(path) => {
            let t = DrdTrainer::resume(path, &teacher_tensors)?;
            // The checkpoint's own settings govern the rest of the run.
            cfg.drd = t.config().clone();
            tracing::info!(step = t.step(), from = %path.display(), "resuming DRD run");
            t
        }
        None => {
            cfg.drd.validate(&enc_cfg).map_err(|e| config_error(e.to_string()))?;
            DrdTrainer::new(&enc_cfg, &teacher_tensors, &cfg.drd, source.as_ref())?
        }
    };
    write_snapshot(&g.output_dir, "train-drd", &cfg)?;

    let dir = checkpoint_dir(g)?;
    let mut log = JsonLog::open(&g.output_dir.join(TRAIN_LOG), args.resume.is_some())?;
    let mut log_err = None;
    trainer.run(source.as_ref(), Some(&dir), |s| {
        tracing::info!(step = s.step, total = s.total, kd = ?s.kd, ssl = ?s.ssl, lr = s.lr, grad_norm = s.grad_norm, "drd step");
        if let Err(e) = log.write(s) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    tracing::info!(checkpoint = %dir.join(LAST_CHECKPOINT).display(), "DRD training finished");
    Ok(())
}

pub fn run_vocoder(args: TrainArgs, g: &Globals) -> Result<()> {
    let base = VocoderRunConfig {
        encoder: EncoderSource::for_preset(args.preset),
        data: DataConfig::for_preset(args.preset),
        vocoder: match args.preset {
            Preset::Toy => VocoderTrainConfig::toy(),
            Preset::Full => VocoderTrainConfig::default(),
        },
    };
    let mut cfg = resolve(&base, args.config.as_deref())?;
    if let Some(n) = args.steps {
        cfg.vocoder.total_steps = n;
    }
    if let Some(n) = args.checkpoint_every {
        cfg.vocoder.checkpoint_every = n;
    }
    if let Some(s) = g.seed {
        cfg.vocoder.seed = s;
    }

    let (encoder, encoder_tensors) = cfg.encoder.load(g.asset_dir.as_deref())?;
    let enc_cfg = encoder.config().clone();
    drop(encoder);
    let source = cfg.data.source()?;
    let mut trainer = match &args.resume {
        Some(path) => {
            let t = VocoderTrainer::resume(path, &encoder_tensors)?;
            cfg.vocoder = t.config().clone();
            tracing::info!(step = t.step(), from = %path.display(), "resuming vocoder run");
            t
        }
        None => {
            cfg.vocoder.validate(&enc_cfg).map_err(|e| config_error(e.to_string()))?;
            VocoderTrainer::new(&enc_cfg, &encoder_tensors, &cfg.vocoder)?
        }
    };
    write_snapshot(&g.output_dir, "train-vocoder", &cfg)?;

    let dir = checkpoint_dir(g)?;
    let mut log = JsonLog::open(&g.output_dir.join(TRAIN_LOG), args.resume.is_some())?;
    let mut log_err = None;
    trainer.run(source.as_ref(), Some(&dir), |s| {
        tracing::info!(
            step = s.step,
            total = s.total,
            reconstruction = s.reconstruction,
            adversarial = s.adversarial,
            feature_matching = s.feature_matching,
            discriminator = ?s.discriminator,
            lr = s.lr,
            "vocoder step"
        );
        if let Err(e) = log.write(s) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    tracing::info!(checkpoint = %dir.join(LAST_CHECKPOINT).display(), "vocoder training finished");
    Ok(())
}
