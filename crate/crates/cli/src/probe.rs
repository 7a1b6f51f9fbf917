use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use pase_core::audio_sim::{read_manifest, read_wav, resample, AudioKind, Waveform, SAMPLE_RATE};
use pase_core::encoder::{make_mask, Encoder, SpeechEncoder, DEFAULT_MASK_RATIO, DEFAULT_SPAN_LENGTH};
use pase_core::probes::{
    layer_orthogonality, mrs, pnmi_from_features, read_alignments, rfs, ProbeReport, SimilarityStats,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::common::{EncoderSource, Preset};
use crate::config::{config_error, config_hash, resolve, write_snapshot};
use crate::Globals;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    /// Frame cosine between the model's and a teacher's outputs on clean speech.
    Rfs,
    /// Frame cosine between masked-input and clean-input outputs on masked frames.
    Mrs,
    /// Phone-normalised mutual information of k-means units.
    Pnmi,
    /// Frame cosine between two hidden states of the same pass.
    Orthogonality,
}

impl ProbeKind {
    fn name(self) -> &'static str {
        match self {
            ProbeKind::Rfs => "rfs",
            ProbeKind::Mrs => "mrs",
            ProbeKind::Pnmi => "pnmi",
            ProbeKind::Orthogonality => "orthogonality",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub probe: ProbeKind,
    pub model: EncoderSource,
    /// Reference for `rfs`; defaults to the model itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<EncoderSource>,
    /// Corpus manifest; its clean entries are probed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Frame-level phone alignments for `pnmi`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignments: Option<PathBuf>,
    /// Hidden state to probe; defaults to the final layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    /// Second hidden state for `orthogonality`.
    pub other_layer: usize,
    pub mask_ratio: f64,
    pub mask_span: usize,
    pub seed: u64,
    pub n_clusters: usize,
    pub kmeans_iters: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_utterances: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(value_enum)]
    probe: ProbeKind,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "toy")]
    preset: Preset,
    /// Encoder checkpoint to probe.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Teacher checkpoint for `rfs`.
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    alignments: Option<PathBuf>,
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long)]
    other_layer: Option<usize>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    n_clusters: Option<usize>,
    #[arg(long)]
    max_utterances: Option<usize>,
}

fn clean_utterances(manifest: &Path, limit: Option<usize>) -> Result<Vec<Waveform>> {
    let entries = read_manifest(manifest).with_context(|| format!("reading manifest {}", manifest.display()))?;
    let mut out = Vec::new();
    for e in entries.iter().filter(|e| e.kind == AudioKind::Clean).take(limit.unwrap_or(usize::MAX)) {
        let w = read_wav(&e.audio_path)?;
        out.push(if w.sample_rate == SAMPLE_RATE { w } else { resample(&w, SAMPLE_RATE) });
    }
    if out.is_empty() {
        return Err(pase_core::Error::Data(format!("{} lists no clean utterances", manifest.display())).into());
    }
    Ok(out)
}

fn final_layer(enc: &Encoder, layer: Option<usize>) -> usize {
    layer.unwrap_or(enc.config().n_layers)
}

pub fn run(args: ProbeArgs, g: &Globals) -> Result<()> {
    let base = ProbeConfig {
        probe: args.probe,
        model: EncoderSource::for_preset(args.preset),
        teacher: None,
        manifest: None,
        alignments: None,
        layer: None,
        other_layer: 1,
        mask_ratio: DEFAULT_MASK_RATIO,
        mask_span: DEFAULT_SPAN_LENGTH,
        seed: 0,
        n_clusters: match args.preset {
            Preset::Toy => 16,
            Preset::Full => 100,
        },
        kmeans_iters: 50,
        max_utterances: None,
    };
    let mut cfg = resolve(&base, args.config.as_deref())?;
    cfg.probe = args.probe;
    if args.checkpoint.is_some() {
        cfg.model.checkpoint = args.checkpoint;
    }
    if let Some(t) = args.teacher {
        cfg.teacher = Some(EncoderSource { checkpoint: Some(t), ..cfg.model.clone() });
    }
    cfg.manifest = args.manifest.or(cfg.manifest);
    cfg.alignments = args.alignments.or(cfg.alignments);
    cfg.layer = args.layer.or(cfg.layer);
    cfg.other_layer = args.other_layer.unwrap_or(cfg.other_layer);
    cfg.mask_ratio = args.mask_ratio.unwrap_or(cfg.mask_ratio);
    cfg.n_clusters = args.n_clusters.unwrap_or(cfg.n_clusters);
    cfg.max_utterances = args.max_utterances.or(cfg.max_utterances);
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    write_snapshot(&g.output_dir, "probe", &cfg)?;

    let assets = g.asset_dir.as_deref();
    let (model, _) = cfg.model.load(assets)?;
    let need_manifest =
        || cfg.manifest.as_deref().ok_or_else(|| config_error(format!("{} needs --manifest", cfg.probe.name())));
    let (mean, std, n_frames, n_utts, split) = match cfg.probe {
        ProbeKind::Rfs => {
            let teacher = match &cfg.teacher {
                Some(t) => t.load(assets)?.0,
                None => cfg.model.load(assets)?.0,
            };
            let manifest = need_manifest()?;
            let waves = clean_utterances(manifest, cfg.max_utterances)?;
            let l = final_layer(&model, cfg.layer);
            let mut parts = Vec::new();
            for w in &waves {
                let a = model.activations(w, None)?;
                let b = teacher.activations(w, None)?;
                parts.push(rfs(a.layer(l)?, b.layer(l)?)?);
            }
            let s = SimilarityStats::pool(&parts)?;
            (s.mean, Some(s.std), s.n_frames(), waves.len(), Some(manifest.display().to_string()))
        }
        ProbeKind::Mrs => {
            let manifest = need_manifest()?;
            let waves = clean_utterances(manifest, cfg.max_utterances)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut parts = Vec::new();
            for w in &waves {
                let frames = model.frames_for(w.len());
                let mask = make_mask(frames, cfg.mask_ratio, cfg.mask_span, &mut rng)?;
                parts.push(mrs(&model, w, &mask)?);
            }
            let s = SimilarityStats::pool(&parts)?;
            (s.mean, Some(s.std), s.n_frames(), waves.len(), Some(manifest.display().to_string()))
        }
        ProbeKind::Orthogonality => {
            let manifest = need_manifest()?;
            let waves = clean_utterances(manifest, cfg.max_utterances)?;
            let l = final_layer(&model, cfg.layer);
            let mut parts = Vec::new();
            for w in &waves {
                parts.push(layer_orthogonality(&model.activations(w, None)?, cfg.other_layer, l)?);
            }
            let s = SimilarityStats::pool(&parts)?;
            (s.mean, Some(s.std), s.n_frames(), waves.len(), Some(manifest.display().to_string()))
        }
        ProbeKind::Pnmi => {
            let path = cfg.alignments.as_deref().ok_or_else(|| config_error("pnmi needs --alignments"))?;
            let set = read_alignments(path)?;
            let l = final_layer(&model, cfg.layer);
            let mut feats = Vec::new();
            let mut phones = Vec::new();
            for u in set.utterances.iter().take(cfg.max_utterances.unwrap_or(usize::MAX)) {
                let w = read_wav(&u.audio_path)?;
                let w = if w.sample_rate == SAMPLE_RATE { w } else { resample(&w, SAMPLE_RATE) };
                feats.push(model.activations(&w, None)?.layer(l)?.clone());
                phones.push(u.phones.clone());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let n_frames = phones.iter().map(Vec::len).sum();
            let v = pnmi_from_features(&feats, &phones, set.n_phones(), cfg.n_clusters, &mut rng, cfg.kmeans_iters)?;
            (v, None, n_frames, feats.len(), Some(path.display().to_string()))
        }
    };
    let report = ProbeReport {
        metric: cfg.probe.name().to_string(),
        mean,
        std,
        n_frames,
        n_utterances: n_utts,
        config_hash: config_hash(&cfg)?,
        split,
    };
    let out = g.output_dir.join(format!("probe_{}.json", cfg.probe.name()));
    std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
    tracing::info!(probe = cfg.probe.name(), mean, std = ?std, frames = n_frames, utterances = n_utts, report = %out.display(), "probe finished");
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}
