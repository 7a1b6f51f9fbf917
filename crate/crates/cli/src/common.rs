use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use candle_core::Tensor;
use clap::ValueEnum;
use pase_core::assets::{require_asset, LARGE_ENCODER_FILE};
use pase_core::audio_sim::{
    read_manifest, synthetic_mixtures, CorpusPools, MixtureSource, MixtureSpec, OnTheFlyMixtures,
};
use pase_core::encoder::{load_encoder, Encoder, EncoderConfig};
use serde::{Deserialize, Serialize};

use crate::config::config_error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Desk-scale models and data; runs in seconds to minutes on a CPU.
    Toy,
    /// Full-size settings.
    Full,
}

/// Where encoder weights come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSource {
    /// `toy` or `large`; used for seeded weights and for checkpoints without
    /// an embedded config.
    pub preset: String,
    /// Native, DRD or reference-layout safetensors file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Seed for freshly initialised toy weights.
    #[serde(default)]
    pub seed: u64,
}

impl EncoderSource {
    pub fn for_preset(preset: Preset) -> Self {
        match preset {
            Preset::Toy => Self { preset: "toy".into(), checkpoint: None, seed: 0 },
            Preset::Full => Self { preset: "large".into(), checkpoint: None, seed: 0 },
        }
    }

    pub fn load(&self, asset_dir: Option<&Path>) -> Result<(Encoder, BTreeMap<String, Tensor>)> {
        let cfg = EncoderConfig::preset(&self.preset).map_err(|e| config_error(e.to_string()))?;
        let path = match (&self.checkpoint, self.preset.as_str()) {
            (Some(p), _) => p.clone(),
            (None, "toy") => {
                let (enc, store) = Encoder::seeded(&cfg, self.seed)?;
                return Ok((enc, store.tensors()));
            }
            (None, _) => require_asset(asset_dir, LARGE_ENCODER_FILE)?,
        };
        let (enc, store) = load_encoder(&path, &cfg).with_context(|| format!("loading encoder {}", path.display()))?;
        Ok((enc, store.tensors()))
    }
}

/// Training data: corpus manifests mixed on the fly, or a small synthetic set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Corpus manifests with clean, noise and (optionally) RIR entries.
    #[serde(default)]
    pub manifests: Vec<PathBuf>,
    /// Number of synthetic mixtures used when no manifest is given.
    pub synthetic_items: usize,
    pub synthetic_seed: u64,
    pub mixture: MixtureSpec,
}

impl DataConfig {
    pub fn for_preset(preset: Preset) -> Self {
        match preset {
            Preset::Toy => {
                Self { manifests: Vec::new(), synthetic_items: 8, synthetic_seed: 0, mixture: MixtureSpec::toy() }
            }
            Preset::Full => {
                Self { manifests: Vec::new(), synthetic_items: 0, synthetic_seed: 0, mixture: MixtureSpec::default() }
            }
        }
    }

    pub fn source(&self) -> Result<Box<dyn MixtureSource>> {
        self.mixture.validate().map_err(|e| config_error(e.to_string()))?;
        if self.manifests.is_empty() {
            if self.synthetic_items == 0 {
                return Err(config_error("data: give `manifests` or a positive `synthetic_items`"));
            }
            return Ok(Box::new(synthetic_mixtures(self.synthetic_items, &self.mixture, self.synthetic_seed)?));
        }
        let mut entries = Vec::new();
        for m in &self.manifests {
            entries.extend(read_manifest(m).with_context(|| format!("reading manifest {}", m.display()))?);
        }
        let pools = CorpusPools::from_entries(entries);
        Ok(Box::new(OnTheFlyMixtures::from_pools(&pools, self.mixture.clone())?))
    }
}

/// Appends one JSON line per record.
pub struct JsonLog {
    file: std::fs::File,
}

impl JsonLog {
    pub fn open(path: &Path, append: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .with_context(|| format!("opening {}", path.display()))?;
        Ok(Self { file })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.file, record)?;
        self.file.write_all(b"\n")?;
        Ok(())
    }
}

/// `*.wav` files under `path` in name order, or `path` itself.
pub fn wav_inputs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
                .collect();
            found.sort();
            out.extend(found);
        } else if p.is_file() {
            out.push(p.clone());
        } else {
            return Err(pase_core::Error::Data(format!("input {} does not exist", p.display())).into());
        }
    }
    Ok(out)
}
