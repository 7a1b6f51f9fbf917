use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use pase_core::audio_sim::{read_manifest, simulate_test_set, CorpusPools, MixtureSpec};
use serde::{Deserialize, Serialize};

use crate::common::Preset;
use crate::config::{config_error, resolve, write_snapshot};
use crate::Globals;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub manifests: Vec<PathBuf>,
    pub n_samples: usize,
    pub seed: u64,
    pub mixture: MixtureSpec,
}

impl SimulateConfig {
    fn for_preset(p: Preset) -> Self {
        match p {
            Preset::Toy => Self { manifests: Vec::new(), n_samples: 8, seed: 0, mixture: MixtureSpec::toy() },
            Preset::Full => Self { manifests: Vec::new(), n_samples: 1000, seed: 0, mixture: MixtureSpec::default() },
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "full")]
    preset: Preset,
    /// Corpus manifest (repeatable); replaces the config's list.
    #[arg(long = "manifest")]
    manifests: Vec<PathBuf>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    rir_probability: Option<f64>,
}

pub fn run(args: SimulateArgs, g: &Globals) -> Result<()> {
    let mut cfg = resolve(&SimulateConfig::for_preset(args.preset), args.config.as_deref())?;
    if !args.manifests.is_empty() {
        cfg.manifests = args.manifests;
    }
    if let Some(n) = args.n_samples {
        cfg.n_samples = n;
    }
    if let Some(p) = args.rir_probability {
        cfg.mixture.rir_probability = p;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if cfg.manifests.is_empty() {
        return Err(config_error("simulate needs at least one corpus manifest (--manifest)"));
    }
    cfg.mixture.validate().map_err(|e| config_error(e.to_string()))?;
    write_snapshot(&g.output_dir, "simulate", &cfg)?;

    let mut entries = Vec::new();
    for m in &cfg.manifests {
        entries.extend(read_manifest(m).with_context(|| format!("reading manifest {}", m.display()))?);
    }
    let pools = CorpusPools::from_entries(entries);
    tracing::info!(
        clean = pools.clean.len(),
        noise = pools.noise.len(),
        rir = pools.rir.len(),
        n = cfg.n_samples,
        "simulating test set"
    );
    let records = simulate_test_set(&pools, &cfg.mixture, cfg.n_samples, cfg.seed, &g.output_dir)?;
    let reverberant = records.iter().filter(|r| r.rir_applied).count();
    tracing::info!(written = records.len(), reverberant, dir = %g.output_dir.display(), "test set written");
    Ok(())
}
