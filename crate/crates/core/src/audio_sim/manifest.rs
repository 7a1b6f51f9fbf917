use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, read_wav, sample_mixture, write_wav_pcm16, MixtureSpec, Rir, Waveform};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AudioKind {
    Clean,
    Noise,
    Rir,
}

/// One line of a corpus manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub audio_path: PathBuf,
    pub duration_seconds: f64,
    pub kind: AudioKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker_id: Option<String>,
}

/// Reads a line-delimited JSON manifest. Relative audio paths are resolved
/// against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut entry: ManifestEntry =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        if entry.audio_path.is_relative() {
            entry.audio_path = base.join(&entry.audio_path);
        }
        out.push(entry);
    }
    Ok(out)
}

pub fn write_manifest<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Clean, noise and RIR entries split out of one or more manifests.
#[derive(Debug, Clone, Default)]
pub struct CorpusPools {
    pub clean: Vec<ManifestEntry>,
    pub noise: Vec<ManifestEntry>,
    pub rir: Vec<ManifestEntry>,
}

impl CorpusPools {
    pub fn from_entries(entries: impl IntoIterator<Item = ManifestEntry>) -> Self {
        let mut pools = Self::default();
        for e in entries {
            match e.kind {
                AudioKind::Clean => pools.clean.push(e),
                AudioKind::Noise => pools.noise.push(e),
                AudioKind::Rir => pools.rir.push(e),
            }
        }
        pools
    }

    pub fn validate(&self) -> Result<()> {
        if self.clean.is_empty() {
            return Err(Error::Data("no clean speech entries in manifests".into()));
        }
        if self.noise.is_empty() {
            return Err(Error::Data("no noise entries in manifests".into()));
        }
        Ok(())
    }
}

/// Metadata row of an exported test set; enough to regenerate each pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSetRecord {
    pub id: String,
    pub seed: u64,
    pub snr_db: f64,
    pub rir_applied: bool,
    pub crop_offset: usize,
    /// Joint gain applied to both files to keep the noisy peak inside [-1, 1].
    pub gain: f64,
    pub clean_source: PathBuf,
    pub noise_source: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rir_source: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker_id: Option<String>,
    pub noisy_path: PathBuf,
    pub clean_path: PathBuf,
}

pub const TEST_SET_METADATA: &str = "metadata.jsonl";

/// Generates `n` mixtures into `out_dir` as `{id}_noisy.wav` / `{id}_clean.wav`
/// plus `metadata.jsonl`. Output depends only on the pools, spec and seed.
pub fn simulate_test_set(
    pools: &CorpusPools,
    spec: &MixtureSpec,
    n: usize,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<TestSetRecord>> {
    pools.validate()?;
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let item_seed = derive_seed(seed, i as u64);
        let mut pick = ChaCha8Rng::seed_from_u64(derive_seed(item_seed, u64::MAX));
        let clean_entry = &pools.clean[pick.random_range(0..pools.clean.len())];
        let noise_entry = &pools.noise[pick.random_range(0..pools.noise.len())];
        let rir_entry =
            if pools.rir.is_empty() { None } else { Some(&pools.rir[pick.random_range(0..pools.rir.len())]) };

        let clean = read_wav(&clean_entry.audio_path)?;
        let noise = read_wav(&noise_entry.audio_path)?;
        let rir = match rir_entry {
            Some(e) => {
                let w = read_wav(&e.audio_path)?;
                Some(Rir::new(w.samples, w.sample_rate)?)
            }
            None => None,
        };
        let mix = sample_mixture(&clean, &noise, rir.as_ref(), spec, item_seed)?;

        let peak = mix.noisy.peak().max(mix.target.peak());
        let gain = if peak > 0.99 { 0.99 / peak as f64 } else { 1.0 };
        let scale = |w: &Waveform| Waveform {
            samples: w.samples.iter().map(|&s| (s as f64 * gain) as f32).collect(),
            sample_rate: w.sample_rate,
        };

        let id = format!("{i:05}");
        let noisy_path = PathBuf::from(format!("{id}_noisy.wav"));
        let clean_path = PathBuf::from(format!("{id}_clean.wav"));
        write_wav_pcm16(out_dir.join(&noisy_path), &scale(&mix.noisy))?;
        write_wav_pcm16(out_dir.join(&clean_path), &scale(&mix.target))?;

        records.push(TestSetRecord {
            id,
            seed: item_seed,
            snr_db: mix.meta.snr_db,
            rir_applied: mix.meta.rir_applied,
            crop_offset: mix.meta.crop_offset,
            gain,
            clean_source: clean_entry.audio_path.clone(),
            noise_source: noise_entry.audio_path.clone(),
            rir_source: rir_entry.filter(|_| mix.meta.rir_applied).map(|e| e.audio_path.clone()),
            transcript: clean_entry.transcript.clone(),
            speaker_id: clean_entry.speaker_id.clone(),
            noisy_path,
            clean_path,
        });
    }
    write_manifest(out_dir.join(TEST_SET_METADATA), &records)?;
    Ok(records)
}
