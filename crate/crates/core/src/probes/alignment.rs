use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frame-level phone labels for one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentEntry {
    pub utterance_id: String,
    pub audio_path: PathBuf,
    pub phones: Vec<usize>,
}

/// Alignment manifest: a phone-name table plus per-utterance label sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentSet {
    pub frame_rate_hz: f64,
    pub phone_names: Vec<String>,
    pub utterances: Vec<AlignmentEntry>,
}

impl AlignmentSet {
    pub fn n_phones(&self) -> usize {
        self.phone_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        for u in &self.utterances {
            if let Some(&bad) = u.phones.iter().find(|&&p| p >= self.phone_names.len()) {
                return Err(Error::Data(format!(
                    "utterance {} uses phone id {bad} but the table has {} phones",
                    u.utterance_id,
                    self.phone_names.len()
                )));
            }
        }
        Ok(())
    }
}

/// Reads an alignment manifest; relative audio paths resolve against the
/// manifest's directory.
pub fn read_alignments(path: impl AsRef<Path>) -> Result<AlignmentSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("reading alignments {}: {e}", path.display())))?;
    let mut set: AlignmentSet =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("parsing alignments {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    for u in &mut set.utterances {
        if u.audio_path.is_relative() {
            u.audio_path = base.join(&u.audio_path);
        }
    }
    set.validate()?;
    Ok(set)
}

pub fn write_alignments(set: &AlignmentSet, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(set)?)?;
    Ok(())
}

/// Random phone segmentation for tests: consecutive segments of 1 to
/// `2 * mean_duration - 1` frames, each with a phone id different from the
/// previous one.
pub fn synthetic_alignment(n_frames: usize, n_phones: usize, mean_duration: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(n_frames);
    let mut prev = usize::MAX;
    let max_dur = (2 * mean_duration.max(1)).saturating_sub(1).max(1);
    while out.len() < n_frames {
        let mut phone = rng.random_range(0..n_phones.max(1));
        if n_phones > 1 && phone == prev {
            phone = (phone + 1) % n_phones;
        }
        let dur = rng.random_range(1..=max_dur).min(n_frames - out.len());
        out.extend(std::iter::repeat_n(phone, dur));
        prev = phone;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn synthetic_alignment_has_requested_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = synthetic_alignment(137, 5, 4, &mut rng);
        assert_eq!(a.len(), 137);
        assert!(a.iter().all(|&p| p < 5));
    }

    #[test]
    fn manifest_round_trip_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let set = AlignmentSet {
            frame_rate_hz: 50.0,
            phone_names: vec!["sil".into(), "a".into()],
            utterances: vec![AlignmentEntry {
                utterance_id: "u1".into(),
                audio_path: "u1.wav".into(),
                phones: vec![0, 1, 1],
            }],
        };
        let path = dir.path().join("align.json");
        write_alignments(&set, &path).unwrap();
        let back = read_alignments(&path).unwrap();
        assert_eq!(back.utterances[0].audio_path, dir.path().join("u1.wav"));
        let mut bad = set.clone();
        bad.utterances[0].phones.push(7);
        write_alignments(&bad, &path).unwrap();
        assert!(matches!(read_alignments(&path), Err(Error::Data(_))));
    }
}
