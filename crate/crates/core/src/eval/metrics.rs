use serde::{Deserialize, Serialize};

use crate::audio_sim::Waveform;
use crate::error::{Error, Result};

/// Reported SNR when the signal matches the reference exactly.
pub const SNR_CAP_DB: f64 = 120.0;

/// Alignment counts between a reference and a hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub equals: usize,
}

impl EditCounts {
    pub fn distance(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Unit-cost Levenshtein alignment. Among minimum-cost alignments the one
/// with the most substitutions is chosen, i.e. substitutions are preferred
/// over insertion/deletion pairs. With the lengths fixed this determines all
/// four counts.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    // Packed score: cost * k - substitutions, so ordering is by cost first.
    let k = (n + m + 1) as i64;
    let w = m + 1;
    let mut d = vec![0i64; (n + 1) * w];
    for j in 0..=m {
        d[j] = j as i64 * k;
    }
    let diag_step = |i: usize, j: usize| if reference[i - 1] == hypothesis[j - 1] { 0 } else { k - 1 };
    for i in 1..=n {
        d[i * w] = i as i64 * k;
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + diag_step(i, j);
            let ins = d[i * w + j - 1] + k;
            let del = d[(i - 1) * w + j] + k;
            d[i * w + j] = diag.min(ins).min(del);
        }
    }

    let mut counts = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 && here == d[(i - 1) * w + j - 1] + diag_step(i, j) {
            if reference[i - 1] == hypothesis[j - 1] {
                counts.equals += 1;
            } else {
                counts.substitutions += 1;
            }
            i -= 1;
            j -= 1;
        } else if j > 0 && here == d[i * w + j - 1] + k {
            counts.insertions += 1;
            j -= 1;
        } else {
            counts.deletions += 1;
            i -= 1;
        }
    }
    counts
}

/// Text normalisation applied before word scoring.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextNormalization {
    pub lowercase: bool,
    pub strip_punctuation: bool,
    /// Keep apostrophes inside words ("don't") when stripping punctuation.
    pub keep_apostrophes: bool,
}

impl Default for TextNormalization {
    fn default() -> Self {
        Self { lowercase: true, strip_punctuation: true, keep_apostrophes: true }
    }
}

impl TextNormalization {
    /// Normalised whitespace-separated tokens.
    pub fn tokens(&self, text: &str) -> Vec<String> {
        let text = if self.lowercase { text.to_lowercase() } else { text.to_string() };
        let cleaned: String = if self.strip_punctuation {
            text.chars()
                .map(|c| {
                    if c.is_alphanumeric() || c.is_whitespace() || (self.keep_apostrophes && c == '\'') {
                        c
                    } else {
                        ' '
                    }
                })
                .collect()
        } else {
            text
        };
        cleaned
            .split_whitespace()
            .map(|t| if self.keep_apostrophes { t.trim_matches('\'') } else { t })
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect()
    }
}

/// Word error rate in percent over token sequences.
pub fn wer_tokens<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("word error rate is undefined for an empty reference"));
    }
    Ok(100.0 * edit_distance(reference, hypothesis).distance() as f64 / reference.len() as f64)
}

/// Word error rate in percent after default text normalisation.
pub fn wer(reference: &str, hypothesis: &str) -> Result<f64> {
    wer_with(reference, hypothesis, &TextNormalization::default())
}

pub fn wer_with(reference: &str, hypothesis: &str, norm: &TextNormalization) -> Result<f64> {
    wer_tokens(&norm.tokens(reference), &norm.tokens(hypothesis))
}

/// `1 - distance / max(len)`; two empty sequences are identical.
pub fn phoneme_similarity<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> f64 {
    let longest = reference.len().max(hypothesis.len());
    if longest == 0 {
        return 1.0;
    }
    1.0 - edit_distance(reference, hypothesis).distance() as f64 / longest as f64
}

fn check_pair(signal: &Waveform, reference: &Waveform) -> Result<()> {
    if signal.sample_rate != reference.sample_rate {
        return Err(Error::SampleRateMismatch { expected: reference.sample_rate, actual: signal.sample_rate });
    }
    if signal.len() != reference.len() {
        return Err(Error::shape(format!("signal has {} samples, reference {}", signal.len(), reference.len())));
    }
    Ok(())
}

/// `10 log10(P_ref / P_err)` with `err = signal - reference`, capped at
/// [`SNR_CAP_DB`].
pub fn snr_measure(signal: &Waveform, reference: &Waveform) -> Result<f64> {
    check_pair(signal, reference)?;
    let p_ref = reference.power();
    if p_ref == 0.0 {
        return Err(Error::DegenerateSignal("reference is silent".into()));
    }
    let p_err = signal
        .samples
        .iter()
        .zip(&reference.samples)
        .map(|(&s, &r)| {
            let e = s as f64 - r as f64;
            e * e
        })
        .sum::<f64>()
        / signal.len() as f64;
    if p_err == 0.0 {
        return Ok(SNR_CAP_DB);
    }
    Ok((10.0 * (p_ref / p_err).log10()).min(SNR_CAP_DB))
}

/// Cosine similarity of two waveforms treated as flat vectors.
pub fn waveform_cosine(signal: &Waveform, reference: &Waveform) -> Result<f64> {
    check_pair(signal, reference)?;
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in signal.samples.iter().zip(&reference.samples) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        na += a * a;
        nb += b * b;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateSignal("cosine similarity of a silent waveform".into()));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn edit_distance_examples() {
        let r = words("a b c");
        assert_eq!(edit_distance(&r, &r), EditCounts { equals: 3, ..Default::default() });
        assert_eq!(edit_distance(&r, &[]), EditCounts { deletions: 3, ..Default::default() });
        let c = edit_distance(&r, &words("a x c d"));
        assert_eq!(c, EditCounts { substitutions: 1, insertions: 1, equals: 2, deletions: 0 });
    }

    #[test]
    fn tie_break_prefers_substitution() {
        // "a" vs "b": one substitution rather than an insertion plus a deletion.
        assert_eq!(edit_distance(&["a"], &["b"]).substitutions, 1);
        // "a b" vs "b c": distance 2 either way; substitutions win.
        let c = edit_distance(&["a", "b"], &["b", "c"]);
        assert_eq!((c.substitutions, c.insertions, c.deletions), (2, 0, 0));
    }

    #[test]
    fn wer_arithmetic() {
        assert_eq!(wer("the cat sat down", "the cat sat down").unwrap(), 0.0);
        assert_eq!(wer("the cat sat down", "").unwrap(), 100.0);
        assert_eq!(wer("the cat sat down", "the bat sat down").unwrap(), 25.0);
        assert_eq!(wer("Hello, World!", "hello   world").unwrap(), 0.0);
        assert!(wer("", "x").is_err());
    }

    #[test]
    fn normalisation_is_configurable() {
        let n = TextNormalization::default();
        assert_eq!(n.tokens("Don't STOP -- 'now'."), vec!["don't", "stop", "now"]);
        let raw = TextNormalization { lowercase: false, strip_punctuation: false, keep_apostrophes: false };
        assert_eq!(raw.tokens("A, b"), vec!["A,", "b"]);
    }

    #[test]
    fn phoneme_similarity_examples() {
        let a: Vec<u8> = (0..10).collect();
        assert_eq!(phoneme_similarity(&a, &a), 1.0);
        let b: Vec<u8> = (10..20).collect();
        assert_eq!(phoneme_similarity(&a, &b), 0.0);
        let mut c = a.clone();
        c[4] = 99;
        assert!((phoneme_similarity(&a, &c) - 0.9).abs() < 1e-12);
        assert_eq!(phoneme_similarity::<u8>(&[], &[]), 1.0);
    }

    #[test]
    fn snr_cases() {
        let r = Waveform::new(vec![1.0, -1.0, 1.0, -1.0], 16000).unwrap();
        assert_eq!(snr_measure(&r, &r).unwrap(), SNR_CAP_DB);
        let zero = Waveform::silence(4, 16000);
        assert!(snr_measure(&zero, &r).unwrap().abs() < 1e-12);
        let half = Waveform::new(vec![1.5, -0.5, 1.5, -0.5], 16000).unwrap();
        assert!((snr_measure(&half, &r).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-9);
        assert!(snr_measure(&r, &zero).is_err());
        assert!(snr_measure(&Waveform::silence(3, 16000), &r).is_err());
    }

    #[test]
    fn cosine_cases() {
        let r = Waveform::new(vec![0.3, -0.1, 0.7], 16000).unwrap();
        assert!((waveform_cosine(&r, &r).unwrap() - 1.0).abs() < 1e-12);
        let neg = Waveform::new(r.samples.iter().map(|x| -x).collect(), 16000).unwrap();
        assert!((waveform_cosine(&neg, &r).unwrap() + 1.0).abs() < 1e-12);
    }
}
