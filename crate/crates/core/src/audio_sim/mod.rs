//! Seedable simulation of noisy/reverberant training and test mixtures.
//!
//! Every operation here is a pure function of its inputs (and seed), so data
//! loading workers can call them concurrently with their own generators.

mod batches;
mod manifest;
mod resample;
mod wav;

pub use batches::{synthetic_mixtures, waveform_batch, CachedMixtures, MixtureSource, OnTheFlyMixtures};
pub use manifest::{
    read_manifest, simulate_test_set, write_manifest, AudioKind, CorpusPools, ManifestEntry, TestSetRecord,
};
pub use resample::resample;
pub use wav::{read_wav, write_wav_pcm16};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono audio at a known sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::DegenerateSignal(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self { samples: vec![0.0; len], sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean squared sample value, accumulated in f64.
    pub fn power(&self) -> f64 {
        mean_power(&self.samples)
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }
}

pub(crate) fn mean_power(samples: &[f32]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>() / samples.len() as f64
}

/// Room impulse response.
#[derive(Debug, Clone, PartialEq)]
pub struct Rir {
    pub taps: Vec<f32>,
    pub sample_rate: u32,
}

impl Rir {
    pub fn new(taps: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if taps.is_empty() || taps.iter().all(|&t| t == 0.0) {
            return Err(Error::EmptyRir);
        }
        Ok(Self { taps, sample_rate })
    }

    /// Index of the direct path, taken as the largest-magnitude tap.
    pub fn direct_path_index(&self) -> usize {
        let mut best = 0;
        let mut best_mag = f32::NEG_INFINITY;
        for (i, t) in self.taps.iter().enumerate() {
            if t.abs() > best_mag {
                best_mag = t.abs();
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureSpec {
    pub snr_low: f64,
    pub snr_high: f64,
    pub rir_probability: f64,
    pub crop_seconds: f64,
    pub early_reflection_ms: f64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self { snr_low: -5.0, snr_high: 15.0, rir_probability: 0.5, crop_seconds: 4.0, early_reflection_ms: 50.0 }
    }
}

impl MixtureSpec {
    /// Half-second crops for desk-scale runs.
    pub fn toy() -> Self {
        Self { crop_seconds: 0.5, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.snr_low <= self.snr_high) {
            return Err(Error::invalid(format!(
                "snr_low ({}) must not exceed snr_high ({})",
                self.snr_low, self.snr_high
            )));
        }
        if !(0.0..=1.0).contains(&self.rir_probability) {
            return Err(Error::invalid(format!("rir_probability must lie in [0, 1], got {}", self.rir_probability)));
        }
        if !(self.crop_seconds > 0.0) {
            return Err(Error::invalid("crop_seconds must be positive"));
        }
        if !(self.early_reflection_ms >= 0.0) {
            return Err(Error::invalid("early_reflection_ms must be non-negative"));
        }
        Ok(())
    }

    pub fn crop_samples(&self, sample_rate: u32) -> usize {
        (self.crop_seconds * sample_rate as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureMeta {
    pub snr_db: f64,
    pub rir_applied: bool,
    pub seed: u64,
    pub crop_offset: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSample {
    pub noisy: Waveform,
    pub target: Waveform,
    pub meta: MixtureMeta,
}

fn check_rates(a: u32, b: u32) -> Result<()> {
    if a != b {
        return Err(Error::SampleRateMismatch { expected: a, actual: b });
    }
    Ok(())
}

// Short filters, or short products, are convolved directly. The direct sum
// keeps structural zeros exact, which the FFT path cannot.
const DIRECT_CONV_LIMIT: usize = 1 << 20;
const DIRECT_CONV_TAPS: usize = 2048;

/// Causal linear convolution truncated to the input length.
pub fn apply_rir(clean: &Waveform, rir: &Rir) -> Result<Waveform> {
    check_rates(clean.sample_rate, rir.sample_rate)?;
    if rir.taps.is_empty() || rir.taps.iter().all(|&t| t == 0.0) {
        return Err(Error::EmptyRir);
    }
    // Trailing zeros (e.g. after truncation) contribute nothing.
    let support = rir.taps.iter().rposition(|&t| t != 0.0).map_or(0, |i| i + 1);
    let taps = &rir.taps[..support];
    let out = if taps.len() <= DIRECT_CONV_TAPS || clean.len().saturating_mul(taps.len()) <= DIRECT_CONV_LIMIT {
        convolve_direct(&clean.samples, taps)
    } else {
        convolve_fft(&clean.samples, taps)
    };
    Ok(Waveform { samples: out, sample_rate: clean.sample_rate })
}

fn convolve_direct(x: &[f32], h: &[f32]) -> Vec<f32> {
    let n = x.len();
    (0..n)
        .map(|i| {
            let mut acc = 0.0f64;
            for (k, &hk) in h.iter().enumerate().take(i + 1) {
                acc += hk as f64 * x[i - k] as f64;
            }
            acc as f32
        })
        .collect()
}

fn convolve_fft(x: &[f32], h: &[f32]) -> Vec<f32> {
    let n = x.len();
    let full = n + h.len() - 1;
    let size = full.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut a: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
    a.resize(size, Complex::new(0.0, 0.0));
    let mut b: Vec<Complex<f64>> = h.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
    b.resize(size, Complex::new(0.0, 0.0));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (ai, bi) in a.iter_mut().zip(&b) {
        *ai *= bi;
    }
    inv.process(&mut a);
    let scale = 1.0 / size as f64;
    a[..n].iter().map(|c| (c.re * scale) as f32).collect()
}

/// Zeroes every tap after `direct_path + early_reflection_ms`.
pub fn truncate_rir(rir: &Rir, early_reflection_ms: f64) -> Rir {
    let keep_through =
        rir.direct_path_index() + (early_reflection_ms / 1000.0 * rir.sample_rate as f64).round() as usize;
    let taps = rir.taps.iter().enumerate().map(|(i, &t)| if i <= keep_through { t } else { 0.0 }).collect();
    Rir { taps, sample_rate: rir.sample_rate }
}

/// Tiles (wrap-around) or crops `samples` to exactly `len`.
pub fn fit_length(samples: &[f32], len: usize) -> Vec<f32> {
    if samples.is_empty() {
        return vec![0.0; len];
    }
    samples.iter().copied().cycle().take(len).collect()
}

/// Scale applied to the noise so that `P_clean / (scale² · P_noise)` equals `snr_db`.
pub fn snr_scale(clean_power: f64, noise_power: f64, snr_db: f64) -> Result<f64> {
    if !(clean_power > 0.0) {
        return Err(Error::DegenerateSignal("clean signal has zero power".into()));
    }
    if !(noise_power > 0.0) {
        return Err(Error::DegenerateSignal("noise signal has zero power".into()));
    }
    Ok((clean_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// `clean + α·noise` with α chosen for the requested SNR. The noise is
/// tiled or cropped to the clean length first.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    check_rates(clean.sample_rate, noise.sample_rate)?;
    let noise = fit_length(&noise.samples, clean.len());
    let alpha = snr_scale(clean.power(), mean_power(&noise), snr_db)?;
    let samples = clean.samples.iter().zip(&noise).map(|(&c, &n)| (c as f64 + alpha * n as f64) as f32).collect();
    Ok(Waveform { samples, sample_rate: clean.sample_rate })
}

/// Draws one training mixture. Identical inputs and seed give a bitwise
/// identical result.
pub fn sample_mixture(
    clean: &Waveform,
    noise: &Waveform,
    rir: Option<&Rir>,
    spec: &MixtureSpec,
    seed: u64,
) -> Result<MixtureSample> {
    spec.validate()?;
    check_rates(clean.sample_rate, noise.sample_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Draw order is fixed: reverb coin, SNR, crop offset.
    let coin: f64 = rng.random();
    let snr_db = if spec.snr_low == spec.snr_high {
        let _: f64 = rng.random();
        spec.snr_low
    } else {
        spec.snr_low + (spec.snr_high - spec.snr_low) * rng.random::<f64>()
    };

    let crop = spec.crop_samples(clean.sample_rate);
    let mut clean_samples = clean.samples.clone();
    if clean_samples.len() < crop {
        clean_samples.resize(crop, 0.0);
    }
    let clean = Waveform { samples: clean_samples, sample_rate: clean.sample_rate };

    let rir = rir.filter(|_| coin < spec.rir_probability);
    let (reverberant, target) = match rir {
        Some(rir) => {
            let early = truncate_rir(rir, spec.early_reflection_ms);
            (apply_rir(&clean, rir)?, apply_rir(&clean, &early)?)
        }
        None => (clean.clone(), clean),
    };
    let noisy = mix_at_snr(&reverberant, noise, snr_db)?;

    let max_offset = noisy.len() - crop;
    let offset = if max_offset == 0 { 0 } else { rng.random_range(0..=max_offset) };
    let cut =
        |w: &Waveform| Waveform { samples: w.samples[offset..offset + crop].to_vec(), sample_rate: w.sample_rate };

    Ok(MixtureSample {
        noisy: cut(&noisy),
        target: cut(&target),
        meta: MixtureMeta { snr_db, rir_applied: rir.is_some(), seed, crop_offset: offset },
    })
}

/// SplitMix64 step, used to derive independent per-item seeds from a run seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic stand-ins for speech, noise and RIRs, used by tests and the
/// toy training presets when no corpus is available.
pub mod synthetic {
    use super::*;
    use rand_distr::{Distribution, Normal};

    /// Voiced-speech-like signal: a gliding harmonic series under a syllabic
    /// amplitude envelope.
    pub fn speech_like(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sr = SAMPLE_RATE as f64;
        let f0_base = 90.0 + 120.0 * rng.random::<f64>();
        let syllable_rate = 3.0 + 2.0 * rng.random::<f64>();
        let glide = 0.5 + rng.random::<f64>();
        let formant = 500.0 + 1500.0 * rng.random::<f64>();
        let mut phase = 0.0f64;
        let samples = (0..len)
            .map(|i| {
                let t = i as f64 / sr;
                let f0 = f0_base * (1.0 + 0.15 * (2.0 * std::f64::consts::PI * glide * t).sin());
                phase += 2.0 * std::f64::consts::PI * f0 / sr;
                let env = (0.5 - 0.5 * (2.0 * std::f64::consts::PI * syllable_rate * t).cos()).powi(2);
                let mut v = 0.0;
                for h in 1..=12 {
                    let fh = f0 * h as f64;
                    let weight = 1.0 / (1.0 + ((fh - formant) / 400.0).powi(2)) + 0.05;
                    v += weight * (h as f64 * phase).sin();
                }
                (0.1 * env * v) as f32
            })
            .collect();
        Waveform { samples, sample_rate: SAMPLE_RATE }
    }

    pub fn white_noise(len: usize, std: f32, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, std).expect("valid std");
        Waveform { samples: (0..len).map(|_| normal.sample(&mut rng)).collect(), sample_rate: SAMPLE_RATE }
    }

    /// Exponentially decaying noise tail behind a unit direct path.
    pub fn exponential_rir(len: usize, direct_index: usize, rt60_seconds: f64, seed: u64) -> Rir {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
        let decay = 6.9078 / (rt60_seconds * SAMPLE_RATE as f64);
        let taps = (0..len)
            .map(|i| {
                if i < direct_index {
                    0.0
                } else if i == direct_index {
                    1.0
                } else {
                    let d = (i - direct_index) as f64;
                    (0.3 * normal.sample(&mut rng) * (-decay * d).exp()) as f32
                }
            })
            .collect();
        Rir { taps, sample_rate: SAMPLE_RATE }
    }
}

#[cfg(test)]
mod tests {
    use super::synthetic::*;
    use super::*;

    fn wave(samples: Vec<f32>) -> Waveform {
        Waveform::new(samples, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn unit_impulse_is_identity() {
        let x = white_noise(300, 0.3, 1);
        let rir = Rir::new(vec![1.0], SAMPLE_RATE).unwrap();
        assert_eq!(apply_rir(&x, &rir).unwrap(), x);
    }

    #[test]
    fn delayed_impulse_shifts() {
        let x = white_noise(50, 0.3, 2);
        let mut taps = vec![0.0; 8];
        taps[5] = 1.0;
        let y = apply_rir(&x, &Rir::new(taps, SAMPLE_RATE).unwrap()).unwrap();
        assert_eq!(y.len(), 50);
        assert!(y.samples[..5].iter().all(|&v| v == 0.0));
        assert_eq!(&y.samples[5..], &x.samples[..45]);
    }

    #[test]
    fn fft_path_agrees_with_direct() {
        let x = white_noise(5000, 0.3, 3);
        let rir = exponential_rir(400, 10, 0.3, 4);
        let direct = convolve_direct(&x.samples, &rir.taps);
        let fft = convolve_fft(&x.samples, &rir.taps);
        for (a, b) in direct.iter().zip(&fft) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn rir_errors() {
        let x = white_noise(10, 0.3, 3);
        assert!(matches!(Rir::new(vec![], SAMPLE_RATE), Err(Error::EmptyRir)));
        assert!(matches!(Rir::new(vec![0.0; 4], SAMPLE_RATE), Err(Error::EmptyRir)));
        let rir = Rir::new(vec![1.0], 8000).unwrap();
        assert!(matches!(apply_rir(&x, &rir), Err(Error::SampleRateMismatch { .. })));
    }

    #[test]
    fn truncate_short_rir_is_unchanged() {
        let rir = exponential_rir(300, 0, 0.3, 5);
        assert_eq!(truncate_rir(&rir, 50.0), rir);
    }

    #[test]
    fn truncate_drops_late_tap() {
        let mut taps = vec![0.0; 1000];
        taps[0] = 1.0;
        taps[960] = 0.5; // 60 ms
        let out = truncate_rir(&Rir::new(taps, SAMPLE_RATE).unwrap(), 50.0);
        assert_eq!(out.taps[0], 1.0);
        assert_eq!(out.taps[960], 0.0);
    }

    #[test]
    fn truncate_is_idempotent() {
        let rir = exponential_rir(8000, 123, 0.6, 6);
        let once = truncate_rir(&rir, 50.0);
        assert_eq!(truncate_rir(&once, 50.0), once);
    }

    #[test]
    fn equal_power_zero_db_gives_unit_scale() {
        assert_eq!(snr_scale(0.25, 0.25, 0.0).unwrap(), 1.0);
        let a = snr_scale(1.0, 0.01, 10.0).unwrap();
        assert!((a - 10f64.sqrt()).abs() < 1e-12);
        let b = snr_scale(1.0, 1.0, 60.0).unwrap();
        assert!((b - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn zero_power_is_degenerate() {
        let x = white_noise(100, 0.3, 7);
        let z = Waveform::silence(100, SAMPLE_RATE);
        assert!(matches!(mix_at_snr(&z, &x, 0.0), Err(Error::DegenerateSignal(_))));
        assert!(matches!(mix_at_snr(&x, &z, 0.0), Err(Error::DegenerateSignal(_))));
    }

    #[test]
    fn short_noise_is_tiled() {
        assert_eq!(fit_length(&[1.0, 2.0, 3.0], 7), vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0]);
        assert_eq!(fit_length(&[1.0, 2.0, 3.0], 2), vec![1.0, 2.0]);
    }

    #[test]
    fn no_reverb_branch_targets_clean() {
        let clean = speech_like(20_000, 1);
        let noise = white_noise(7_000, 0.1, 2);
        let rir = exponential_rir(4000, 20, 0.5, 3);
        let spec = MixtureSpec { rir_probability: 0.0, crop_seconds: 1.0, ..Default::default() };
        let m = sample_mixture(&clean, &noise, Some(&rir), &spec, 11).unwrap();
        assert!(!m.meta.rir_applied);
        let off = m.meta.crop_offset;
        assert_eq!(m.target.samples, clean.samples[off..off + 16_000].to_vec());
        assert_eq!(m.noisy.len(), m.target.len());
    }

    #[test]
    fn identity_rir_branch() {
        let clean = speech_like(20_000, 4);
        let noise = white_noise(20_000, 0.1, 5);
        let rir = Rir::new(vec![1.0], SAMPLE_RATE).unwrap();
        let spec = MixtureSpec { rir_probability: 1.0, crop_seconds: 1.0, ..Default::default() };
        let m = sample_mixture(&clean, &noise, Some(&rir), &spec, 12).unwrap();
        assert!(m.meta.rir_applied);
        let off = m.meta.crop_offset;
        assert_eq!(m.target.samples, clean.samples[off..off + 16_000].to_vec());
        let mixed = mix_at_snr(&clean, &noise, m.meta.snr_db).unwrap();
        assert_eq!(m.noisy.samples, mixed.samples[off..off + 16_000].to_vec());
    }

    #[test]
    fn mixture_is_deterministic_and_padded() {
        let clean = speech_like(10_000, 6);
        let noise = white_noise(3_000, 0.1, 7);
        let rir = exponential_rir(2000, 5, 0.4, 8);
        let spec = MixtureSpec { crop_seconds: 1.0, ..Default::default() };
        let a = sample_mixture(&clean, &noise, Some(&rir), &spec, 1234).unwrap();
        let b = sample_mixture(&clean, &noise, Some(&rir), &spec, 1234).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.noisy.len(), 16_000);
        assert_eq!(a.target.len(), 16_000);
        assert!((-5.0..=15.0).contains(&a.meta.snr_db));
    }

    #[test]
    fn invalid_spec_rejected() {
        let spec = MixtureSpec { snr_low: 10.0, snr_high: 0.0, ..Default::default() };
        assert!(spec.validate().is_err());
        let x = wave(vec![0.1; 10]);
        assert!(sample_mixture(&x, &x, None, &spec, 0).is_err());
    }
}
