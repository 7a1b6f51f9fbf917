mod common;

use common::*;
use pase_core::audio_sim::synthetic::{exponential_rir, speech_like, white_noise};
use pase_core::audio_sim::{apply_rir, mix_at_snr, sample_mixture, MixtureSpec, Rir, Waveform, SAMPLE_RATE};
use proptest::prelude::*;

fn wave(samples: Vec<f32>) -> Waveform {
    Waveform::new(samples, SAMPLE_RATE).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn residual_power_matches_requested_snr(len in 512usize..3000, noise_len in 64usize..5000, snr in -10.0f64..20.0, seed in 0u64..1000) {
        let clean = speech_like(len, seed);
        let noise = white_noise(noise_len, 0.3, seed + 1);
        let noisy = mix_at_snr(&clean, &noise, snr).unwrap();
        let residual: Vec<f64> = noisy.samples.iter().zip(&clean.samples).map(|(&y, &c)| y as f64 - c as f64).collect();
        let clean64: Vec<f64> = clean.samples.iter().map(|&v| v as f64).collect();
        let measured = 10.0 * (mean_power(&clean64) / mean_power(&residual)).log10();
        prop_assert!((measured - snr).abs() < 1e-6, "measured {measured}, requested {snr}");
    }

    #[test]
    fn convolution_matches_brute_force(seed in 0u64..10_000, nx in 1usize..300, nh in 1usize..60) {
        let mut r = rng(seed);
        let x = dyadic(&mut r, nx, 512);
        let mut h = dyadic(&mut r, nh, 128);
        h[nh - 1] = 0.5;
        let got = apply_rir(&wave(x.clone()), &Rir::new(h.clone(), SAMPLE_RATE).unwrap()).unwrap();
        let want: Vec<f32> = full_convolution(&x, &h)[..nx].iter().map(|&v| v as f32).collect();
        prop_assert_eq!(got.samples, want);
    }

    #[test]
    fn delayed_impulse_shifts(len in 10usize..500, delay in 0usize..40, seed in 0u64..100) {
        let x = white_noise(len, 0.5, seed);
        let mut taps = vec![0.0; delay + 1];
        taps[delay] = 1.0;
        let y = apply_rir(&x, &Rir::new(taps, SAMPLE_RATE).unwrap()).unwrap();
        for i in 0..len {
            let want = if i >= delay { x.samples[i - delay] } else { 0.0 };
            prop_assert_eq!(y.samples[i], want);
        }
    }

    #[test]
    fn mixtures_are_reproducible(seed in 0u64..1000, p in 0.0f64..1.0) {
        let clean = speech_like(6000, 3);
        let noise = white_noise(2000, 0.2, 4);
        let rir = exponential_rir(2000, 30, 0.4, 5);
        let spec = MixtureSpec { rir_probability: p, crop_seconds: 0.25, ..MixtureSpec::default() };
        let a = sample_mixture(&clean, &noise, Some(&rir), &spec, seed).unwrap();
        let b = sample_mixture(&clean, &noise, Some(&rir), &spec, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.meta.snr_db >= spec.snr_low && a.meta.snr_db <= spec.snr_high);
        prop_assert_eq!(a.noisy.len(), 4000);
    }
}

#[test]
fn dry_mixture_target_is_the_clean_crop() {
    let clean = speech_like(8000, 9);
    let spec = MixtureSpec { rir_probability: 0.0, crop_seconds: 0.25, ..MixtureSpec::default() };
    let rir = exponential_rir(1000, 0, 0.3, 1);
    let m = sample_mixture(&clean, &white_noise(500, 0.1, 2), Some(&rir), &spec, 17).unwrap();
    assert!(!m.meta.rir_applied);
    let off = m.meta.crop_offset;
    assert_eq!(m.target.samples, clean.samples[off..off + 4000]);
}

#[test]
fn long_inputs_use_the_spectral_path_consistently() {
    // 40k samples against a 4k-tap response exceeds the direct-convolution budget.
    let x = speech_like(40_000, 1);
    let rir = exponential_rir(4000, 12, 0.5, 2);
    let y = apply_rir(&x, &rir).unwrap();
    let want = full_convolution(&x.samples, &rir.taps);
    let err: f64 = y.samples.iter().zip(&want).map(|(&a, &b)| (a as f64 - b).abs()).fold(0.0, f64::max);
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(err <= 1e-5 * scale, "max error {err} against peak {scale}");
}
