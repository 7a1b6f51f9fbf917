use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, sample_mixture, synthetic, CorpusPools, MixtureSample, MixtureSpec, Rir, Waveform};
use crate::error::{Error, Result};

/// Supplies training batches. The batch for a given `(seed, step)` must not
/// depend on anything else, so interrupted runs resume on identical data.
pub trait MixtureSource {
    fn batch(&self, step: usize, batch_size: usize, seed: u64) -> Result<Vec<MixtureSample>>;
}

/// A fixed set of pre-generated mixtures of equal length.
#[derive(Debug, Clone)]
pub struct CachedMixtures {
    items: Vec<MixtureSample>,
}

impl CachedMixtures {
    pub fn new(items: Vec<MixtureSample>) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Data("mixture cache is empty".into()))?;
        let len = first.noisy.len();
        if items.iter().any(|m| m.noisy.len() != len || m.target.len() != len) {
            return Err(Error::Data("cached mixtures must all have the same length".into()));
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &[MixtureSample] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

impl MixtureSource for CachedMixtures {
    fn batch(&self, step: usize, batch_size: usize, seed: u64) -> Result<Vec<MixtureSample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, step as u64));
        Ok((0..batch_size).map(|_| self.items[rng.random_range(0..self.items.len())].clone()).collect())
    }
}

/// Fresh mixtures drawn from clean/noise/RIR pools at every step.
#[derive(Debug, Clone)]
pub struct OnTheFlyMixtures {
    pub clean: Vec<Waveform>,
    pub noise: Vec<Waveform>,
    pub rirs: Vec<Rir>,
    pub spec: MixtureSpec,
}

impl OnTheFlyMixtures {
    pub fn from_pools(pools: &CorpusPools, spec: MixtureSpec) -> Result<Self> {
        pools.validate()?;
        let load = |entries: &[super::ManifestEntry]| -> Result<Vec<Waveform>> {
            entries.iter().map(|e| super::read_wav(&e.audio_path)).collect()
        };
        let rirs =
            load(&pools.rir)?.into_iter().map(|w| Rir::new(w.samples, w.sample_rate)).collect::<Result<Vec<_>>>()?;
        Ok(Self { clean: load(&pools.clean)?, noise: load(&pools.noise)?, rirs, spec })
    }
}

impl MixtureSource for OnTheFlyMixtures {
    fn batch(&self, step: usize, batch_size: usize, seed: u64) -> Result<Vec<MixtureSample>> {
        if self.clean.is_empty() || self.noise.is_empty() {
            return Err(Error::Data("clean and noise pools must be non-empty".into()));
        }
        let step_seed = derive_seed(seed, step as u64);
        (0..batch_size)
            .map(|b| {
                let item_seed = derive_seed(step_seed, b as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(item_seed, u64::MAX));
                let clean = &self.clean[rng.random_range(0..self.clean.len())];
                let noise = &self.noise[rng.random_range(0..self.noise.len())];
                let rir = (!self.rirs.is_empty()).then(|| &self.rirs[rng.random_range(0..self.rirs.len())]);
                sample_mixture(clean, noise, rir, &self.spec, item_seed)
            })
            .collect()
    }
}

/// `n` mixtures built from synthetic speech, white noise and exponential RIRs.
pub fn synthetic_mixtures(n: usize, spec: &MixtureSpec, seed: u64) -> Result<CachedMixtures> {
    let len = spec.crop_samples(super::SAMPLE_RATE);
    let items = (0..n as u64)
        .map(|i| {
            let s = derive_seed(seed, i);
            let clean = synthetic::speech_like(len + len / 4, derive_seed(s, 1));
            let noise = synthetic::white_noise(len, 1.0, derive_seed(s, 2));
            let rir = synthetic::exponential_rir(4000, 20, 0.4, derive_seed(s, 3));
            sample_mixture(&clean, &noise, Some(&rir), spec, s)
        })
        .collect::<Result<Vec<_>>>()?;
    CachedMixtures::new(items)
}

/// Stacks equal-length waveforms into a `[B, L]` tensor.
pub fn waveform_batch<'a>(waves: impl IntoIterator<Item = &'a Waveform>, device: &Device) -> Result<Tensor> {
    let waves: Vec<&Waveform> = waves.into_iter().collect();
    let len = waves.first().map(|w| w.len()).ok_or_else(|| Error::invalid("empty batch"))?;
    if waves.iter().any(|w| w.len() != len) {
        return Err(Error::shape("batch waveforms differ in length"));
    }
    let data: Vec<f32> = waves.iter().flat_map(|w| w.samples.iter().copied()).collect();
    Ok(Tensor::from_vec(data, (waves.len(), len), device)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_depend_only_on_seed_and_step() {
        let spec = MixtureSpec { crop_seconds: 0.25, ..MixtureSpec::default() };
        let cache = synthetic_mixtures(8, &spec, 3).unwrap();
        assert_eq!(cache.len(), 8);
        let a = cache.batch(5, 3, 9).unwrap();
        let b = cache.batch(5, 3, 9).unwrap();
        assert_eq!(
            a.iter().map(|m| m.meta.seed).collect::<Vec<_>>(),
            b.iter().map(|m| m.meta.seed).collect::<Vec<_>>()
        );
        let t = waveform_batch(a.iter().map(|m| &m.noisy), &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[3, 4000]);
    }

    #[test]
    fn on_the_fly_is_reproducible() {
        let src = OnTheFlyMixtures {
            clean: vec![synthetic::speech_like(6000, 1), synthetic::speech_like(5000, 2)],
            noise: vec![synthetic::white_noise(3000, 1.0, 3)],
            rirs: vec![synthetic::exponential_rir(800, 5, 0.3, 4)],
            spec: MixtureSpec { crop_seconds: 0.25, ..MixtureSpec::default() },
        };
        let a = src.batch(2, 2, 7).unwrap();
        let b = src.batch(2, 2, 7).unwrap();
        assert_eq!(a[0].noisy, b[0].noisy);
        assert_eq!(a[1].target, b[1].target);
        assert_ne!(src.batch(3, 2, 7).unwrap()[0].noisy, a[0].noisy);
    }
}
