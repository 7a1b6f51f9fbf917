use std::collections::BTreeSet;

use candle_core::{Device, Tensor};
use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

/// Frame coverage produced by span starts drawn at 8% of frames with span 10
/// (1 - 0.92^10).
pub const DEFAULT_MASK_RATIO: f64 = 0.565_610_4;
pub const DEFAULT_SPAN_LENGTH: usize = 10;

/// Frames whose CNN features are replaced by the mask embedding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    pub masked_frame_indices: BTreeSet<usize>,
    pub span_length: usize,
    pub mask_ratio_milli: u32,
}

impl MaskSpec {
    pub fn from_indices(indices: impl IntoIterator<Item = usize>) -> Self {
        Self { masked_frame_indices: indices.into_iter().collect(), span_length: 1, mask_ratio_milli: 0 }
    }

    pub fn empty() -> Self {
        Self::from_indices([])
    }

    pub fn len(&self) -> usize {
        self.masked_frame_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked_frame_indices.is_empty()
    }

    pub fn contains(&self, frame: usize) -> bool {
        self.masked_frame_indices.contains(&frame)
    }

    pub fn mask_ratio(&self) -> f64 {
        self.mask_ratio_milli as f64 / 1000.0
    }

    pub fn check_range(&self, frames: usize) -> Result<()> {
        match self.masked_frame_indices.iter().next_back() {
            Some(&last) if last >= frames => Err(Error::MaskOutOfRange { index: last, frames }),
            _ => Ok(()),
        }
    }

    /// `[1, frames]` u8 tensor with ones at masked frames.
    pub fn to_tensor(&self, frames: usize, device: &Device) -> Result<Tensor> {
        self.check_range(frames)?;
        let mut v = vec![0u8; frames];
        for &i in &self.masked_frame_indices {
            v[i] = 1;
        }
        Ok(Tensor::from_vec(v, (1, frames), device)?)
    }
}

/// Random non-overlapping spans covering `round(mask_ratio * T / span)`
/// spans' worth of frames, so coverage is within `span / T` of the ratio.
pub fn make_mask(frames: usize, mask_ratio: f64, span_length: usize, rng: &mut impl Rng) -> Result<MaskSpec> {
    if frames == 0 {
        return Err(Error::invalid("cannot build a mask over zero frames"));
    }
    if !(0.0..=1.0).contains(&mask_ratio) {
        return Err(Error::invalid(format!("mask_ratio must lie in [0, 1], got {mask_ratio}")));
    }
    if span_length == 0 {
        return Err(Error::invalid("span_length must be at least 1"));
    }
    let span = span_length.min(frames);
    let max_spans = frames / span;
    let n_spans = ((mask_ratio * frames as f64 / span as f64).round() as usize).min(max_spans);
    let milli = (mask_ratio * 1000.0).round() as u32;
    if n_spans == 0 {
        return Ok(MaskSpec { masked_frame_indices: BTreeSet::new(), span_length, mask_ratio_milli: milli });
    }
    // Stars and bars: choose span slots on a line with the masked length
    // collapsed, then re-expand. Every non-overlapping layout is equally likely.
    let slots = frames - n_spans * span + n_spans;
    let mut picks = sample(rng, slots, n_spans).into_vec();
    picks.sort_unstable();
    let mut indices = BTreeSet::new();
    for (j, p) in picks.into_iter().enumerate() {
        let start = p + j * (span - 1);
        indices.extend(start..start + span);
    }
    Ok(MaskSpec { masked_frame_indices: indices, span_length, mask_ratio_milli: milli })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_ratio_is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(make_mask(100, 0.0, 10, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn full_ratio_unit_span_covers_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = make_mask(37, 1.0, 1, &mut rng).unwrap();
        assert_eq!(m.len(), 37);
    }

    #[test]
    fn seeded_mask_is_reproducible() {
        let a = make_mask(100, 0.5, 10, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = make_mask(100, 0.5, 10, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
    }

    #[test]
    fn errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(make_mask(0, 0.5, 10, &mut rng).is_err());
        assert!(make_mask(10, 1.5, 10, &mut rng).is_err());
        assert!(make_mask(10, 0.5, 0, &mut rng).is_err());
        let m = MaskSpec::from_indices([3, 12]);
        assert!(matches!(m.check_range(10), Err(Error::MaskOutOfRange { index: 12, frames: 10 })));
    }

    proptest! {
        #[test]
        fn coverage_within_one_span(frames in 1usize..400, ratio in 0.0f64..=1.0, span in 1usize..20, seed in any::<u64>()) {
            let m = make_mask(frames, ratio, span, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let cov = m.len() as f64 / frames as f64;
            prop_assert!((cov - ratio).abs() <= span as f64 / frames as f64 + 1e-12);
            prop_assert!(m.check_range(frames).is_ok());
        }
    }
}
