use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use candle_core::{DType, Device};

use super::discriminators::{DiscriminatorOutput, SubOutput};
use super::stft::MelLoss;
use crate::audio_sim::Waveform;
use crate::error::{Error, Result};

pub const RECONSTRUCTION_WEIGHT: f64 = 15.0;
pub const ADVERSARIAL_WEIGHT: f64 = 2.0;
pub const FEATURE_MATCHING_WEIGHT: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialKind {
    /// Least-squares objective.
    #[default]
    Lsgan,
    Hinge,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GanLossBreakdown {
    pub reconstruction: f64,
    pub adversarial: f64,
    pub feature_matching: f64,
    pub total: f64,
}

/// Standard 15 / 2 / 1 weighting.
pub fn generator_total(rec: f64, adv: f64, fm: f64) -> GanLossBreakdown {
    weighted_total(rec, adv, fm, LossWeights::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub reconstruction: f64,
    pub adversarial: f64,
    pub feature_matching: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            reconstruction: RECONSTRUCTION_WEIGHT,
            adversarial: ADVERSARIAL_WEIGHT,
            feature_matching: FEATURE_MATCHING_WEIGHT,
        }
    }
}

impl LossWeights {
    pub fn uses_discriminators(&self) -> bool {
        self.adversarial != 0.0 || self.feature_matching != 0.0
    }
}

pub fn weighted_total(rec: f64, adv: f64, fm: f64, w: LossWeights) -> GanLossBreakdown {
    GanLossBreakdown {
        reconstruction: rec,
        adversarial: adv,
        feature_matching: fm,
        total: w.reconstruction * rec + w.adversarial * adv + w.feature_matching * fm,
    }
}

/// Multi-resolution log-mel L1 distance between two waveforms, in f64.
pub fn reconstruction_loss(pred: &Waveform, target: &Waveform) -> Result<f64> {
    if pred.sample_rate != target.sample_rate {
        return Err(Error::SampleRateMismatch { expected: target.sample_rate, actual: pred.sample_rate });
    }
    let dev = Device::Cpu;
    let to_tensor = |w: &Waveform| -> Result<Tensor> {
        let v: Vec<f64> = w.samples.iter().map(|&x| x as f64).collect();
        Ok(Tensor::from_vec(v, (1, w.len()), &dev)?)
    };
    let loss = MelLoss::new(&[2048, 1024, 512], 80, target.sample_rate, target.sample_rate as f64 / 2.0, &dev)?;
    Ok(loss.forward(&to_tensor(pred)?, &to_tensor(target)?)?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn mean_of(terms: Vec<Tensor>) -> Result<Option<Tensor>> {
    let n = terms.len();
    let mut acc: Option<Tensor> = None;
    for t in terms {
        acc = Some(match acc {
            Some(a) => (a + t)?,
            None => t,
        });
    }
    Ok(match acc {
        Some(a) => Some((a / n as f64)?),
        None => None,
    })
}

fn check_pairing(real: &[SubOutput], fake: &[SubOutput]) -> Result<()> {
    if real.len() != fake.len() {
        return Err(Error::shape(format!("{} real vs {} fake sub-discriminators", real.len(), fake.len())));
    }
    Ok(())
}

/// Discriminator and generator adversarial losses. Each family's loss is the
/// mean over its sub-discriminators; the two families are then averaged with
/// equal weight.
pub fn adversarial_losses(
    real: &DiscriminatorOutput,
    fake: &DiscriminatorOutput,
    kind: AdversarialKind,
) -> Result<(Tensor, Tensor)> {
    let mut disc_families = Vec::new();
    let mut gen_families = Vec::new();
    for (r, f) in real.families().into_iter().zip(fake.families()) {
        check_pairing(r, f)?;
        let mut d_terms = Vec::new();
        let mut g_terms = Vec::new();
        for (rs, fs) in r.iter().zip(f) {
            let (d, g) = match kind {
                AdversarialKind::Lsgan => (
                    ((1.0 - &rs.logits)?.sqr()?.mean_all()? + fs.logits.sqr()?.mean_all()?)?,
                    (1.0 - &fs.logits)?.sqr()?.mean_all()?,
                ),
                AdversarialKind::Hinge => (
                    ((1.0 - &rs.logits)?.relu()?.mean_all()? + (&fs.logits + 1.0)?.relu()?.mean_all()?)?,
                    fs.logits.mean_all()?.neg()?,
                ),
            };
            d_terms.push(d);
            g_terms.push(g);
        }
        if let Some(d) = mean_of(d_terms)? {
            disc_families.push(d);
        }
        if let Some(g) = mean_of(g_terms)? {
            gen_families.push(g);
        }
    }
    let disc = mean_of(disc_families)?.ok_or_else(|| Error::invalid("no discriminator outputs"))?;
    let gen = mean_of(gen_families)?.ok_or_else(|| Error::invalid("no discriminator outputs"))?;
    Ok((disc, gen))
}

/// Mean L1 distance over every feature map of both families, each map
/// weighted equally. Real features are treated as constants.
pub fn feature_matching_loss(real: &DiscriminatorOutput, fake: &DiscriminatorOutput) -> Result<Tensor> {
    let mut terms = Vec::new();
    for (r, f) in real.families().into_iter().zip(fake.families()) {
        check_pairing(r, f)?;
        for (rs, fs) in r.iter().zip(f) {
            if rs.features.len() != fs.features.len() {
                return Err(Error::shape("feature map counts differ between real and fake"));
            }
            for (a, b) in rs.features.iter().zip(&fs.features) {
                terms.push((b - a.detach())?.abs()?.mean_all()?);
            }
        }
    }
    mean_of(terms)?.ok_or_else(|| Error::invalid("no feature maps to match"))
}
