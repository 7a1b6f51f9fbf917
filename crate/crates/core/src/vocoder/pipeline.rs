use std::path::Path;

use candle_core::DType;

use super::generator::Generator;
use super::trainer::{encoder_streams, VocoderTrainConfig, TRAIN_CONFIG_KEY};
use crate::audio_sim::Waveform;
use crate::encoder::{waveform_tensor, Encoder};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionScheme};
use crate::nn::{Checkpoint, ParamStore};

/// Trained generator and fusion parameters restored from a checkpoint.
pub struct VocoderBundle {
    pub config: VocoderTrainConfig,
    pub generator: Generator,
    pub fusion: Fusion,
    pub store: ParamStore,
}

/// Loads the generator and fusion parts of a vocoder training checkpoint.
pub fn load_vocoder(path: impl AsRef<Path>) -> Result<VocoderBundle> {
    let ck = Checkpoint::load(path)?;
    let config: VocoderTrainConfig = serde_json::from_str(ck.meta(TRAIN_CONFIG_KEY)?)
        .map_err(|e| Error::ArchitectureMismatch(format!("bad vocoder config in checkpoint: {e}")))?;
    let tensors = ck
        .tensors
        .iter()
        .filter(|(k, _)| k.starts_with("vocoder.") || k.starts_with("fusion."))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let store = ParamStore::from_tensors(tensors, DType::F32)?;
    store.freeze();
    let vb = store.var_builder();
    let mismatch = |e: Error| match e {
        Error::Tensor(t) => Error::ArchitectureMismatch(t.to_string()),
        other => other,
    };
    let generator = Generator::new(&config.vocoder, vb.pp("vocoder")).map_err(mismatch)?;
    let fusion = Fusion::new(&config.fusion, vb.pp("fusion")).map_err(mismatch)?;
    Ok(VocoderBundle { config, generator, fusion, store })
}

/// Noisy waveform in, enhanced waveform out.
pub struct Enhancer {
    encoder: Encoder,
    bundle: VocoderBundle,
    phonetic_only: bool,
}

impl Enhancer {
    /// `scheme` overrides the trained fusion only to drop the acoustic stream
    /// ([`FusionScheme::None`]); any other value must match the checkpoint.
    pub fn new(encoder: Encoder, bundle: VocoderBundle, scheme: Option<FusionScheme>) -> Result<Self> {
        let enc_cfg = encoder.config().clone();
        bundle.config.validate(&enc_cfg)?;
        let trained = bundle.config.fusion.scheme;
        let phonetic_only = match scheme {
            None => trained == FusionScheme::None,
            Some(FusionScheme::None) => {
                if bundle.config.vocoder.in_dim != bundle.config.fusion.d_phonetic {
                    return Err(Error::invalid(format!(
                        "phonetic-only synthesis needs a vocoder input of {} dims, checkpoint has {}",
                        bundle.config.fusion.d_phonetic, bundle.config.vocoder.in_dim
                    )));
                }
                true
            }
            Some(s) if s == trained => trained == FusionScheme::None,
            Some(s) => {
                return Err(Error::invalid(format!("checkpoint was trained with {trained:?} fusion, not {s:?}")));
            }
        };
        Ok(Self { encoder, bundle, phonetic_only })
    }

    pub fn hop(&self) -> usize {
        self.bundle.config.vocoder.hop
    }

    pub fn enhance(&self, noisy: &Waveform) -> Result<Waveform> {
        let sr = self.bundle.config.vocoder.sample_rate;
        if noisy.sample_rate != sr {
            return Err(Error::SampleRateMismatch { expected: sr, actual: noisy.sample_rate });
        }
        let cfg = &self.bundle.config;
        let wav = waveform_tensor(noisy, self.encoder.device())?;
        let pl = cfg.phonetic_layer(self.encoder.config());
        let (phonetic, acoustic) = encoder_streams(&self.encoder, &wav, pl, cfg.acoustic_layer)?;
        let fused = if self.phonetic_only { phonetic } else { self.bundle.fusion.forward(&phonetic, &acoustic)? };
        let y = self.bundle.generator.forward(&fused)?.squeeze(0)?.to_vec1::<f32>()?;
        Waveform::new(y, sr)
    }
}
