use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::discriminators::{DiscriminatorConfig, Discriminators};
use super::generator::Generator;
use super::losses::{adversarial_losses, feature_matching_loss, weighted_total, AdversarialKind, LossWeights};
use super::stft::MelLoss;
use super::VocoderConfig;
use crate::audio_sim::{derive_seed, waveform_batch, MixtureSource};
use crate::encoder::{Encoder, EncoderConfig, CONFIG_KEY};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionConfig, FusionScheme};
use crate::nn::{finite_scalar, AdamW, AdamWConfig, Checkpoint, ParamStore, WarmupCosine};

const GENERATOR_STREAM: u64 = 0x6e0c;
const DISCRIMINATOR_STREAM: u64 = 0xd15c;

pub const TRAIN_CONFIG_KEY: &str = "vocoder_train_config";
pub const STEP_KEY: &str = "step";

/// Which waveform the frozen encoder sees while the vocoder learns to
/// produce the clean target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureInput {
    #[default]
    Noisy,
    Clean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocoderTrainConfig {
    pub vocoder: VocoderConfig,
    pub fusion: FusionConfig,
    pub discriminator: DiscriminatorConfig,
    pub total_steps: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub weight_decay: f64,
    pub max_grad_norm: Option<f64>,
    pub weights: LossWeights,
    pub adversarial: AdversarialKind,
    /// Encoder hidden state used as the phonetic stream; `None` is the last.
    pub phonetic_layer: Option<usize>,
    pub acoustic_layer: usize,
    pub input: FeatureInput,
    pub mel_fft_sizes: Vec<usize>,
    pub n_mels: usize,
    pub mel_fmax: f64,
    pub checkpoint_every: usize,
}

impl Default for VocoderTrainConfig {
    fn default() -> Self {
        Self {
            vocoder: VocoderConfig::full(),
            fusion: FusionConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            total_steps: 200_000,
            batch_size: 12,
            lr_max: 2e-4,
            warmup_fraction: 0.1,
            seed: 0,
            weight_decay: 0.01,
            max_grad_norm: Some(5.0),
            weights: LossWeights::default(),
            adversarial: AdversarialKind::Lsgan,
            phonetic_layer: None,
            acoustic_layer: 1,
            input: FeatureInput::Noisy,
            mel_fft_sizes: vec![2048, 1024, 512],
            n_mels: 80,
            mel_fmax: 8000.0,
            checkpoint_every: 5_000,
        }
    }
}

impl VocoderTrainConfig {
    pub fn toy() -> Self {
        Self {
            vocoder: VocoderConfig::toy(),
            fusion: FusionConfig { d_phonetic: 64, d_acoustic: 64, ..FusionConfig::default() },
            discriminator: DiscriminatorConfig::toy(),
            total_steps: 100,
            batch_size: 2,
            lr_max: 2e-3,
            checkpoint_every: 0,
            ..Self::default()
        }
    }

    pub fn phonetic_layer(&self, enc: &EncoderConfig) -> usize {
        self.phonetic_layer.unwrap_or(enc.n_layers)
    }

    pub fn schedule(&self) -> WarmupCosine {
        WarmupCosine { lr_max: self.lr_max, total_steps: self.total_steps, warmup_fraction: self.warmup_fraction }
    }

    /// Checks internal consistency and compatibility with the encoder.
    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        self.vocoder.validate()?;
        self.fusion.validate()?;
        self.discriminator.validate()?;
        if self.total_steps == 0 || self.batch_size == 0 {
            return Err(Error::invalid("total_steps and batch_size must be positive"));
        }
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) || !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::invalid("lr_max must be positive and warmup_fraction in [0, 1]"));
        }
        if enc.hop() != self.vocoder.hop {
            return Err(Error::invalid(format!(
                "encoder hop {} differs from vocoder hop {}; features would need resampling",
                enc.hop(),
                self.vocoder.hop
            )));
        }
        let pl = self.phonetic_layer(enc);
        if pl > enc.n_layers || self.acoustic_layer > enc.n_layers {
            return Err(Error::invalid(format!(
                "feature layers ({pl}, {}) exceed encoder depth {}",
                self.acoustic_layer, enc.n_layers
            )));
        }
        if self.fusion.d_phonetic != enc.model_dim || self.fusion.d_acoustic != enc.model_dim {
            return Err(Error::invalid(format!("fusion dims must equal the encoder width {}", enc.model_dim)));
        }
        if self.vocoder.in_dim != self.fusion.output_dim() {
            return Err(Error::invalid(format!(
                "vocoder in_dim {} does not match fusion output {}",
                self.vocoder.in_dim,
                self.fusion.output_dim()
            )));
        }
        if self.mel_fft_sizes.is_empty() || self.n_mels == 0 {
            return Err(Error::invalid("reconstruction loss needs mel resolutions and bins"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocoderStepLog {
    pub step: usize,
    pub reconstruction: f64,
    pub adversarial: f64,
    pub feature_matching: f64,
    pub total: f64,
    pub discriminator: Option<f64>,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Phonetic and acoustic streams `[B, T, D]` from a frozen encoder.
pub(crate) fn encoder_streams(
    encoder: &Encoder,
    wav: &Tensor,
    phonetic_layer: usize,
    acoustic_layer: usize,
) -> Result<(Tensor, Tensor)> {
    let out = encoder.forward_until(wav, None, phonetic_layer.max(acoustic_layer))?;
    Ok((out.layers[phonetic_layer].detach(), out.layers[acoustic_layer].detach()))
}

pub struct VocoderTrainer {
    cfg: VocoderTrainConfig,
    enc_cfg: EncoderConfig,
    encoder: Encoder,
    encoder_store: ParamStore,
    gen_store: ParamStore,
    generator: Generator,
    fusion: Fusion,
    disc_store: ParamStore,
    discriminators: Discriminators,
    opt_g: AdamW,
    opt_d: AdamW,
    mel: MelLoss,
    step: usize,
}

impl VocoderTrainer {
    pub fn new(enc_cfg: &EncoderConfig, encoder: &BTreeMap<String, Tensor>, cfg: &VocoderTrainConfig) -> Result<Self> {
        cfg.validate(enc_cfg)?;
        let encoder_store = ParamStore::from_tensors(encoder.clone(), DType::F32)?;
        encoder_store.freeze();
        let enc = Encoder::from_store(enc_cfg, &encoder_store)?;

        let gen_store = ParamStore::seeded(derive_seed(cfg.seed, GENERATOR_STREAM), DType::F32);
        let vb = gen_store.var_builder();
        let generator = Generator::new(&cfg.vocoder, vb.pp("vocoder"))?;
        let fusion = Fusion::new(&cfg.fusion, vb.pp("fusion"))?;

        let disc_store = ParamStore::seeded(derive_seed(cfg.seed, DISCRIMINATOR_STREAM), DType::F32);
        let discriminators = Discriminators::new(&cfg.discriminator, disc_store.var_builder())?;

        let opt_cfg =
            AdamWConfig { weight_decay: cfg.weight_decay, max_grad_norm: cfg.max_grad_norm, ..Default::default() };
        let opt_g = AdamW::new(gen_store.vars(), opt_cfg)?;
        let opt_d = AdamW::new(disc_store.vars(), opt_cfg)?;
        let mel = MelLoss::new(&cfg.mel_fft_sizes, cfg.n_mels, cfg.vocoder.sample_rate, cfg.mel_fmax, enc.device())?;
        Ok(Self {
            cfg: cfg.clone(),
            enc_cfg: enc_cfg.clone(),
            encoder: enc,
            encoder_store,
            gen_store,
            generator,
            fusion,
            disc_store,
            discriminators,
            opt_g,
            opt_d,
            mel,
            step: 0,
        })
    }

    pub fn resume(path: impl AsRef<Path>, encoder: &BTreeMap<String, Tensor>) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let cfg: VocoderTrainConfig = serde_json::from_str(ck.meta(TRAIN_CONFIG_KEY)?)
            .map_err(|e| Error::ArchitectureMismatch(format!("bad vocoder config in checkpoint: {e}")))?;
        let enc_cfg: EncoderConfig = serde_json::from_str(ck.meta(CONFIG_KEY)?)
            .map_err(|e| Error::ArchitectureMismatch(format!("bad encoder config in checkpoint: {e}")))?;
        let step: usize = ck
            .meta(STEP_KEY)?
            .parse()
            .map_err(|e| Error::ArchitectureMismatch(format!("bad step in checkpoint: {e}")))?;
        let mut tr = Self::new(&enc_cfg, encoder, &cfg)?;
        let mut gen = ck.with_prefix("vocoder.");
        gen = gen.into_iter().map(|(k, v)| (format!("vocoder.{k}"), v)).collect();
        gen.extend(ck.with_prefix("fusion.").into_iter().map(|(k, v)| (format!("fusion.{k}"), v)));
        tr.gen_store.assign(&gen)?;
        tr.disc_store.assign(&ck.with_prefix("discriminator."))?;
        tr.opt_g.load_state(&ck.with_prefix("optim_g."), step)?;
        tr.opt_d.load_state(&ck.with_prefix("optim_d."), step)?;
        tr.step = step;
        Ok(tr)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut ck = Checkpoint::new();
        ck.insert_all("", self.gen_store.tensors());
        ck.insert_all("discriminator.", self.disc_store.tensors());
        ck.insert_all("optim_g.", self.opt_g.state_tensors());
        ck.insert_all("optim_d.", self.opt_d.state_tensors());
        ck.metadata.insert(STEP_KEY.into(), self.step.to_string());
        ck.metadata.insert(TRAIN_CONFIG_KEY.into(), serde_json::to_string(&self.cfg)?);
        ck.metadata.insert(CONFIG_KEY.into(), serde_json::to_string(&self.enc_cfg)?);
        ck.save(path)
    }

    pub fn config(&self) -> &VocoderTrainConfig {
        &self.cfg
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.cfg.total_steps
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn encoder_store(&self) -> &ParamStore {
        &self.encoder_store
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    pub fn generator_store(&self) -> &ParamStore {
        &self.gen_store
    }

    pub fn discriminator_store(&self) -> &ParamStore {
        &self.disc_store
    }

    pub fn discriminators(&self) -> &Discriminators {
        &self.discriminators
    }

    /// Generated waveform and matching target for a batch.
    fn generate(&self, batch: &[crate::audio_sim::MixtureSample]) -> Result<(Tensor, Tensor)> {
        let dev = self.encoder.device().clone();
        let input = match self.cfg.input {
            FeatureInput::Noisy => waveform_batch(batch.iter().map(|m| &m.noisy), &dev)?,
            FeatureInput::Clean => waveform_batch(batch.iter().map(|m| &m.target), &dev)?,
        };
        let target = waveform_batch(batch.iter().map(|m| &m.target), &dev)?;
        let pl = self.cfg.phonetic_layer(&self.enc_cfg);
        let (phonetic, acoustic) = encoder_streams(&self.encoder, &input, pl, self.cfg.acoustic_layer)?;
        let fused = match self.cfg.fusion.scheme {
            FusionScheme::None => phonetic,
            _ => self.fusion.forward(&phonetic, &acoustic)?,
        };
        let fake = self.generator.forward(&fused)?;
        let n = fake.dim(1)?;
        if n > target.dim(1)? {
            return Err(Error::shape(format!("generated {n} samples from a {}-sample target", target.dim(1)?)));
        }
        Ok((fake, target.narrow(1, 0, n)?))
    }

    /// Generator loss on a batch, as a differentiable tensor plus its parts.
    pub fn generator_loss(&self, fake: &Tensor, target: &Tensor) -> Result<(Tensor, [f64; 3])> {
        let w = self.cfg.weights;
        let rec = self.mel.forward(fake, target)?;
        let rec_v = finite_scalar(&rec, self.step, "reconstruction loss")?;
        let mut total = (&rec * w.reconstruction)?;
        let (mut adv_v, mut fm_v) = (0.0, 0.0);
        if w.uses_discriminators() {
            let real = self.discriminators.forward(target)?;
            let gen = self.discriminators.forward(fake)?;
            let (_, adv) = adversarial_losses(&real, &gen, self.cfg.adversarial)?;
            let fm = feature_matching_loss(&real, &gen)?;
            adv_v = finite_scalar(&adv, self.step, "adversarial loss")?;
            fm_v = finite_scalar(&fm, self.step, "feature matching loss")?;
            total = ((total + (adv * w.adversarial)?)? + (fm * w.feature_matching)?)?;
        }
        Ok((total, [rec_v, adv_v, fm_v]))
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, source: &dyn MixtureSource) -> Result<VocoderStepLog> {
        if self.is_finished() {
            return Err(Error::invalid(format!("run already finished at step {}", self.step)));
        }
        let step = self.step;
        let lr = self.cfg.schedule().lr_at(step)?;
        let batch = source.batch(step, self.cfg.batch_size, self.cfg.seed)?;
        let (fake, target) = self.generate(&batch)?;
        let renumber = |e: Error| match e {
            Error::NonFiniteLoss { detail, .. } => Error::NonFiniteLoss { step, detail },
            other => other,
        };

        let mut disc_v = None;
        if self.cfg.weights.uses_discriminators() {
            let real = self.discriminators.forward(&target)?;
            let gen = self.discriminators.forward(&fake.detach())?;
            let (d_loss, _) = adversarial_losses(&real, &gen, self.cfg.adversarial)?;
            disc_v = Some(finite_scalar(&d_loss, step, "discriminator loss")?);
            let grads = d_loss.backward()?;
            self.opt_d.step(&grads, lr).map_err(renumber)?;
        }

        let (g_loss, [rec, adv, fm]) = self.generator_loss(&fake, &target)?;
        let breakdown = weighted_total(rec, adv, fm, self.cfg.weights);
        finite_scalar(&g_loss, step, "generator loss")?;
        let grads = g_loss.backward()?;
        let grad_norm = self.opt_g.step(&grads, lr).map_err(renumber)?;
        self.step += 1;
        Ok(VocoderStepLog {
            step: self.step,
            reconstruction: rec,
            adversarial: adv,
            feature_matching: fm,
            total: breakdown.total,
            discriminator: disc_v,
            lr,
            grad_norm,
        })
    }

    /// Trains to completion with the same checkpoint layout as the DRD run.
    pub fn run(
        &mut self,
        source: &dyn MixtureSource,
        checkpoint_dir: Option<&Path>,
        mut on_step: impl FnMut(&VocoderStepLog),
    ) -> Result<Vec<VocoderStepLog>> {
        let mut logs = Vec::new();
        while !self.is_finished() {
            let log = self.train_step(source)?;
            on_step(&log);
            logs.push(log);
            if let Some(dir) = checkpoint_dir {
                let every = self.cfg.checkpoint_every;
                if every > 0 && self.step % every == 0 {
                    self.save_checkpoint(dir.join(format!("step_{:08}.safetensors", self.step)))?;
                }
            }
        }
        if let Some(dir) = checkpoint_dir {
            self.save_checkpoint(dir.join("last.safetensors"))?;
        }
        Ok(logs)
    }

    /// Generated and target waveforms for the batch at `step`; for tests and
    /// diagnostics.
    pub fn sample(&self, source: &dyn MixtureSource, step: usize) -> Result<(Tensor, Tensor)> {
        let batch = source.batch(step, self.cfg.batch_size, self.cfg.seed)?;
        self.generate(&batch)
    }
}
