use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Module, Tensor};
use candle_nn::{Init, Linear, VarBuilder};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{combine_losses, kd_loss, l2_normalize, masked_cross_entropy};
use super::DrdConfig;
use crate::audio_sim::{derive_seed, waveform_batch, MixtureSource};
use crate::encoder::{make_mask, tensor_to_matrix, Encoder, EncoderConfig, FeatureMatrix, CONFIG_KEY};
use crate::error::{Error, Result};
use crate::nn::{finite_scalar, layers, AdamW, AdamWConfig, Checkpoint, ParamStore};
use crate::probes::{kmeans_fit, stack_frames, Codebook};

const LABEL_STREAM: u64 = 0x1abe1;
const MASK_STREAM: u64 = 0x3a5c;
const HEAD_STREAM: u64 = 0x4ead;
const SCRATCH_STREAM: u64 = 0x5c7a;

pub const DRD_CONFIG_KEY: &str = "drd_config";
pub const STEP_KEY: &str = "step";

/// Masked-prediction head: projection followed by cosine similarity against
/// one learned embedding per cluster, divided by a temperature.
#[derive(Debug, Clone)]
pub struct SslHead {
    proj: Linear,
    codes: Tensor,
    temperature: f64,
}

impl SslHead {
    pub fn new(dim: usize, proj_dim: usize, k: usize, temperature: f64, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            proj: layers::linear(dim, proj_dim, true, vb.pp("proj"))?,
            codes: vb.get_with_hints((k, proj_dim), "codes", Init::Randn { mean: 0.0, stdev: 1.0 })?,
            temperature,
        })
    }

    /// `[B, T, D]` features to `[B, T, K]` logits.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let p = l2_normalize(&self.proj.forward(x)?)?;
        let c = l2_normalize(&self.codes)?;
        let (b, t, d) = p.dims3()?;
        let sims = p.reshape((b * t, d))?.matmul(&c.t()?)?;
        Ok((sims / self.temperature)?.reshape((b, t, c.dim(0)?))?)
    }
}

/// k-means codebook over frame features and the resulting per-utterance labels.
pub fn fit_pseudo_labels(
    features: &[FeatureMatrix],
    k: usize,
    rng: &mut impl rand::Rng,
    max_iters: usize,
) -> Result<(Codebook, Vec<Vec<usize>>)> {
    let data = stack_frames(features)?;
    if data.nrows() < k {
        return Err(Error::invalid(format!("{} frames cannot support a codebook of {k} units", data.nrows())));
    }
    let fit = kmeans_fit(&data, k, rng, max_iters)?;
    let labels = features.iter().map(|f| fit.codebook.assign(f)).collect::<Result<Vec<_>>>()?;
    Ok((fit.codebook, labels))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrdStepLog {
    pub step: usize,
    pub kd: Option<f64>,
    pub ssl: Option<f64>,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub struct DrdTrainer {
    cfg: DrdConfig,
    enc_cfg: EncoderConfig,
    teacher: Encoder,
    teacher_store: ParamStore,
    student: Encoder,
    student_store: ParamStore,
    head: Option<(SslHead, ParamStore)>,
    codebook: Option<Codebook>,
    optimizer: AdamW,
    step: usize,
}

impl DrdTrainer {
    /// Sets up a fresh run. The teacher is a frozen copy of `teacher`; when
    /// the objective needs pseudo-labels, a codebook is fitted on teacher
    /// features of clean speech drawn from `source`.
    pub fn new(
        enc_cfg: &EncoderConfig,
        teacher: &BTreeMap<String, Tensor>,
        cfg: &DrdConfig,
        source: &dyn MixtureSource,
    ) -> Result<Self> {
        let mut trainer = Self::build(enc_cfg, teacher, cfg, None)?;
        if cfg.objective.uses_ssl() {
            trainer.codebook = Some(trainer.fit_codebook(source)?);
        }
        Ok(trainer)
    }

    fn build(
        enc_cfg: &EncoderConfig,
        teacher: &BTreeMap<String, Tensor>,
        cfg: &DrdConfig,
        codebook: Option<Codebook>,
    ) -> Result<Self> {
        cfg.validate(enc_cfg)?;
        let teacher_store = ParamStore::from_tensors(teacher.clone(), DType::F32)?;
        teacher_store.freeze();
        let teacher_enc = Encoder::from_store(enc_cfg, &teacher_store)?;

        let student_store = match cfg.student_init {
            super::StudentInit::Teacher => ParamStore::from_tensors(teacher.clone(), DType::F32)?,
            super::StudentInit::Scratch => ParamStore::seeded(derive_seed(cfg.seed, SCRATCH_STREAM), DType::F32),
        };
        let student = Encoder::from_store(enc_cfg, &student_store)?;

        let head = if cfg.objective.uses_ssl() {
            let store = ParamStore::seeded(derive_seed(cfg.seed, HEAD_STREAM), DType::F32);
            let h = SslHead::new(
                enc_cfg.model_dim,
                cfg.ssl_proj_dim,
                cfg.codebook_size,
                cfg.ssl_temperature,
                store.var_builder(),
            )?;
            Some((h, store))
        } else {
            None
        };

        let mut params: Vec<_> =
            student_store.vars().into_iter().filter(|(name, _)| cfg.train_cnn || !name.starts_with("cnn.")).collect();
        if let Some((_, store)) = &head {
            params.extend(store.vars().into_iter().map(|(n, v)| (format!("head.{n}"), v)));
        }
        let opt_cfg =
            AdamWConfig { weight_decay: cfg.weight_decay, max_grad_norm: cfg.max_grad_norm, ..Default::default() };
        let optimizer = AdamW::new(params, opt_cfg)?;

        Ok(Self {
            cfg: cfg.clone(),
            enc_cfg: enc_cfg.clone(),
            teacher: teacher_enc,
            teacher_store,
            student,
            student_store,
            head,
            codebook,
            optimizer,
            step: 0,
        })
    }

    fn fit_codebook(&self, source: &dyn MixtureSource) -> Result<Codebook> {
        let stream = derive_seed(self.cfg.seed, LABEL_STREAM);
        let layer = self.cfg.pseudo_label_layer;
        let mut feats = Vec::new();
        for i in 0..self.cfg.label_fit_batches.max(1) {
            let batch = source.batch(i, self.cfg.batch_size, stream)?;
            let clean = waveform_batch(batch.iter().map(|m| &m.target), self.teacher.device())?;
            let out = self.teacher.forward_until(&clean, None, layer)?;
            for b in 0..batch.len() {
                feats.push(tensor_to_matrix(&out.layers[layer].get(b)?)?);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(stream, 1));
        let (codebook, _) = fit_pseudo_labels(&feats, self.cfg.codebook_size, &mut rng, self.cfg.kmeans_iters)?;
        Ok(codebook)
    }

    /// Restores a run from a checkpoint written by [`DrdTrainer::save_checkpoint`].
    pub fn resume(path: impl AsRef<Path>, teacher: &BTreeMap<String, Tensor>) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let parse = |key: &str| -> Result<String> { Ok(ck.meta(key)?.to_string()) };
        let cfg: DrdConfig = serde_json::from_str(&parse(DRD_CONFIG_KEY)?)
            .map_err(|e| Error::ArchitectureMismatch(format!("bad DRD config in checkpoint: {e}")))?;
        let enc_cfg: EncoderConfig = serde_json::from_str(&parse(CONFIG_KEY)?)
            .map_err(|e| Error::ArchitectureMismatch(format!("bad encoder config in checkpoint: {e}")))?;
        let step: usize = parse(STEP_KEY)?
            .parse()
            .map_err(|e| Error::ArchitectureMismatch(format!("bad step in checkpoint: {e}")))?;
        let codebook = match ck.tensors.get("codebook") {
            Some(t) => {
                let m = tensor_to_matrix(t)?;
                Some(Codebook { centroids: m })
            }
            None => None,
        };
        let mut trainer = Self::build(&enc_cfg, teacher, &cfg, codebook)?;
        trainer.student_store.assign(&ck.with_prefix("student."))?;
        if let Some((_, store)) = &trainer.head {
            store.assign(&ck.with_prefix("head."))?;
        }
        trainer.optimizer.load_state(&ck.with_prefix("optim."), step)?;
        trainer.step = step;
        Ok(trainer)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut ck = Checkpoint::new();
        ck.insert_all("student.", self.student_store.tensors());
        if let Some((_, store)) = &self.head {
            ck.insert_all("head.", store.tensors());
        }
        ck.insert_all("optim.", self.optimizer.state_tensors());
        if let Some(cb) = &self.codebook {
            let c = &cb.centroids;
            let t = Tensor::from_vec(
                c.iter().copied().collect::<Vec<f32>>(),
                (c.nrows(), c.ncols()),
                self.student.device(),
            )?;
            ck.tensors.insert("codebook".into(), t);
        }
        ck.metadata.insert(STEP_KEY.into(), self.step.to_string());
        ck.metadata.insert(DRD_CONFIG_KEY.into(), serde_json::to_string(&self.cfg)?);
        ck.metadata.insert(CONFIG_KEY.into(), serde_json::to_string(&self.enc_cfg)?);
        ck.save(path)
    }

    pub fn config(&self) -> &DrdConfig {
        &self.cfg
    }

    pub fn encoder_config(&self) -> &EncoderConfig {
        &self.enc_cfg
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn student(&self) -> &Encoder {
        &self.student
    }

    pub fn teacher(&self) -> &Encoder {
        &self.teacher
    }

    pub fn student_store(&self) -> &ParamStore {
        &self.student_store
    }

    pub fn teacher_store(&self) -> &ParamStore {
        &self.teacher_store
    }

    pub fn codebook(&self) -> Option<&Codebook> {
        self.codebook.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.cfg.total_steps
    }

    /// One optimisation step on the batch assigned to the current step.
    pub fn train_step(&mut self, source: &dyn MixtureSource) -> Result<DrdStepLog> {
        if self.is_finished() {
            return Err(Error::invalid(format!("run already finished at step {}", self.step)));
        }
        let step = self.step;
        let lr = self.cfg.schedule().lr_at(step)?;
        let batch = source.batch(step, self.cfg.batch_size, self.cfg.seed)?;
        let dev = self.student.device().clone();
        let clean = waveform_batch(batch.iter().map(|m| &m.target), &dev)?;
        let noisy = waveform_batch(batch.iter().map(|m| &m.noisy), &dev)?;

        let sl = self.cfg.student_layer(&self.enc_cfg);
        let tl = self.cfg.teacher_layer(&self.enc_cfg);
        let use_ssl = self.cfg.objective.uses_ssl();
        let pl = self.cfg.pseudo_label_layer;
        let depth = if use_ssl { tl.max(pl) } else { tl };
        let t_out = self.teacher.forward_until(&clean, None, depth)?;
        let (b, frames, _) = t_out.layers[0].dims3()?;

        let mut rows = Vec::new();
        let mask = if use_ssl {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(self.cfg.seed, MASK_STREAM), step as u64));
            let mut flags = vec![0u8; b * frames];
            for bi in 0..b {
                let m = make_mask(frames, self.cfg.mask_ratio, self.cfg.mask_span, &mut rng)?;
                for &i in &m.masked_frame_indices {
                    flags[bi * frames + i] = 1;
                    rows.push(bi * frames + i);
                }
            }
            Some(Tensor::from_vec(flags, (b, frames), &dev)?)
        } else {
            None
        };
        let s_out = self.student.forward_until(&noisy, mask.as_ref(), sl)?;
        let feats = &s_out.layers[sl];

        let mut total: Option<Tensor> = None;
        let mut kd_v = None;
        let mut ssl_v = None;
        if self.cfg.objective.uses_kd() {
            let l = kd_loss(feats, &t_out.layers[tl])?;
            kd_v = Some(finite_scalar(&l, step, "kd loss")?);
            total = Some(l);
        }
        if use_ssl {
            let (head, _) = self.head.as_ref().expect("SSL objective always builds a head");
            let codebook = self.codebook.as_ref().ok_or_else(|| Error::invalid("SSL objective without a codebook"))?;
            let k = codebook.k();
            let logits = head.logits(feats)?.reshape((b * frames, k))?;
            let d = t_out.layers[pl].dim(2)?;
            let targets = tensor_to_matrix(&t_out.layers[pl].reshape((b * frames, d))?)?;
            let labels = codebook.assign(&targets)?;
            let l = masked_cross_entropy(&logits, &labels, &rows)?;
            ssl_v = Some(finite_scalar(&l, step, "ssl loss")?);
            total = Some(match total {
                Some(t) => (t + l)?,
                None => l,
            });
        }
        let breakdown = combine_losses(kd_v, ssl_v)?;
        let total = total.expect("combine_losses guarantees a component");
        finite_scalar(&total, step, "total loss")?;
        let grads = total.backward()?;
        let grad_norm = self.optimizer.step(&grads, lr).map_err(|e| match e {
            Error::NonFiniteLoss { detail, .. } => Error::NonFiniteLoss { step, detail },
            other => other,
        })?;
        self.step += 1;
        Ok(DrdStepLog { step: self.step, kd: breakdown.kd, ssl: breakdown.ssl, total: breakdown.total, lr, grad_norm })
    }

    /// Trains until `total_steps`, writing `step_XXXXXXXX.safetensors`
    /// checkpoints into `checkpoint_dir` every `checkpoint_every` steps and a
    /// final `last.safetensors`.
    pub fn run(
        &mut self,
        source: &dyn MixtureSource,
        checkpoint_dir: Option<&Path>,
        mut on_step: impl FnMut(&DrdStepLog),
    ) -> Result<Vec<DrdStepLog>> {
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
}
