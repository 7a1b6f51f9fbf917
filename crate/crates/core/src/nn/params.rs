use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::init::{FanInOut, NormalOrUniform};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    /// Missing parameters are created from their init hint with the store's RNG.
    Seeded,
    /// Every requested parameter must already exist.
    Strict,
}

struct Inner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    mode: Mode,
    frozen: bool,
}

/// Named parameter storage behind a [`VarBuilder`].
///
/// Unlike `candle_nn::VarMap`, initialisation draws from a seeded ChaCha
/// stream, so a model built twice from the same seed is bitwise identical.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.lock().expect("param store poisoned");
        f.debug_struct("ParamStore")
            .field("params", &inner.vars.len())
            .field("dtype", &self.dtype)
            .field("frozen", &inner.frozen)
            .finish()
    }
}

impl ParamStore {
    pub fn seeded(seed: u64, dtype: DType) -> Self {
        Self::with_mode(BTreeMap::new(), ChaCha8Rng::seed_from_u64(seed), Mode::Seeded, dtype)
    }

    /// A store that only serves the given tensors; asking for anything else is
    /// an architecture mismatch.
    pub fn from_tensors(tensors: BTreeMap<String, Tensor>, dtype: DType) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, t) in tensors {
            vars.insert(name, Var::from_tensor(&t.to_dtype(dtype)?)?);
        }
        Ok(Self::with_mode(vars, ChaCha8Rng::seed_from_u64(0), Mode::Strict, dtype))
    }

    fn with_mode(vars: BTreeMap<String, Var>, rng: ChaCha8Rng, mode: Mode, dtype: DType) -> Self {
        Self { inner: Arc::new(Mutex::new(Inner { vars, rng, mode, frozen: false })), dtype, device: Device::Cpu }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Tensors handed out after this call are detached from autograd.
    pub fn freeze(&self) {
        self.lock().frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.lock().frozen
    }

    pub fn var_builder(&self) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(self.clone()), self.dtype, self.device.clone())
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().expect("param store poisoned")
    }

    /// All parameters, sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.lock().vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn len(&self) -> usize {
        self.lock().vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_elements(&self) -> usize {
        self.lock().vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.lock().vars.iter().map(|(k, v)| (k.clone(), v.as_detached_tensor())).collect()
    }

    /// Overwrites existing parameters with same-named tensors from `src`.
    pub fn assign(&self, src: &BTreeMap<String, Tensor>) -> Result<()> {
        let inner = self.lock();
        for (name, var) in inner.vars.iter() {
            let t = src
                .get(name)
                .ok_or_else(|| Error::ArchitectureMismatch(format!("checkpoint lacks parameter `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::ArchitectureMismatch(format!(
                    "parameter `{name}`: checkpoint shape {:?}, model shape {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Exact copy of every parameter, for bitwise before/after comparisons.
    pub fn fingerprint(&self) -> Result<BTreeMap<String, Vec<u32>>> {
        let inner = self.lock();
        let mut out = BTreeMap::new();
        for (name, var) in inner.vars.iter() {
            let v: Vec<f32> = var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
            out.insert(name.clone(), v.into_iter().map(f32::to_bits).collect());
        }
        Ok(out)
    }

    fn sample(rng: &mut ChaCha8Rng, shape: &Shape, init: Init) -> Vec<f64> {
        let n = shape.elem_count();
        let normal = |rng: &mut ChaCha8Rng, std: f64| -> Vec<f64> {
            let d = Normal::new(0.0, std.max(f64::MIN_POSITIVE)).expect("valid std");
            (0..n).map(|_| d.sample(rng)).collect()
        };
        let uniform = |rng: &mut ChaCha8Rng, lo: f64, up: f64| -> Vec<f64> {
            if lo >= up {
                return vec![lo; n];
            }
            let d = Uniform::new(lo, up).expect("valid bounds");
            (0..n).map(|_| d.sample(rng)).collect()
        };
        match init {
            Init::Const(v) => vec![v; n],
            Init::Randn { mean, stdev } => normal(rng, stdev).into_iter().map(|x| x + mean).collect(),
            Init::Uniform { lo, up } => uniform(rng, lo, up),
            Init::Kaiming { dist, fan, non_linearity } => {
                let fan = match fan {
                    FanInOut::FanIn => FanInOut::FanIn.for_shape(shape),
                    FanInOut::FanOut => FanInOut::FanOut.for_shape(shape),
                };
                let std = non_linearity.gain() / (fan.max(1) as f64).sqrt();
                match dist {
                    NormalOrUniform::Normal => normal(rng, std),
                    NormalOrUniform::Uniform => {
                        let bound = 3f64.sqrt() * std;
                        uniform(rng, -bound, bound)
                    }
                }
            }
        }
    }
}

impl SimpleBackend for ParamStore {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        let mut inner = self.lock();
        if let Some(var) = inner.vars.get(name) {
            if var.shape() != &s {
                candle_core::bail!("parameter `{name}` has shape {:?}, model expects {:?}", var.dims(), s.dims());
            }
            let t = var.as_tensor().to_dtype(dtype)?.to_device(dev)?;
            return Ok(if inner.frozen { t.detach() } else { t });
        }
        if inner.mode == Mode::Strict {
            candle_core::bail!("missing parameter `{name}` (expected shape {:?})", s.dims());
        }
        let values = Self::sample(&mut inner.rng, &s, h);
        let t = Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        inner.vars.insert(name.to_string(), var);
        Ok(if inner.frozen { out.detach() } else { out })
    }

    fn get_unchecked(&self, name: &str, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        let inner = self.lock();
        match inner.vars.get(name) {
            Some(v) => v.as_tensor().to_dtype(dtype)?.to_device(dev),
            None => candle_core::bail!("missing parameter `{name}`"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.lock().vars.contains_key(name)
    }
}
