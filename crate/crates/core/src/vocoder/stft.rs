//! Short-time Fourier transforms expressed as matrix products so that every
//! stage is differentiable.

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Frames produced by a centred analysis (`fft / 2` zeros on each side).
pub fn centered_frame_count(len: usize, hop: usize) -> usize {
    1 + len / hop
}

/// The same constant matrix held in both float widths.
#[derive(Debug, Clone)]
struct Basis {
    f32: Tensor,
    f64: Tensor,
}

impl Basis {
    fn new(values: Vec<f64>, shape: (usize, usize), dev: &Device) -> Result<Self> {
        let f64 = Tensor::from_vec(values, shape, dev)?;
        Ok(Self { f32: f64.to_dtype(DType::F32)?, f64 })
    }

    fn get(&self, dtype: DType) -> Result<&Tensor> {
        match dtype {
            DType::F32 => Ok(&self.f32),
            DType::F64 => Ok(&self.f64),
            other => Err(Error::invalid(format!("spectral ops support f32/f64, got {other:?}"))),
        }
    }
}

fn frame_indices(n_frames: usize, fft: usize, hop: usize, dev: &Device) -> Result<Tensor> {
    let idx: Vec<u32> = (0..n_frames).flat_map(|t| (0..fft).map(move |n| (t * hop + n) as u32)).collect();
    Ok(Tensor::from_vec(idx, n_frames * fft, dev)?)
}

/// Windowed analysis transform returning real and imaginary parts.
#[derive(Debug, Clone)]
pub struct Stft {
    fft: usize,
    hop: usize,
    cos: Basis,
    sin: Basis,
}

impl Stft {
    pub fn new(fft: usize, hop: usize, device: &Device) -> Result<Self> {
        if fft == 0 || hop == 0 || fft % 2 != 0 {
            return Err(Error::invalid(format!("STFT needs an even fft size and positive hop, got {fft}/{hop}")));
        }
        let bins = fft / 2 + 1;
        let w = hann_window(fft);
        let mut c = vec![0f64; fft * bins];
        let mut s = vec![0f64; fft * bins];
        for n in 0..fft {
            for k in 0..bins {
                let a = 2.0 * PI * (k * n % fft) as f64 / fft as f64;
                c[n * bins + k] = w[n] * a.cos();
                s[n * bins + k] = -w[n] * a.sin();
            }
        }
        Ok(Self { fft, hop, cos: Basis::new(c, (fft, bins), device)?, sin: Basis::new(s, (fft, bins), device)? })
    }

    pub fn fft_size(&self) -> usize {
        self.fft
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn bins(&self) -> usize {
        self.fft / 2 + 1
    }

    fn analyse(&self, padded: &Tensor, n_frames: usize) -> Result<(Tensor, Tensor)> {
        let b = padded.dim(0)?;
        let idx = frame_indices(n_frames, self.fft, self.hop, padded.device())?;
        let frames = padded.index_select(&idx, 1)?.reshape((b, n_frames, self.fft))?;
        let dt = frames.dtype();
        Ok((frames.broadcast_matmul(self.cos.get(dt)?)?, frames.broadcast_matmul(self.sin.get(dt)?)?))
    }

    /// `[B, L]` to `[B, 1 + L / hop, bins]`, frames centred on multiples of
    /// the hop with zero padding at the edges.
    pub fn centered(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let len = x.dim(1)?;
        let padded = x.pad_with_zeros(1, self.fft / 2, self.fft / 2)?;
        self.analyse(&padded, centered_frame_count(len, self.hop))
    }

    /// `[B, L]` to `[B, L / hop, bins]`, frame `t` centred on the middle of
    /// hop segment `t`. This is the exact inverse layout of [`Istft`].
    pub fn same(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let len = x.dim(1)?;
        let n_frames = len / self.hop;
        if n_frames == 0 || self.fft < self.hop || (self.fft - self.hop) % 2 != 0 {
            return Err(Error::invalid(format!("cannot frame {len} samples at fft {} / hop {}", self.fft, self.hop)));
        }
        let pad = (self.fft - self.hop) / 2;
        let padded = x.pad_with_zeros(1, pad, pad + self.hop)?;
        self.analyse(&padded, n_frames)
    }

    /// Magnitude `sqrt(re^2 + im^2 + eps)`, the epsilon keeping the gradient
    /// finite on silence.
    pub fn magnitude(&self, x: &Tensor) -> Result<Tensor> {
        let (re, im) = self.centered(x)?;
        Ok(((re.sqr()? + im.sqr()?)? + MAG_EPS)?.sqrt()?)
    }
}

pub const MAG_EPS: f64 = 1e-9;

/// Inverse transform with Hann synthesis window, overlap-add and
/// window-envelope normalisation. `T` frames give exactly `T * hop` samples.
#[derive(Debug, Clone)]
pub struct Istft {
    fft: usize,
    hop: usize,
    window_sq: Vec<f64>,
    cos: Basis,
    sin: Basis,
}

impl Istft {
    pub fn new(fft: usize, hop: usize, device: &Device) -> Result<Self> {
        if hop == 0 || fft < hop || fft % hop != 0 || (fft - hop) % 2 != 0 {
            return Err(Error::invalid(format!(
                "iSTFT needs fft ({fft}) to be a multiple of hop ({hop}) with an even difference"
            )));
        }
        let bins = fft / 2 + 1;
        let w = hann_window(fft);
        let mut c = vec![0f64; bins * fft];
        let mut s = vec![0f64; bins * fft];
        for k in 0..bins {
            let weight = if k == 0 || k == fft / 2 { 1.0 } else { 2.0 } / fft as f64;
            for n in 0..fft {
                let a = 2.0 * PI * (k * n % fft) as f64 / fft as f64;
                c[k * fft + n] = weight * a.cos() * w[n];
                s[k * fft + n] = -weight * a.sin() * w[n];
            }
        }
        Ok(Self {
            fft,
            hop,
            window_sq: w.iter().map(|v| v * v).collect(),
            cos: Basis::new(c, (bins, fft), device)?,
            sin: Basis::new(s, (bins, fft), device)?,
        })
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn fft_size(&self) -> usize {
        self.fft
    }

    fn envelope(&self, n_frames: usize, dev: &Device) -> Result<Tensor> {
        let len = (n_frames - 1) * self.hop + self.fft;
        let mut env = vec![0f64; len];
        for t in 0..n_frames {
            for (n, w) in self.window_sq.iter().enumerate() {
                env[t * self.hop + n] += w;
            }
        }
        let inv: Vec<f64> = env.iter().map(|&e| if e > 1e-11 { 1.0 / e } else { 1.0 }).collect();
        Ok(Tensor::from_vec(inv, (1, len), dev)?)
    }

    /// Real/imaginary `[B, T, bins]` spectra to `[B, T * hop]` samples.
    pub fn from_complex(&self, re: &Tensor, im: &Tensor) -> Result<Tensor> {
        let (b, t, bins) = re.dims3()?;
        if bins != self.fft / 2 + 1 || im.dims() != re.dims() {
            return Err(Error::shape(format!("spectrum {:?} does not match fft {}", re.dims(), self.fft)));
        }
        if t == 0 {
            return Err(Error::invalid("iSTFT needs at least one frame"));
        }
        let dt = re.dtype();
        let frames = (re.broadcast_matmul(self.cos.get(dt)?)? + im.broadcast_matmul(self.sin.get(dt)?)?)?;
        let r = self.fft / self.hop;
        let frames = frames.reshape((b, t, r, self.hop))?;
        let mut acc: Option<Tensor> = None;
        for j in 0..r {
            let part = frames.narrow(2, j, 1)?.squeeze(2)?.pad_with_zeros(1, j, r - 1 - j)?;
            acc = Some(match acc {
                Some(a) => (a + part)?,
                None => part,
            });
        }
        let ola = acc.expect("at least one overlap term").reshape((b, (t + r - 1) * self.hop))?;
        let ola = ola.broadcast_mul(&self.envelope(t, re.device())?.to_dtype(ola.dtype())?)?;
        Ok(ola.narrow(1, (self.fft - self.hop) / 2, t * self.hop)?)
    }

    pub fn from_polar(&self, magnitude: &Tensor, phase: &Tensor) -> Result<Tensor> {
        self.from_complex(&(magnitude * phase.cos()?)?, &(magnitude * phase.sin()?)?)
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-scale filters without area normalisation, laid out
/// `[bins, n_mels]`.
pub fn mel_filterbank(fft: usize, n_mels: usize, sample_rate: u32, fmin: f64, fmax: f64) -> Vec<f64> {
    let bins = fft / 2 + 1;
    let nyq = sample_rate as f64 / 2.0;
    let freqs: Vec<f64> = (0..bins).map(|i| nyq * i as f64 / (bins - 1) as f64).collect();
    let (m0, m1) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let pts: Vec<f64> = (0..n_mels + 2).map(|i| mel_to_hz(m0 + (m1 - m0) * i as f64 / (n_mels + 1) as f64)).collect();
    let mut fb = vec![0f64; bins * n_mels];
    for (i, &f) in freqs.iter().enumerate() {
        for m in 0..n_mels {
            let down = (f - pts[m]) / (pts[m + 1] - pts[m]);
            let up = (pts[m + 2] - f) / (pts[m + 2] - pts[m + 1]);
            fb[i * n_mels + m] = down.min(up).max(0.0);
        }
    }
    fb
}

pub const LOG_CLAMP: f64 = 1e-5;

/// Log-mel spectrogram at one resolution (hop = fft / 4).
#[derive(Debug, Clone)]
pub struct LogMel {
    stft: Stft,
    filters: Basis,
}

impl LogMel {
    pub fn new(fft: usize, n_mels: usize, sample_rate: u32, fmax: f64, device: &Device) -> Result<Self> {
        let fb = mel_filterbank(fft, n_mels, sample_rate, 0.0, fmax);
        Ok(Self { stft: Stft::new(fft, fft / 4, device)?, filters: Basis::new(fb, (fft / 2 + 1, n_mels), device)? })
    }

    /// `[B, L]` to `[B, frames, n_mels]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mag = self.stft.magnitude(x)?;
        let mel = mag.broadcast_matmul(self.filters.get(mag.dtype())?)?;
        Ok(mel.maximum(LOG_CLAMP)?.log()?)
    }
}

/// Multi-resolution log-mel L1 distance.
#[derive(Debug, Clone)]
pub struct MelLoss {
    resolutions: Vec<LogMel>,
}

impl MelLoss {
    pub fn new(ffts: &[usize], n_mels: usize, sample_rate: u32, fmax: f64, device: &Device) -> Result<Self> {
        if ffts.is_empty() {
            return Err(Error::invalid("reconstruction loss needs at least one resolution"));
        }
        let resolutions =
            ffts.iter().map(|&f| LogMel::new(f, n_mels, sample_rate, fmax, device)).collect::<Result<_>>()?;
        Ok(Self { resolutions })
    }

    /// Standard configuration: 2048/1024/512, 80 mels up to 8 kHz.
    pub fn standard(device: &Device) -> Result<Self> {
        Self::new(&[2048, 1024, 512], 80, 16_000, 8000.0, device)
    }

    pub fn forward(&self, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
        if pred.dims() != target.dims() {
            return Err(Error::shape(format!("prediction {:?} vs target {:?}", pred.dims(), target.dims())));
        }
        let mut total: Option<Tensor> = None;
        for r in &self.resolutions {
            let d = (r.forward(pred)? - r.forward(target)?)?.abs()?.mean_all()?;
            total = Some(match total {
                Some(t) => (t + d)?,
                None => d,
            });
        }
        Ok((total.expect("non-empty") / self.resolutions.len() as f64)?)
    }
}
