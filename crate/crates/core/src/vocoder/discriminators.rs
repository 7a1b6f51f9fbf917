use candle_core::{Module, Tensor};
use candle_nn::{Conv1d, Conv1dConfig, Init, VarBuilder};
use serde::{Deserialize, Serialize};

use super::stft::Stft;
use crate::error::{Error, Result};
use crate::nn::layers::{conv1d, uniform_bound};

const LEAK: f64 = 0.1;

fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&(x * LEAK)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub periods: Vec<usize>,
    /// Channel widths of the per-period conv stack; every layer but the last
    /// downsamples time by `mpd_stride`.
    pub mpd_channels: Vec<usize>,
    pub mpd_kernel: usize,
    pub mpd_stride: usize,
    pub stft_sizes: Vec<usize>,
    pub band_channels: usize,
    /// Frequency bands as fractions of the bin range.
    pub bands: Vec<(f64, f64)>,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            periods: vec![2, 3, 5, 7, 11],
            mpd_channels: vec![32, 128, 512, 1024, 1024],
            mpd_kernel: 5,
            mpd_stride: 3,
            stft_sizes: vec![2048, 1024, 512],
            band_channels: 32,
            bands: vec![(0.0, 0.1), (0.1, 0.25), (0.25, 0.5), (0.5, 0.75), (0.75, 1.0)],
        }
    }
}

impl DiscriminatorConfig {
    pub fn toy() -> Self {
        Self { mpd_channels: vec![4, 8, 16], band_channels: 4, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.periods.contains(&0) || self.mpd_channels.is_empty() || self.mpd_kernel == 0 || self.mpd_stride == 0 {
            return Err(Error::invalid("MPD needs positive periods, kernel, stride and at least one layer"));
        }
        if self.stft_sizes.iter().any(|&f| f < 4 || f % 4 != 0) || self.band_channels == 0 {
            return Err(Error::invalid("band discriminator sizes must be multiples of 4"));
        }
        let mut prev = 0.0;
        for &(lo, hi) in &self.bands {
            if lo != prev || hi <= lo || hi > 1.0 {
                return Err(Error::invalid("bands must tile [0, 1] in increasing order"));
            }
            prev = hi;
        }
        if prev != 1.0 {
            return Err(Error::invalid("bands must end at 1.0"));
        }
        Ok(())
    }
}

/// Bin ranges `[start, end)` of each band for an `fft`-point transform. The
/// ranges partition `0..fft / 2 + 1`.
pub fn band_edges(fft: usize, bands: &[(f64, f64)]) -> Vec<(usize, usize)> {
    let bins = fft / 2 + 1;
    bands.iter().map(|&(lo, hi)| ((lo * bins as f64) as usize, (hi * bins as f64) as usize)).collect()
}

/// Logits plus intermediate activations of one sub-discriminator. The last
/// feature map is the logit map itself.
#[derive(Debug, Clone)]
pub struct SubOutput {
    pub logits: Tensor,
    pub features: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorOutput {
    pub mpd: Vec<SubOutput>,
    pub mbmsd: Vec<SubOutput>,
}

impl DiscriminatorOutput {
    pub fn families(&self) -> [&[SubOutput]; 2] {
        [&self.mpd, &self.mbmsd]
    }
}

#[derive(Debug, Clone)]
struct PeriodBranch {
    period: usize,
    convs: Vec<Conv1d>,
    post: Conv1d,
}

impl PeriodBranch {
    /// Folds `[B, L]` into `[B * p, 1, ceil(L / p)]` (zero padded to a multiple
    /// of the period) so that 1-D convolutions act as `(k, 1)` 2-D kernels.
    fn fold(&self, x: &Tensor) -> Result<Tensor> {
        let (b, len) = x.dims2()?;
        let p = self.period;
        let width = len.div_ceil(p);
        let x = x.pad_with_zeros(1, 0, width * p - len)?;
        Ok(x.reshape((b, width, p))?.transpose(1, 2)?.reshape((b * p, 1, width))?)
    }

    fn forward(&self, x: &Tensor) -> Result<SubOutput> {
        let mut h = self.fold(x)?;
        let mut features = Vec::with_capacity(self.convs.len() + 1);
        for c in &self.convs {
            h = leaky_relu(&c.forward(&h)?)?;
            features.push(h.clone());
        }
        let logits = self.post.forward(&h)?;
        features.push(logits.clone());
        Ok(SubOutput { logits, features })
    }
}

/// Multi-period discriminator.
#[derive(Debug, Clone)]
pub struct Mpd {
    branches: Vec<PeriodBranch>,
}

impl Mpd {
    pub fn new(cfg: &DiscriminatorConfig, vb: VarBuilder) -> Result<Self> {
        let k = cfg.mpd_kernel;
        let branches = cfg
            .periods
            .iter()
            .map(|&p| {
                let vb = vb.pp(format!("p{p}"));
                let mut convs = Vec::new();
                let mut prev = 1;
                let last = cfg.mpd_channels.len() - 1;
                for (i, &ch) in cfg.mpd_channels.iter().enumerate() {
                    let stride = if i == last { 1 } else { cfg.mpd_stride };
                    let cc = Conv1dConfig { padding: k / 2, stride, ..Default::default() };
                    convs.push(conv1d(prev, ch, k, cc, true, vb.pp(format!("convs.{i}")))?);
                    prev = ch;
                }
                let cc = Conv1dConfig { padding: 1, ..Default::default() };
                let post = conv1d(prev, 1, 3, cc, true, vb.pp("post"))?;
                Ok(PeriodBranch { period: p, convs, post })
            })
            .collect::<Result<_>>()?;
        Ok(Self { branches })
    }

    /// Feature maps per branch, including the logit map.
    pub fn layers_per_branch(&self) -> usize {
        self.branches.first().map(|b| b.convs.len() + 1).unwrap_or(0)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Vec<SubOutput>> {
        let len = x.dim(1)?;
        let max_p = self.branches.iter().map(|b| b.period).max().unwrap_or(1);
        if len < max_p {
            return Err(Error::invalid(format!("{len} samples is shorter than the largest period {max_p}")));
        }
        self.branches.iter().map(|b| b.forward(x)).collect()
    }

    /// Folded `(rows, width)` layout for a period: rows = `B * p`.
    pub fn folded_width(len: usize, period: usize) -> usize {
        len.div_ceil(period)
    }
}

/// 2-D convolution on `[B, C, T, F]` maps with "same" zero padding and an
/// optional frequency stride of 2. Written as shifted slices and one matrix
/// product, which differentiates far faster than the generic kernels.
#[derive(Debug, Clone)]
struct BandConv {
    weight: Tensor,
    bias: Tensor,
    kt: usize,
    kf: usize,
    freq_stride: bool,
}

impl BandConv {
    fn new(cin: usize, cout: usize, kf: usize, freq_stride: bool, vb: VarBuilder) -> Result<Self> {
        let kt = 3;
        let weight = vb.get_with_hints((cout, cin, kt, kf), "weight", uniform_bound(cin * kt * kf))?;
        let bias = vb.get_with_hints(cout, "bias", Init::Const(0.0))?;
        Ok(Self { weight, bias, kt, kf, freq_stride })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, t, f) = x.dims4()?;
        let (pt, pf) = (self.kt / 2, self.kf / 2);
        let padded = x.pad_with_zeros(2, pt, pt)?.pad_with_zeros(3, pf, pf)?;
        let mut cols = Vec::with_capacity(self.kt * self.kf);
        for i in 0..self.kt {
            let rows = padded.narrow(2, i, t)?;
            for j in 0..self.kf {
                cols.push(rows.narrow(3, j, f)?.unsqueeze(2)?);
            }
        }
        // [B, C, kt*kf, T, F] flattened so the contraction index is (c, i, j),
        // matching the weight layout.
        let k = self.kt * self.kf;
        let cols = Tensor::cat(&cols, 2)?.reshape((b, c * k, t * f))?;
        let cout = self.weight.dim(0)?;
        let w = self.weight.reshape((cout, c * k))?;
        let y = w.broadcast_matmul(&cols)?.broadcast_add(&self.bias.reshape((1, cout, 1))?)?;
        let y = y.reshape((b, cout, t, f))?;
        if !self.freq_stride {
            return Ok(y);
        }
        let y = y.pad_with_zeros(3, 0, f % 2)?;
        let half = f.div_ceil(2);
        Ok(y.reshape((b, cout, t, half, 2))?.narrow(4, 0, 1)?.squeeze(4)?)
    }
}

#[derive(Debug, Clone)]
struct Resolution {
    stft: Stft,
    edges: Vec<(usize, usize)>,
    bands: Vec<Vec<BandConv>>,
    post: BandConv,
}

impl Resolution {
    fn new(fft: usize, cfg: &DiscriminatorConfig, vb: VarBuilder) -> Result<Self> {
        let ch = cfg.band_channels;
        let make = BandConv::new;
        let edges = band_edges(fft, &cfg.bands);
        let bands = (0..edges.len())
            .map(|i| {
                let vb = vb.pp(format!("band{i}"));
                Ok(vec![
                    make(2, ch, 9, false, vb.pp("0"))?,
                    make(ch, ch, 9, true, vb.pp("1"))?,
                    make(ch, ch, 9, true, vb.pp("2"))?,
                    make(ch, ch, 9, true, vb.pp("3"))?,
                    make(ch, ch, 3, false, vb.pp("4"))?,
                ])
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            stft: Stft::new(fft, fft / 4, vb.device())?,
            edges,
            bands,
            post: make(ch, 1, 3, false, vb.pp("post"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<SubOutput> {
        let (re, im) = self.stft.centered(x)?;
        let spec = Tensor::stack(&[re, im], 1)?;
        let mut features = Vec::new();
        let mut outs = Vec::with_capacity(self.bands.len());
        for (&(lo, hi), convs) in self.edges.iter().zip(&self.bands) {
            let mut h = spec.narrow(3, lo, hi - lo)?;
            for c in convs {
                h = leaky_relu(&c.forward(&h)?)?;
                features.push(h.clone());
            }
            outs.push(h);
        }
        let logits = self.post.forward(&Tensor::cat(&outs, 3)?)?;
        features.push(logits.clone());
        Ok(SubOutput { logits, features })
    }
}

/// Multi-band multi-scale STFT discriminator.
#[derive(Debug, Clone)]
pub struct Mbmsd {
    resolutions: Vec<Resolution>,
}

impl Mbmsd {
    pub fn new(cfg: &DiscriminatorConfig, vb: VarBuilder) -> Result<Self> {
        let resolutions =
            cfg.stft_sizes.iter().map(|&f| Resolution::new(f, cfg, vb.pp(format!("r{f}")))).collect::<Result<_>>()?;
        Ok(Self { resolutions })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Vec<SubOutput>> {
        if x.dim(1)? == 0 {
            return Err(Error::invalid("empty waveform"));
        }
        self.resolutions.iter().map(|r| r.forward(x)).collect()
    }
}

/// Both discriminator families.
#[derive(Debug, Clone)]
pub struct Discriminators {
    pub mpd: Mpd,
    pub mbmsd: Mbmsd,
}

impl Discriminators {
    pub fn new(cfg: &DiscriminatorConfig, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { mpd: Mpd::new(cfg, vb.pp("mpd"))?, mbmsd: Mbmsd::new(cfg, vb.pp("mbmsd"))? })
    }

    /// `[B, L]` waveform batch to all logits and feature maps.
    pub fn forward(&self, x: &Tensor) -> Result<DiscriminatorOutput> {
        Ok(DiscriminatorOutput { mpd: self.mpd.forward(x)?, mbmsd: self.mbmsd.forward(x)? })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn bands_partition_the_bins() {
        for fft in [512usize, 1024, 2048] {
            let e = band_edges(fft, &DiscriminatorConfig::default().bands);
            assert_eq!(e[0].0, 0);
            assert_eq!(e.last().unwrap().1, fft / 2 + 1);
            for w in e.windows(2) {
                assert_eq!(w[0].1, w[1].0);
            }
        }
    }

    #[test]
    fn band_conv_matches_reference_convolution() {
        let dev = Device::Cpu;
        let store = ParamStore::seeded(2, DType::F32);
        let bc = BandConv::new(2, 3, 9, false, store.var_builder()).unwrap();
        let x = Tensor::randn(0f32, 1.0, (1, 2, 5, 12), &dev).unwrap();
        let ours = bc.forward(&x).unwrap();
        let nchw = x.pad_with_zeros(2, 1, 1).unwrap().pad_with_zeros(3, 4, 4).unwrap();
        let reference = nchw
            .conv2d(&bc.weight, 0, 1, 1, 1)
            .unwrap()
            .broadcast_add(&bc.bias.reshape((1, 3, 1, 1)).unwrap())
            .unwrap();
        let diff = (ours - &reference).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-5, "{diff}");

        let strided = BandConv { freq_stride: true, ..bc.clone() }.forward(&x).unwrap();
        assert_eq!(strided.dims(), &[1, 3, 5, 6]);
        let every_other = reference.narrow(3, 2, 1).unwrap();
        let got = strided.narrow(3, 1, 1).unwrap();
        let d = (got - every_other).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(d < 1e-5);
    }

    #[test]
    fn fold_width_and_structure() {
        assert_eq!(Mpd::folded_width(64_000, 5), 12_800);
        let cfg = DiscriminatorConfig::toy();
        let store = ParamStore::seeded(1, DType::F32);
        let d = Discriminators::new(&cfg, store.var_builder()).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 1003), &Device::Cpu).unwrap();
        let a = d.forward(&x).unwrap();
        let b = d.forward(&x).unwrap();
        assert_eq!(a.mpd.len(), 5);
        assert_eq!(a.mbmsd.len(), 3);
        for s in &a.mpd {
            assert_eq!(s.features.len(), d.mpd.layers_per_branch());
            assert_eq!(s.features.len(), cfg.mpd_channels.len() + 1);
        }
        for (r, fft) in a.mbmsd.iter().zip([2048usize, 1024, 512]) {
            assert_eq!(r.logits.dim(2).unwrap(), 1 + 1003 / (fft / 4));
        }
        for (x, y) in a.mpd.iter().zip(&b.mpd).chain(a.mbmsd.iter().zip(&b.mbmsd)) {
            let dx: Vec<f32> = x.logits.flatten_all().unwrap().to_vec1().unwrap();
            let dy: Vec<f32> = y.logits.flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(dx, dy);
        }
        assert!(d.forward(&Tensor::zeros((1, 7), DType::F32, &Device::Cpu).unwrap()).is_err());
    }
}
