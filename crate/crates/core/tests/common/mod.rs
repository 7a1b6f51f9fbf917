//! Independent reference implementations shared by the integration tests.
//! Everything here is written from the definitions with plain loops and
//! avoids calling into the crate under test.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::f64::consts::PI;

use candle_core::{DType, Tensor};
use pase_core::eval::EditCounts;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(actual: f64, expected: f64) -> f64 {
    (actual - expected).abs() / expected.abs().max(1e-300)
}

/// Relative error of two vectors: `|a - b| / max(|a|, |b|)`.
pub fn vec_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-300)
}

pub fn to_vec_f64(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
}

/// Values on a coarse dyadic grid: products and sums of a few hundred of
/// them are exact in f64, so summation order cannot matter.
pub fn dyadic(rng: &mut impl Rng, len: usize, steps: i32) -> Vec<f32> {
    (0..len).map(|_| rng.random_range(-steps..=steps) as f32 / steps as f32).collect()
}

/// Full linear convolution by scattering every input sample.
pub fn full_convolution(x: &[f32], h: &[f32]) -> Vec<f64> {
    let mut y = vec![0f64; x.len() + h.len() - 1];
    for (i, &xi) in x.iter().enumerate() {
        for (k, &hk) in h.iter().enumerate() {
            y[i + k] += xi as f64 * hk as f64;
        }
    }
    y
}

pub fn mean_power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

// ---------------------------------------------------------------------------
// Spectral features

fn htk_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn htk_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Log-mel spectrogram `[frames][n_mels]`: periodic Hann, centred frames with
/// zero padding, hop fft/4, magnitude with a 1e-9 floor inside the root,
/// triangular HTK filters on [0, fmax], natural log clamped at 1e-5.
pub fn log_mel(x: &[f64], fft: usize, n_mels: usize, sample_rate: f64, fmax: f64) -> Vec<Vec<f64>> {
    let hop = fft / 4;
    let pad = fft / 2;
    let n_frames = 1 + x.len() / hop;
    let bins = fft / 2 + 1;
    let window: Vec<f64> = (0..fft).map(|n| 0.5 * (1.0 - (2.0 * PI * n as f64 / fft as f64).cos())).collect();
    let cos_table: Vec<f64> = (0..fft).map(|r| (2.0 * PI * r as f64 / fft as f64).cos()).collect();
    let sin_table: Vec<f64> = (0..fft).map(|r| (2.0 * PI * r as f64 / fft as f64).sin()).collect();

    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| htk_hz(htk_mel(0.0) + (htk_mel(fmax) - htk_mel(0.0)) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let weight = |freq: f64, m: usize| {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let rising = (freq - lo) / (mid - lo);
        let falling = (hi - freq) / (hi - mid);
        rising.min(falling).max(0.0)
    };

    let mut out = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let frame: Vec<f64> = (0..fft)
            .map(|n| {
                let i = (t * hop + n) as isize - pad as isize;
                if i >= 0 && (i as usize) < x.len() {
                    x[i as usize] * window[n]
                } else {
                    0.0
                }
            })
            .collect();
        let mags: Vec<f64> = (0..bins)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, &v) in frame.iter().enumerate() {
                    let r = (k * n) % fft;
                    re += v * cos_table[r];
                    im -= v * sin_table[r];
                }
                (re * re + im * im + 1e-9).sqrt()
            })
            .collect();
        let row = (0..n_mels)
            .map(|m| {
                let e: f64 =
                    mags.iter().enumerate().map(|(k, &a)| a * weight(k as f64 * sample_rate / fft as f64, m)).sum();
                e.max(1e-5).ln()
            })
            .collect();
        out.push(row);
    }
    out
}

/// Mean over resolutions of the mean absolute log-mel difference.
pub fn reconstruction(pred: &[f64], target: &[f64], ffts: &[usize], n_mels: usize, sample_rate: f64, fmax: f64) -> f64 {
    let mut total = 0.0;
    for &fft in ffts {
        let a = log_mel(pred, fft, n_mels, sample_rate, fmax);
        let b = log_mel(target, fft, n_mels, sample_rate, fmax);
        let mut sum = 0.0;
        let mut n = 0usize;
        for (ra, rb) in a.iter().zip(&b) {
            for (va, vb) in ra.iter().zip(rb) {
                sum += (va - vb).abs();
                n += 1;
            }
        }
        total += sum / n as f64;
    }
    total / ffts.len() as f64
}

// ---------------------------------------------------------------------------
// Loss functions

pub fn kd(student: &[f64], teacher: &[f64]) -> f64 {
    student.iter().zip(teacher).map(|(s, t)| (s - t) * (s - t)).sum::<f64>() / student.len() as f64
}

/// Mean negative log-likelihood of `labels[r]` over the listed rows of a
/// row-major `[n, k]` logit matrix.
pub fn masked_nll(logits: &[f64], k: usize, labels: &[usize], rows: &[usize]) -> f64 {
    let mut total = 0.0;
    for &r in rows {
        let row = &logits[r * k..(r + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[labels[r]];
    }
    total / rows.len() as f64
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Least-squares GAN losses; `real[f][s]` holds the logits of
/// sub-discriminator `s` of family `f`.
pub fn lsgan(real: &[Vec<Vec<f64>>], fake: &[Vec<Vec<f64>>]) -> (f64, f64) {
    let mut disc = Vec::new();
    let mut gen = Vec::new();
    for (rf, ff) in real.iter().zip(fake) {
        if rf.is_empty() {
            continue;
        }
        let mut d = Vec::new();
        let mut g = Vec::new();
        for (r, f) in rf.iter().zip(ff) {
            let real_term = mean(&r.iter().map(|v| (1.0 - v).powi(2)).collect::<Vec<_>>());
            let fake_term = mean(&f.iter().map(|v| v * v).collect::<Vec<_>>());
            d.push(real_term + fake_term);
            g.push(mean(&f.iter().map(|v| (1.0 - v).powi(2)).collect::<Vec<_>>()));
        }
        disc.push(mean(&d));
        gen.push(mean(&g));
    }
    (mean(&disc), mean(&gen))
}

/// Mean over every feature map of its mean absolute difference.
pub fn feature_matching(real: &[Vec<f64>], fake: &[Vec<f64>]) -> f64 {
    let per_map: Vec<f64> = real
        .iter()
        .zip(fake)
        .map(|(r, f)| mean(&r.iter().zip(f).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>()))
        .collect();
    mean(&per_map)
}

// ---------------------------------------------------------------------------
// Cross-attention fusion block

type Matrix = Vec<Vec<f64>>;

pub struct Params(pub BTreeMap<String, Tensor>);

impl Params {
    fn vec(&self, name: &str) -> Vec<f64> {
        to_vec_f64(self.0.get(name).unwrap_or_else(|| panic!("missing parameter {name}")))
    }

    fn mat(&self, name: &str) -> Matrix {
        let t = self.0.get(name).unwrap_or_else(|| panic!("missing parameter {name}"));
        t.to_dtype(DType::F64).unwrap().to_vec2().unwrap()
    }

    pub fn has(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }
}

/// `x W^T (+ b)` for a `[out, in]` weight.
fn affine(x: &Matrix, w: &Matrix, b: Option<&[f64]>) -> Matrix {
    x.iter()
        .map(|row| {
            w.iter()
                .enumerate()
                .map(|(o, wo)| wo.iter().zip(row).map(|(a, b)| a * b).sum::<f64>() + b.map_or(0.0, |b| b[o]))
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Matrix, gain: &[f64], shift: &[f64]) -> Matrix {
    x.iter()
        .map(|row| {
            let mu = mean(row);
            let var = mean(&row.iter().map(|v| (v - mu).powi(2)).collect::<Vec<_>>());
            row.iter().enumerate().map(|(i, v)| (v - mu) / (var + 1e-5).sqrt() * gain[i] + shift[i]).collect()
        })
        .collect()
}

fn add(a: &Matrix, b: &Matrix) -> Matrix {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Single-head softmax attention, `[Tq][D]` output.
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Matrix {
    let d = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let scores: Vec<f64> =
                k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            (0..v[0].len()).map(|c| exps.iter().zip(v).map(|(e, vj)| e / z * vj[c]).sum()).collect()
        })
        .collect()
}

/// Pre-norm cross-attention block with one head: acoustic queries attend to
/// phonetic keys/values, then a GELU feed-forward, both residual. Parameter
/// names follow the `ca.*` layout.
pub fn cross_attention_block(p: &Params, phonetic: &Matrix, acoustic: &Matrix) -> Matrix {
    let base = if p.has("ca.query_proj.weight") {
        affine(acoustic, &p.mat("ca.query_proj.weight"), None)
    } else {
        acoustic.clone()
    };
    let q_in = layer_norm(&base, &p.vec("ca.norm_q.weight"), &p.vec("ca.norm_q.bias"));
    let kv_in = layer_norm(phonetic, &p.vec("ca.norm_kv.weight"), &p.vec("ca.norm_kv.bias"));
    let lin =
        |x: &Matrix, name: &str| affine(x, &p.mat(&format!("{name}.weight")), Some(&p.vec(&format!("{name}.bias"))));
    let ctx = attention(&lin(&q_in, "ca.attn.q_proj"), &lin(&kv_in, "ca.attn.k_proj"), &lin(&kv_in, "ca.attn.v_proj"));
    let x = add(&base, &lin(&ctx, "ca.attn.out_proj"));
    let h = lin(&layer_norm(&x, &p.vec("ca.norm_ffn.weight"), &p.vec("ca.norm_ffn.bias")), "ca.ffn_up");
    let h: Matrix = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    add(&x, &lin(&h, "ca.ffn_down"))
}

// ---------------------------------------------------------------------------
// Information measures

fn entropy(counts: impl Iterator<Item = u64>, total: f64) -> f64 {
    counts.filter(|&c| c > 0).map(|c| c as f64 / total).map(|p| -p * p.ln()).sum()
}

/// `(H(P) + H(U) - H(P, U)) / H(P)` for a row-major `[phones][units]` table.
pub fn pnmi(table: &[Vec<u64>]) -> f64 {
    let total: u64 = table.iter().flatten().sum();
    let total = total as f64;
    let rows = table.iter().map(|r| r.iter().sum::<u64>());
    let cols = (0..table[0].len()).map(|j| table.iter().map(|r| r[j]).sum::<u64>());
    let h_p = entropy(rows, total);
    let h_u = entropy(cols, total);
    let h_pu = entropy(table.iter().flatten().copied(), total);
    (h_p + h_u - h_pu) / h_p
}

// ---------------------------------------------------------------------------
// Alignments

/// Every monotone matching between `n` reference and `m` hypothesis
/// positions, as a bit mask over `i * m + j` plus the number of pairs.
/// Unmatched positions are deletions / insertions, matched unequal tokens
/// are substitutions; every alignment's counts arise from one of these.
pub fn all_matchings(n: usize, m: usize) -> Vec<(u64, u32)> {
    fn go(n: usize, m: usize, i0: usize, j0: usize, mask: u64, k: u32, out: &mut Vec<(u64, u32)>) {
        out.push((mask, k));
        for i in i0..n {
            for j in j0..m {
                go(n, m, i + 1, j + 1, mask | 1 << (i * m + j), k + 1, out);
            }
        }
    }
    let mut out = Vec::new();
    go(n, m, 0, 0, 0, 0, &mut out);
    out
}

/// Minimum-cost alignment, ties broken towards more substitutions, found by
/// scoring every matching.
pub fn exhaustive_alignment<T: PartialEq>(a: &[T], b: &[T], matchings: &[(u64, u32)]) -> EditCounts {
    let (n, m) = (a.len(), b.len());
    let mut equal_mask = 0u64;
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            if x == y {
                equal_mask |= 1 << (i * m + j);
            }
        }
    }
    let mut best: Option<(usize, usize, usize)> = None; // (cost, subs, equals)
    for &(mask, k) in matchings {
        let k = k as usize;
        let eq = (mask & equal_mask).count_ones() as usize;
        let subs = k - eq;
        let cost = subs + (n - k) + (m - k);
        let better = match best {
            None => true,
            Some((c, s, _)) => cost < c || (cost == c && subs > s),
        };
        if better {
            best = Some((cost, subs, eq));
        }
    }
    let (cost, subs, eq) = best.expect("the empty matching always exists");
    let k = subs + eq;
    let counts = EditCounts { substitutions: subs, deletions: n - k, insertions: m - k, equals: eq };
    debug_assert_eq!(counts.distance(), cost);
    counts
}

/// All sequences over `0..alphabet` of length at most `max_len`.
pub fn all_sequences(alphabet: u8, max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for t in 0..alphabet {
                let mut v: Vec<u8> = s.clone();
                v.push(t);
                next.push(v);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}
