mod common;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use common::*;
use pase_core::fusion::{fuse, Fusion, FusionConfig, FusionScheme};
use pase_core::nn::ParamStore;
use proptest::prelude::*;
use rand::Rng;

fn random(r: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| r.random_range(-1.5..1.5)).collect::<Vec<f64>>(), shape, &Device::Cpu).unwrap()
}

fn randomised(cfg: &FusionConfig, seed: u64) -> (Fusion, BTreeMap<String, Tensor>) {
    let store = ParamStore::seeded(seed, DType::F64);
    let fusion = Fusion::new(cfg, store.var_builder()).unwrap();
    let mut r = rng(seed ^ 0xabc);
    let values: BTreeMap<String, Tensor> =
        store.tensors().iter().map(|(k, v)| (k.clone(), random(&mut r, v.dims()))).collect();
    store.assign(&values).unwrap();
    (fusion, store.tensors())
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.squeeze(0).unwrap().to_vec2().unwrap()
}

fn matvec(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    w.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn cross_attention_matches_oracle(seed in 0u64..100_000, t in 1usize..=4, d in 1usize..=8, da in 1usize..=8) {
        let cfg = FusionConfig { scheme: FusionScheme::CrossAttention, d_phonetic: d, d_acoustic: da, n_heads: 1, ffn_mult: 3 };
        let (ca, params) = randomised(&cfg, seed);
        let mut r = rng(seed);
        let p = random(&mut r, &[1, t, d]);
        let a = random(&mut r, &[1, t, da]);
        let got = rows(&ca.forward(&p, &a).unwrap());
        let want = cross_attention_block(&Params(params), &rows(&p), &rows(&a));
        for (g, w) in got.iter().flatten().zip(want.iter().flatten()) {
            prop_assert!((g - w).abs() <= 1e-6 * w.abs().max(1.0), "{g} vs {w}");
        }
    }

    #[test]
    fn add_and_film_match_their_definitions(seed in 0u64..100_000, t in 1usize..6, d in 1usize..10, da in 1usize..10) {
        let mut r = rng(seed);
        let p = random(&mut r, &[1, t, d]);
        let a = random(&mut r, &[1, t, da]);
        let cfg = FusionConfig { scheme: FusionScheme::Add, d_phonetic: d, d_acoustic: da, n_heads: 1, ffn_mult: 1 };
        let (add, params) = randomised(&cfg, seed);
        let w: Vec<Vec<f64>> = params["proj.weight"].to_vec2().unwrap();
        let got = rows(&add.forward(&p, &a).unwrap());
        for ((g, pr), ar) in got.iter().zip(rows(&p)).zip(rows(&a)) {
            for ((gv, pv), wv) in g.iter().zip(&pr).zip(matvec(&w, &ar)) {
                prop_assert!((gv - (pv + wv)).abs() < 1e-12);
            }
        }

        let cfg = FusionConfig { scheme: FusionScheme::FiLM, ..cfg };
        let (film, params) = randomised(&cfg, seed + 1);
        let gw: Vec<Vec<f64>> = params["gamma.weight"].to_vec2().unwrap();
        let gb: Vec<f64> = params["gamma.bias"].to_vec1().unwrap();
        let bw: Vec<Vec<f64>> = params["beta.weight"].to_vec2().unwrap();
        let bb: Vec<f64> = params["beta.bias"].to_vec1().unwrap();
        let got = rows(&film.forward(&p, &a).unwrap());
        for ((g, pr), ar) in got.iter().zip(rows(&p)).zip(rows(&a)) {
            let gamma = matvec(&gw, &ar);
            let beta = matvec(&bw, &ar);
            for c in 0..d {
                let want = (gamma[c] + gb[c]) * pr[c] + beta[c] + bb[c];
                prop_assert!((g[c] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn every_scheme_reports_its_width_and_checks_shapes() {
    for scheme in
        [FusionScheme::Add, FusionScheme::Cat, FusionScheme::CrossAttention, FusionScheme::FiLM, FusionScheme::None]
    {
        let cfg = FusionConfig { scheme, d_phonetic: 8, d_acoustic: 4, n_heads: 2, ffn_mult: 2 };
        let store = ParamStore::seeded(1, DType::F32);
        let f = Fusion::new(&cfg, store.var_builder()).unwrap();
        let p = ndarray::Array2::from_elem((3, 8), 0.5f32);
        let a = ndarray::Array2::from_elem((3, 4), -0.25f32);
        let out = fuse(&p, &a, &cfg, &f).unwrap();
        assert_eq!(out.matrix.dim(), (3, cfg.output_dim()), "{scheme:?}");
        assert!(fuse(&p, &ndarray::Array2::zeros((2, 4)), &cfg, &f).is_err());
    }
    let bad =
        FusionConfig { scheme: FusionScheme::CrossAttention, d_phonetic: 6, d_acoustic: 6, n_heads: 4, ffn_mult: 2 };
    assert!(bad.validate().is_err());
}
