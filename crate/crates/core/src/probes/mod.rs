//! Representation probes: phone-normalised mutual information, cosine
//! fidelity scores and layer orthogonality.

mod alignment;
mod kmeans;

pub use alignment::{read_alignments, synthetic_alignment, write_alignments, AlignmentEntry, AlignmentSet};
pub use kmeans::{assignment_inertia, kmeans_fit, stack_frames, Codebook, KMeansFit};

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::audio_sim::Waveform;
use crate::encoder::{EncoderActivations, FeatureMatrix, MaskSpec, SpeechEncoder};
use crate::error::{Error, Result};

/// Joint counts of reference phones (rows) and cluster units (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct ContingencyTable {
    pub counts: Array2<u64>,
}

impl ContingencyTable {
    pub fn new(counts: Array2<u64>) -> Result<Self> {
        if counts.sum() == 0 {
            return Err(Error::invalid("contingency table has no counts"));
        }
        Ok(Self { counts })
    }

    pub fn from_labels(phones: &[usize], units: &[usize], n_phones: usize, n_units: usize) -> Result<Self> {
        if phones.len() != units.len() {
            return Err(Error::shape(format!("{} phone labels against {} unit labels", phones.len(), units.len())));
        }
        let mut counts = Array2::<u64>::zeros((n_phones, n_units));
        for (&p, &u) in phones.iter().zip(units) {
            if p >= n_phones || u >= n_units {
                return Err(Error::invalid(format!("label pair ({p}, {u}) outside table {n_phones}x{n_units}")));
            }
            counts[[p, u]] += 1;
        }
        Self::new(counts)
    }
}

/// I(phone; unit) / H(phone) with natural logarithms.
pub fn pnmi(table: &ContingencyTable) -> Result<f64> {
    let c = &table.counts;
    let total = c.sum() as f64;
    if total == 0.0 {
        return Err(Error::invalid("contingency table has no counts"));
    }
    let row: Vec<f64> = c.sum_axis(Axis(1)).iter().map(|&v| v as f64 / total).collect();
    let col: Vec<f64> = c.sum_axis(Axis(0)).iter().map(|&v| v as f64 / total).collect();
    if row.iter().filter(|&&p| p > 0.0).count() < 2 {
        return Err(Error::invalid("PNMI is undefined for a table with a single phone label"));
    }
    let h_phone: f64 = -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
    let mut mi = 0.0;
    for ((i, j), &n) in c.indexed_iter() {
        if n == 0 {
            continue;
        }
        let p = n as f64 / total;
        mi += p * (p / (row[i] * col[j])).ln();
    }
    Ok((mi / h_phone).clamp(0.0, 1.0))
}

/// Mean and standard deviation of per-frame similarities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStats {
    pub mean: f64,
    pub std: f64,
    pub per_frame: Vec<f64>,
}

impl SimilarityStats {
    pub fn from_values(per_frame: Vec<f64>) -> Result<Self> {
        if per_frame.is_empty() {
            return Err(Error::invalid("no frames to aggregate"));
        }
        let n = per_frame.len() as f64;
        let mean = per_frame.iter().sum::<f64>() / n;
        let var = per_frame.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(Self { mean, std: var.sqrt(), per_frame })
    }

    /// Pools utterances by frame count (equivalent to concatenating frames).
    pub fn pool(parts: &[SimilarityStats]) -> Result<Self> {
        Self::from_values(parts.iter().flat_map(|p| p.per_frame.iter().copied()).collect())
    }

    pub fn n_frames(&self) -> usize {
        self.per_frame.len()
    }
}

fn cosine(a: ArrayView1<f32>, b: ArrayView1<f32>, frame: usize) -> Result<f64> {
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b.iter()) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateSignal(format!("zero-norm feature vector at frame {frame}")));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Per-frame cosine similarity between two equally shaped matrices.
pub fn frame_cosines(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<Vec<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("feature shapes {:?} and {:?} differ", a.dim(), b.dim())));
    }
    a.axis_iter(Axis(0)).zip(b.axis_iter(Axis(0))).enumerate().map(|(i, (x, y))| cosine(x, y, i)).collect()
}

/// Representation fidelity: frame-wise cosine between a model's and the
/// teacher's outputs on clean speech.
pub fn rfs(model_out: &FeatureMatrix, teacher_out: &FeatureMatrix) -> Result<SimilarityStats> {
    SimilarityStats::from_values(frame_cosines(model_out, teacher_out)?)
}

/// Cosine similarity between masked and unmasked final-layer outputs,
/// restricted to masked frames.
pub fn mrs_from_activations(
    masked: &FeatureMatrix,
    unmasked: &FeatureMatrix,
    mask: &MaskSpec,
) -> Result<SimilarityStats> {
    if mask.is_empty() {
        return Err(Error::EmptyMask("masked reconstruction score needs at least one masked frame".into()));
    }
    if masked.dim() != unmasked.dim() {
        return Err(Error::shape(format!("feature shapes {:?} and {:?} differ", masked.dim(), unmasked.dim())));
    }
    mask.check_range(masked.nrows())?;
    let values = mask
        .masked_frame_indices
        .iter()
        .map(|&i| cosine(masked.row(i), unmasked.row(i), i))
        .collect::<Result<Vec<_>>>()?;
    SimilarityStats::from_values(values)
}

/// Masked reconstruction score of `encoder` on one clean utterance.
pub fn mrs(encoder: &dyn SpeechEncoder, clean: &Waveform, mask: &MaskSpec) -> Result<SimilarityStats> {
    if mask.is_empty() {
        return Err(Error::EmptyMask("masked reconstruction score needs at least one masked frame".into()));
    }
    mask.check_range(encoder.frames_for(clean.len()))?;
    let n = encoder.n_layers();
    let plain = encoder.activations(clean, None)?;
    let masked = encoder.activations(clean, Some(mask))?;
    mrs_from_activations(masked.layer(n)?, plain.layer(n)?, mask)
}

/// Frame-wise cosine between two hidden states of the same pass.
pub fn layer_orthogonality(acts: &EncoderActivations, layer_a: usize, layer_b: usize) -> Result<SimilarityStats> {
    let a = acts.layer(layer_a)?;
    let b = acts.layer(layer_b)?;
    SimilarityStats::from_values(frame_cosines(a, b)?)
}

/// PNMI of k-means units fitted on `features` against frame-level phones.
/// Clustering and scoring use the same split.
pub fn pnmi_from_features(
    features: &[FeatureMatrix],
    phones: &[Vec<usize>],
    n_phones: usize,
    k: usize,
    rng: &mut impl rand::Rng,
    max_iters: usize,
) -> Result<f64> {
    if features.len() != phones.len() {
        return Err(Error::shape(format!("{} feature sets against {} alignments", features.len(), phones.len())));
    }
    let mut all_phones = Vec::new();
    let mut trimmed = Vec::with_capacity(features.len());
    for (f, p) in features.iter().zip(phones) {
        // Alignments and encoder frames may differ by one frame at the edges.
        let t = f.nrows().min(p.len());
        if f.nrows().abs_diff(p.len()) > 1 {
            return Err(Error::shape(format!("{} frames against {} phone labels", f.nrows(), p.len())));
        }
        trimmed.push(f.slice(ndarray::s![..t, ..]).to_owned());
        all_phones.extend_from_slice(&p[..t]);
    }
    let data = stack_frames(&trimmed)?;
    let fit = kmeans_fit(&data, k, rng, max_iters)?;
    let units = fit.codebook.assign(&data)?;
    pnmi(&ContingencyTable::from_labels(&all_phones, &units, n_phones, k)?)
}

/// One probe result as written by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub metric: String,
    pub mean: f64,
    pub std: Option<f64>,
    pub n_frames: usize,
    pub n_utterances: usize,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn mi_oracle(t: &[Vec<u64>]) -> f64 {
        let total: f64 = t.iter().flatten().map(|&v| v as f64).sum();
        let rows: Vec<f64> = t.iter().map(|r| r.iter().sum::<u64>() as f64 / total).collect();
        let cols: Vec<f64> = (0..t[0].len()).map(|j| t.iter().map(|r| r[j]).sum::<u64>() as f64 / total).collect();
        let mut mi = 0.0;
        for i in 0..t.len() {
            for j in 0..t[0].len() {
                if t[i][j] > 0 {
                    let p = t[i][j] as f64 / total;
                    mi += p * (p / (rows[i] * cols[j])).ln();
                }
            }
        }
        let h: f64 = -rows.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
        mi / h
    }

    #[test]
    fn pnmi_reference_cases() {
        let diag = ContingencyTable::new(array![[5, 0, 0], [0, 3, 0], [0, 0, 9]]).unwrap();
        assert!((pnmi(&diag).unwrap() - 1.0).abs() < 1e-12);
        let flat = ContingencyTable::new(Array2::from_elem((3, 4), 7)).unwrap();
        assert!(pnmi(&flat).unwrap().abs() < 1e-12);
        let t = ContingencyTable::new(array![[8, 2], [1, 9]]).unwrap();
        assert!((pnmi(&t).unwrap() - mi_oracle(&[vec![8, 2], vec![1, 9]])).abs() < 1e-12);
        let single = ContingencyTable::new(array![[4, 5], [0, 0]]).unwrap();
        assert!(pnmi(&single).is_err());
    }

    #[test]
    fn rfs_reference_cases() {
        let a = array![[1f32, 2.0], [3.0, -1.0]];
        let s = rfs(&a, &a).unwrap();
        assert!((s.mean - 1.0).abs() < 1e-12 && s.std < 1e-12);
        let neg = a.mapv(|v| -v);
        assert!((rfs(&a, &neg).unwrap().mean + 1.0).abs() < 1e-12);
        let z = array![[0f32, 0.0], [1.0, 1.0]];
        assert!(matches!(rfs(&a, &z), Err(Error::DegenerateSignal(_))));
    }

    #[test]
    fn mrs_requires_a_mask() {
        let a = array![[1f32, 2.0]];
        assert!(matches!(mrs_from_activations(&a, &a, &MaskSpec::empty()), Err(Error::EmptyMask(_))));
    }

    proptest! {
        #[test]
        fn pnmi_bounded_and_invariant(cells in proptest::collection::vec(0u64..20, 12), scale in 1u64..5) {
            let t = Array2::from_shape_vec((3, 4), cells).unwrap();
            prop_assume!(t.sum_axis(Axis(1)).iter().filter(|&&v| v > 0).count() >= 2);
            let base = pnmi(&ContingencyTable::new(t.clone()).unwrap()).unwrap();
            prop_assert!((0.0..=1.0).contains(&base));
            let scaled = pnmi(&ContingencyTable::new(t.mapv(|v| v * scale)).unwrap()).unwrap();
            prop_assert!((base - scaled).abs() < 1e-12);
            let mut permuted = t.clone();
            permuted.invert_axis(Axis(0));
            permuted.invert_axis(Axis(1));
            let p = pnmi(&ContingencyTable::new(permuted).unwrap()).unwrap();
            prop_assert!((base - p).abs() < 1e-12);
        }

        #[test]
        fn cosine_scores_ignore_positive_rescaling(
            vals in proptest::collection::vec(0.1f32..3.0, 12),
            scales in proptest::collection::vec(0.1f32..10.0, 4),
        ) {
            let a = Array2::from_shape_vec((4, 3), vals.clone()).unwrap();
            let b = Array2::from_shape_vec((4, 3), vals.iter().rev().copied().collect()).unwrap();
            let mut scaled = a.clone();
            for (mut row, &s) in scaled.axis_iter_mut(Axis(0)).zip(&scales) {
                row.mapv_inplace(|v| v * s);
            }
            let x = rfs(&a, &b).unwrap();
            let y = rfs(&scaled, &b).unwrap();
            prop_assert!((x.mean - y.mean).abs() < 1e-6);
        }
    }
}
