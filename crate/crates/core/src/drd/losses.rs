use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::encoder::{FeatureMatrix, MaskSpec};
use crate::error::{Error, Result};

/// Mean squared error over every element.
pub fn kd_loss(student: &Tensor, teacher: &Tensor) -> Result<Tensor> {
    if student.dims() != teacher.dims() {
        return Err(Error::shape(format!(
            "student features {:?} vs teacher features {:?}",
            student.dims(),
            teacher.dims()
        )));
    }
    Ok((student - teacher)?.sqr()?.mean_all()?)
}

pub fn kd_loss_value(student: &FeatureMatrix, teacher: &FeatureMatrix) -> Result<f64> {
    if student.dim() != teacher.dim() {
        return Err(Error::shape(format!(
            "student features {:?} vs teacher features {:?}",
            student.dim(),
            teacher.dim()
        )));
    }
    let n = student.len() as f64;
    Ok(student.iter().zip(teacher.iter()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / n)
}

/// Mean cross-entropy of `logits` (`[N, K]`) against `labels` over the given
/// rows only.
pub fn masked_cross_entropy(logits: &Tensor, labels: &[usize], rows: &[usize]) -> Result<Tensor> {
    let (n, k) = logits.dims2()?;
    if rows.is_empty() {
        return Err(Error::EmptyMask("masked prediction loss needs at least one masked frame".into()));
    }
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} logit rows", labels.len())));
    }
    if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
        return Err(Error::MaskOutOfRange { index: bad, frames: n });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} outside codebook of size {k}")));
    }
    let dev = logits.device();
    let idx = Tensor::from_vec(rows.iter().map(|&r| r as u32).collect::<Vec<_>>(), rows.len(), dev)?;
    let picked = logits.index_select(&idx, 0)?;
    let targets: Vec<u32> = rows.iter().map(|&r| labels[r] as u32).collect();
    let targets = Tensor::from_vec(targets, (rows.len(), 1), dev)?;
    let logp = candle_nn::ops::log_softmax(&picked, D::Minus1)?;
    Ok(logp.gather(&targets, 1)?.mean_all()?.neg()?)
}

/// Masked-prediction loss for one utterance: `logits` is `[T, K]` and only
/// frames in `mask` contribute.
pub fn ssl_loss(logits: &Tensor, labels: &[usize], mask: &MaskSpec) -> Result<Tensor> {
    let t = logits.dim(0)?;
    mask.check_range(t)?;
    let rows: Vec<usize> = mask.masked_frame_indices.iter().copied().collect();
    masked_cross_entropy(logits, labels, &rows)
}

/// Per-step loss values. `total` is the unweighted sum of present terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub kd: Option<f64>,
    pub ssl: Option<f64>,
    pub total: f64,
}

pub fn combine_losses(kd: Option<f64>, ssl: Option<f64>) -> Result<LossBreakdown> {
    if kd.is_none() && ssl.is_none() {
        return Err(Error::invalid("at least one loss component is required"));
    }
    Ok(LossBreakdown { kd, ssl, total: kd.unwrap_or(0.0) + ssl.unwrap_or(0.0) })
}

/// Rows of `x` scaled to unit L2 norm.
pub(crate) fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use ndarray::Array2;

    fn to_f64(t: &Tensor) -> Result<f64> {
        Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }

    #[test]
    fn kd_closed_forms() {
        let a = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f32 - 5.0);
        assert_eq!(kd_loss_value(&a, &a).unwrap(), 0.0);
        let b = a.mapv(|v| v + 0.5);
        assert!((kd_loss_value(&a, &b).unwrap() - 0.25).abs() < 1e-12);
        let c = Array2::<f32>::zeros((4, 3));
        assert!(kd_loss_value(&a, &c).is_err());
    }

    #[test]
    fn ssl_closed_forms() {
        let dev = Device::Cpu;
        let uniform = Tensor::zeros((6, 500), DType::F64, &dev).unwrap();
        let mask = MaskSpec::from_indices([1, 4]);
        let l = to_f64(&ssl_loss(&uniform, &[0; 6], &mask).unwrap()).unwrap();
        assert!((l - 500f64.ln()).abs() < 1e-12);
        assert!((l - 6.2146).abs() < 1e-4);

        let mut v = vec![0f64; 3 * 4];
        for (t, row) in v.chunks_mut(4).enumerate() {
            row[t % 4] = 20.0;
        }
        let sharp = Tensor::from_vec(v, (3, 4), &dev).unwrap();
        let l = to_f64(&ssl_loss(&sharp, &[0, 1, 2], &MaskSpec::from_indices([0, 1, 2])).unwrap()).unwrap();
        assert!(l < 1e-8);
        assert!(matches!(ssl_loss(&sharp, &[0, 1, 2], &MaskSpec::empty()), Err(Error::EmptyMask(_))));
    }

    #[test]
    fn combine_cases() {
        assert_eq!(combine_losses(Some(0.5), None).unwrap().total, 0.5);
        assert_eq!(combine_losses(Some(0.5), Some(0.25)).unwrap().total, 0.75);
        assert_eq!(combine_losses(Some(0.0), Some(0.0)).unwrap().total, 0.0);
        assert!(combine_losses(None, None).is_err());
    }
}
