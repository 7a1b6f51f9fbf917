//! Training plumbing shared by the encoder, vocoder and discriminators.

mod checkpoint;
pub mod layers;
mod optim;
mod params;
mod schedule;

pub use checkpoint::Checkpoint;
pub use optim::{AdamW, AdamWConfig};
pub use params::ParamStore;
pub use schedule::WarmupCosine;

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};

/// Converts a scalar loss tensor to f64, failing on NaN/inf.
pub fn finite_scalar(t: &Tensor, step: usize, what: &str) -> Result<f64> {
    let v = t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !v.is_finite() {
        return Err(Error::NonFiniteLoss { step, detail: format!("{what} = {v}") });
    }
    Ok(v)
}

/// Mean of the first and last `window` values, used to compare the start and
/// end of a noisy loss curve.
pub fn smoothed_endpoints(values: &[f64], window: usize) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let w = window.clamp(1, values.len());
    let head = values[..w].iter().sum::<f64>() / w as f64;
    let tail = values[values.len() - w..].iter().sum::<f64>() / w as f64;
    Some((head, tail))
}
