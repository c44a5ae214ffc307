//! Peak signal-to-noise ratio.

use crate::error::Result;
use crate::tensor::{ensure_same_shape, Real, Tensor};

/// Values reported for (near) perfect reconstructions.
pub const PSNR_CAP_DB: f64 = 100.0;

/// MSE below this floor is reported as [`PSNR_CAP_DB`].
pub const MSE_FLOOR: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Psnr {
    pub decibels: f64,
    /// Set when the MSE fell below [`MSE_FLOOR`].
    pub capped: bool,
}

impl Psnr {
    pub fn from_mse(mse: f64, peak: f64) -> Psnr {
        if mse < MSE_FLOOR {
            return Psnr {
                decibels: PSNR_CAP_DB,
                capped: true,
            };
        }
        let db = 10.0 * (peak * peak / mse).log10();
        Psnr {
            decibels: db.min(PSNR_CAP_DB),
            capped: db >= PSNR_CAP_DB,
        }
    }
}

fn clipped_mse<T: Real>(a: &[T], b: &[T], peak: f64) -> f64 {
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.as_f64().clamp(0.0, peak) - y.as_f64().clamp(0.0, peak);
            d * d
        })
        .sum();
    total / a.len() as f64
}

/// `10 log10(peak^2 / MSE)` over every value of the tensors, after clipping
/// both into `[0, peak]`.
pub fn psnr<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, peak: f64) -> Result<Psnr> {
    ensure_same_shape("psnr", target.shape(), pred.shape())?;
    Ok(Psnr::from_mse(clipped_mse(pred.data(), target.data(), peak), peak))
}

/// PSNR of every batch item separately.
pub fn psnr_per_sample<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, peak: f64) -> Result<Vec<Psnr>> {
    ensure_same_shape("psnr", target.shape(), pred.shape())?;
    Ok((0..pred.shape().batch)
        .map(|b| Psnr::from_mse(clipped_mse(pred.sample(b), target.sample(b), peak), peak))
        .collect())
}

/// Arithmetic mean in dB, the usual "average PSNR" over a test set.
pub fn mean_psnr(values: &[Psnr]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().map(|p| p.decibels).sum::<f64>() / values.len() as f64
}
