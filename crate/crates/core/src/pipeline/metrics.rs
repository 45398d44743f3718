use ndarray::{Array2, Zip};

use crate::error::Result;
use crate::fourier::{inverse_2d, CenterShift};
use crate::grid::{ensure_shape, ComplexGrid, RealImage, SamplingMask};
use crate::sampler::{apply_mask, merge_channels, split_channels};

/// Zero-filled reconstruction `|IFT(K ∘ M)|`.
///
/// `k` is an unshifted spectrum (DC at the origin) and `mask` is DC-centered,
/// as produced by the mask generators.
pub fn undersampled_image(k: &ComplexGrid, mask: &SamplingMask) -> Result<RealImage> {
    ensure_shape(k.dim(), mask.dim())?;
    zero_filled(k, &mask.unshifted())
}

/// As [`undersampled_image`] with the mask already in the unshifted layout.
pub(crate) fn zero_filled(k: &ComplexGrid, mask_unshifted: &SamplingMask) -> Result<RealImage> {
    let masked = apply_mask(&split_channels(k), mask_unshifted)?;
    let z = inverse_2d(&merge_channels(&masked));
    Ok(RealImage::from_array(z.magnitude()))
}

/// `(1/N)‖a − b‖²_F`.
pub fn mse(a: &RealImage, b: &RealImage) -> Result<f64> {
    ensure_shape(a.dim(), b.dim())?;
    let mut acc = 0.0;
    Zip::from(a.pixels()).and(b.pixels()).for_each(|&x, &y| acc += (x - y) * (x - y));
    Ok(acc / a.pixels().len() as f64)
}

/// Mean squared errors at or below this count as an exact match (RMS error
/// of 1e-10, the round-off level of a full-sampling round trip).
pub const EXACT_MSE: f64 = 1e-20;

/// `10·log10(peak²/MSE)`; an exact match ([`EXACT_MSE`]) gives `f64::INFINITY`.
pub fn psnr(a: &RealImage, b: &RealImage, peak: f64) -> Result<f64> {
    let e = mse(a, b)?;
    if e <= EXACT_MSE {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / e).log10())
}

/// PSNR as printed in reports: `inf` for exact matches, otherwise 4 decimals.
pub fn format_psnr(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

fn half_sq_dist(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    0.5 * a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
}

/// `λ₁·½‖x_u − y‖² + λ₂·½‖x_rec − y‖²`.
pub fn joint_loss(
    x_u: &RealImage,
    x_rec: &RealImage,
    y: &RealImage,
    lambda1: f64,
    lambda2: f64,
) -> Result<f64> {
    ensure_shape(y.dim(), x_u.dim())?;
    ensure_shape(y.dim(), x_rec.dim())?;
    Ok(lambda1 * half_sq_dist(x_u.pixels(), y.pixels())
        + lambda2 * half_sq_dist(x_rec.pixels(), y.pixels()))
}
