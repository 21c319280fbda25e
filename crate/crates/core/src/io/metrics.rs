//! Image and normal-map error metrics.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry;

pub const PSNR_CAP: f64 = 99.0;

/// `10·log10(1/MSE)`, capped at 99 dB when the MSE is below 1e-10.
pub fn metric_psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    check_shapes(a, b)?;
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5).
pub fn metric_ssim(a: &[f64], b: &[f64], width: usize, height: usize, channels: usize) -> Result<f64> {
    check_shapes(a, b)?;
    if a.len() != width * height * channels {
        return Err(Error::invalid(format!(
            "{} values do not form a {width}×{height}×{channels} image",
            a.len()
        )));
    }
    Ok(geometry::ssim(a, b, width, height, channels))
}

/// Mean angular error in degrees between normal maps over `mask`.
pub fn metric_normal_mae(a: &[f64], b: &[f64], mask: &[bool]) -> Result<f64> {
    check_shapes(a, b)?;
    if a.len() != mask.len() * 3 {
        return Err(Error::invalid("normal maps need three values per mask entry"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        let u = Vector3::new(a[3 * p], a[3 * p + 1], a[3 * p + 2]);
        let v = Vector3::new(b[3 * p], b[3 * p + 1], b[3 * p + 2]);
        sum += u.dot(&v).clamp(-1.0, 1.0).acos().to_degrees();
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid("no valid pixels"));
    }
    Ok(sum / count as f64)
}

/// Per-channel least-squares scales `s_c` minimizing `Σ (s_c·pred − gt)²` over `mask`.
pub fn channel_scales(pred: &[f64], gt: &[f64], mask: &[bool], channels: usize) -> Result<Vec<f64>> {
    check_shapes(pred, gt)?;
    if pred.len() != mask.len() * channels {
        return Err(Error::invalid(format!("expected {channels} values per mask entry")));
    }
    let mut num = vec![0.0; channels];
    let mut den = vec![0.0; channels];
    for (p, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        for c in 0..channels {
            let (x, y) = (pred[p * channels + c], gt[p * channels + c]);
            num[c] += x * y;
            den[c] += x * x;
        }
    }
    Ok(num
        .iter()
        .zip(&den)
        .map(|(n, d)| if *d > 1e-12 { n / d } else { 1.0 })
        .collect())
}

/// PSNR over `mask` after rescaling each channel of `pred` by [`channel_scales`].
pub fn metric_scaled_psnr(pred: &[f64], gt: &[f64], mask: &[bool], channels: usize) -> Result<f64> {
    let s = channel_scales(pred, gt, mask, channels)?;
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (p, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        for c in 0..channels {
            a.push(pred[p * channels + c] * s[c]);
            b.push(gt[p * channels + c]);
        }
    }
    if a.is_empty() {
        return Err(Error::invalid("no valid pixels"));
    }
    metric_psnr(&a, &b)
}

fn check_shapes(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(format!("metric inputs have {} and {} values", a.len(), b.len())));
    }
    Ok(())
}
