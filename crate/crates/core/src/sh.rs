//! Real spherical harmonics up to degree 3.
//!
//! Basis functions are written as polynomials in the Cartesian components of a
//! unit direction, using the sign convention common to splatting renderers
//! (`Y_1,-1 = -c·y`, `Y_1,0 = c·z`, `Y_1,1 = -c·x`). Coefficients are indexed
//! `l*l + l + m`.

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub const MAX_DEGREE: usize = 3;

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Value of the constant basis function `Y_00 = 1 / (2√π)`.
pub const fn eval_dc() -> f64 {
    C0
}

/// Degree-indexed basis description.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShBasis {
    pub degree: usize,
}

impl ShBasis {
    pub fn new(degree: usize) -> Result<Self> {
        if degree > MAX_DEGREE {
            return Err(Error::invalid(format!(
                "SH degree {degree} exceeds maximum {MAX_DEGREE}"
            )));
        }
        Ok(Self { degree })
    }

    pub fn len(&self) -> usize {
        num_coeffs(self.degree)
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[inline]
pub const fn num_coeffs(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Degree of a coefficient vector of length `len`, if it is a perfect square.
pub fn degree_for_len(len: usize) -> Option<usize> {
    (0..=MAX_DEGREE).find(|&d| num_coeffs(d) == len)
}

/// Evaluates the basis at `dir`, checking that it is a unit vector.
pub fn sh_eval(degree: usize, dir: &Vector3<f64>) -> Result<Vec<f64>> {
    ShBasis::new(degree)?;
    let n = dir.norm();
    if !n.is_finite() || n == 0.0 {
        return Err(Error::invalid("SH direction has zero or non-finite length"));
    }
    if (n - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!(
            "SH direction must be unit length, got |d| = {n}"
        )));
    }
    let mut out = vec![0.0; num_coeffs(degree)];
    eval_into(degree, dir, &mut out);
    Ok(out)
}

/// Unchecked evaluation into `out` (length at least `(degree+1)^2`).
pub fn eval_into(degree: usize, d: &Vector3<f64>, out: &mut [f64]) {
    let (x, y, z) = (d.x, d.y, d.z);
    out[0] = C0;
    if degree < 1 {
        return;
    }
    out[1] = -C1 * y;
    out[2] = C1 * z;
    out[3] = -C1 * x;
    if degree < 2 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    out[4] = C2[0] * xy;
    out[5] = C2[1] * yz;
    out[6] = C2[2] * (2.0 * zz - xx - yy);
    out[7] = C2[3] * xz;
    out[8] = C2[4] * (xx - yy);
    if degree < 3 {
        return;
    }
    out[9] = C3[0] * y * (3.0 * xx - yy);
    out[10] = C3[1] * xy * z;
    out[11] = C3[2] * y * (4.0 * zz - xx - yy);
    out[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    out[13] = C3[4] * x * (4.0 * zz - xx - yy);
    out[14] = C3[5] * z * (xx - yy);
    out[15] = C3[6] * x * (xx - 3.0 * yy);
}

/// Cartesian gradient of each basis polynomial, `out[k] = ∇Y_k(d)`.
///
/// The gradient is of the polynomial extension; callers that differentiate
/// through a normalization must project out the radial component.
pub fn eval_grad_into(degree: usize, d: &Vector3<f64>, out: &mut [Vector3<f64>]) {
    let (x, y, z) = (d.x, d.y, d.z);
    out[0] = Vector3::zeros();
    if degree < 1 {
        return;
    }
    out[1] = Vector3::new(0.0, -C1, 0.0);
    out[2] = Vector3::new(0.0, 0.0, C1);
    out[3] = Vector3::new(-C1, 0.0, 0.0);
    if degree < 2 {
        return;
    }
    out[4] = Vector3::new(C2[0] * y, C2[0] * x, 0.0);
    out[5] = Vector3::new(0.0, C2[1] * z, C2[1] * y);
    out[6] = Vector3::new(-2.0 * C2[2] * x, -2.0 * C2[2] * y, 4.0 * C2[2] * z);
    out[7] = Vector3::new(C2[3] * z, 0.0, C2[3] * x);
    out[8] = Vector3::new(2.0 * C2[4] * x, -2.0 * C2[4] * y, 0.0);
    if degree < 3 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    out[9] = Vector3::new(C3[0] * 6.0 * x * y, C3[0] * (3.0 * xx - 3.0 * yy), 0.0);
    out[10] = Vector3::new(C3[1] * y * z, C3[1] * x * z, C3[1] * x * y);
    out[11] = Vector3::new(
        C3[2] * (-2.0 * x * y),
        C3[2] * (4.0 * zz - xx - 3.0 * yy),
        C3[2] * 8.0 * y * z,
    );
    out[12] = Vector3::new(
        C3[3] * (-6.0 * x * z),
        C3[3] * (-6.0 * y * z),
        C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
    );
    out[13] = Vector3::new(
        C3[4] * (4.0 * zz - 3.0 * xx - yy),
        C3[4] * (-2.0 * x * y),
        C3[4] * 8.0 * x * z,
    );
    out[14] = Vector3::new(C3[5] * 2.0 * x * z, C3[5] * (-2.0 * y * z), C3[5] * (xx - yy));
    out[15] = Vector3::new(C3[6] * (3.0 * xx - 3.0 * yy), C3[6] * (-6.0 * x * y), 0.0);
}

/// Reconstructs `Σ f_k Y_k(d)` for a scalar coefficient vector.
pub fn reconstruct(coeffs: &[f64], d: &Vector3<f64>) -> f64 {
    let degree = degree_for_len(coeffs.len()).expect("coefficient length must be (deg+1)^2");
    let mut basis = [0.0; 16];
    eval_into(degree, d, &mut basis);
    coeffs.iter().zip(basis.iter()).map(|(c, b)| c * b).sum()
}

#[inline]
pub fn band_of(index: usize) -> usize {
    (index as f64).sqrt().floor() as usize
}

/// Clamped-cosine convolution weights `Â_l` (π, 2π/3, π/4, 0).
pub fn cosine_lobe_weight(band: usize) -> f64 {
    use std::f64::consts::PI;
    match band {
        0 => PI,
        1 => 2.0 * PI / 3.0,
        2 => PI / 4.0,
        _ => 0.0,
    }
}

/// Irradiance `∫ L(ω) max(0, ω·n) dω` from radiance SH coefficients.
pub fn irradiance(coeffs: &[f64], n: &Vector3<f64>) -> f64 {
    let degree = degree_for_len(coeffs.len()).expect("coefficient length must be (deg+1)^2");
    let mut basis = [0.0; 16];
    eval_into(degree, n, &mut basis);
    coeffs
        .iter()
        .enumerate()
        .map(|(k, c)| cosine_lobe_weight(band_of(k)) * c * basis[k])
        .sum()
}

/// Rotates the DC and linear bands of `coeffs` by the rotation `rot`.
///
/// Returns coefficients `g` with `Σ g_k Y_k(R d) = Σ f_k Y_k(d)`.
pub fn rotate_linear(coeffs: &[f64; 4], rot: &nalgebra::Matrix3<f64>) -> [f64; 4] {
    // The linear band is C1 * (w · d) with w = (-f3, -f1, f2).
    let w = Vector3::new(-coeffs[3], -coeffs[1], coeffs[2]);
    let wr = rot * w;
    [coeffs[0], -wr.y, wr.z, -wr.x]
}
