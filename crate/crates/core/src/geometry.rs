//! Geometry-stage losses: color reconstruction, depth-derived pseudo-normals,
//! the normal penalty and total-variation smoothing.
//!
//! Image-shaped inputs are flat row-major `H×W×C` slices. Every loss has a
//! `*_grad` companion returning the value and the gradient with respect to its
//! (first) input.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_WEIGHT: f64 = 0.2;
pub const TV_EPS: f64 = 1e-8;

/// Per-stage loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub color: f64,
    pub normal_penalty: f64,
    pub normal_tv: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalNorm {
    /// Sum of absolute component differences.
    #[default]
    L1,
    /// Euclidean length of the difference.
    L2,
}

impl std::str::FromStr for NormalNorm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "l1" => Ok(NormalNorm::L1),
            "l2" => Ok(NormalNorm::L2),
            o => Err(format!("unknown normal norm '{o}' (l1|l2)")),
        }
    }
}

/// Camera-space pseudo-normals from a depth map.
///
/// Pixels are back-projected to camera space, tangents are central
/// differences of neighboring points (one-sided next to masked pixels), and the
/// normal is their cross product turned to face the camera. Masked pixels and
/// pixels without a usable tangent pair get `(0, 0, 0)`.
pub fn depth_to_pseudo_normal(depth: &[f64], mask: &[bool], cam: &Camera) -> Vec<f64> {
    let (w, h) = (cam.width, cam.height);
    assert_eq!(depth.len(), w * h);
    assert_eq!(mask.len(), w * h);
    let point = |x: usize, y: usize| -> Vector3<f64> {
        cam.pixel_dir_camera(x as f64 + 0.5, y as f64 + 0.5) * depth[y * w + x]
    };
    let usable = |x: usize, y: usize| mask[y * w + x] && depth[y * w + x].is_finite();
    let mut out = vec![0.0; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            if !usable(x, y) {
                continue;
            }
            let center = point(x, y);
            let left = (x > 0 && usable(x - 1, y)).then(|| point(x - 1, y));
            let right = (x + 1 < w && usable(x + 1, y)).then(|| point(x + 1, y));
            let up = (y > 0 && usable(x, y - 1)).then(|| point(x, y - 1));
            let down = (y + 1 < h && usable(x, y + 1)).then(|| point(x, y + 1));
            let tx = match (left, right) {
                (Some(l), Some(r)) => r - l,
                (None, Some(r)) => r - center,
                (Some(l), None) => center - l,
                (None, None) => continue,
            };
            let ty = match (up, down) {
                (Some(u), Some(d)) => d - u,
                (None, Some(d)) => d - center,
                (Some(u), None) => center - u,
                (None, None) => continue,
            };
            let n = tx.cross(&ty);
            let len = n.norm();
            if !(len > 1e-12) || !len.is_finite() {
                continue;
            }
            let mut n = n / len;
            if n.dot(&center) > 0.0 {
                n = -n;
            }
            out[3 * (y * w + x)..3 * (y * w + x) + 3].copy_from_slice(n.as_slice());
        }
    }
    out
}

/// Rotates camera-space normals to world space (zero vectors stay zero).
pub fn normals_to_world(normals: &[f64], cam: &Camera) -> Vec<f64> {
    let rt = cam.rotation().transpose();
    let mut out = vec![0.0; normals.len()];
    for (o, n) in out.chunks_mut(3).zip(normals.chunks(3)) {
        let v = rt * Vector3::new(n[0], n[1], n[2]);
        o.copy_from_slice(v.as_slice());
    }
    out
}

fn nonzero(v: &[f64]) -> bool {
    v.iter().any(|x| *x != 0.0)
}

/// Mean per-pixel distance between rendered and pseudo normals, with
/// gradients with respect to both maps.
///
/// Pixels outside `mask` or with a zero pseudo-normal are ignored.
pub fn loss_normal_penalty_grad(
    rendered: &[f64],
    pseudo: &[f64],
    mask: &[bool],
    norm: NormalNorm,
) -> (f64, Vec<f64>, Vec<f64>) {
    assert_eq!(rendered.len(), pseudo.len());
    assert_eq!(rendered.len(), mask.len() * 3);
    let valid: Vec<usize> = (0..mask.len())
        .filter(|&p| mask[p] && nonzero(&pseudo[3 * p..3 * p + 3]))
        .collect();
    let mut gr = vec![0.0; rendered.len()];
    let mut gp = vec![0.0; rendered.len()];
    if valid.is_empty() {
        return (0.0, gr, gp);
    }
    let inv = 1.0 / valid.len() as f64;
    let mut total = 0.0;
    for &p in &valid {
        let d: [f64; 3] = std::array::from_fn(|k| rendered[3 * p + k] - pseudo[3 * p + k]);
        match norm {
            NormalNorm::L1 => {
                for k in 0..3 {
                    total += d[k].abs();
                    let s = if d[k] > 0.0 {
                        1.0
                    } else if d[k] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    gr[3 * p + k] = s * inv;
                    gp[3 * p + k] = -s * inv;
                }
            }
            NormalNorm::L2 => {
                let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                total += len;
                if len > 0.0 {
                    for k in 0..3 {
                        gr[3 * p + k] = d[k] / len * inv;
                        gp[3 * p + k] = -d[k] / len * inv;
                    }
                }
            }
        }
    }
    (total * inv, gr, gp)
}

pub fn loss_normal_penalty(rendered: &[f64], pseudo: &[f64], mask: &[bool], norm: NormalNorm) -> f64 {
    loss_normal_penalty_grad(rendered, pseudo, mask, norm).0
}

/// Isotropic total variation `Σ_u sqrt(|Δ_right|² + |Δ_down|² + ε) − sqrt(ε)`.
///
/// Differences are taken only between pixels that are both in `mask`;
/// channels are summed inside the square root. Returns the value, the gradient
/// and the number of masked pixels.
pub fn loss_tv_grad(field: &[f64], width: usize, height: usize, channels: usize, mask: &[bool]) -> (f64, Vec<f64>, usize) {
    assert_eq!(field.len(), width * height * channels);
    assert_eq!(mask.len(), width * height);
    let mut grad = vec![0.0; field.len()];
    let mut total = 0.0;
    let mut count = 0;
    let base = TV_EPS.sqrt();
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            if !mask[p] {
                continue;
            }
            count += 1;
            let right = (x + 1 < width && mask[p + 1]).then_some(p + 1);
            let down = (y + 1 < height && mask[p + width]).then_some(p + width);
            let mut s = 0.0;
            for q in [right, down].into_iter().flatten() {
                for c in 0..channels {
                    let d = field[q * channels + c] - field[p * channels + c];
                    s += d * d;
                }
            }
            let r = (s + TV_EPS).sqrt();
            total += r - base;
            for q in [right, down].into_iter().flatten() {
                for c in 0..channels {
                    let d = field[q * channels + c] - field[p * channels + c];
                    grad[q * channels + c] += d / r;
                    grad[p * channels + c] -= d / r;
                }
            }
        }
    }
    (total, grad, count)
}

pub fn loss_tv(field: &[f64], width: usize, height: usize, channels: usize, mask: &[bool]) -> f64 {
    loss_tv_grad(field, width, height, channels, mask).0
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable zero-padded "same" filtering of one channel plane.
fn blur(plane: &[f64], width: usize, height: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = SSIM_WINDOW as isize / 2;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                let xx = x as isize + k as isize - r;
                if xx >= 0 && (xx as usize) < width {
                    acc += wk * plane[y * width + xx as usize];
                }
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                let yy = y as isize + k as isize - r;
                if yy >= 0 && (yy as usize) < height {
                    acc += wk * tmp[yy as usize * width + x];
                }
            }
            out[y * width + x] = acc;
        }
    }
    out
}

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean SSIM over all pixels and channels and its gradient with respect to `a`.
pub fn ssim_grad(a: &[f64], b: &[f64], width: usize, height: usize, channels: usize) -> (f64, Vec<f64>) {
    assert_eq!(a.len(), b.len());
    let win = gaussian_window();
    let n = width * height;
    let inv = 1.0 / (n * channels) as f64;
    let mut grad = vec![0.0; a.len()];
    let mut total = 0.0;
    for c in 0..channels {
        let pa: Vec<f64> = (0..n).map(|p| a[p * channels + c]).collect();
        let pb: Vec<f64> = (0..n).map(|p| b[p * channels + c]).collect();
        let sq = |v: &[f64], u: &[f64]| v.iter().zip(u).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mu_a = blur(&pa, width, height, &win);
        let mu_b = blur(&pb, width, height, &win);
        let e_aa = blur(&sq(&pa, &pa), width, height, &win);
        let e_bb = blur(&sq(&pb, &pb), width, height, &win);
        let e_ab = blur(&sq(&pa, &pb), width, height, &win);
        let mut g_mu = vec![0.0; n];
        let mut g_eaa = vec![0.0; n];
        let mut g_eab = vec![0.0; n];
        for p in 0..n {
            let (ma, mb) = (mu_a[p], mu_b[p]);
            let va = e_aa[p] - ma * ma;
            let vb = e_bb[p] - mb * mb;
            let cov = e_ab[p] - ma * mb;
            let a1 = 2.0 * ma * mb + SSIM_C1;
            let a2 = 2.0 * cov + SSIM_C2;
            let b1 = ma * ma + mb * mb + SSIM_C1;
            let b2 = va + vb + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            g_mu[p] = inv * s * (2.0 * mb / a1 - 2.0 * mb / a2 - 2.0 * ma / b1 + 2.0 * ma / b2);
            g_eaa[p] = -inv * s / b2;
            g_eab[p] = inv * 2.0 * s / a2;
        }
        let g1 = blur(&g_mu, width, height, &win);
        let g2 = blur(&g_eaa, width, height, &win);
        let g3 = blur(&g_eab, width, height, &win);
        for p in 0..n {
            grad[p * channels + c] = g1[p] + 2.0 * pa[p] * g2[p] + pb[p] * g3[p];
        }
    }
    (total * inv, grad)
}

pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize, channels: usize) -> f64 {
    ssim_grad(a, b, width, height, channels).0
}

/// `0.8·L1 + 0.2·(1 − SSIM)` and its gradient with respect to `rendered`.
pub fn loss_color_grad(
    rendered: &[f64],
    target: &[f64],
    width: usize,
    height: usize,
    channels: usize,
) -> Result<(f64, Vec<f64>)> {
    if rendered.len() != target.len() || rendered.len() != width * height * channels {
        return Err(Error::invalid(format!(
            "loss_color: shape mismatch ({} vs {} for {width}x{height}x{channels})",
            rendered.len(),
            target.len()
        )));
    }
    let inv = 1.0 / rendered.len() as f64;
    let mut l1 = 0.0;
    let mut grad = vec![0.0; rendered.len()];
    for (i, (r, t)) in rendered.iter().zip(target).enumerate() {
        let d = r - t;
        l1 += d.abs();
        grad[i] = (1.0 - SSIM_WEIGHT) * inv * if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
    }
    let (s, gs) = ssim_grad(rendered, target, width, height, channels);
    for (g, v) in grad.iter_mut().zip(gs) {
        *g -= SSIM_WEIGHT * v;
    }
    Ok(((1.0 - SSIM_WEIGHT) * l1 * inv + SSIM_WEIGHT * (1.0 - s), grad))
}

pub fn loss_color(rendered: &[f64], target: &[f64], width: usize, height: usize, channels: usize) -> Result<f64> {
    Ok(loss_color_grad(rendered, target, width, height, channels)?.0)
}

/// Mean absolute error and its gradient (the shading loss of the decomposition stage).
pub fn loss_l1_grad(rendered: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let inv = 1.0 / rendered.len().max(1) as f64;
    let mut total = 0.0;
    let grad = rendered
        .iter()
        .zip(target)
        .map(|(r, t)| {
            let d = r - t;
            total += d.abs();
            inv * if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 }
        })
        .collect();
    (total * inv, grad)
}
