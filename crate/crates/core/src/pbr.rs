//! Physically based shading: Cook-Torrance with GGX, Schlick and
//! height-correlated Smith terms, split-sum specular from a prefiltered
//! lat-long environment and a precomputed environment-BRDF table, and diffuse
//! lighting blended between the environment and baked indirect light by the
//! ambient occlusion.
//!
//! Lat-long convention: row `y` spans polar angle `θ ∈ [yπ/H, (y+1)π/H]`
//! measured from +Z, column `x` spans azimuth `φ ∈ [2πx/W, 2π(x+1)/W]` from +X
//! toward +Y.

use std::f64::consts::PI;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bake::{ambient_occlusion, irradiance_rgb, read_file, write_file, VolumeGrid};
use crate::error::{Error, Result};
use crate::math::{reflect, sigmoid, softplus, softplus_inv};
use crate::par;
use crate::sh;

pub const MIN_ALPHA: f64 = 1e-3;
pub const DENOM_EPS: f64 = 1e-4;
pub const DIELECTRIC_F0: f64 = 0.04;
pub const LUT_MAGIC: &[u8; 8] = b"GSIRLUT1";
pub const DEFAULT_LUT_RES: usize = 64;
pub const DEFAULT_LUT_SAMPLES: usize = 4096;
pub const DEFAULT_LEVELS: usize = 5;
pub const ENV_SH_DEGREE: usize = 2;

#[inline]
pub fn roughness_to_alpha(rho: f64) -> f64 {
    (rho * rho).max(MIN_ALPHA)
}

/// GGX normal distribution.
#[inline]
pub fn ggx_d(n_h: f64, alpha: f64) -> f64 {
    let a2 = alpha * alpha;
    let t = n_h * n_h * (a2 - 1.0) + 1.0;
    a2 / (PI * t * t)
}

/// Schlick Fresnel for one channel.
#[inline]
pub fn schlick(f0: f64, v_h: f64) -> f64 {
    f0 + (1.0 - f0) * (1.0 - v_h.clamp(0.0, 1.0)).powi(5)
}

/// Height-correlated Smith masking-shadowing `G2`.
#[inline]
pub fn smith_g(n_v: f64, n_l: f64, alpha: f64) -> f64 {
    let a2 = alpha * alpha;
    let gv = n_l * (n_v * n_v * (1.0 - a2) + a2).sqrt();
    let gl = n_v * (n_l * n_l * (1.0 - a2) + a2).sqrt();
    2.0 * n_v * n_l / (gv + gl).max(DENOM_EPS * DENOM_EPS)
}

#[inline]
pub fn base_reflectance(albedo: f64, metallic: f64) -> f64 {
    DIELECTRIC_F0 * (1.0 - metallic) + albedo * metallic
}

/// Cook-Torrance BRDF. Returns zero outside the upper hemisphere of `n`.
pub fn brdf_eval(
    n: &Vector3<f64>,
    v: &Vector3<f64>,
    l: &Vector3<f64>,
    albedo: [f64; 3],
    roughness: f64,
    metallic: f64,
) -> [f64; 3] {
    let (n_v, n_l) = (n.dot(v), n.dot(l));
    if n_v <= 0.0 || n_l <= 0.0 {
        return [0.0; 3];
    }
    let h = (v + l).normalize();
    let alpha = roughness_to_alpha(roughness);
    let dg = ggx_d(n.dot(&h).max(0.0), alpha) * smith_g(n_v, n_l, alpha)
        / (4.0 * n_l.max(DENOM_EPS) * n_v.max(DENOM_EPS));
    let v_h = v.dot(&h);
    albedo.map(|a| (1.0 - metallic) * a / PI + dg * schlick(base_reflectance(a, metallic), v_h))
}

/// GGX half-vector sample about +Z.
fn sample_ggx_half(u1: f64, u2: f64, alpha: f64) -> Vector3<f64> {
    let phi = 2.0 * PI * u1;
    let a2 = alpha * alpha;
    let cos_t = ((1.0 - u2) / (1.0 + (a2 - 1.0) * u2)).sqrt();
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    Vector3::new(sin_t * phi.cos(), sin_t * phi.sin(), cos_t)
}

/// Split-sum environment BRDF: `∫ f_spec cos dl = F0·scale + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct BrdfLut {
    pub res: usize,
    /// Indexed `j·res + i` for `n·v` node `i` and roughness node `j`.
    pub scale: Vec<f64>,
    pub bias: Vec<f64>,
}

impl BrdfLut {
    pub fn nov_node(&self, i: usize) -> f64 {
        lut_nov(i, self.res)
    }

    pub fn roughness_node(&self, j: usize) -> f64 {
        j as f64 / (self.res - 1) as f64
    }

    pub fn entry(&self, i: usize, j: usize) -> (f64, f64) {
        let k = j * self.res + i;
        (self.scale[k], self.bias[k])
    }

    /// Bilinear lookup; also returns the derivatives of (scale, bias) in roughness.
    pub fn lookup(&self, n_v: f64, roughness: f64) -> ((f64, f64), (f64, f64)) {
        let m = (self.res - 1) as f64;
        let fi = n_v.clamp(0.0, 1.0) * m;
        let fj = roughness.clamp(0.0, 1.0) * m;
        let i0 = (fi.floor() as usize).min(self.res - 2);
        let j0 = (fj.floor() as usize).min(self.res - 2);
        let (ti, tj) = (fi - i0 as f64, fj - j0 as f64);
        let at = |t: &[f64], i: usize, j: usize| t[j * self.res + i];
        let interp = |t: &[f64]| {
            let lo = (1.0 - ti) * at(t, i0, j0) + ti * at(t, i0 + 1, j0);
            let hi = (1.0 - ti) * at(t, i0, j0 + 1) + ti * at(t, i0 + 1, j0 + 1);
            ((1.0 - tj) * lo + tj * hi, (hi - lo) * m)
        };
        let (s, ds) = interp(&self.scale);
        let (b, db) = interp(&self.bias);
        let inside = (0.0..=1.0).contains(&roughness);
        ((s, b), if inside { (ds, db) } else { (0.0, 0.0) })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut planes = self.scale.clone();
        planes.extend_from_slice(&self.bias);
        write_file(path, &table_bytes(TableKind::BrdfLut, self.res, self.res, 2, 1, &planes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t = read_table(&read_file(path)?, &path.display().to_string())?;
        if t.kind != TableKind::BrdfLut || t.width != t.height || t.planes != 2 || t.channels != 1 || t.width < 2 {
            return Err(Error::parse(path.display().to_string(), "not an environment-BRDF table"));
        }
        let n = t.width * t.width;
        Ok(Self {
            res: t.width,
            scale: t.data[..n].to_vec(),
            bias: t.data[n..].to_vec(),
        })
    }
}

fn lut_nov(i: usize, res: usize) -> f64 {
    (i as f64 / (res - 1) as f64).max(1e-3)
}

/// Importance-sampled split-sum table with `⌈√samples⌉²` jittered stratified samples per entry;
/// entry `e` draws from ChaCha8 stream `e` of `seed`.
pub fn precompute_env_brdf_lut(samples: usize, res: usize, seed: u64) -> Result<BrdfLut> {
    if res < 16 {
        return Err(Error::invalid(format!("LUT resolution must be at least 16, got {res}")));
    }
    if samples == 0 {
        return Err(Error::invalid("LUT sample count must be positive"));
    }
    let entries = par::map_range(res * res, |e| {
        let (i, j) = (e % res, e / res);
        env_brdf_entry(lut_nov(i, res), j as f64 / (res - 1) as f64, samples, seed, e as u64)
    });
    Ok(BrdfLut {
        res,
        scale: entries.iter().map(|e| e.0).collect(),
        bias: entries.iter().map(|e| e.1).collect(),
    })
}

fn env_brdf_entry(n_v: f64, roughness: f64, samples: usize, seed: u64, stream: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let alpha = roughness_to_alpha(roughness);
    let v = Vector3::new((1.0 - n_v * n_v).max(0.0).sqrt(), 0.0, n_v);
    // jittered k×k strata over the unit square
    let k = (samples as f64).sqrt().ceil() as usize;
    let (mut a, mut b) = (0.0, 0.0);
    for s1 in 0..k {
        for s2 in 0..k {
            let u1 = (s1 as f64 + rng.gen::<f64>()) / k as f64;
            let u2 = (s2 as f64 + rng.gen::<f64>()) / k as f64;
            let h = sample_ggx_half(u1, u2, alpha);
            let v_h = v.dot(&h);
            let l = h * (2.0 * v_h) - v;
            let (n_l, n_h) = (l.z, h.z);
            if n_l <= 0.0 || v_h <= 0.0 {
                continue;
            }
            let g_vis = smith_g(n_v, n_l, alpha) * v_h / (n_h * n_v).max(DENOM_EPS);
            let fc = (1.0 - v_h).powi(5);
            a += (1.0 - fc) * g_vis;
            b += fc * g_vis;
        }
    }
    let n = (k * k) as f64;
    (a / n, b / n)
}

/// Trainable lat-long environment; radiance is `softplus(raw)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentMap {
    pub width: usize,
    pub height: usize,
    /// `H×W×3` raw texels.
    pub raw: Vec<f64>,
}

impl EnvironmentMap {
    pub fn constant(width: usize, height: usize, radiance: [f64; 3]) -> Self {
        let raw = radiance.map(softplus_inv);
        Self {
            width,
            height,
            raw: (0..width * height).flat_map(|_| raw).collect(),
        }
    }

    pub fn from_radiance(width: usize, height: usize, radiance: &[f64]) -> Result<Self> {
        if width == 0 || height == 0 || radiance.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "environment of {width}×{height} needs {} values, got {}",
                width * height * 3,
                radiance.len()
            )));
        }
        if let Some(i) = radiance.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("environment texel value {i}")));
        }
        Ok(Self {
            width,
            height,
            raw: radiance.iter().map(|&v| softplus_inv(v)).collect(),
        })
    }

    pub fn radiance(&self) -> Vec<f64> {
        self.raw.iter().map(|&r| softplus(r)).collect()
    }

    pub fn num_texels(&self) -> usize {
        self.width * self.height
    }

    /// Bilinearly resampled copy at another resolution.
    pub fn resampled(&self, width: usize, height: usize) -> Self {
        let src = self.radiance();
        let mut out = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                let d = latlong_dir(width, height, x, y);
                out.extend_from_slice(&sample_latlong(&src, self.width, self.height, &d));
            }
        }
        Self::from_radiance(width, height, &out).expect("resampled radiance is finite")
    }
}

/// Unit direction through the center of a lat-long texel.
pub fn latlong_dir(width: usize, height: usize, x: usize, y: usize) -> Vector3<f64> {
    let theta = (y as f64 + 0.5) / height as f64 * PI;
    let phi = (x as f64 + 0.5) / width as f64 * 2.0 * PI;
    Vector3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos())
}

/// Exact solid angle of a lat-long texel in row `y`.
pub fn latlong_solid_angle(width: usize, height: usize, y: usize) -> f64 {
    let t0 = y as f64 / height as f64 * PI;
    let t1 = (y + 1) as f64 / height as f64 * PI;
    2.0 * PI / width as f64 * (t0.cos() - t1.cos())
}

/// Bilinear texel weights for direction `d` (azimuth wraps, polar angle clamps).
pub fn latlong_weights(width: usize, height: usize, d: &Vector3<f64>) -> [(usize, f64); 4] {
    let dn = d.normalize();
    let theta = dn.z.clamp(-1.0, 1.0).acos();
    let mut phi = dn.y.atan2(dn.x);
    if phi < 0.0 {
        phi += 2.0 * PI;
    }
    let fx = phi / (2.0 * PI) * width as f64 - 0.5;
    let fy = (theta / PI * height as f64 - 0.5).clamp(0.0, (height - 1) as f64);
    let x0f = fx.floor();
    let tx = fx - x0f;
    let x0 = (x0f as i64).rem_euclid(width as i64) as usize;
    let x1 = (x0 + 1) % width;
    let y0 = (fy.floor() as usize).min(height.saturating_sub(2));
    let y1 = (y0 + 1).min(height - 1);
    let ty = if y1 == y0 { 0.0 } else { fy - y0 as f64 };
    [
        (y0 * width + x0, (1.0 - tx) * (1.0 - ty)),
        (y0 * width + x1, tx * (1.0 - ty)),
        (y1 * width + x0, (1.0 - tx) * ty),
        (y1 * width + x1, tx * ty),
    ]
}

pub fn sample_latlong(data: &[f64], width: usize, height: usize, d: &Vector3<f64>) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (t, w) in latlong_weights(width, height, d) {
        for c in 0..3 {
            out[c] += w * data[3 * t + c];
        }
    }
    out
}

/// Roughness-indexed chain of GGX-filtered environments; level `ℓ` ↔ `ρ = ℓ/(L−1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefilteredEnv {
    pub width: usize,
    pub height: usize,
    pub levels: Vec<Vec<f64>>,
}

impl PrefilteredEnv {
    fn mip(&self, roughness: f64) -> (usize, f64) {
        let m = (self.levels.len() - 1) as f64;
        let p = roughness.clamp(0.0, 1.0) * m;
        let k = (p.floor() as usize).min(self.levels.len() - 2);
        (k, p - k as f64)
    }

    /// Bilinear texel and linear level interpolation; also returns the derivative in roughness.
    pub fn sample(&self, d: &Vector3<f64>, roughness: f64) -> ([f64; 3], [f64; 3]) {
        let (k, t) = self.mip(roughness);
        let a = sample_latlong(&self.levels[k], self.width, self.height, d);
        let b = sample_latlong(&self.levels[k + 1], self.width, self.height, d);
        let m = (self.levels.len() - 1) as f64;
        let inside = (0.0..=1.0).contains(&roughness);
        let mut v = [0.0; 3];
        let mut dv = [0.0; 3];
        for c in 0..3 {
            v[c] = (1.0 - t) * a[c] + t * b[c];
            dv[c] = if inside { (b[c] - a[c]) * m } else { 0.0 };
        }
        (v, dv)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let data: Vec<f64> = self.levels.concat();
        write_file(
            path,
            &table_bytes(TableKind::Prefiltered, self.width, self.height, self.levels.len(), 3, &data),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t = read_table(&read_file(path)?, &path.display().to_string())?;
        if t.kind != TableKind::Prefiltered || t.channels != 3 || t.planes < 2 {
            return Err(Error::parse(path.display().to_string(), "not a prefiltered environment chain"));
        }
        let n = t.width * t.height * 3;
        Ok(Self {
            width: t.width,
            height: t.height,
            levels: t.data.chunks(n).map(<[f64]>::to_vec).collect(),
        })
    }
}

/// Normalized GGX-lobe quadrature weights for each level above 0, for one environment size.
#[derive(Debug, Clone)]
pub struct Prefilter {
    pub width: usize,
    pub height: usize,
    pub num_levels: usize,
    /// `rows[ℓ−1][t]` lists `(source texel, weight)` with weights summing to 1.
    rows: Vec<Vec<Vec<(u32, f64)>>>,
}

impl Prefilter {
    pub fn new(width: usize, height: usize, num_levels: usize) -> Result<Self> {
        if num_levels < 2 {
            return Err(Error::invalid(format!("prefilter needs at least 2 levels, got {num_levels}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid("environment must be non-empty"));
        }
        let n = width * height;
        let dirs: Vec<Vector3<f64>> = (0..n).map(|t| latlong_dir(width, height, t % width, t / width)).collect();
        let area: Vec<f64> = (0..n).map(|t| latlong_solid_angle(width, height, t / width)).collect();
        let rows = (1..num_levels)
            .map(|level| {
                let alpha = roughness_to_alpha(level as f64 / (num_levels - 1) as f64);
                par::map_range(n, |t| {
                    let r = &dirs[t];
                    let mut row: Vec<(u32, f64)> = Vec::new();
                    let mut total = 0.0;
                    for (s, l) in dirs.iter().enumerate() {
                        let n_l = r.dot(l);
                        if n_l <= 0.0 {
                            continue;
                        }
                        let h = (r + l).normalize();
                        let w = ggx_d(r.dot(&h), alpha) * n_l * area[s];
                        if w > 0.0 {
                            row.push((s as u32, w));
                            total += w;
                        }
                    }
                    if total <= 0.0 {
                        return vec![(t as u32, 1.0)];
                    }
                    let cutoff = total * 1e-12;
                    row.retain(|&(_, w)| w > cutoff);
                    let kept: f64 = row.iter().map(|e| e.1).sum();
                    row.iter_mut().for_each(|e| e.1 /= kept);
                    row
                })
            })
            .collect();
        Ok(Self {
            width,
            height,
            num_levels,
            rows,
        })
    }

    pub fn apply(&self, radiance: &[f64]) -> PrefilteredEnv {
        let mut levels = vec![radiance.to_vec()];
        for rows in &self.rows {
            let lvl: Vec<[f64; 3]> = par::map_range(rows.len(), |t| {
                let mut acc = [0.0; 3];
                for &(s, w) in &rows[t] {
                    for c in 0..3 {
                        acc[c] += w * radiance[3 * s as usize + c];
                    }
                }
                acc
            });
            levels.push(lvl.concat());
        }
        PrefilteredEnv {
            width: self.width,
            height: self.height,
            levels,
        }
    }

    /// Pulls per-level texel gradients back to the source radiance.
    pub fn apply_transpose(&self, grads: &[Vec<f64>]) -> Vec<f64> {
        let mut out = grads[0].clone();
        for (rows, g) in self.rows.iter().zip(&grads[1..]) {
            for (t, row) in rows.iter().enumerate() {
                let gt = &g[3 * t..3 * t + 3];
                if gt.iter().all(|v| *v == 0.0) {
                    continue;
                }
                for &(s, w) in row {
                    for c in 0..3 {
                        out[3 * s as usize + c] += w * gt[c];
                    }
                }
            }
        }
        out
    }
}

pub fn prefilter_environment(env: &EnvironmentMap, levels: usize) -> Result<PrefilteredEnv> {
    Ok(Prefilter::new(env.width, env.height, levels)?.apply(&env.radiance()))
}

/// Degree-2 SH projection of lat-long radiance, laid out `[k·3 + c]`.
pub fn env_sh(radiance: &[f64], width: usize, height: usize) -> Vec<f64> {
    let nc = sh::num_coeffs(ENV_SH_DEGREE);
    let mut out = vec![0.0; nc * 3];
    let mut y = [0.0; 9];
    for t in 0..width * height {
        sh::eval_into(ENV_SH_DEGREE, &latlong_dir(width, height, t % width, t / width), &mut y);
        let da = latlong_solid_angle(width, height, t / width);
        for k in 0..nc {
            for c in 0..3 {
                out[k * 3 + c] += y[k] * da * radiance[3 * t + c];
            }
        }
    }
    out
}

fn env_sh_transpose(grad: &[f64], width: usize, height: usize) -> Vec<f64> {
    let mut out = vec![0.0; width * height * 3];
    let mut y = [0.0; 9];
    for t in 0..width * height {
        sh::eval_into(ENV_SH_DEGREE, &latlong_dir(width, height, t % width, t / width), &mut y);
        let da = latlong_solid_angle(width, height, t / width);
        for k in 0..9 {
            for c in 0..3 {
                out[3 * t + c] += y[k] * da * grad[k * 3 + c];
            }
        }
    }
    out
}

/// Everything derived from one environment that shading reads.
#[derive(Debug, Clone)]
pub struct EnvAssets {
    pub prefiltered: PrefilteredEnv,
    pub sh: Vec<f64>,
}

impl EnvAssets {
    pub fn build(env: &EnvironmentMap, prefilter: &Prefilter) -> Result<Self> {
        if (prefilter.width, prefilter.height) != (env.width, env.height) {
            return Err(Error::invalid(format!(
                "prefilter built for {}×{} but environment is {}×{}",
                prefilter.width, prefilter.height, env.width, env.height
            )));
        }
        let radiance = env.radiance();
        Ok(Self {
            sh: env_sh(&radiance, env.width, env.height),
            prefiltered: prefilter.apply(&radiance),
        })
    }
}

/// Convex blend of direct and indirect diffuse light by the occlusion `o`.
pub fn blend_diffuse(o: f64, direct: [f64; 3], indirect: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|c| (1.0 - o) * direct[c] + o * indirect[c])
}

/// Light sources and tables used by [`shade`].
#[derive(Debug, Clone, Copy)]
pub struct Lighting<'a> {
    pub env: &'a EnvAssets,
    pub lut: &'a BrdfLut,
    pub occlusion: Option<&'a VolumeGrid>,
    pub illumination: Option<&'a VolumeGrid>,
}

fn direct_irradiance(env_sh: &[f64], n: &Vector3<f64>) -> [f64; 3] {
    irradiance_rgb(env_sh, 3, n)
}

/// Diffuse irradiance at `x` about `n`.
pub fn diffuse_irradiance(lighting: &Lighting, x: &Vector3<f64>, n: &Vector3<f64>) -> [f64; 3] {
    let o = lighting.occlusion.map_or(0.0, |g| ambient_occlusion(g, x, n));
    let direct = direct_irradiance(&lighting.env.sh, n).map(|v| v.max(0.0));
    let indirect = lighting
        .illumination
        .map_or([0.0; 3], |g| crate::bake::query_indirect_irradiance(g, x, n));
    blend_diffuse(o, direct, indirect)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Material {
    pub albedo: [f64; 3],
    pub roughness: f64,
    pub metallic: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ShadePoint {
    pub position: Vector3<f64>,
    /// Unit surface normal.
    pub normal: Vector3<f64>,
    /// Unit direction from the point toward the viewer.
    pub view: Vector3<f64>,
    pub material: Material,
}

/// Intermediate values of one shading evaluation, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ShadeTerms {
    pub ao: f64,
    pub direct: [f64; 3],
    pub direct_raw: [f64; 3],
    pub indirect: [f64; 3],
    pub indirect_raw: [f64; 3],
    pub diffuse: [f64; 3],
    pub specular: [f64; 3],
    pub lut: (f64, f64),
    pub lut_grad: (f64, f64),
    pub env_spec: [f64; 3],
    pub env_spec_grad: [f64; 3],
    pub reflected: Option<Vector3<f64>>,
    pub trilinear: Option<[(usize, f64); 8]>,
    pub out_raw: [f64; 3],
}

impl ShadeTerms {
    pub fn radiance(&self) -> [f64; 3] {
        self.out_raw.map(|v| v.max(0.0))
    }
}

pub fn shade_terms(p: &ShadePoint, lighting: &Lighting) -> ShadeTerms {
    let Material {
        albedo,
        roughness,
        metallic,
    } = p.material;
    let n = &p.normal;
    let ao = lighting.occlusion.map_or(0.0, |g| ambient_occlusion(g, &p.position, n));
    let direct_raw = direct_irradiance(&lighting.env.sh, n);
    let direct = direct_raw.map(|v| v.max(0.0));
    let (indirect_raw, trilinear) = match lighting.illumination {
        Some(g) => {
            let w = g.trilinear(&p.position);
            (irradiance_rgb(&g.blend(&w), g.channels, n), Some(w))
        }
        None => ([0.0; 3], None),
    };
    let indirect = indirect_raw.map(|v| v.max(0.0));
    let irr = blend_diffuse(ao, direct, indirect);
    let diffuse = [0, 1, 2].map(|c| (1.0 - metallic) * albedo[c] / PI * irr[c]);

    let n_v = n.dot(&p.view);
    let mut t = ShadeTerms {
        ao,
        direct,
        direct_raw,
        indirect,
        indirect_raw,
        diffuse: irr,
        specular: [0.0; 3],
        lut: (0.0, 0.0),
        lut_grad: (0.0, 0.0),
        env_spec: [0.0; 3],
        env_spec_grad: [0.0; 3],
        reflected: None,
        trilinear,
        out_raw: diffuse,
    };
    if n_v > 0.0 {
        let r = reflect(&p.view, n);
        let ((s, b), (ds, db)) = lighting.lut.lookup(n_v, roughness);
        let (li, dli) = lighting.env.prefiltered.sample(&r, roughness);
        for c in 0..3 {
            t.specular[c] = (base_reflectance(albedo[c], metallic) * s + b) * li[c];
            t.out_raw[c] += t.specular[c];
        }
        t.lut = (s, b);
        t.lut_grad = (ds, db);
        t.env_spec = li;
        t.env_spec_grad = dli;
        t.reflected = Some(r);
    }
    t
}

/// Outgoing radiance toward the viewer, clamped at zero.
pub fn shade(p: &ShadePoint, lighting: &Lighting) -> [f64; 3] {
    shade_terms(p, lighting).radiance()
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MaterialGrad {
    pub albedo: [f64; 3],
    pub roughness: f64,
    pub metallic: f64,
}

/// Accumulated lighting gradients from many shading evaluations.
#[derive(Debug, Clone, PartialEq)]
pub struct LightingGrad {
    /// Per prefiltered level, `H×W×3`.
    pub levels: Vec<Vec<f64>>,
    /// Degree-2 environment SH, `[k·3 + c]`.
    pub env_sh: Vec<f64>,
    /// Same layout as the illumination grid's coefficients; empty without a grid.
    pub illumination: Vec<f64>,
}

impl LightingGrad {
    pub fn zeros(lighting: &Lighting) -> Self {
        let pf = &lighting.env.prefiltered;
        Self {
            levels: vec![vec![0.0; pf.width * pf.height * 3]; pf.levels.len()],
            env_sh: vec![0.0; lighting.env.sh.len()],
            illumination: lighting.illumination.map_or(Vec::new(), |g| vec![0.0; g.coeffs.len()]),
        }
    }

    pub fn add(&mut self, other: &LightingGrad) {
        for (a, b) in self.levels.iter_mut().zip(&other.levels) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.env_sh.iter_mut().zip(&other.env_sh).for_each(|(x, y)| *x += y);
        self.illumination
            .iter_mut()
            .zip(&other.illumination)
            .for_each(|(x, y)| *x += y);
    }

    /// Gradient with respect to the environment's raw texels.
    pub fn env_raw(&self, env: &EnvironmentMap, prefilter: &Prefilter) -> Vec<f64> {
        let mut g = prefilter.apply_transpose(&self.levels);
        let from_sh = env_sh_transpose(&self.env_sh, env.width, env.height);
        for ((gi, s), raw) in g.iter_mut().zip(&from_sh).zip(&env.raw) {
            *gi = (*gi + s) * sigmoid(*raw);
        }
        g
    }
}

/// Backward pass of [`shade`] for upstream gradient `d_out`; lighting gradients accumulate into `lg`.
pub fn shade_backward(
    p: &ShadePoint,
    lighting: &Lighting,
    t: &ShadeTerms,
    d_out: [f64; 3],
    lg: &mut LightingGrad,
) -> MaterialGrad {
    let Material {
        albedo,
        roughness,
        metallic,
    } = p.material;
    let g = [0, 1, 2].map(|c| if t.out_raw[c] > 0.0 { d_out[c] } else { 0.0 });
    let mut mg = MaterialGrad::default();
    let mut d_irr = [0.0; 3];
    for c in 0..3 {
        mg.albedo[c] += g[c] * (1.0 - metallic) / PI * t.diffuse[c];
        mg.metallic -= g[c] * albedo[c] / PI * t.diffuse[c];
        d_irr[c] = g[c] * (1.0 - metallic) * albedo[c] / PI;
    }
    let n = &p.normal;
    let mut y = [0.0; 16];

    let d_direct = [0, 1, 2].map(|c| if t.direct_raw[c] > 0.0 { (1.0 - t.ao) * d_irr[c] } else { 0.0 });
    if d_direct.iter().any(|v| *v != 0.0) {
        sh::eval_into(ENV_SH_DEGREE, n, &mut y);
        for k in 0..9 {
            let w = sh::cosine_lobe_weight(sh::band_of(k)) * y[k];
            for c in 0..3 {
                lg.env_sh[k * 3 + c] += w * d_direct[c];
            }
        }
    }

    if let (Some(grid), Some(tri)) = (lighting.illumination, t.trilinear) {
        let d_ind = [0, 1, 2].map(|c| if t.indirect_raw[c] > 0.0 { t.ao * d_irr[c] } else { 0.0 });
        if d_ind.iter().any(|v| *v != 0.0) {
            let nc = sh::num_coeffs(grid.degree);
            sh::eval_into(grid.degree, n, &mut y);
            let block = grid.block_len();
            for (cell, w) in tri {
                if w == 0.0 {
                    continue;
                }
                for k in 0..nc {
                    let wk = w * sh::cosine_lobe_weight(sh::band_of(k)) * y[k];
                    for c in 0..3.min(grid.channels) {
                        lg.illumination[cell * block + k * grid.channels + c] += wk * d_ind[c];
                    }
                }
            }
        }
    }

    if let Some(r) = t.reflected {
        let (s, b) = t.lut;
        let (ds, db) = t.lut_grad;
        let mut d_env = [0.0; 3];
        for c in 0..3 {
            let f0 = base_reflectance(albedo[c], metallic);
            let li = t.env_spec[c];
            mg.albedo[c] += g[c] * metallic * s * li;
            mg.metallic += g[c] * (albedo[c] - DIELECTRIC_F0) * s * li;
            mg.roughness += g[c] * ((f0 * ds + db) * li + (f0 * s + b) * t.env_spec_grad[c]);
            d_env[c] = g[c] * (f0 * s + b);
        }
        let pf = &lighting.env.prefiltered;
        let m = (pf.levels.len() - 1) as f64;
        let pos = roughness.clamp(0.0, 1.0) * m;
        let k = (pos.floor() as usize).min(pf.levels.len() - 2);
        let tk = pos - k as f64;
        for (lvl, lw) in [(k, 1.0 - tk), (k + 1, tk)] {
            if lw == 0.0 {
                continue;
            }
            for (texel, w) in latlong_weights(pf.width, pf.height, &r) {
                for c in 0..3 {
                    lg.levels[lvl][3 * texel + c] += lw * w * d_env[c];
                }
            }
        }
    }
    mg
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TableKind {
    BrdfLut = 0,
    Prefiltered = 1,
}

struct Table {
    kind: TableKind,
    width: usize,
    height: usize,
    planes: usize,
    channels: usize,
    data: Vec<f64>,
}

fn table_bytes(kind: TableKind, width: usize, height: usize, planes: usize, channels: usize, data: &[f64]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(28 + 4 * data.len());
    buf.extend_from_slice(LUT_MAGIC);
    for v in [kind as usize, width, height, planes, channels] {
        buf.write_u32::<LittleEndian>(v as u32).unwrap();
    }
    for v in data {
        buf.write_f32::<LittleEndian>(*v as f32).unwrap();
    }
    buf
}

fn read_table(bytes: &[u8], context: &str) -> Result<Table> {
    let bad = |m: String| Error::parse(context, m);
    if bytes.len() < 8 || &bytes[..8] != LUT_MAGIC {
        return Err(bad("missing GSIRLUT1 magic".into()));
    }
    let mut r = &bytes[8..];
    let mut h = [0usize; 5];
    for v in h.iter_mut() {
        *v = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header".into()))? as usize;
    }
    let kind = match h[0] {
        0 => TableKind::BrdfLut,
        1 => TableKind::Prefiltered,
        k => return Err(bad(format!("unknown table kind {k}"))),
    };
    let n = h[1] * h[2] * h[3] * h[4];
    if r.len() != 4 * n {
        return Err(bad(format!("expected {} payload bytes, found {}", 4 * n, r.len())));
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let v = r.read_f32::<LittleEndian>().unwrap();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{context}: table element {i}")));
        }
        data.push(v as f64);
    }
    Ok(Table {
        kind,
        width: h[1],
        height: h[2],
        planes: h[3],
        channels: h[4],
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lut() -> BrdfLut {
        precompute_env_brdf_lut(4096, 16, 7).unwrap()
    }

    #[test]
    fn brdf_examples() {
        assert!((ggx_d(1.0, roughness_to_alpha(1.0)) - 1.0 / PI).abs() < 1e-12);
        assert_eq!(schlick(0.3, 1.0), 0.3);
        let n = Vector3::z();
        let l = Vector3::new(0.3, 0.1, 0.9).normalize();
        let v = Vector3::new(-0.5, 0.2, 0.7).normalize();
        let full = brdf_eval(&n, &v, &l, [0.8, 0.2, 0.5], 0.6, 1.0);
        let black = brdf_eval(&n, &v, &l, [0.0, 0.0, 0.0], 0.6, 1.0);
        // m=1: only the specular term remains, and F0 = a
        assert!(full.iter().zip(&black).all(|(a, b)| a >= b));
        // dielectric F0 does not depend on albedo, so albedo only adds the Lambert term
        let diffuse_only = brdf_eval(&n, &v, &l, [0.8, 0.2, 0.5], 0.6, 0.0)[0]
            - brdf_eval(&n, &v, &l, [0.0, 0.2, 0.5], 0.6, 0.0)[0];
        assert!((diffuse_only - 0.8 / PI).abs() < 1e-12);
        let swapped = brdf_eval(&n, &l, &v, [0.8, 0.2, 0.5], 0.6, 1.0);
        for c in 0..3 {
            assert!((full[c] - swapped[c]).abs() <= 1e-6 * full[c].abs());
        }
        assert_eq!(brdf_eval(&n, &-v, &l, [1.0; 3], 0.5, 0.0), [0.0; 3]);
    }

    #[test]
    fn lut_envelope_and_determinism() {
        let a = lut();
        let b = lut();
        assert_eq!(a, b);
        for j in 0..a.res {
            for i in 0..a.res {
                let (s, bias) = a.entry(i, j);
                assert!((0.0..=1.05).contains(&s), "scale {s}");
                assert!(bias >= 0.0 && s + bias <= 1.05, "({s}, {bias})");
                // Fresnel drives the bias toward 1 at grazing view; the tight bound holds away from it
                if a.nov_node(i) >= 0.3 {
                    assert!(bias <= 0.2, "bias {bias} at n·v {}", a.nov_node(i));
                }
            }
        }
        let mirror = a.entry(a.res - 1, 0);
        assert!((mirror.0 - 1.0).abs() < 0.02 && mirror.1.abs() < 0.02, "{mirror:?}");
        assert!(precompute_env_brdf_lut(16, 8, 0).is_err());
    }

    #[test]
    fn constant_env_prefilters_to_itself() {
        let env = EnvironmentMap::constant(16, 8, [0.7, 1.3, 2.0]);
        let pf = prefilter_environment(&env, 5).unwrap();
        for lvl in &pf.levels {
            for t in lvl.chunks(3) {
                assert!((t[0] - 0.7).abs() < 1e-9 && (t[1] - 1.3).abs() < 1e-9 && (t[2] - 2.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn blur_lowers_peak() {
        let mut rad = vec![0.1; 32 * 16 * 3];
        let hot = 3 * (7 * 32 + 11);
        rad[hot..hot + 3].copy_from_slice(&[50.0, 50.0, 50.0]);
        let env = EnvironmentMap::from_radiance(32, 16, &rad).unwrap();
        let pf = prefilter_environment(&env, 5).unwrap();
        let peaks: Vec<f64> = pf.levels.iter().map(|l| l.iter().cloned().fold(0.0, f64::max)).collect();
        for w in peaks.windows(2) {
            assert!(w[1] < w[0], "{peaks:?}");
        }
        let energy = |l: &[f64]| -> f64 {
            (0..16 * 32).map(|t| l[3 * t] * latlong_solid_angle(32, 16, t / 32)).sum()
        };
        let e0 = energy(&pf.levels[0]);
        for l in &pf.levels {
            assert!((energy(l) - e0).abs() < 0.05 * e0);
        }
    }

    #[test]
    fn latlong_solid_angles_cover_sphere() {
        let s: f64 = (0..8).map(|y| 16.0 * latlong_solid_angle(16, 8, y)).sum();
        assert!((s - 4.0 * PI).abs() < 1e-12);
        for (x, y) in [(0, 0), (5, 3), (15, 7)] {
            let w = latlong_weights(16, 8, &latlong_dir(16, 8, x, y));
            let own = w.iter().filter(|(t, _)| *t == y * 16 + x).map(|e| e.1).sum::<f64>();
            assert!((own - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn diffuse_examples() {
        let env = EnvironmentMap::constant(32, 16, [1.0; 3]);
        let pf = Prefilter::new(32, 16, 5).unwrap();
        let assets = EnvAssets::build(&env, &pf).unwrap();
        let table = lut();
        let mut occ = VolumeGrid::new([2, 2, 2], Vector3::repeat(-1.0), Vector3::repeat(1.0), 2, 1).unwrap();
        let lighting = Lighting {
            env: &assets,
            lut: &table,
            occlusion: None,
            illumination: None,
        };
        let n = Vector3::new(0.2, 0.3, 0.9).normalize();
        for v in diffuse_irradiance(&lighting, &Vector3::zeros(), &n) {
            assert!((v - PI).abs() < 0.02 * PI);
        }
        // fully occluded, no indirect light
        let full = sh_constant_block(2, 1.0);
        for c in 0..8 {
            occ.cell_mut(c).copy_from_slice(&full);
        }
        let zero = VolumeGrid::new([2, 2, 2], Vector3::repeat(-1.0), Vector3::repeat(1.0), 2, 3).unwrap();
        let lighting = Lighting {
            occlusion: Some(&occ),
            illumination: Some(&zero),
            ..lighting
        };
        for v in diffuse_irradiance(&lighting, &Vector3::zeros(), &n) {
            assert!(v.abs() < 1e-9);
        }
        let b = blend_diffuse(0.5, [PI; 3], [1.0; 3]);
        assert!(b.iter().all(|v| (v - (0.5 * PI + 0.5)).abs() < 1e-12));
    }

    fn sh_constant_block(degree: usize, value: f64) -> Vec<f64> {
        let mut b = vec![0.0; sh::num_coeffs(degree)];
        b[0] = value * 2.0 * PI.sqrt();
        b
    }

    #[test]
    fn lambert_under_constant_light() {
        let env = EnvironmentMap::constant(32, 16, [1.0; 3]);
        let pf = Prefilter::new(32, 16, 5).unwrap();
        let assets = EnvAssets::build(&env, &pf).unwrap();
        let table = lut();
        let lighting = Lighting {
            env: &assets,
            lut: &table,
            occlusion: None,
            illumination: None,
        };
        let p = ShadePoint {
            position: Vector3::zeros(),
            normal: Vector3::z(),
            view: Vector3::new(0.3, 0.0, 0.95).normalize(),
            material: Material {
                albedo: [1.0; 3],
                roughness: 1.0,
                metallic: 0.0,
            },
        };
        let t = shade_terms(&p, &lighting);
        for c in 0..3 {
            let d = t.out_raw[c] - t.specular[c];
            assert!((d - 1.0).abs() < 0.02, "{d}");
            assert!(t.specular[c] > 0.0 && t.specular[c] < 0.3);
        }
        let black = ShadePoint {
            material: Material {
                albedo: [0.0; 3],
                ..p.material
            },
            ..p
        };
        let t = shade_terms(&black, &lighting);
        assert_eq!(t.out_raw, t.specular);
        let back = ShadePoint { view: -p.view, ..p };
        assert_eq!(shade_terms(&back, &lighting).specular, [0.0; 3]);
    }

    #[test]
    fn table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = lut();
        t.scale.iter_mut().chain(t.bias.iter_mut()).for_each(|v| *v = *v as f32 as f64);
        t.save(&dir.path().join("l")).unwrap();
        assert_eq!(BrdfLut::load(&dir.path().join("l")).unwrap(), t);
        let mut pf = prefilter_environment(&EnvironmentMap::constant(8, 4, [0.5, 1.0, 2.0]), 3).unwrap();
        pf.levels.iter_mut().flatten().for_each(|v| *v = *v as f32 as f64);
        pf.save(&dir.path().join("p")).unwrap();
        assert_eq!(PrefilteredEnv::load(&dir.path().join("p")).unwrap(), pf);
        assert!(BrdfLut::load(&dir.path().join("p")).is_err());
    }
}
