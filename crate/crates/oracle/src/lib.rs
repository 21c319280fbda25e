//! Slow, independent reference implementations.
//!
//! Nothing here calls into the production math of `gsir-core`; only its plain
//! data types are read. Projection, SH evaluation and compositing are rederived
//! from scratch (SH through associated Legendre recurrences rather than the
//! closed-form polynomials used by the renderer).

use gsir_core::{Camera, GaussianCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exact single-pixel compositing result.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleComposite {
    pub color: [f64; 3],
    pub alpha: f64,
    pub depth_vol_accum: f64,
    pub depth_peak: f64,
    /// NaN when the pixel has no contributor.
    pub depth_linear: f64,
    pub min_depth: f64,
    pub max_depth: f64,
    pub contributors: usize,
}

/// Compositing knobs mirrored from the renderer so the two can be compared
/// with or without the renderer's per-splat cutoff.
#[derive(Debug, Clone, Copy)]
pub struct OracleOptions {
    pub dilation: f64,
    pub min_weight: f64,
    pub background: [f64; 3],
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            dilation: 0.3,
            min_weight: 1.0 / 255.0,
            background: [0.0; 3],
        }
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
struct Acc {
    sum: f64,
    comp: f64,
}

impl Acc {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn transpose(a: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

/// Rotation matrix via `v ↦ q v q*` applied to the basis vectors.
fn rotation_from_quaternion(q: [f64; 4]) -> [[f64; 3]; 3] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let rotate = |v: [f64; 3]| -> [f64; 3] {
        // t = 2 (u × v), v' = v + w t + u × t
        let u = [x, y, z];
        let cross = |a: [f64; 3], b: [f64; 3]| {
            [
                a[1] * b[2] - a[2] * b[1],
                a[2] * b[0] - a[0] * b[2],
                a[0] * b[1] - a[1] * b[0],
            ]
        };
        let t = cross(u, v).map(|c| 2.0 * c);
        let ut = cross(u, t);
        [0, 1, 2].map(|i| v[i] + w * t[i] + ut[i])
    };
    let cols = [rotate([1.0, 0.0, 0.0]), rotate([0.0, 1.0, 0.0]), rotate([0.0, 0.0, 1.0])];
    let mut r = [[0.0; 3]; 3];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..3 {
            r[i][j] = c[i];
        }
    }
    r
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Associated Legendre `P_l^m(x)` with the Condon-Shortley phase, `m ≥ 0`.
fn legendre(l: usize, m: usize, x: f64) -> f64 {
    let mut pmm = 1.0;
    if m > 0 {
        let s = ((1.0 - x) * (1.0 + x)).max(0.0).sqrt();
        let mut fact = 1.0;
        for _ in 0..m {
            pmm *= -fact * s;
            fact += 2.0;
        }
    }
    if l == m {
        return pmm;
    }
    let mut pmmp1 = x * (2 * m + 1) as f64 * pmm;
    if l == m + 1 {
        return pmmp1;
    }
    let mut pll = 0.0;
    for ll in (m + 2)..=l {
        pll = ((2 * ll - 1) as f64 * x * pmmp1 - (ll + m - 1) as f64 * pmm) / (ll - m) as f64;
        pmm = pmmp1;
        pmmp1 = pll;
    }
    pll
}

/// Real SH `Y_lm` of a unit direction, index `l² + l + m`.
pub fn sh_reference(l: usize, m: i64, d: [f64; 3]) -> f64 {
    let theta = d[2].clamp(-1.0, 1.0).acos();
    let phi = d[1].atan2(d[0]);
    let am = m.unsigned_abs() as usize;
    let k = (((2 * l + 1) as f64 / (4.0 * std::f64::consts::PI)) * factorial(l - am)
        / factorial(l + am))
    .sqrt();
    let p = legendre(l, am, theta.cos());
    if m == 0 {
        k * p
    } else if m > 0 {
        std::f64::consts::SQRT_2 * k * p * (am as f64 * phi).cos()
    } else {
        std::f64::consts::SQRT_2 * k * p * (am as f64 * phi).sin()
    }
}

struct OracleSplat {
    mean: [f64; 2],
    inv_cov: [[f64; 2]; 2],
    opacity: f64,
    depth: f64,
    color: [f64; 3],
    index: usize,
}

fn prepare(cloud: &GaussianCloud, cam: &Camera, opts: &OracleOptions) -> Vec<OracleSplat> {
    let m = &cam.world_to_camera;
    let w = [
        [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
        [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
        [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
    ];
    let t = [m[(0, 3)], m[(1, 3)], m[(2, 3)]];
    // camera center c = -Wᵀ t
    let center = [0, 1, 2].map(|i| -(0..3).map(|k| w[k][i] * t[k]).sum::<f64>());
    let mut out = Vec::new();
    for (index, g) in cloud.gaussians.iter().enumerate() {
        let p = [g.position.x, g.position.y, g.position.z];
        let pc = [0, 1, 2].map(|i| (0..3).map(|k| w[i][k] * p[k]).sum::<f64>() + t[i]);
        if pc[2] <= cam.near || pc[2] > cam.far {
            continue;
        }
        let r = rotation_from_quaternion(g.rotation);
        let s = [g.log_scale.x.exp(), g.log_scale.y.exp(), g.log_scale.z.exp()];
        let mut rs = r;
        for row in rs.iter_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v *= s[j];
            }
        }
        let sigma = mat3_mul(&rs, &transpose(&rs));
        let wsw = mat3_mul(&mat3_mul(&w, &sigma), &transpose(&w));
        let (x, y, z) = (pc[0], pc[1], pc[2]);
        let j = [
            [cam.fx / z, 0.0, -cam.fx * x / (z * z)],
            [0.0, cam.fy / z, -cam.fy * y / (z * z)],
        ];
        let mut cov = [[0.0; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                let mut acc = 0.0;
                for k in 0..3 {
                    for l in 0..3 {
                        acc += j[a][k] * wsw[k][l] * j[b][l];
                    }
                }
                cov[a][b] = acc;
            }
        }
        cov[0][0] += opts.dilation;
        cov[1][1] += opts.dilation;
        let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
        if det <= 0.0 {
            continue;
        }
        let inv_cov = [
            [cov[1][1] / det, -cov[0][1] / det],
            [-cov[1][0] / det, cov[0][0] / det],
        ];
        let mean = [cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy];

        let dv = [0, 1, 2].map(|i| p[i] - center[i]);
        let len = dv.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dir = dv.map(|v| v / len);
        let mut color = [0.5; 3];
        let degree = (g.sh.len() as f64).sqrt() as usize - 1;
        for l in 0..=degree {
            for mm in -(l as i64)..=(l as i64) {
                let y = sh_reference(l, mm, dir);
                let idx = (l * l) as i64 + l as i64 + mm;
                for c in 0..3 {
                    color[c] += g.sh[idx as usize][c] * y;
                }
            }
        }
        out.push(OracleSplat {
            mean,
            inv_cov,
            opacity: 1.0 / (1.0 + (-g.opacity_logit).exp()),
            depth: z,
            color: color.map(|v| v.max(0.0)),
            index,
        });
    }
    out.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.index.cmp(&b.index)));
    out
}

/// Exact front-to-back evaluation of one pixel: full sort, no tiles, no
/// early termination. Intended for clouds of at most 64 Gaussians.
pub fn oracle_composite(
    cloud: &GaussianCloud,
    cam: &Camera,
    pixel: (usize, usize),
    opts: &OracleOptions,
) -> OracleComposite {
    assert!(cloud.len() <= 64, "oracle_composite is for tiny clouds");
    let splats = prepare(cloud, cam, opts);
    let (px, py) = (pixel.0 as f64 + 0.5, pixel.1 as f64 + 0.5);
    let mut trans = 1.0;
    let mut color = [Acc::default(); 3];
    let mut alpha = Acc::default();
    let mut depth = Acc::default();
    let mut best = (-1.0, f64::NAN);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut contributors = 0;
    for s in &splats {
        let d = [px - s.mean[0], py - s.mean[1]];
        let q = d[0] * (s.inv_cov[0][0] * d[0] + s.inv_cov[0][1] * d[1])
            + d[1] * (s.inv_cov[1][0] * d[0] + s.inv_cov[1][1] * d[1]);
        let w = s.opacity * (-0.5 * q).exp();
        if w < opts.min_weight {
            continue;
        }
        let wt = trans * w;
        for c in 0..3 {
            color[c].add(wt * s.color[c]);
        }
        alpha.add(wt);
        depth.add(wt * s.depth);
        if wt > best.0 {
            best = (wt, s.depth);
        }
        lo = lo.min(s.depth);
        hi = hi.max(s.depth);
        contributors += 1;
        trans *= 1.0 - w;
    }
    let a = alpha.value();
    OracleComposite {
        color: [0, 1, 2].map(|c| color[c].value() + trans * opts.background[c]),
        alpha: a,
        depth_vol_accum: depth.value(),
        depth_peak: best.1,
        depth_linear: if contributors > 0 { depth.value() / a } else { f64::NAN },
        min_depth: lo,
        max_depth: hi,
        contributors,
    }
}

/// Depth range `[min dᵢ, max dᵢ]` of the splats composited at every pixel,
/// stopping once transmittance falls below `min_transmittance`. `None` marks
/// pixels without contributors. Works for clouds of any size.
pub fn oracle_depth_ranges(
    cloud: &GaussianCloud,
    cam: &Camera,
    opts: &OracleOptions,
    min_transmittance: f64,
) -> Vec<Option<(f64, f64)>> {
    let splats = prepare(cloud, cam, opts);
    let mut out = Vec::with_capacity(cam.width * cam.height);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut trans = 1.0;
            let mut range: Option<(f64, f64)> = None;
            for s in &splats {
                let d = [px - s.mean[0], py - s.mean[1]];
                let q = d[0] * (s.inv_cov[0][0] * d[0] + s.inv_cov[0][1] * d[1])
                    + d[1] * (s.inv_cov[1][0] * d[0] + s.inv_cov[1][1] * d[1]);
                let w = s.opacity * (-0.5 * q).exp();
                if w < opts.min_weight {
                    continue;
                }
                range = Some(match range {
                    None => (s.depth, s.depth),
                    Some((lo, hi)) => (lo.min(s.depth), hi.max(s.depth)),
                });
                trans *= 1.0 - w;
                if trans < min_transmittance {
                    break;
                }
            }
            out.push(range);
        }
    }
    out
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub value: Vec<f64>,
    pub std_error: Vec<f64>,
    pub samples: usize,
}

/// Shirley-Chiu concentric mapping of the unit square to the unit disk.
fn concentric_disk(u: f64, v: f64) -> (f64, f64) {
    let a = 2.0 * u - 1.0;
    let b = 2.0 * v - 1.0;
    if a == 0.0 && b == 0.0 {
        return (0.0, 0.0);
    }
    let (r, phi) = if a.abs() > b.abs() {
        (a, std::f64::consts::FRAC_PI_4 * (b / a))
    } else {
        (b, std::f64::consts::FRAC_PI_2 - std::f64::consts::FRAC_PI_4 * (a / b))
    };
    (r * phi.cos(), r * phi.sin())
}

fn tangent_frame(n: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let helper = if n[0].abs() > 0.9 { [0.0, 1.0, 0.0] } else { [1.0, 0.0, 0.0] };
    let cross = |a: [f64; 3], b: [f64; 3]| {
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    };
    let t = cross(helper, n);
    let tl = t.iter().map(|v| v * v).sum::<f64>().sqrt();
    let t = t.map(|v| v / tl);
    (t, cross(n, t))
}

/// Cosine-weighted estimate of `∫_Ω f(l) (l·n) dl` over the hemisphere about `n`.
///
/// `integrand` may return any number of channels; all calls must agree.
pub fn oracle_hemisphere_mc<F>(integrand: F, n: [f64; 3], samples: usize, seed: u64) -> McEstimate
where
    F: Fn([f64; 3]) -> Vec<f64>,
{
    assert!(samples >= 1024, "oracle_hemisphere_mc needs at least 1024 samples");
    let nl = n.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n = n.map(|v| v / nl);
    let (t, b) = tangent_frame(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum: Vec<f64> = Vec::new();
    let mut sum_sq: Vec<f64> = Vec::new();
    for _ in 0..samples {
        let (dx, dy) = concentric_disk(rng.gen::<f64>(), rng.gen::<f64>());
        let dz = (1.0 - dx * dx - dy * dy).max(0.0).sqrt();
        let l = [0, 1, 2].map(|i| t[i] * dx + b[i] * dy + n[i] * dz);
        // pdf = cos/π, so each sample contributes π f(l)
        let v = integrand(l);
        if sum.is_empty() {
            sum = vec![0.0; v.len()];
            sum_sq = vec![0.0; v.len()];
        }
        for (k, x) in v.iter().enumerate() {
            let y = std::f64::consts::PI * x;
            sum[k] += y;
            sum_sq[k] += y * y;
        }
    }
    let nf = samples as f64;
    let value: Vec<f64> = sum.iter().map(|s| s / nf).collect();
    let std_error = sum_sq
        .iter()
        .zip(&value)
        .map(|(sq, m)| ((sq / nf - m * m).max(0.0) / (nf - 1.0)).sqrt())
        .collect();
    McEstimate {
        value,
        std_error,
        samples,
    }
}

/// Central finite differences of `loss` at `params`. Entries whose perturbed
/// losses are not finite come back as `None`.
pub fn finite_diff_grad<F>(mut loss: F, params: &[f64], h: f64) -> Vec<Option<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!((1e-6..=1e-2).contains(&h), "finite difference step must lie in [1e-6, 1e-2]");
    let mut x = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let fp = loss(&x);
            x[i] = orig - h;
            let fm = loss(&x);
            x[i] = orig;
            if fp.is_finite() && fm.is_finite() {
                // (fp - fm) / 2h with the step measured as actually represented
                let step = (orig + h) - (orig - h);
                Some((fp - fm) / step)
            } else {
                None
            }
        })
        .collect()
}

/// Cook-Torrance reflectance written from the slope-space forms: GGX through
/// `tan θ_h`, separable-in-form but height-correlated Smith through `Λ`,
/// Schlick Fresnel; `α = max(ρ², 1e-3)`, dielectric F0 = 0.04.
pub fn oracle_cook_torrance(
    n: [f64; 3],
    v: [f64; 3],
    l: [f64; 3],
    albedo: [f64; 3],
    roughness: f64,
    metallic: f64,
) -> [f64; 3] {
    use std::f64::consts::PI;
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let (cv, cl) = (dot(n, v), dot(n, l));
    if cv <= 0.0 || cl <= 0.0 {
        return [0.0; 3];
    }
    let hs = [v[0] + l[0], v[1] + l[1], v[2] + l[2]];
    let hl = dot(hs, hs).sqrt();
    let h = hs.map(|x| x / hl);
    let a = (roughness * roughness).max(1e-3);
    let ch = dot(n, h);
    let tan2 = |c: f64| (1.0 - c * c).max(0.0) / (c * c);
    let d = 1.0 / (PI * a * a * ch.powi(4) * (1.0 + tan2(ch) / (a * a)).powi(2));
    let lambda = |c: f64| 0.5 * (-1.0 + (1.0 + a * a * tan2(c)).sqrt());
    let g = 1.0 / (1.0 + lambda(cv) + lambda(cl));
    let vh = dot(v, h);
    albedo.map(|alb| {
        let f0 = 0.04 + (alb - 0.04) * metallic;
        let f = f0 + (1.0 - f0) * (1.0 - vh).powi(5);
        (1.0 - metallic) * alb / PI + d * g * f / (4.0 * cv * cl)
    })
}
