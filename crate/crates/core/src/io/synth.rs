//! Synthetic scenes with exact ground truth.
//!
//! * `sphere`: Gaussians on a radius-`r` sphere at the origin.
//! * `box`: Gaussians on the faces of an axis-aligned cube of half-size `r`.
//! * `shell`: a radius-`r` sphere resting on a square floor at `z = −r`
//!   spanning `±2.5r`, so the floor is shadowed near the contact point.
//!
//! Each Gaussian is a flat disk tangent to the surface whose normal is the
//! surface normal. Albedo follows a smooth fixed pattern; roughness and
//! metallic are constant per surface.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::dataset::{SceneDataset, View};
use super::image::ImageBuffer;
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::{quat_from_axis_angle, quat_mul, Gaussian, GaussianCloud};
use crate::optim::{shade_cloud, shaded_render_options};
use crate::pbr::{latlong_dir, EnvironmentMap, Lighting, Material, ShadeTerms};
use crate::raster::{rasterize_with_colors, ColorSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Sphere,
    Box,
    Shell,
}

impl std::str::FromStr for SynthKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "sphere" => Ok(SynthKind::Sphere),
            "box" => Ok(SynthKind::Box),
            "shell" => Ok(SynthKind::Shell),
            o => Err(format!("unknown scene kind '{o}' (sphere|box|shell)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    /// Number of Gaussians (approximate for `box` and `shell`), at least 8.
    pub count: usize,
    pub radius: f64,
    pub opacity: f64,
    /// Disk thickness relative to its tangential extent, in `(0, 1]`.
    pub flatness: f64,
    pub env_width: usize,
    pub env_height: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            count: 2000,
            radius: 1.0,
            opacity: 0.95,
            flatness: 0.1,
            env_width: 32,
            env_height: 16,
        }
    }
}

const FLOOR_EXTENT: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceHit {
    pub t: f64,
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub material: Material,
}

/// Per-pixel analytic maps for one camera.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Camera-space z of the first hit; the far plane where nothing is hit.
    pub depth: Vec<f64>,
    /// World-space normals, zero where nothing is hit.
    pub normal: Vec<f64>,
    pub albedo: Vec<f64>,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct SynthScene {
    pub kind: SynthKind,
    pub params: SynthParams,
    pub cloud: GaussianCloud,
    pub env: EnvironmentMap,
}

pub fn synth_scene(kind: SynthKind, params: SynthParams, seed: u64) -> Result<SynthScene> {
    let p = params;
    if p.count < 8 {
        return Err(Error::invalid(format!("synthetic scenes need at least 8 Gaussians, got {}", p.count)));
    }
    if !(p.radius > 0.0 && p.radius.is_finite()) {
        return Err(Error::invalid("scene radius must be positive"));
    }
    if !(p.opacity > 0.0 && p.opacity < 1.0) {
        return Err(Error::invalid("opacity must lie in (0, 1)"));
    }
    if !(p.flatness > 0.0 && p.flatness <= 1.0) {
        return Err(Error::invalid("flatness must lie in (0, 1]"));
    }
    if p.env_width < 4 || p.env_height < 2 {
        return Err(Error::invalid("environment must be at least 4×2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scene = SynthScene {
        kind,
        params,
        cloud: GaussianCloud::new(0),
        env: synth_environment(p.env_width, p.env_height),
    };
    let r = p.radius;
    match kind {
        SynthKind::Sphere => scene.add_sphere(p.count, &mut rng),
        SynthKind::Box => {
            let m = ((p.count as f64 / 6.0).sqrt().round() as usize).max(2);
            let spacing = 2.0 * r / m as f64;
            for axis in 0..3 {
                for sign in [1.0, -1.0] {
                    let mut n = Vector3::zeros();
                    n[axis] = sign;
                    let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                    for i in 0..m {
                        for j in 0..m {
                            let mut x = n * r;
                            x[u] = grid_coord(i, m, r, &mut rng);
                            x[v] = grid_coord(j, m, r, &mut rng);
                            scene.push_disk(x, n, spacing, &mut rng);
                        }
                    }
                }
            }
        }
        SynthKind::Shell => {
            let sphere_area = 4.0 * PI;
            let floor_area = (2.0 * FLOOR_EXTENT).powi(2);
            let ns = ((p.count as f64 * sphere_area / (sphere_area + floor_area)).round() as usize).max(4);
            scene.add_sphere(ns, &mut rng);
            let m = (((p.count - ns.min(p.count)) as f64).sqrt().round() as usize).max(2);
            let half = FLOOR_EXTENT * r;
            let spacing = 2.0 * half / m as f64;
            for i in 0..m {
                for j in 0..m {
                    let x = Vector3::new(grid_coord(i, m, half, &mut rng), grid_coord(j, m, half, &mut rng), -r);
                    scene.push_disk(x, Vector3::z(), spacing, &mut rng);
                }
            }
        }
    }
    Ok(scene)
}

/// Jittered cell center of cell `i` of `m` across `[−h, h]`.
fn grid_coord(i: usize, m: usize, h: f64, rng: &mut ChaCha8Rng) -> f64 {
    let cell = 2.0 * h / m as f64;
    let jitter = rng.gen_range(-0.2..0.2) * cell;
    (-h + (i as f64 + 0.5) * cell + jitter).clamp(-h, h)
}

/// Smooth albedo pattern in `[0.15, 0.85]` per channel.
pub fn albedo_pattern(p: &Vector3<f64>) -> [f64; 3] {
    const K: [[f64; 3]; 3] = [[2.1, 0.7, -1.3], [-0.9, 1.9, 0.8], [0.6, -1.1, 2.3]];
    const PHASE: [f64; 3] = [0.3, 1.7, 4.1];
    std::array::from_fn(|c| {
        let arg = K[c][0] * p.x + K[c][1] * p.y + K[c][2] * p.z + PHASE[c];
        0.15 + 0.7 * (0.5 + 0.5 * arg.sin())
    })
}

/// Sky gradient over a darker ground with one broad warm light.
pub fn synth_environment(width: usize, height: usize) -> EnvironmentMap {
    let sun = Vector3::new(0.5, -0.4, 0.75).normalize();
    let mut rad = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for x in 0..width {
            let d = latlong_dir(width, height, x, y);
            let t = 0.5 + 0.5 * d.z;
            let sky = [0.12 + 0.23 * t, 0.12 + 0.28 * t, 0.12 + 0.4 * t];
            let blob = 1.6 * ((d.dot(&sun) - 1.0) / 0.08).exp();
            let tint = [1.0, 0.85, 0.65];
            for c in 0..3 {
                rad.push(sky[c] + blob * tint[c]);
            }
        }
    }
    EnvironmentMap::from_radiance(width, height, &rad).expect("environment radiance is finite")
}

impl SynthScene {
    fn add_sphere(&mut self, n: usize, rng: &mut ChaCha8Rng) {
        let r = self.params.radius;
        let spacing = r * (4.0 * PI / n as f64).sqrt();
        let golden = PI * (3.0 - 5f64.sqrt());
        let phase = rng.gen_range(0.0..2.0 * PI);
        for i in 0..n {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let s = (1.0 - z * z).sqrt();
            let phi = i as f64 * golden + phase;
            let d = Vector3::new(s * phi.cos(), s * phi.sin(), z);
            let (t1, t2) = tangents(&d);
            let jitter = (t1 * rng.gen_range(-0.2..0.2) + t2 * rng.gen_range(-0.2..0.2)) * spacing / r;
            let n = (d + jitter).normalize();
            self.push_disk(n * r, n, spacing, rng);
        }
    }

    fn push_disk(&mut self, x: Vector3<f64>, n: Vector3<f64>, spacing: f64, rng: &mut ChaCha8Rng) {
        let sigma = 0.55 * spacing;
        let align = if n.z < -1.0 + 1e-12 {
            quat_from_axis_angle(&Vector3::x(), PI)
        } else {
            let axis = Vector3::z().cross(&n);
            if axis.norm() < 1e-12 {
                [1.0, 0.0, 0.0, 0.0]
            } else {
                quat_from_axis_angle(&axis, n.z.clamp(-1.0, 1.0).acos())
            }
        };
        let spin = quat_from_axis_angle(&Vector3::z(), rng.gen_range(0.0..2.0 * PI));
        let mut g = Gaussian::new(
            x,
            Vector3::new(sigma, sigma, sigma * self.params.flatness),
            quat_mul(&align, &spin),
            self.params.opacity,
            self.cloud.sh_degree,
        );
        g.normal = n;
        let m = self.material_at(&x, &n);
        g.set_albedo(Vector3::from(m.albedo));
        g.set_roughness(m.roughness);
        g.set_metallic(m.metallic);
        g.set_base_color(m.albedo);
        self.cloud.push(g);
    }

    fn is_floor(&self, p: &Vector3<f64>, n: &Vector3<f64>) -> bool {
        self.kind == SynthKind::Shell && n.z > 0.999 && (p.z + self.params.radius).abs() < 1e-9
    }

    /// Ground-truth material at a surface point with normal `n`.
    pub fn material_at(&self, p: &Vector3<f64>, n: &Vector3<f64>) -> Material {
        let albedo = albedo_pattern(p);
        let roughness = match self.kind {
            SynthKind::Sphere => 0.4,
            SynthKind::Box => 0.6,
            SynthKind::Shell if self.is_floor(p, n) => 0.8,
            SynthKind::Shell => 0.35,
        };
        Material {
            albedo,
            roughness,
            metallic: 0.0,
        }
    }

    /// First surface hit along a ray with unit direction `dir`.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<SurfaceHit> {
        let r = self.params.radius;
        let mut on_floor = false;
        let (t, normal) = match self.kind {
            SynthKind::Sphere => ray_sphere(origin, dir, r),
            SynthKind::Box => ray_box(origin, dir, r),
            SynthKind::Shell => {
                let s = ray_sphere(origin, dir, r);
                let f = ray_floor(origin, dir, -r, FLOOR_EXTENT * r);
                match (s, f) {
                    (Some(a), Some(b)) if a.0 <= b.0 => Some(a),
                    (Some(a), None) => Some(a),
                    (_, b) => {
                        on_floor = b.is_some();
                        b
                    }
                }
            }
        }?;
        let mut point = origin + dir * t;
        if on_floor {
            point.z = -r;
        }
        Some(SurfaceHit {
            t,
            point,
            normal,
            material: self.material_at(&point, &normal),
        })
    }

    /// Camera-space depth of the surface seen through pixel coordinates `(u, v)`.
    pub fn depth_at(&self, cam: &Camera, u: f64, v: f64) -> Option<f64> {
        let dir = (cam.rotation().transpose() * cam.pixel_dir_camera(u, v)).normalize();
        let hit = self.intersect(&cam.center(), &dir)?;
        Some(cam.to_camera(&hit.point).z)
    }

    /// Analytic depth, normal and albedo through every pixel center.
    pub fn ground_truth(&self, cam: &Camera) -> GroundTruth {
        let n = cam.num_pixels();
        let mut gt = GroundTruth {
            depth: vec![cam.far; n],
            normal: vec![0.0; 3 * n],
            albedo: vec![0.0; 3 * n],
            mask: vec![false; n],
        };
        let eye = cam.center();
        for y in 0..cam.height {
            for x in 0..cam.width {
                let p = y * cam.width + x;
                if let Some(h) = self.intersect(&eye, &cam.pixel_ray(x, y)) {
                    gt.depth[p] = cam.to_camera(&h.point).z;
                    gt.normal[3 * p..3 * p + 3].copy_from_slice(h.normal.as_slice());
                    gt.albedo[3 * p..3 * p + 3].copy_from_slice(&h.material.albedo);
                    gt.mask[p] = true;
                }
            }
        }
        gt
    }

    /// Point the orbit cameras look at.
    pub fn center(&self) -> Vector3<f64> {
        match self.kind {
            SynthKind::Shell => Vector3::new(0.0, 0.0, -0.3 * self.params.radius),
            _ => Vector3::zeros(),
        }
    }

    /// Orbit of `count` cameras alternating between two elevations, facing the scene center.
    pub fn orbit_cameras(&self, count: usize, width: usize, height: usize, seed: u64) -> Vec<Camera> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let r = self.params.radius;
        let (dist, fov) = match self.kind {
            SynthKind::Shell => (6.0 * r, 0.9),
            _ => (3.5 * r, 0.75),
        };
        (0..count)
            .map(|i| {
                let az = 2.0 * PI * i as f64 / count as f64 + rng.gen_range(-0.1..0.1);
                let el: f64 = if i % 2 == 0 { 0.35 } else { 0.85 } + rng.gen_range(-0.05..0.05);
                let eye = self.center() + dist * Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
                Camera::look_at(eye, self.center(), Vector3::z(), fov, width, height)
            })
            .collect()
    }
}

impl SynthScene {
    /// Sets each Gaussian's base color to its shaded radiance seen along its normal.
    pub fn set_appearance(&mut self, lighting: &Lighting) {
        let terms: Vec<ShadeTerms> = crate::par::map_range(self.cloud.len(), |i| {
            let g = &self.cloud.gaussians[i];
            let eye = g.position + g.unit_normal();
            crate::pbr::shade_terms(&crate::optim::shade_point(g, &eye), lighting)
        });
        for (g, t) in self.cloud.gaussians.iter_mut().zip(&terms) {
            g.set_base_color(t.radiance().map(|v| v.clamp(0.0, 1.0)));
        }
    }

    /// Renders the ground-truth cloud shaded under `lighting` from each camera,
    /// with analytic normal and albedo maps.
    pub fn render_dataset(&self, cams: &[Camera], lighting: &Lighting, background: [f64; 3]) -> Result<SceneDataset> {
        let opts = shaded_render_options(background);
        let mut views = Vec::with_capacity(cams.len());
        for (i, cam) in cams.iter().enumerate() {
            let colors: Vec<[f64; 3]> = shade_cloud(&self.cloud, &cam.center(), lighting)
                .iter()
                .map(ShadeTerms::radiance)
                .collect();
            let frame = rasterize_with_colors(&self.cloud, cam, ColorSource::Given(&colors), &opts);
            let gt = self.ground_truth(cam);
            let (w, h) = (cam.width, cam.height);
            views.push(View {
                name: format!("r_{i:03}"),
                camera: cam.clone(),
                image: ImageBuffer::from_f64(w, h, 3, &frame.color)?,
                normal: Some(ImageBuffer::from_f64(w, h, 3, &gt.normal)?),
                albedo: Some(ImageBuffer::from_f64(w, h, 3, &gt.albedo)?),
            });
        }
        let mut ds = SceneDataset::new(views)?;
        ds.bounds = self.cloud.bounds();
        Ok(ds)
    }

    /// A rough starting cloud: surface points displaced by Gaussian noise of
    /// `noise·r`, isotropic splats, gray color, default normals and materials.
    pub fn init_cloud(&self, count: usize, noise: f64, sh_degree: usize, seed: u64) -> Result<GaussianCloud> {
        let n = self.cloud.len();
        if count == 0 || n == 0 {
            return Err(Error::invalid("initial cloud needs at least one Gaussian"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = self.params.radius;
        let area: f64 = self.cloud.gaussians.iter().map(|g| g.scale().x * g.scale().y).sum();
        let sigma = (area / count as f64).sqrt();
        let mut cloud = GaussianCloud::new(sh_degree);
        for k in 0..count {
            let src = &self.cloud.gaussians[(k * n) / count];
            let offset = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)) * noise * r;
            let mut g = Gaussian::new(src.position + offset, Vector3::repeat(sigma), [1.0, 0.0, 0.0, 0.0], 0.5, sh_degree);
            g.set_base_color([0.5; 3]);
            cloud.push(g);
        }
        Ok(cloud)
    }
}

fn tangents(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let a = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let t1 = n.cross(&a).normalize();
    (t1, n.cross(&t1))
}

fn ray_sphere(o: &Vector3<f64>, d: &Vector3<f64>, r: f64) -> Option<(f64, Vector3<f64>)> {
    let b = o.dot(d);
    let c = o.norm_squared() - r * r;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let t = if -b - s > 0.0 { -b - s } else { -b + s };
    if t <= 0.0 {
        return None;
    }
    Some((t, (o + d * t) / r))
}

fn ray_box(o: &Vector3<f64>, d: &Vector3<f64>, r: f64) -> Option<(f64, Vector3<f64>)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut axis = 0;
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if o[k].abs() > r {
                return None;
            }
            continue;
        }
        let (a, b) = ((-r - o[k]) / d[k], (r - o[k]) / d[k]);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        if lo > t_near {
            t_near = lo;
            axis = k;
        }
        t_far = t_far.min(hi);
    }
    if t_near > t_far || t_near <= 0.0 {
        return None;
    }
    let mut n = Vector3::zeros();
    n[axis] = -d[axis].signum();
    Some((t_near, n))
}

fn ray_floor(o: &Vector3<f64>, d: &Vector3<f64>, z: f64, half: f64) -> Option<(f64, Vector3<f64>)> {
    if d.z >= 0.0 || o.z <= z {
        return None;
    }
    let t = (z - o.z) / d.z;
    let p = o + d * t;
    (p.x.abs() <= half && p.y.abs() <= half).then_some((t, Vector3::z()))
}
