//! Gaussian primitives: parameterization, covariance, projection and SH color.
//!
//! Parameters are stored unconstrained: log-scale, opacity/material logits, a
//! raw quaternion `(w, x, y, z)` and a raw normal. Activations are applied when
//! values are read, so gradients are always taken with respect to the raw
//! storage.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::math::{logit, normalize, normalize_backward, sigmoid};
use crate::sh;

/// Default low-pass dilation added to the projected covariance, in px².
pub const DEFAULT_DILATION: f64 = 0.3;

pub const DEFAULT_ALBEDO: f64 = 0.5;
pub const DEFAULT_ROUGHNESS: f64 = 0.9;
pub const DEFAULT_METALLIC: f64 = 0.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub position: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    /// Raw rotation quaternion `(w, x, y, z)`; renormalized after updates.
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    /// Color SH coefficients, one RGB triple per basis function.
    pub sh: Vec<[f64; 3]>,
    pub normal: Vector3<f64>,
    pub albedo_logit: Vector3<f64>,
    pub roughness_logit: f64,
    pub metallic_logit: f64,
}

impl Gaussian {
    /// Builds a Gaussian from activated values. Material fields get defaults
    /// and the normal follows the shortest-axis rule.
    pub fn new(
        position: Vector3<f64>,
        scale: Vector3<f64>,
        rotation: [f64; 4],
        opacity: f64,
        sh_degree: usize,
    ) -> Self {
        let mut g = Self {
            position,
            log_scale: scale.map(|s| s.max(1e-12).ln()),
            rotation: normalize_quat(rotation),
            opacity_logit: logit(opacity),
            sh: vec![[0.0; 3]; sh::num_coeffs(sh_degree)],
            normal: Vector3::z(),
            albedo_logit: Vector3::repeat(logit(DEFAULT_ALBEDO)),
            roughness_logit: logit(DEFAULT_ROUGHNESS),
            metallic_logit: logit(DEFAULT_METALLIC),
        };
        g.normal = g.shortest_axis_normal();
        g
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn unit_rotation(&self) -> [f64; 4] {
        normalize_quat(self.rotation)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(&self.unit_rotation())
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn unit_normal(&self) -> Vector3<f64> {
        normalize(&self.normal).0
    }

    pub fn albedo(&self) -> Vector3<f64> {
        self.albedo_logit.map(sigmoid)
    }

    pub fn roughness(&self) -> f64 {
        sigmoid(self.roughness_logit)
    }

    pub fn metallic(&self) -> f64 {
        sigmoid(self.metallic_logit)
    }

    pub fn set_opacity(&mut self, a: f64) {
        self.opacity_logit = logit(a);
    }

    pub fn set_albedo(&mut self, a: Vector3<f64>) {
        self.albedo_logit = a.map(logit);
    }

    pub fn set_roughness(&mut self, r: f64) {
        self.roughness_logit = logit(r);
    }

    pub fn set_metallic(&mut self, m: f64) {
        self.metallic_logit = logit(m);
    }

    /// Sets a view-independent color through the DC coefficient.
    pub fn set_base_color(&mut self, rgb: [f64; 3]) {
        for c in 0..3 {
            self.sh[0][c] = (rgb[c] - 0.5) / sh::eval_dc();
        }
    }

    /// Rotated axis of the smallest scale component.
    pub fn shortest_axis_normal(&self) -> Vector3<f64> {
        let s = self.log_scale;
        // ties resolve toward the last axis so isotropic splats face +z
        let mut k = 2;
        for i in [1, 0] {
            if s[i] < s[k] {
                k = i;
            }
        }
        self.rotation_matrix().column(k).into_owned()
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.sh.iter().flatten().all(|v| v.is_finite())
            && self.normal.iter().all(|v| v.is_finite())
            && self.albedo_logit.iter().all(|v| v.is_finite())
            && self.roughness_logit.is_finite()
            && self.metallic_logit.is_finite()
    }

    /// Renormalizes the quaternion and normal in place.
    pub fn renormalize(&mut self) {
        self.rotation = normalize_quat(self.rotation);
        let (n, len) = normalize(&self.normal);
        if len > 0.0 {
            self.normal = n;
        } else {
            self.normal = Vector3::z();
        }
    }
}

/// A set of Gaussians sharing a color SH degree.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub sh_degree: usize,
    pub gaussians: Vec<Gaussian>,
}

impl GaussianCloud {
    pub fn new(sh_degree: usize) -> Self {
        Self {
            sh_degree,
            gaussians: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn push(&mut self, g: Gaussian) {
        self.gaussians.push(g);
    }

    pub fn sh_len(&self) -> usize {
        sh::num_coeffs(self.sh_degree)
    }

    pub fn validate(&self) -> Result<()> {
        sh::ShBasis::new(self.sh_degree)?;
        for (i, g) in self.gaussians.iter().enumerate() {
            if g.sh.len() != self.sh_len() {
                return Err(Error::invalid(format!(
                    "gaussian {i} has {} SH coefficients, expected {}",
                    g.sh.len(),
                    self.sh_len()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gaussian {i}")));
            }
        }
        Ok(())
    }

    /// Axis-aligned bounds of the Gaussian centers.
    pub fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let first = self.gaussians.first()?.position;
        Some(self.gaussians.iter().fold((first, first), |(lo, hi), g| {
            (lo.inf(&g.position), hi.sup(&g.position))
        }))
    }
}

pub fn normalize_quat(q: [f64; 4]) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if n > 0.0 && n.is_finite() {
        [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
    } else {
        [1.0, 0.0, 0.0, 0.0]
    }
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Hamilton product `a * b`.
pub fn quat_mul(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = *a;
    let [bw, bx, by, bz] = *b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

/// Quaternion for a rotation of `angle` radians about `axis`.
pub fn quat_from_axis_angle(axis: &Vector3<f64>, angle: f64) -> [f64; 4] {
    let a = axis.normalize() * (0.5 * angle).sin();
    [(0.5 * angle).cos(), a.x, a.y, a.z]
}

/// Pulls a gradient on the rotation matrix back to the raw quaternion.
fn quat_backward(raw: &[f64; 4], grad_r: &Matrix3<f64>) -> [f64; 4] {
    let q = normalize_quat(*raw);
    let [w, x, y, z] = q;
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    let gq = [
        grad_r.component_mul(&dw).sum(),
        grad_r.component_mul(&dx).sum(),
        grad_r.component_mul(&dy).sum(),
        grad_r.component_mul(&dz).sum(),
    ];
    let n = (raw.iter().map(|v| v * v).sum::<f64>()).sqrt();
    let dot: f64 = (0..4).map(|i| q[i] * gq[i]).sum();
    std::array::from_fn(|i| (gq[i] - q[i] * dot) / n)
}

/// `R · diag(s) · diag(s) · Rᵀ` for a scale vector and unit quaternion.
pub fn covariance_3d(scale: &Vector3<f64>, rotation: &[f64; 4]) -> Result<Matrix3<f64>> {
    if !scale.iter().chain(rotation.iter()).all(|v| v.is_finite()) {
        return Err(Error::invalid("covariance_3d: non-finite input"));
    }
    let r = quat_to_matrix(&normalize_quat(*rotation));
    let m = r * Matrix3::from_diagonal(scale);
    Ok(m * m.transpose())
}

/// Screen-space footprint of one Gaussian.
#[derive(Debug, Clone)]
pub struct Projection {
    pub mean: Vector2<f64>,
    /// Projected covariance including the dilation.
    pub cov: Matrix2<f64>,
    /// Upper triangle `(a, b, c)` of the inverse covariance.
    pub conic: [f64; 3],
    /// Camera-space z.
    pub depth: f64,
    pub cam_point: Vector3<f64>,
    jw: Matrix2x3<f64>,
    sigma: Matrix3<f64>,
    rot: Matrix3<f64>,
    scale: Vector3<f64>,
}

impl Projection {
    /// Pixel radius covering three standard deviations of the major axis.
    pub fn radius_3sigma(&self) -> f64 {
        let (a, b, c) = (self.cov[(0, 0)], self.cov[(0, 1)], self.cov[(1, 1)]);
        let mid = 0.5 * (a + c);
        let lambda = mid + (mid * mid - (a * c - b * b)).max(0.0).sqrt();
        3.0 * lambda.sqrt()
    }
}

/// Projects `g` into `cam`. Returns `None` when the center is not in front of
/// the near plane or the footprint is degenerate.
pub fn project_gaussian(g: &Gaussian, cam: &Camera, dilation: f64) -> Option<Projection> {
    let w = cam.rotation();
    let t = w * g.position + cam.translation();
    if !(t.z > cam.near) || !t.iter().all(|v| v.is_finite()) {
        return None;
    }
    let (x, y, z) = (t.x, t.y, t.z);
    let mean = Vector2::new(cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy);
    let j = Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * x / (z * z),
        0.0,
        cam.fy / z,
        -cam.fy * y / (z * z),
    );
    let rot = g.rotation_matrix();
    let scale = g.scale();
    let m = rot * Matrix3::from_diagonal(&scale);
    let sigma = m * m.transpose();
    let jw = j * w;
    let cov = jw * sigma * jw.transpose() + Matrix2::identity() * dilation;
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(0, 1)];
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = [cov[(1, 1)] / det, -cov[(0, 1)] / det, cov[(0, 0)] / det];
    Some(Projection {
        mean,
        cov,
        conic,
        depth: z,
        cam_point: t,
        jw,
        sigma,
        rot,
        scale,
    })
}

/// Gradients of one Gaussian's projection inputs.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProjectionGrad {
    pub position: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    pub rotation: [f64; 4],
}

/// Backpropagates gradients on `(mean, conic, depth)` to position, log-scale
/// and raw rotation.
pub fn project_backward(
    g: &Gaussian,
    cam: &Camera,
    proj: &Projection,
    d_mean: &Vector2<f64>,
    d_conic: &[f64; 3],
    d_depth: f64,
) -> ProjectionGrad {
    let (x, y, z) = (proj.cam_point.x, proj.cam_point.y, proj.cam_point.z);
    let (fx, fy) = (cam.fx, cam.fy);
    let q = Matrix2::new(
        proj.conic[0],
        proj.conic[1],
        proj.conic[1],
        proj.conic[2],
    );
    // conic (a, b, c) parameterizes [[a, b], [b, c]]; b is shared by both off-diagonals
    let g_conic = Matrix2::new(d_conic[0], 0.5 * d_conic[1], 0.5 * d_conic[1], d_conic[2]);
    let g_cov = -(q * g_conic * q);
    let g_jw = 2.0 * g_cov * proj.jw * proj.sigma;
    let g_sigma = proj.jw.transpose() * g_cov * proj.jw;
    let w = cam.rotation();
    let g_j = g_jw * w.transpose();

    let mut dt = Vector3::new(
        d_mean.x * fx / z + g_j[(0, 2)] * (-fx / (z * z)),
        d_mean.y * fy / z + g_j[(1, 2)] * (-fy / (z * z)),
        0.0,
    );
    dt.z = d_depth - d_mean.x * fx * x / (z * z) - d_mean.y * fy * y / (z * z)
        + g_j[(0, 0)] * (-fx / (z * z))
        + g_j[(0, 2)] * (2.0 * fx * x / (z * z * z))
        + g_j[(1, 1)] * (-fy / (z * z))
        + g_j[(1, 2)] * (2.0 * fy * y / (z * z * z));
    let position = w.transpose() * dt;

    let s = Matrix3::from_diagonal(&proj.scale);
    let m = proj.rot * s;
    let g_m = 2.0 * g_sigma * m;
    let g_rot = g_m * s;
    let mut log_scale = Vector3::zeros();
    for k in 0..3 {
        let ds: f64 = (0..3).map(|i| g_m[(i, k)] * proj.rot[(i, k)]).sum();
        log_scale[k] = ds * proj.scale[k];
    }
    ProjectionGrad {
        position,
        log_scale,
        rotation: quat_backward(&g.rotation, &g_rot),
    }
}

/// View-dependent color: SH dot product plus 0.5, clamped below at 0.
pub fn sh_color(g: &Gaussian, view_dir: &Vector3<f64>) -> Result<[f64; 3]> {
    let degree = sh::degree_for_len(g.sh.len())
        .ok_or_else(|| Error::invalid(format!("{} is not a valid SH length", g.sh.len())))?;
    let basis = sh::sh_eval(degree, view_dir)?;
    Ok(color_from_basis(&g.sh, &basis))
}

pub(crate) fn color_from_basis(coeffs: &[[f64; 3]], basis: &[f64]) -> [f64; 3] {
    let mut c = [0.5; 3];
    for (f, b) in coeffs.iter().zip(basis) {
        for ch in 0..3 {
            c[ch] += f[ch] * b;
        }
    }
    c.map(|v| v.max(0.0))
}

/// Color seen from `eye` together with the unit view direction and distance.
pub(crate) fn color_from_eye(g: &Gaussian, degree: usize, eye: &Vector3<f64>) -> ([f64; 3], Vector3<f64>, f64) {
    let (dir, len) = normalize(&(g.position - eye));
    let mut basis = [0.0; 16];
    sh::eval_into(degree, &dir, &mut basis);
    (color_from_basis(&g.sh, &basis[..g.sh.len()]), dir, len)
}

/// Backward of [`color_from_eye`]: accumulates into `d_sh` and returns the
/// position gradient through the view direction.
pub(crate) fn color_backward(
    g: &Gaussian,
    degree: usize,
    dir: &Vector3<f64>,
    len: f64,
    color: &[f64; 3],
    d_color: &[f64; 3],
    d_sh: &mut [[f64; 3]],
) -> Vector3<f64> {
    let mut basis = [0.0; 16];
    let mut grads = [Vector3::zeros(); 16];
    sh::eval_into(degree, dir, &mut basis);
    sh::eval_grad_into(degree, dir, &mut grads);
    let mut d_dir = Vector3::zeros();
    let k = g.sh.len();
    for ch in 0..3 {
        // clamp at zero; an exactly-zero color is treated as clamped
        if color[ch] <= 0.0 || d_color[ch] == 0.0 {
            continue;
        }
        for i in 0..k {
            d_sh[i][ch] += d_color[ch] * basis[i];
            d_dir += grads[i] * (d_color[ch] * g.sh[i][ch]);
        }
    }
    normalize_backward(dir, len, &d_dir)
}


/// Gradient with respect to every raw parameter of one Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrad {
    pub position: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub sh: Vec<[f64; 3]>,
    pub normal: Vector3<f64>,
    pub albedo_logit: Vector3<f64>,
    pub roughness_logit: f64,
    pub metallic_logit: f64,
}

impl GaussianGrad {
    pub fn zeros(sh_len: usize) -> Self {
        Self {
            position: Vector3::zeros(),
            log_scale: Vector3::zeros(),
            rotation: [0.0; 4],
            opacity_logit: 0.0,
            sh: vec![[0.0; 3]; sh_len],
            normal: Vector3::zeros(),
            albedo_logit: Vector3::zeros(),
            roughness_logit: 0.0,
            metallic_logit: 0.0,
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::zeros(self.sh.len())
    }
}

/// Parameter groups, each optimized with its own learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Position,
    Scale,
    Rotation,
    Opacity,
    Sh,
    Normal,
    Albedo,
    Roughness,
    Metallic,
}

impl ParamGroup {
    /// Geometry and appearance groups.
    pub const GEOMETRY: [ParamGroup; 6] = [
        ParamGroup::Position,
        ParamGroup::Scale,
        ParamGroup::Rotation,
        ParamGroup::Opacity,
        ParamGroup::Sh,
        ParamGroup::Normal,
    ];
    pub const MATERIAL: [ParamGroup; 3] = [ParamGroup::Albedo, ParamGroup::Roughness, ParamGroup::Metallic];
    pub const ALL: [ParamGroup; 9] = [
        ParamGroup::Position,
        ParamGroup::Scale,
        ParamGroup::Rotation,
        ParamGroup::Opacity,
        ParamGroup::Sh,
        ParamGroup::Normal,
        ParamGroup::Albedo,
        ParamGroup::Roughness,
        ParamGroup::Metallic,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ParamGroup::Position => "position",
            ParamGroup::Scale => "scale",
            ParamGroup::Rotation => "rotation",
            ParamGroup::Opacity => "opacity",
            ParamGroup::Sh => "sh",
            ParamGroup::Normal => "normal",
            ParamGroup::Albedo => "albedo",
            ParamGroup::Roughness => "roughness",
            ParamGroup::Metallic => "metallic",
        }
    }

    pub fn dim(&self, sh_len: usize) -> usize {
        match self {
            ParamGroup::Position | ParamGroup::Scale | ParamGroup::Normal | ParamGroup::Albedo => 3,
            ParamGroup::Rotation => 4,
            ParamGroup::Opacity | ParamGroup::Roughness | ParamGroup::Metallic => 1,
            ParamGroup::Sh => 3 * sh_len,
        }
    }

    pub fn read(&self, g: &Gaussian, out: &mut Vec<f64>) {
        match self {
            ParamGroup::Position => out.extend_from_slice(g.position.as_slice()),
            ParamGroup::Scale => out.extend_from_slice(g.log_scale.as_slice()),
            ParamGroup::Rotation => out.extend_from_slice(&g.rotation),
            ParamGroup::Opacity => out.push(g.opacity_logit),
            ParamGroup::Sh => out.extend(g.sh.iter().flatten()),
            ParamGroup::Normal => out.extend_from_slice(g.normal.as_slice()),
            ParamGroup::Albedo => out.extend_from_slice(g.albedo_logit.as_slice()),
            ParamGroup::Roughness => out.push(g.roughness_logit),
            ParamGroup::Metallic => out.push(g.metallic_logit),
        }
    }

    pub fn read_grad(&self, g: &GaussianGrad, out: &mut Vec<f64>) {
        match self {
            ParamGroup::Position => out.extend_from_slice(g.position.as_slice()),
            ParamGroup::Scale => out.extend_from_slice(g.log_scale.as_slice()),
            ParamGroup::Rotation => out.extend_from_slice(&g.rotation),
            ParamGroup::Opacity => out.push(g.opacity_logit),
            ParamGroup::Sh => out.extend(g.sh.iter().flatten()),
            ParamGroup::Normal => out.extend_from_slice(g.normal.as_slice()),
            ParamGroup::Albedo => out.extend_from_slice(g.albedo_logit.as_slice()),
            ParamGroup::Roughness => out.push(g.roughness_logit),
            ParamGroup::Metallic => out.push(g.metallic_logit),
        }
    }

    /// Writes `src` (exactly `dim` values) into `g`.
    pub fn write(&self, g: &mut Gaussian, src: &[f64]) {
        match self {
            ParamGroup::Position => g.position.copy_from_slice(src),
            ParamGroup::Scale => g.log_scale.copy_from_slice(src),
            ParamGroup::Rotation => g.rotation.copy_from_slice(src),
            ParamGroup::Opacity => g.opacity_logit = src[0],
            ParamGroup::Sh => {
                for (c, v) in g.sh.iter_mut().zip(src.chunks(3)) {
                    c.copy_from_slice(v);
                }
            }
            ParamGroup::Normal => g.normal.copy_from_slice(src),
            ParamGroup::Albedo => g.albedo_logit.copy_from_slice(src),
            ParamGroup::Roughness => g.roughness_logit = src[0],
            ParamGroup::Metallic => g.metallic_logit = src[0],
        }
    }
}

impl GaussianCloud {
    /// Concatenates `group` over all Gaussians.
    pub fn gather(&self, group: ParamGroup) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * group.dim(self.sh_len()));
        for g in &self.gaussians {
            group.read(g, &mut out);
        }
        out
    }

    pub fn scatter(&mut self, group: ParamGroup, values: &[f64]) {
        let d = group.dim(self.sh_len());
        assert_eq!(values.len(), d * self.len());
        for (g, v) in self.gaussians.iter_mut().zip(values.chunks(d)) {
            group.write(g, v);
        }
    }
}

pub fn gather_grad(grads: &[GaussianGrad], group: ParamGroup) -> Vec<f64> {
    let mut out = Vec::new();
    for g in grads {
        group.read_grad(g, &mut out);
    }
    out
}
