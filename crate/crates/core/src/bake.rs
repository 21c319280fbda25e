//! Light-probe baking: six-face cubemaps rendered from probe centers, binary
//! occlusion by a distance threshold, SH projection with exact texel solid
//! angles, and masked-trilinear probe queries.
//!
//! Probes sit at the centers of a regular `Gx×Gy×Gz` partition of the grid
//! bounds. A query at `x` interpolates the eight probes at the corners of the
//! probe-lattice box containing `x` (clamped at the border).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{rigid, Camera};
use crate::error::{Error, Result};
use crate::gaussian::GaussianCloud;
use crate::par;
use crate::raster::{rasterize_forward, DepthMode, RasterConfig, RenderOptions};
use crate::sh;

pub const VOLUME_MAGIC: &[u8; 8] = b"GSIRVOL1";

/// Face order of every cubemap.
pub const FACES: [&str; 6] = ["+X", "-X", "+Y", "-Y", "+Z", "-Z"];

/// Camera basis of a face as rows (right, down, forward).
pub fn face_basis(face: usize) -> Matrix3<f64> {
    let (f, up) = match face {
        0 => (Vector3::x(), Vector3::z()),
        1 => (-Vector3::x(), Vector3::z()),
        2 => (Vector3::y(), Vector3::z()),
        3 => (-Vector3::y(), Vector3::z()),
        4 => (Vector3::z(), Vector3::y()),
        5 => (-Vector3::z(), Vector3::y()),
        _ => panic!("face index {face} out of range"),
    };
    let r = f.cross(&up);
    let d = f.cross(&r);
    Matrix3::from_rows(&[r.transpose(), d.transpose(), f.transpose()])
}

/// 90° camera for one face, centered at `center`.
pub fn face_camera(face: usize, center: &Vector3<f64>, res: usize) -> Camera {
    let rot = face_basis(face);
    let t = -(rot * center);
    let h = res as f64 / 2.0;
    Camera::new(h, h, h, h, res, res, rigid(rot, t))
}

/// Face-plane coordinates in `[-1,1]` of texel `(x, y)`'s center.
fn texel_uv(res: usize, x: usize, y: usize) -> (f64, f64) {
    (
        2.0 * (x as f64 + 0.5) / res as f64 - 1.0,
        2.0 * (y as f64 + 0.5) / res as f64 - 1.0,
    )
}

/// Unit direction through the center of a texel.
pub fn texel_dir(face: usize, res: usize, x: usize, y: usize) -> Vector3<f64> {
    let b = face_basis(face);
    let (u, v) = texel_uv(res, x, y);
    (b.transpose() * Vector3::new(u, v, 1.0)).normalize()
}

fn area_element(x: f64, y: f64) -> f64 {
    (x * y).atan2((x * x + y * y + 1.0).sqrt())
}

/// Exact solid angle subtended by a texel.
pub fn texel_solid_angle(res: usize, x: usize, y: usize) -> f64 {
    let s = 2.0 / res as f64;
    let (x0, y0) = (x as f64 * s - 1.0, y as f64 * s - 1.0);
    let (x1, y1) = (x0 + s, y0 + s);
    area_element(x0, y0) - area_element(x0, y1) - area_element(x1, y0) + area_element(x1, y1)
}

/// Face and texel hit by direction `d` (non-zero).
pub fn dir_to_texel(d: &Vector3<f64>, res: usize) -> (usize, usize, usize) {
    let a = d.abs();
    let face = if a.x >= a.y && a.x >= a.z {
        if d.x >= 0.0 {
            0
        } else {
            1
        }
    } else if a.y >= a.z {
        if d.y >= 0.0 {
            2
        } else {
            3
        }
    } else if d.z >= 0.0 {
        4
    } else {
        5
    };
    let local = face_basis(face) * d;
    let to_idx = |c: f64| (((c / local.z + 1.0) * 0.5 * res as f64).floor() as usize).min(res - 1);
    (face, to_idx(local.x), to_idx(local.y))
}

/// Six square faces of `channels` values per texel.
#[derive(Debug, Clone, PartialEq)]
pub struct Cubemap {
    pub res: usize,
    pub channels: usize,
    /// Indexed `((face·res + y)·res + x)·channels + c`.
    pub data: Vec<f64>,
}

impl Cubemap {
    pub fn new(res: usize, channels: usize, fill: f64) -> Self {
        Self {
            res,
            channels,
            data: vec![fill; 6 * res * res * channels],
        }
    }

    /// Samples `f(direction)` at every texel center.
    pub fn from_fn(res: usize, channels: usize, f: impl Fn(&Vector3<f64>) -> Vec<f64>) -> Self {
        let mut cm = Self::new(res, channels, 0.0);
        for face in 0..6 {
            for y in 0..res {
                for x in 0..res {
                    let v = f(&texel_dir(face, res, x, y));
                    let i = cm.index(face, x, y);
                    cm.data[i..i + channels].copy_from_slice(&v[..channels]);
                }
            }
        }
        cm
    }

    #[inline]
    pub fn index(&self, face: usize, x: usize, y: usize) -> usize {
        ((face * self.res + y) * self.res + x) * self.channels
    }

    pub fn texel(&self, face: usize, x: usize, y: usize) -> &[f64] {
        let i = self.index(face, x, y);
        &self.data[i..i + self.channels]
    }

    /// Nearest-texel lookup.
    pub fn lookup(&self, d: &Vector3<f64>) -> &[f64] {
        let (f, x, y) = dir_to_texel(d, self.res);
        self.texel(f, x, y)
    }
}

/// Per-texel `Y_k(ω)·dΩ` table for a face resolution and SH degree.
#[derive(Debug, Clone)]
pub struct CubeProjector {
    pub res: usize,
    pub degree: usize,
    weights: Vec<f64>,
}

impl CubeProjector {
    pub fn new(res: usize, degree: usize) -> Result<Self> {
        sh::ShBasis::new(degree)?;
        if res == 0 {
            return Err(Error::invalid("cubemap resolution must be positive"));
        }
        let nc = sh::num_coeffs(degree);
        let mut weights = vec![0.0; 6 * res * res * nc];
        let mut y_buf = vec![0.0; nc];
        for face in 0..6 {
            for y in 0..res {
                for x in 0..res {
                    sh::eval_into(degree, &texel_dir(face, res, x, y), &mut y_buf);
                    let da = texel_solid_angle(res, x, y);
                    let t = (face * res + y) * res + x;
                    for k in 0..nc {
                        weights[t * nc + k] = y_buf[k] * da;
                    }
                }
            }
        }
        Ok(Self { res, degree, weights })
    }

    /// SH coefficients laid out `[k·channels + c]`.
    pub fn project(&self, cm: &Cubemap) -> Result<Vec<f64>> {
        if cm.res != self.res {
            return Err(Error::invalid(format!(
                "cubemap resolution {} does not match projector {}",
                cm.res, self.res
            )));
        }
        let nc = sh::num_coeffs(self.degree);
        let ch = cm.channels;
        let mut out = vec![0.0; nc * ch];
        for (t, texel) in cm.data.chunks(ch).enumerate() {
            let w = &self.weights[t * nc..(t + 1) * nc];
            for k in 0..nc {
                for c in 0..ch {
                    out[k * ch + c] += w[k] * texel[c];
                }
            }
        }
        Ok(out)
    }
}

/// `f_lm = Σ_texels value·Y_lm·dΩ`, laid out `[k·channels + c]`.
pub fn sh_project_cubemap(cm: &Cubemap, degree: usize) -> Result<Vec<f64>> {
    CubeProjector::new(cm.res, degree)?.project(cm)
}

/// Depth (radial distance, `+∞` where nothing was hit) and radiance seen from one point.
#[derive(Debug, Clone)]
pub struct CellCubemaps {
    pub depth: Cubemap,
    pub radiance: Cubemap,
}

pub fn render_cell_cubemaps(
    cloud: &GaussianCloud,
    center: &Vector3<f64>,
    face_res: usize,
    background: [f64; 3],
    raster: &RasterConfig,
) -> CellCubemaps {
    let mut depth = Cubemap::new(face_res, 1, f64::INFINITY);
    let mut radiance = Cubemap::new(face_res, 3, 0.0);
    let opts = RenderOptions {
        depth_mode: DepthMode::Linear,
        background,
        raster: *raster,
        ..Default::default()
    };
    for face in 0..6 {
        let cam = face_camera(face, center, face_res);
        let fb = rasterize_forward(cloud, &cam, &opts);
        for y in 0..face_res {
            for x in 0..face_res {
                let p = y * face_res + x;
                let i = depth.index(face, x, y);
                if fb.coverage[p] {
                    let (u, v) = texel_uv(face_res, x, y);
                    depth.data[i] = fb.depth[p] * (1.0 + u * u + v * v).sqrt();
                }
                let j = radiance.index(face, x, y);
                radiance.data[j..j + 3].copy_from_slice(&fb.color[3 * p..3 * p + 3]);
            }
        }
    }
    CellCubemaps { depth, radiance }
}

/// Texel = 1 where something lies closer than `tau`.
pub fn occlusion_from_depth(depth: &Cubemap, tau: f64) -> Result<Cubemap> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("occlusion threshold must be positive, got {tau}")));
    }
    Ok(Cubemap {
        res: depth.res,
        channels: depth.channels,
        data: depth.data.iter().map(|&d| if d < tau { 1.0 } else { 0.0 }).collect(),
    })
}

/// Regular probe grid of SH coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    pub dims: [usize; 3],
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
    pub degree: usize,
    pub channels: usize,
    /// Cells x-fastest; each cell holds `num_coeffs(degree)·channels` values laid out `[k·channels + c]`.
    pub coeffs: Vec<f64>,
}

impl VolumeGrid {
    pub fn new(dims: [usize; 3], min: Vector3<f64>, max: Vector3<f64>, degree: usize, channels: usize) -> Result<Self> {
        sh::ShBasis::new(degree)?;
        if dims.iter().any(|&d| d == 0) || channels == 0 {
            return Err(Error::invalid(format!("grid dims {dims:?} and channels {channels} must be positive")));
        }
        if !(0..3).all(|i| min[i].is_finite() && max[i].is_finite() && max[i] > min[i]) {
            return Err(Error::invalid("grid bounds must be finite with max > min"));
        }
        let n = dims[0] * dims[1] * dims[2] * sh::num_coeffs(degree) * channels;
        Ok(Self {
            dims,
            min,
            max,
            degree,
            channels,
            coeffs: vec![0.0; n],
        })
    }

    pub fn num_cells(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn block_len(&self) -> usize {
        sh::num_coeffs(self.degree) * self.channels
    }

    pub fn cell_index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn cell_size(&self) -> Vector3<f64> {
        (self.max - self.min).component_div(&Vector3::new(
            self.dims[0] as f64,
            self.dims[1] as f64,
            self.dims[2] as f64,
        ))
    }

    pub fn cell_center(&self, cell: usize) -> Vector3<f64> {
        let i = cell % self.dims[0];
        let j = (cell / self.dims[0]) % self.dims[1];
        let k = cell / (self.dims[0] * self.dims[1]);
        let s = self.cell_size();
        self.min + Vector3::new((i as f64 + 0.5) * s.x, (j as f64 + 0.5) * s.y, (k as f64 + 0.5) * s.z)
    }

    pub fn cell(&self, cell: usize) -> &[f64] {
        let b = self.block_len();
        &self.coeffs[cell * b..(cell + 1) * b]
    }

    pub fn cell_mut(&mut self, cell: usize) -> &mut [f64] {
        let b = self.block_len();
        &mut self.coeffs[cell * b..(cell + 1) * b]
    }

    /// The eight surrounding probes and their trilinear weights (duplicates at the border carry zero weight).
    pub fn trilinear(&self, x: &Vector3<f64>) -> [(usize, f64); 8] {
        let s = self.cell_size();
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let n = self.dims[a];
            let u = ((x[a] - self.min[a]) / s[a] - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = (u.floor() as usize).min(n.saturating_sub(2));
            base[a] = i0;
            frac[a] = if n == 1 { 0.0 } else { u - i0 as f64 };
        }
        let mut out = [(0usize, 0.0); 8];
        for (c, slot) in out.iter_mut().enumerate() {
            let mut idx = [0usize; 3];
            let mut w = 1.0;
            for a in 0..3 {
                let hi = (c >> a) & 1 == 1;
                let step = usize::from(hi && self.dims[a] > 1);
                idx[a] = base[a] + step;
                w *= if hi { frac[a] } else { 1.0 - frac[a] };
            }
            *slot = (self.cell_index(idx[0], idx[1], idx[2]), w);
        }
        out
    }

    /// Trilinear weights with probes behind the tangent plane of `(x, n)` removed and the rest
    /// renormalized; falls back to plain trilinear when every weighted probe is masked.
    pub fn masked_trilinear(&self, x: &Vector3<f64>, n: &Vector3<f64>) -> [(usize, f64); 8] {
        let plain = self.trilinear(x);
        let mut masked = plain;
        let mut total = 0.0;
        for (cell, w) in masked.iter_mut() {
            if (self.cell_center(*cell) - x).dot(n) <= 0.0 {
                *w = 0.0;
            }
            total += *w;
        }
        if total <= 0.0 {
            return plain;
        }
        for (_, w) in masked.iter_mut() {
            *w /= total;
        }
        masked
    }

    /// Weighted blend of cell coefficient blocks.
    pub fn blend(&self, weights: &[(usize, f64)]) -> Vec<f64> {
        let mut out = vec![0.0; self.block_len()];
        for &(cell, w) in weights {
            if w == 0.0 {
                continue;
            }
            for (o, c) in out.iter_mut().zip(self.cell(cell)) {
                *o += w * c;
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.coeffs.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("volume coefficient {i}")));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(72 + 4 * self.coeffs.len());
        buf.extend_from_slice(VOLUME_MAGIC);
        for d in self.dims {
            buf.write_u32::<LittleEndian>(d as u32).unwrap();
        }
        for v in self.min.iter().chain(self.max.iter()) {
            buf.write_f64::<LittleEndian>(*v).unwrap();
        }
        buf.write_u32::<LittleEndian>(self.degree as u32).unwrap();
        buf.write_u32::<LittleEndian>(self.channels as u32).unwrap();
        for v in &self.coeffs {
            buf.write_f32::<LittleEndian>(*v as f32).unwrap();
        }
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// Parses exactly one record spanning all of `bytes`.
    pub fn from_bytes(bytes: &[u8], context: &str) -> Result<Self> {
        let mut r = bytes;
        let g = Self::read_record(&mut r, context)?;
        if !r.is_empty() {
            return Err(Error::parse(context, format!("{} trailing bytes", r.len())));
        }
        Ok(g)
    }

    /// Parses one record from the front of `r`, advancing it.
    pub fn read_record(r: &mut &[u8], context: &str) -> Result<Self> {
        let bad = |m: &str| Error::parse(context, m);
        if r.len() < 8 || &r[..8] != VOLUME_MAGIC {
            return Err(bad("missing GSIRVOL1 magic"));
        }
        *r = &r[8..];
        let short = |_| bad("truncated header");
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            *d = r.read_u32::<LittleEndian>().map_err(short)? as usize;
        }
        let mut b = [0.0; 6];
        for v in b.iter_mut() {
            *v = r.read_f64::<LittleEndian>().map_err(short)?;
        }
        let degree = r.read_u32::<LittleEndian>().map_err(short)? as usize;
        let channels = r.read_u32::<LittleEndian>().map_err(short)? as usize;
        if let Some(i) = b.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{context}: bounds element {i}")));
        }
        let mut grid = Self::new(
            dims,
            Vector3::new(b[0], b[1], b[2]),
            Vector3::new(b[3], b[4], b[5]),
            degree,
            channels,
        )
        .map_err(|e| bad(&e.to_string()))?;
        if r.len() < 4 * grid.coeffs.len() {
            return Err(bad(&format!(
                "expected {} coefficient bytes, found {}",
                4 * grid.coeffs.len(),
                r.len()
            )));
        }
        for (i, c) in grid.coeffs.iter_mut().enumerate() {
            let v = r.read_f32::<LittleEndian>().map_err(short)?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{context}: coefficient {i}")));
            }
            *c = v as f64;
        }
        Ok(grid)
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

/// Occlusion in direction `dir` at `x`, in `[0, 1]`.
pub fn query_occlusion(grid: &VolumeGrid, x: &Vector3<f64>, n: &Vector3<f64>, dir: &Vector3<f64>) -> f64 {
    let c = grid.blend(&grid.masked_trilinear(x, n));
    sh::reconstruct(&c, dir).clamp(0.0, 1.0)
}

/// Cosine-weighted hemisphere average of the occlusion about `n`, in `[0, 1]`.
pub fn ambient_occlusion(grid: &VolumeGrid, x: &Vector3<f64>, n: &Vector3<f64>) -> f64 {
    let c = grid.blend(&grid.masked_trilinear(x, n));
    (sh::irradiance(&c, n) / std::f64::consts::PI).clamp(0.0, 1.0)
}

/// Irradiance about `n` from the cached radiance, per channel, clamped at zero.
pub fn query_indirect_irradiance(grid: &VolumeGrid, x: &Vector3<f64>, n: &Vector3<f64>) -> [f64; 3] {
    let c = grid.blend(&grid.trilinear(x));
    irradiance_rgb(&c, grid.channels, n).map(|v| v.max(0.0))
}

/// Unclamped irradiance of `[k·channels + c]` laid-out coefficients (first three channels).
pub fn irradiance_rgb(coeffs: &[f64], channels: usize, n: &Vector3<f64>) -> [f64; 3] {
    let nc = coeffs.len() / channels;
    let mut y = vec![0.0; nc];
    sh::eval_into(sh::degree_for_len(nc).unwrap_or(0), n, &mut y);
    let mut out = [0.0; 3];
    for (k, yk) in y.iter().enumerate() {
        let w = sh::cosine_lobe_weight(sh::band_of(k)) * yk;
        for (c, o) in out.iter_mut().enumerate().take(channels) {
            *o += w * coeffs[k * channels + c];
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BakeConfig {
    pub dims: [usize; 3],
    pub face_res: usize,
    pub degree: usize,
    /// Occlusion distance threshold; `None` means a tenth of the bounds diagonal.
    pub tau: Option<f64>,
    /// Fractional growth of the cloud's bounding box on every side.
    pub inflate: f64,
}

impl Default for BakeConfig {
    fn default() -> Self {
        Self {
            dims: [16, 16, 16],
            face_res: 64,
            degree: 2,
            tau: None,
            inflate: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BakedVolumes {
    pub occlusion: VolumeGrid,
    pub illumination: VolumeGrid,
}

impl BakedVolumes {
    /// Two GSIRVOL1 records back to back: occlusion, then illumination.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = self.occlusion.to_bytes();
        out.extend_from_slice(&self.illumination.to_bytes());
        write_file(path, &out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let ctx = path.display().to_string();
        let mut r = &bytes[..];
        let occlusion = VolumeGrid::read_record(&mut r, &ctx)?;
        let illumination = VolumeGrid::read_record(&mut r, &ctx)?;
        if !r.is_empty() {
            return Err(Error::parse(&ctx, format!("{} trailing bytes", r.len())));
        }
        if occlusion.channels != 1 || illumination.channels != 3 || occlusion.dims != illumination.dims {
            return Err(Error::parse(&ctx, "expected a 1-channel occlusion grid and a matching 3-channel illumination grid"));
        }
        Ok(Self {
            occlusion,
            illumination,
        })
    }
}

/// Grid bounds for a cloud: its bounding box grown by `inflate` of the extent on every side.
pub fn grid_bounds(cloud: &GaussianCloud, inflate: f64) -> Result<(Vector3<f64>, Vector3<f64>)> {
    let (lo, hi) = cloud
        .bounds()
        .ok_or_else(|| Error::invalid("cannot derive grid bounds from an empty cloud"))?;
    let ext = (hi - lo).map(|e| e.max(1e-3));
    Ok((lo - ext * inflate, hi + ext * inflate))
}

/// Bakes occlusion and one-bounce radiance for every probe.
pub fn bake_volumes(
    cloud: &GaussianCloud,
    bounds: (Vector3<f64>, Vector3<f64>),
    config: &BakeConfig,
    raster: &RasterConfig,
) -> Result<BakedVolumes> {
    let tau = config.tau.unwrap_or_else(|| 0.1 * (bounds.1 - bounds.0).norm());
    let mut occlusion = VolumeGrid::new(config.dims, bounds.0, bounds.1, config.degree, 1)?;
    let mut illumination = VolumeGrid::new(config.dims, bounds.0, bounds.1, config.degree, 3)?;
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("occlusion threshold must be positive, got {tau}")));
    }
    let proj = CubeProjector::new(config.face_res, config.degree)?;
    let blocks = par::map_range(occlusion.num_cells(), |cell| {
        let center = occlusion.cell_center(cell);
        let cm = render_cell_cubemaps(cloud, &center, config.face_res, [0.0; 3], raster);
        let occ = occlusion_from_depth(&cm.depth, tau).expect("tau checked");
        (
            proj.project(&occ).expect("matching resolution"),
            proj.project(&cm.radiance).expect("matching resolution"),
        )
    });
    for (cell, (o, r)) in blocks.into_iter().enumerate() {
        occlusion.cell_mut(cell).copy_from_slice(&o);
        illumination.cell_mut(cell).copy_from_slice(&r);
    }
    Ok(BakedVolumes {
        occlusion,
        illumination,
    })
}
