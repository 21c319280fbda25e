//! Tile-based splatting rasterizer with an analytic backward pass.
//!
//! Gaussians are projected, globally sorted by camera depth (ties broken by
//! index) and binned into 16×16 tiles by the bounding box of their 3σ ellipse.
//! Tiles are composited independently and in parallel; inside a tile every
//! pixel blends its splats strictly front to back. The backward pass replays
//! the same blending per pixel and then walks it back to front, so no per-pixel
//! contributor lists are kept between passes. Per-tile gradient partials are
//! reduced in tile order, which keeps gradients bit-identical for any worker
//! count.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::gaussian::{
    color_backward, color_from_eye, project_backward, project_gaussian, GaussianCloud, GaussianGrad,
    Projection, DEFAULT_DILATION,
};
use crate::math::{normalize, normalize_backward};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthMode {
    /// `Σ T_i α_i d_i`
    VolAccum,
    /// Depth of the contributor with the largest blending weight.
    Peak,
    /// Blending-weight normalized average of contributor depths.
    Linear,
}

impl DepthMode {
    pub const ALL: [DepthMode; 3] = [DepthMode::VolAccum, DepthMode::Peak, DepthMode::Linear];

    pub fn name(&self) -> &'static str {
        match self {
            DepthMode::VolAccum => "vol_accum",
            DepthMode::Peak => "peak",
            DepthMode::Linear => "linear",
        }
    }
}

impl std::str::FromStr for DepthMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vol_accum" | "vol-accum" => Ok(DepthMode::VolAccum),
            "peak" => Ok(DepthMode::Peak),
            "linear" => Ok(DepthMode::Linear),
            other => Err(format!("unknown depth mode '{other}' (vol_accum|peak|linear)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RasterConfig {
    pub tile_size: usize,
    /// Splats with `g·α` below this are skipped at a pixel.
    pub min_weight: f64,
    /// Compositing stops once transmittance falls below this.
    pub min_transmittance: f64,
    /// Pixels with accumulated weight below this have undefined depth/normal.
    pub coverage_eps: f64,
    pub dilation: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            tile_size: 16,
            min_weight: 1.0 / 255.0,
            min_transmittance: 1e-4,
            coverage_eps: 1e-6,
            dilation: DEFAULT_DILATION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub depth_mode: DepthMode,
    pub normals: bool,
    pub materials: bool,
    pub background: [f64; 3],
    pub raster: RasterConfig,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            depth_mode: DepthMode::Linear,
            normals: false,
            materials: false,
            background: [0.0; 3],
            raster: RasterConfig::default(),
        }
    }
}

impl RenderOptions {
    fn layout(&self) -> Layout {
        let mut c = 3;
        let normal = if self.normals {
            c += 3;
            Some(c - 3)
        } else {
            None
        };
        let material = if self.materials {
            c += MATERIAL_CHANNELS;
            Some(c - MATERIAL_CHANNELS)
        } else {
            None
        };
        Layout {
            channels: c,
            normal,
            material,
        }
    }
}

/// Albedo (3), roughness, metallic.
pub const MATERIAL_CHANNELS: usize = 5;

#[derive(Debug, Clone, Copy)]
struct Layout {
    channels: usize,
    normal: Option<usize>,
    material: Option<usize>,
}

/// One projected, visible Gaussian.
#[derive(Debug, Clone)]
pub struct SplatRecord {
    pub gaussian: usize,
    pub mean: Vector2<f64>,
    pub conic: [f64; 3],
    pub opacity: f64,
    pub depth: f64,
    pub projection: Projection,
}

/// Depth-sorted visible splats, their features and the tile bins.
#[derive(Debug, Clone)]
pub struct SplatList {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub records: Vec<SplatRecord>,
    /// `records.len() × channels`, in record order.
    pub features: Vec<f64>,
    /// Record indices per tile, front to back.
    pub tiles: Vec<Vec<u32>>,
}

/// Projects, sorts and bins `cloud` for `cam`. `features` holds `channels`
/// values per Gaussian in cloud order.
pub fn build_splat_list(
    cloud: &GaussianCloud,
    cam: &Camera,
    features: &[f64],
    channels: usize,
    config: &RasterConfig,
) -> SplatList {
    assert_eq!(features.len(), cloud.len() * channels);
    let ts = config.tile_size.max(1);
    let tiles_x = cam.width.div_ceil(ts);
    let tiles_y = cam.height.div_ceil(ts);

    let projected: Vec<Option<Projection>> = par::map_range(cloud.len(), |i| {
        project_gaussian(&cloud.gaussians[i], cam, config.dilation)
    });
    let mut records: Vec<(SplatRecord, [usize; 4])> = Vec::new();
    for (i, p) in projected.into_iter().enumerate() {
        let Some(p) = p else { continue };
        if p.depth > cam.far {
            continue;
        }
        let r = p.radius_3sigma();
        let (x0, x1) = (p.mean.x - r, p.mean.x + r);
        let (y0, y1) = (p.mean.y - r, p.mean.y + r);
        if !(x1 >= 0.0 && y1 >= 0.0 && x0 < cam.width as f64 && y0 < cam.height as f64) {
            continue;
        }
        let bx0 = (x0.max(0.0) / ts as f64) as usize;
        let by0 = (y0.max(0.0) / ts as f64) as usize;
        let bx1 = ((x1 / ts as f64) as usize).min(tiles_x - 1);
        let by1 = ((y1 / ts as f64) as usize).min(tiles_y - 1);
        records.push((
            SplatRecord {
                gaussian: i,
                mean: p.mean,
                conic: p.conic,
                opacity: cloud.gaussians[i].opacity(),
                depth: p.depth,
                projection: p,
            },
            [bx0, by0, bx1, by1],
        ));
    }
    records.sort_by(|a, b| {
        a.0.depth
            .total_cmp(&b.0.depth)
            .then(a.0.gaussian.cmp(&b.0.gaussian))
    });

    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    let mut feats = Vec::with_capacity(records.len() * channels);
    for (ri, (rec, [bx0, by0, bx1, by1])) in records.iter().enumerate() {
        for ty in *by0..=*by1 {
            for tx in *bx0..=*bx1 {
                tiles[ty * tiles_x + tx].push(ri as u32);
            }
        }
        let g = rec.gaussian;
        feats.extend_from_slice(&features[g * channels..(g + 1) * channels]);
    }
    SplatList {
        width: cam.width,
        height: cam.height,
        channels,
        tile_size: ts,
        tiles_x,
        tiles_y,
        records: records.into_iter().map(|(r, _)| r).collect(),
        features: feats,
        tiles,
    }
}

/// Raw per-pixel accumulation of a [`SplatList`].
#[derive(Debug, Clone)]
pub struct Composite {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// `Σ T_i w_i f_i + T_final · background`, `H×W×channels`.
    pub features: Vec<f64>,
    /// `Σ T_i w_i`.
    pub alpha: Vec<f64>,
    /// `Σ T_i w_i d_i` (not normalized).
    pub depth_sum: Vec<f64>,
    /// Depth of the heaviest contributor, NaN when there is none.
    pub depth_peak: Vec<f64>,
    /// Number of splats blended at each pixel.
    pub contributors: Vec<u32>,
}

impl Composite {
    /// Depth map in the given mode; pixels with weight below `eps` get `sentinel`.
    pub fn depth(&self, mode: DepthMode, eps: f64, sentinel: f64) -> Vec<f64> {
        (0..self.alpha.len())
            .map(|i| {
                let a = self.alpha[i];
                if a < eps {
                    return sentinel;
                }
                match mode {
                    DepthMode::VolAccum => self.depth_sum[i],
                    DepthMode::Linear => self.depth_sum[i] / a,
                    DepthMode::Peak => self.depth_peak[i],
                }
            })
            .collect()
    }
}

#[inline]
fn splat_weight(rec: &SplatRecord, px: f64, py: f64) -> (f64, f64, f64, f64) {
    let dx = px - rec.mean.x;
    let dy = py - rec.mean.y;
    let [a, b, c] = rec.conic;
    let power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy;
    let g = power.min(0.0).exp();
    (g, rec.opacity * g, dx, dy)
}

struct TileOut {
    features: Vec<f64>,
    alpha: Vec<f64>,
    depth_sum: Vec<f64>,
    depth_peak: Vec<f64>,
    contributors: Vec<u32>,
}

/// Front-to-back compositing of every pixel.
pub fn composite(list: &SplatList, background: &[f64], config: &RasterConfig) -> Composite {
    let c = list.channels;
    assert_eq!(background.len(), c);
    let (w, h, ts) = (list.width, list.height, list.tile_size);
    let tiles: Vec<TileOut> = par::map_range(list.tiles.len(), |t| {
        let (tx, ty) = (t % list.tiles_x, t / list.tiles_x);
        let n = ts * ts;
        let mut out = TileOut {
            features: vec![0.0; n * c],
            alpha: vec![0.0; n],
            depth_sum: vec![0.0; n],
            depth_peak: vec![f64::NAN; n],
            contributors: vec![0; n],
        };
        for ly in 0..ts {
            let y = ty * ts + ly;
            if y >= h {
                break;
            }
            for lx in 0..ts {
                let x = tx * ts + lx;
                if x >= w {
                    break;
                }
                let k = ly * ts + lx;
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut t_acc = 1.0;
                let mut best = -1.0;
                let f = &mut out.features[k * c..(k + 1) * c];
                for &ri in &list.tiles[t] {
                    let rec = &list.records[ri as usize];
                    let (_, wgt, _, _) = splat_weight(rec, px, py);
                    if wgt < config.min_weight {
                        continue;
                    }
                    let contrib = t_acc * wgt;
                    let rf = &list.features[ri as usize * c..(ri as usize + 1) * c];
                    for ch in 0..c {
                        f[ch] += contrib * rf[ch];
                    }
                    out.alpha[k] += contrib;
                    out.depth_sum[k] += contrib * rec.depth;
                    if contrib > best {
                        best = contrib;
                        out.depth_peak[k] = rec.depth;
                    }
                    out.contributors[k] += 1;
                    t_acc *= 1.0 - wgt;
                    if t_acc < config.min_transmittance {
                        break;
                    }
                }
                for ch in 0..c {
                    f[ch] += t_acc * background[ch];
                }
            }
        }
        out
    });

    let mut comp = Composite {
        width: w,
        height: h,
        channels: c,
        features: vec![0.0; w * h * c],
        alpha: vec![0.0; w * h],
        depth_sum: vec![0.0; w * h],
        depth_peak: vec![f64::NAN; w * h],
        contributors: vec![0; w * h],
    };
    for (t, tile) in tiles.into_iter().enumerate() {
        let (tx, ty) = (t % list.tiles_x, t / list.tiles_x);
        for ly in 0..ts {
            let y = ty * ts + ly;
            if y >= h {
                break;
            }
            for lx in 0..ts {
                let x = tx * ts + lx;
                if x >= w {
                    break;
                }
                let (k, p) = (ly * ts + lx, y * w + x);
                comp.features[p * c..(p + 1) * c].copy_from_slice(&tile.features[k * c..(k + 1) * c]);
                comp.alpha[p] = tile.alpha[k];
                comp.depth_sum[p] = tile.depth_sum[k];
                comp.depth_peak[p] = tile.depth_peak[k];
                comp.contributors[p] = tile.contributors[k];
            }
        }
    }
    comp
}

/// Upstream gradients on a [`Composite`]; empty vectors mean zero.
#[derive(Debug, Clone, Default)]
pub struct CompositeGrad {
    pub features: Vec<f64>,
    pub alpha: Vec<f64>,
    pub depth_sum: Vec<f64>,
    pub depth_peak: Vec<f64>,
}

/// Gradients for one splat record.
#[derive(Debug, Clone, Default)]
pub struct RecordGrad {
    pub mean: Vector2<f64>,
    pub conic: [f64; 3],
    pub opacity: f64,
    pub depth: f64,
    pub features: Vec<f64>,
}

const REC_FIXED: usize = 7; // mean 2, conic 3, opacity, depth

/// Analytic gradients of the compositing with respect to each record.
pub fn composite_backward(
    list: &SplatList,
    background: &[f64],
    upstream: &CompositeGrad,
    config: &RasterConfig,
) -> Vec<RecordGrad> {
    let c = list.channels;
    let stride = REC_FIXED + c;
    let (w, h, ts) = (list.width, list.height, list.tile_size);
    let get = |v: &Vec<f64>, i: usize| if v.is_empty() { 0.0 } else { v[i] };

    let partials: Vec<Vec<f64>> = par::map_range(list.tiles.len(), |t| {
        let bin = &list.tiles[t];
        let mut acc = vec![0.0; bin.len() * stride];
        if bin.is_empty() {
            return acc;
        }
        let (tx, ty) = (t % list.tiles_x, t / list.tiles_x);
        // (local index in bin, T before, weight g, w, dx, dy)
        let mut stack: Vec<(usize, f64, f64, f64, f64, f64)> = Vec::with_capacity(bin.len());
        let mut resid = vec![0.0; c];
        let mut gf = vec![0.0; c];
        for ly in 0..ts {
            let y = ty * ts + ly;
            if y >= h {
                break;
            }
            for lx in 0..ts {
                let x = tx * ts + lx;
                if x >= w {
                    break;
                }
                let p = y * w + x;
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                for ch in 0..c {
                    gf[ch] = get(&upstream.features, p * c + ch);
                }
                let ga = get(&upstream.alpha, p);
                let gd = get(&upstream.depth_sum, p);
                let gpk = get(&upstream.depth_peak, p);
                if ga == 0.0 && gd == 0.0 && gpk == 0.0 && gf.iter().all(|v| *v == 0.0) {
                    continue;
                }

                stack.clear();
                let mut t_acc = 1.0;
                let mut best = -1.0;
                let mut peak_local = usize::MAX;
                for (li, &ri) in bin.iter().enumerate() {
                    let rec = &list.records[ri as usize];
                    let (g, wgt, dx, dy) = splat_weight(rec, px, py);
                    if wgt < config.min_weight {
                        continue;
                    }
                    if t_acc * wgt > best {
                        best = t_acc * wgt;
                        peak_local = li;
                    }
                    stack.push((li, t_acc, g, wgt, dx, dy));
                    t_acc *= 1.0 - wgt;
                    if t_acc < config.min_transmittance {
                        break;
                    }
                }
                if peak_local != usize::MAX && gpk != 0.0 {
                    acc[peak_local * stride + 6] += gpk;
                }

                // resid_i = Σ_{j>i} Π_{i<k<j}(1-w_k) w_j f_j, with the background as a final opaque layer
                resid.copy_from_slice(background);
                let mut resid_a = 0.0;
                let mut resid_d = 0.0;
                for &(li, t_before, g, wgt, dx, dy) in stack.iter().rev() {
                    let ri = bin[li] as usize;
                    let rec = &list.records[ri];
                    let rf = &list.features[ri * c..(ri + 1) * c];
                    let base = li * stride;
                    let tw = t_before * wgt;
                    let mut d_w = 0.0;
                    for ch in 0..c {
                        d_w += gf[ch] * (rf[ch] - resid[ch]);
                        acc[base + REC_FIXED + ch] += gf[ch] * tw;
                        resid[ch] = wgt * rf[ch] + (1.0 - wgt) * resid[ch];
                    }
                    d_w += ga * (1.0 - resid_a) + gd * (rec.depth - resid_d);
                    acc[base + 6] += gd * tw;
                    resid_a = wgt + (1.0 - wgt) * resid_a;
                    resid_d = wgt * rec.depth + (1.0 - wgt) * resid_d;
                    d_w *= t_before;

                    acc[base + 5] += d_w * g;
                    let d_power = d_w * rec.opacity * g;
                    let [a, b, cc] = rec.conic;
                    acc[base] += d_power * (a * dx + b * dy);
                    acc[base + 1] += d_power * (b * dx + cc * dy);
                    acc[base + 2] += -0.5 * dx * dx * d_power;
                    acc[base + 3] += -dx * dy * d_power;
                    acc[base + 4] += -0.5 * dy * dy * d_power;
                }
            }
        }
        acc
    });

    let mut flat = vec![0.0; list.records.len() * stride];
    for (t, part) in partials.iter().enumerate() {
        for (li, &ri) in list.tiles[t].iter().enumerate() {
            let dst = &mut flat[ri as usize * stride..(ri as usize + 1) * stride];
            for (d, s) in dst.iter_mut().zip(&part[li * stride..(li + 1) * stride]) {
                *d += s;
            }
        }
    }
    flat.chunks(stride)
        .map(|v| RecordGrad {
            mean: Vector2::new(v[0], v[1]),
            conic: [v[2], v[3], v[4]],
            opacity: v[5],
            depth: v[6],
            features: v[REC_FIXED..].to_vec(),
        })
        .collect()
}

/// Rendered images for one view.
#[derive(Debug, Clone)]
pub struct FrameBuffers {
    pub width: usize,
    pub height: usize,
    /// `H×W×3`.
    pub color: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Depth in `depth_mode`; uncovered pixels hold the far plane.
    pub depth: Vec<f64>,
    pub depth_mode: DepthMode,
    /// True where accumulated weight reaches the coverage threshold.
    pub coverage: Vec<bool>,
    /// Composited normal renormalized on covered pixels, `H×W×3`; empty unless requested.
    pub normal: Vec<f64>,
    /// Albedo, roughness, metallic per pixel, `H×W×5`; empty unless requested.
    pub features: Vec<f64>,
    pub contributors: Vec<u32>,
}

impl FrameBuffers {
    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn normal_at(&self, p: usize) -> Vector3<f64> {
        Vector3::new(self.normal[3 * p], self.normal[3 * p + 1], self.normal[3 * p + 2])
    }
}

/// Per-Gaussian colors used by the color channels.
#[derive(Debug, Clone, Copy)]
pub enum ColorSource<'a> {
    /// View-dependent SH color of each Gaussian.
    Sh,
    /// Externally computed radiance, one RGB triple per Gaussian.
    Given(&'a [[f64; 3]]),
}

struct Prepared {
    list: SplatList,
    layout: Layout,
    background: Vec<f64>,
    /// Per-Gaussian view direction and distance (SH colors only).
    view: Vec<(Vector3<f64>, f64)>,
    colors: Vec<[f64; 3]>,
    comp: Composite,
}

fn prepare(cloud: &GaussianCloud, cam: &Camera, colors: ColorSource, opts: &RenderOptions) -> Prepared {
    let layout = opts.layout();
    let c = layout.channels;
    let eye = cam.center();
    let degree = cloud.sh_degree;
    let per: Vec<([f64; 3], Vector3<f64>, f64)> = par::map_range(cloud.len(), |i| {
        let g = &cloud.gaussians[i];
        match colors {
            ColorSource::Sh => color_from_eye(g, degree, &eye),
            ColorSource::Given(cs) => (cs[i], Vector3::zeros(), 0.0),
        }
    });
    let mut features = vec![0.0; cloud.len() * c];
    for (i, g) in cloud.gaussians.iter().enumerate() {
        let f = &mut features[i * c..(i + 1) * c];
        f[..3].copy_from_slice(&per[i].0);
        if let Some(o) = layout.normal {
            let n = g.unit_normal();
            f[o..o + 3].copy_from_slice(n.as_slice());
        }
        if let Some(o) = layout.material {
            let a = g.albedo();
            f[o..o + 3].copy_from_slice(a.as_slice());
            f[o + 3] = g.roughness();
            f[o + 4] = g.metallic();
        }
    }
    let list = build_splat_list(cloud, cam, &features, c, &opts.raster);
    let mut background = vec![0.0; c];
    background[..3].copy_from_slice(&opts.background);
    let comp = composite(&list, &background, &opts.raster);
    Prepared {
        list,
        layout,
        background,
        view: per.iter().map(|p| (p.1, p.2)).collect(),
        colors: per.iter().map(|p| p.0).collect(),
        comp,
    }
}

fn frame_from(prep: &Prepared, cam: &Camera, opts: &RenderOptions) -> FrameBuffers {
    let comp = &prep.comp;
    let n = cam.num_pixels();
    let c = comp.channels;
    let eps = opts.raster.coverage_eps;
    let coverage: Vec<bool> = comp.alpha.iter().map(|&a| a >= eps).collect();
    let mut color = vec![0.0; n * 3];
    let mut normal = Vec::new();
    let mut features = Vec::new();
    if prep.layout.normal.is_some() {
        normal = vec![0.0; n * 3];
    }
    if prep.layout.material.is_some() {
        features = vec![0.0; n * MATERIAL_CHANNELS];
    }
    for p in 0..n {
        let f = &comp.features[p * c..(p + 1) * c];
        color[p * 3..p * 3 + 3].copy_from_slice(&f[..3]);
        if let Some(o) = prep.layout.normal {
            if coverage[p] {
                let (u, _) = normalize(&Vector3::new(f[o], f[o + 1], f[o + 2]));
                normal[p * 3..p * 3 + 3].copy_from_slice(u.as_slice());
            }
        }
        if let Some(o) = prep.layout.material {
            features[p * MATERIAL_CHANNELS..(p + 1) * MATERIAL_CHANNELS]
                .copy_from_slice(&f[o..o + MATERIAL_CHANNELS]);
        }
    }
    FrameBuffers {
        width: cam.width,
        height: cam.height,
        color,
        alpha: comp.alpha.clone(),
        depth: comp.depth(opts.depth_mode, eps, cam.far),
        depth_mode: opts.depth_mode,
        coverage,
        normal,
        features,
        contributors: comp.contributors.clone(),
    }
}

/// Renders color (SH), alpha, depth and the requested extra channels.
pub fn rasterize_forward(cloud: &GaussianCloud, cam: &Camera, opts: &RenderOptions) -> FrameBuffers {
    rasterize_with_colors(cloud, cam, ColorSource::Sh, opts)
}

pub fn rasterize_with_colors(
    cloud: &GaussianCloud,
    cam: &Camera,
    colors: ColorSource,
    opts: &RenderOptions,
) -> FrameBuffers {
    let prep = prepare(cloud, cam, colors, opts);
    frame_from(&prep, cam, opts)
}

/// Depth map in one mode.
pub fn render_depth(cloud: &GaussianCloud, cam: &Camera, mode: DepthMode, config: &RasterConfig) -> Vec<f64> {
    let opts = RenderOptions {
        depth_mode: mode,
        raster: *config,
        ..Default::default()
    };
    rasterize_forward(cloud, cam, &opts).depth
}

/// Upstream gradients on [`FrameBuffers`] outputs; empty vectors mean zero.
#[derive(Debug, Clone, Default)]
pub struct FrameGrads {
    pub color: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Gradient on `FrameBuffers::depth` (in the render's depth mode).
    pub depth: Vec<f64>,
    /// Gradient on the renormalized normal.
    pub normal: Vec<f64>,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CloudGrad {
    pub gaussians: Vec<GaussianGrad>,
    /// Gradient on externally supplied colors (`ColorSource::Given`).
    pub colors: Vec<[f64; 3]>,
}

/// A forward render kept for a later backward pass.
pub struct RenderPass {
    prep: Prepared,
    pub frame: FrameBuffers,
}

/// Forward pass whose intermediate state is retained, so upstream gradients
/// can be computed from the frame before calling [`RenderPass::backward`].
pub fn render_pass(cloud: &GaussianCloud, cam: &Camera, colors: ColorSource, opts: &RenderOptions) -> RenderPass {
    let prep = prepare(cloud, cam, colors, opts);
    let frame = frame_from(&prep, cam, opts);
    RenderPass { prep, frame }
}

impl RenderPass {
    /// Analytic backward pass; arguments must match the ones given to [`render_pass`].
    pub fn backward(
        &self,
        cloud: &GaussianCloud,
        cam: &Camera,
        colors: ColorSource,
        opts: &RenderOptions,
        upstream: &FrameGrads,
    ) -> CloudGrad {
        backward_prepared(cloud, cam, colors, opts, &self.prep, &self.frame, upstream)
    }
}

/// Forward pass followed by the analytic backward pass.
pub fn rasterize_backward(
    cloud: &GaussianCloud,
    cam: &Camera,
    colors: ColorSource,
    opts: &RenderOptions,
    upstream: &FrameGrads,
) -> (FrameBuffers, CloudGrad) {
    let pass = render_pass(cloud, cam, colors, opts);
    let grad = pass.backward(cloud, cam, colors, opts, upstream);
    (pass.frame, grad)
}

fn backward_prepared(
    cloud: &GaussianCloud,
    cam: &Camera,
    colors: ColorSource,
    opts: &RenderOptions,
    prep: &Prepared,
    frame: &FrameBuffers,
    up: &FrameGrads,
) -> CloudGrad {
    let comp = &prep.comp;
    let n = cam.num_pixels();
    let c = comp.channels;
    let layout = prep.layout;

    let mut cg = CompositeGrad {
        features: vec![0.0; n * c],
        alpha: up.alpha.clone(),
        depth_sum: Vec::new(),
        depth_peak: Vec::new(),
    };
    if cg.alpha.is_empty() {
        cg.alpha = vec![0.0; n];
    }
    for p in 0..n {
        let f = &mut cg.features[p * c..(p + 1) * c];
        if !up.color.is_empty() {
            f[..3].copy_from_slice(&up.color[p * 3..p * 3 + 3]);
        }
        if let (Some(o), false) = (layout.normal, up.normal.is_empty()) {
            if frame.coverage[p] {
                let raw = Vector3::new(
                    comp.features[p * c + o],
                    comp.features[p * c + o + 1],
                    comp.features[p * c + o + 2],
                );
                let (u, len) = normalize(&raw);
                let g = Vector3::new(up.normal[3 * p], up.normal[3 * p + 1], up.normal[3 * p + 2]);
                let d = normalize_backward(&u, len, &g);
                f[o..o + 3].copy_from_slice(d.as_slice());
            }
        }
        if let (Some(o), false) = (layout.material, up.features.is_empty()) {
            f[o..o + MATERIAL_CHANNELS]
                .copy_from_slice(&up.features[p * MATERIAL_CHANNELS..(p + 1) * MATERIAL_CHANNELS]);
        }
    }
    if !up.depth.is_empty() {
        match opts.depth_mode {
            DepthMode::VolAccum => {
                cg.depth_sum = (0..n)
                    .map(|p| if frame.coverage[p] { up.depth[p] } else { 0.0 })
                    .collect();
            }
            DepthMode::Linear => {
                cg.depth_sum = vec![0.0; n];
                for p in 0..n {
                    if frame.coverage[p] {
                        let a = comp.alpha[p];
                        cg.depth_sum[p] = up.depth[p] / a;
                        cg.alpha[p] -= up.depth[p] * comp.depth_sum[p] / (a * a);
                    }
                }
            }
            DepthMode::Peak => {
                cg.depth_peak = (0..n)
                    .map(|p| if frame.coverage[p] { up.depth[p] } else { 0.0 })
                    .collect();
            }
        }
    }

    let rec_grads = composite_backward(&prep.list, &prep.background, &cg, &opts.raster);
    let mut by_gaussian: Vec<Option<usize>> = vec![None; cloud.len()];
    for (ri, rec) in prep.list.records.iter().enumerate() {
        by_gaussian[rec.gaussian] = Some(ri);
    }
    let sh_len = cloud.sh_len();
    let degree = cloud.sh_degree;
    let per: Vec<(GaussianGrad, [f64; 3])> = par::map_range(cloud.len(), |i| {
        let mut gg = GaussianGrad::zeros(sh_len);
        let Some(ri) = by_gaussian[i] else {
            return (gg, [0.0; 3]);
        };
        let g = &cloud.gaussians[i];
        let rec = &prep.list.records[ri];
        let rg = &rec_grads[ri];
        let pg = project_backward(g, cam, &rec.projection, &rg.mean, &rg.conic, rg.depth);
        gg.position = pg.position;
        gg.log_scale = pg.log_scale;
        gg.rotation = pg.rotation;
        let a = rec.opacity;
        gg.opacity_logit = rg.opacity * a * (1.0 - a);
        let d_color = [rg.features[0], rg.features[1], rg.features[2]];
        let mut d_given = [0.0; 3];
        match colors {
            ColorSource::Sh => {
                let (dir, len) = prep.view[i];
                gg.position += color_backward(g, degree, &dir, len, &prep.colors[i], &d_color, &mut gg.sh);
            }
            ColorSource::Given(_) => d_given = d_color,
        }
        if let Some(o) = layout.normal {
            let (u, len) = normalize(&g.normal);
            let d = Vector3::new(rg.features[o], rg.features[o + 1], rg.features[o + 2]);
            gg.normal = normalize_backward(&u, len, &d);
        }
        if let Some(o) = layout.material {
            let alb = g.albedo();
            for k in 0..3 {
                gg.albedo_logit[k] = rg.features[o + k] * alb[k] * (1.0 - alb[k]);
            }
            let r = g.roughness();
            gg.roughness_logit = rg.features[o + 3] * r * (1.0 - r);
            let m = g.metallic();
            gg.metallic_logit = rg.features[o + 4] * m * (1.0 - m);
        }
        (gg, d_given)
    });
    let (gaussians, colors) = per.into_iter().unzip();
    CloudGrad { gaussians, colors }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::Gaussian;
    use nalgebra::Matrix4;

    fn cam(w: usize) -> Camera {
        Camera::new(100.0, 100.0, w as f64 / 2.0, w as f64 / 2.0, w, w, Matrix4::identity())
    }

    fn splat(depth: f64, opacity: f64, rgb: [f64; 3]) -> Gaussian {
        // tiny footprint: dilation dominates, peak g = 1 at the pixel center
        let mut g = Gaussian::new(Vector3::new(0.0, 0.0, depth), Vector3::repeat(1e-4), [1.0, 0.0, 0.0, 0.0], 0.5, 0);
        g.opacity_logit = if opacity >= 1.0 { 60.0 } else { crate::math::logit(opacity) };
        g.set_base_color(rgb);
        g
    }

    #[test]
    fn single_opaque_splat() {
        let mut cloud = GaussianCloud::new(0);
        cloud.push(splat(2.0, 1.0, [1.0, 0.0, 0.0]));
        // 17 px image: center pixel (8,8) has center 8.5 = cx
        let cam = Camera::new(100.0, 100.0, 8.5, 8.5, 17, 17, Matrix4::identity());
        let f = rasterize_forward(&cloud, &cam, &RenderOptions::default());
        let p = 8 * 17 + 8;
        assert!((f.color[3 * p] - 1.0).abs() < 1e-12);
        assert!(f.color[3 * p + 1].abs() < 1e-12);
        assert!((f.alpha[p] - 1.0).abs() < 1e-12);
        for mode in DepthMode::ALL {
            let d = render_depth(&cloud, &cam, mode, &RasterConfig::default());
            assert!((d[p] - 2.0).abs() < 1e-12, "{mode:?}");
        }
    }

    #[test]
    fn two_coincident_half_splats() {
        let mut cloud = GaussianCloud::new(0);
        cloud.push(splat(1.0, 0.5, [1.0, 0.0, 0.0]));
        cloud.push(splat(3.0, 0.5, [0.0, 0.0, 1.0]));
        let cam = Camera::new(100.0, 100.0, 8.5, 8.5, 17, 17, Matrix4::identity());
        let f = rasterize_forward(&cloud, &cam, &RenderOptions::default());
        let p = 8 * 17 + 8;
        assert!((f.color[3 * p] - 0.5).abs() < 1e-9);
        assert!((f.color[3 * p + 2] - 0.25).abs() < 1e-9);
        assert!((f.alpha[p] - 0.75).abs() < 1e-9);
        let cfg = RasterConfig::default();
        let d = |m| render_depth(&cloud, &cam, m, &cfg)[p];
        assert!((d(DepthMode::VolAccum) - 1.25).abs() < 1e-9);
        assert!((d(DepthMode::Peak) - 1.0).abs() < 1e-9);
        assert!((d(DepthMode::Linear) - 5.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn empty_cloud_gives_background_and_sentinel() {
        let cloud = GaussianCloud::new(0);
        let c = cam(20);
        let opts = RenderOptions {
            background: [0.2, 0.3, 0.4],
            ..Default::default()
        };
        let f = rasterize_forward(&cloud, &c, &opts);
        assert!(f.depth.iter().all(|&d| d == c.far));
        assert!(f.coverage.iter().all(|&v| !v));
        assert_eq!(&f.color[..3], &[0.2, 0.3, 0.4]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut cloud = GaussianCloud::new(1);
        cloud.push(splat(2.0, 0.7, [0.3, 0.6, 0.9]));
        let c = cam(16);
        let (_, g) = rasterize_backward(&cloud, &c, ColorSource::Sh, &RenderOptions::default(), &FrameGrads::default());
        assert!(g.gaussians.iter().all(|g| g.is_zero()));
    }
}
