//! Adam and the two optimization stages.
//!
//! Stage 1 fits geometry and appearance (positions, scales, rotations,
//! opacities, SH colors, normals) to the training views with the color loss
//! plus the depth-derived normal terms. Stage 3 freezes all of that and fits
//! per-Gaussian materials, the environment map and optionally the baked
//! illumination probes through the split-sum shading model.
//!
//! Each iteration uses one full view; views are visited in a shuffled order
//! that is reshuffled every pass from a seeded stream.

use std::time::Instant;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bake::{BakedVolumes, VolumeGrid};
use crate::error::{Error, Result};
use crate::gaussian::{gather_grad, Gaussian, GaussianCloud, ParamGroup};
use crate::geometry::{
    depth_to_pseudo_normal, loss_color_grad, loss_l1_grad, loss_normal_penalty_grad, loss_tv_grad, normals_to_world,
    NormalNorm,
};
use crate::io::SceneDataset;
use crate::math::sigmoid;
use crate::par;
use crate::pbr::{
    shade_backward, shade_terms, BrdfLut, EnvAssets, EnvironmentMap, Lighting, LightingGrad, Material, Prefilter,
    ShadePoint, ShadeTerms, DEFAULT_LEVELS,
};
use crate::raster::{render_pass, ColorSource, DepthMode, FrameGrads, RasterConfig, RenderOptions, MATERIAL_CHANNELS};

#[derive(Debug, Clone)]
struct AdamGroup {
    name: String,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Bias-corrected Adam over named parameter groups with their own learning rates.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// Gradient entries skipped because they were not finite.
    pub skipped: u64,
    groups: Vec<AdamGroup>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-15)
    }
}

impl AdamState {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            skipped: 0,
            groups: Vec::new(),
        }
    }

    /// Registers a group of `len` parameters and returns its index.
    pub fn add_group(&mut self, name: &str, lr: f64, len: usize) -> usize {
        self.groups.push(AdamGroup {
            name: name.to_string(),
            lr,
            m: vec![0.0; len],
            v: vec![0.0; len],
        });
        self.groups.len() - 1
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn lr(&self, group: usize) -> f64 {
        self.groups[group].lr
    }

    /// One update of every group. `params[k]` and `grads[k]` belong to group `k`.
    ///
    /// Non-finite gradient entries leave their parameter and moments untouched.
    pub fn adam_step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.groups.len() || grads.len() != self.groups.len() {
            return Err(Error::invalid(format!(
                "adam: {} groups, got {} parameter and {} gradient slices",
                self.groups.len(),
                params.len(),
                grads.len()
            )));
        }
        for (k, g) in self.groups.iter().enumerate() {
            if params[k].len() != g.m.len() || grads[k].len() != g.m.len() {
                return Err(Error::invalid(format!(
                    "adam group {}: expected {} values, got {} parameters and {} gradients",
                    g.name,
                    g.m.len(),
                    params[k].len(),
                    grads[k].len()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut skipped = 0;
        for (k, g) in self.groups.iter_mut().enumerate() {
            for i in 0..g.m.len() {
                let gi = grads[k][i];
                if !gi.is_finite() {
                    skipped += 1;
                    continue;
                }
                g.m[i] = self.beta1 * g.m[i] + (1.0 - self.beta1) * gi;
                g.v[i] = self.beta2 * g.v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = g.m[i] / c1;
                let v_hat = g.v[i] / c2;
                params[k][i] -= g.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        if skipped > 0 {
            log::debug!("adam step {}: skipped {skipped} non-finite gradient entries", self.step);
        }
        self.skipped += skipped;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    pub position: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub sh: f64,
    pub normal: f64,
    pub albedo: f64,
    pub roughness: f64,
    pub metallic: f64,
    pub env: f64,
    pub illumination: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            scale: 5e-3,
            rotation: 1e-3,
            opacity: 5e-2,
            sh: 2.5e-3,
            normal: 1e-2,
            albedo: 1e-2,
            roughness: 1e-2,
            metallic: 1e-2,
            env: 1e-2,
            illumination: 1e-3,
        }
    }
}

impl LearningRates {
    pub fn for_group(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Position => self.position,
            ParamGroup::Scale => self.scale,
            ParamGroup::Rotation => self.rotation,
            ParamGroup::Opacity => self.opacity,
            ParamGroup::Sh => self.sh,
            ParamGroup::Normal => self.normal,
            ParamGroup::Albedo => self.albedo,
            ParamGroup::Roughness => self.roughness,
            ParamGroup::Metallic => self.metallic,
        }
    }

    fn all(&self) -> [f64; 11] {
        [
            self.position,
            self.scale,
            self.rotation,
            self.opacity,
            self.sh,
            self.normal,
            self.albedo,
            self.roughness,
            self.metallic,
            self.env,
            self.illumination,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSchedule {
    pub stage1_iterations: usize,
    pub stage3_iterations: usize,
    pub lambda_normal_tv: f64,
    pub lambda_material: f64,
    pub lambda_env: f64,
    pub normal_norm: NormalNorm,
    /// Depth used for the stage-1 pseudo-normals.
    pub depth_mode: DepthMode,
    /// Also optimize the baked illumination probes in stage 3.
    pub optimize_illumination: bool,
    pub background: [f64; 3],
    pub lr: LearningRates,
    pub seed: u64,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self {
            stage1_iterations: 2000,
            stage3_iterations: 1500,
            lambda_normal_tv: 0.01,
            lambda_material: 0.01,
            lambda_env: 0.01,
            normal_norm: NormalNorm::L1,
            depth_mode: DepthMode::Linear,
            optimize_illumination: true,
            background: [0.0; 3],
            lr: LearningRates::default(),
            seed: 0,
        }
    }
}

impl StageSchedule {
    /// The paper-scale schedule (30K geometry and 10K material iterations).
    pub fn full_scale() -> Self {
        Self {
            stage1_iterations: 30_000,
            stage3_iterations: 10_000,
            ..Self::default()
        }
    }

    /// Checks weights and learning rates. Iteration counts may be 0, which runs no updates.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_normal_tv", self.lambda_normal_tv),
            ("lambda_material", self.lambda_material),
            ("lambda_env", self.lambda_env),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be a finite value ≥ 0, got {v}")));
            }
        }
        if let Some(v) = self.lr.all().into_iter().find(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::invalid(format!("learning rates must be finite and ≥ 0, got {v}")));
        }
        Ok(())
    }
}

/// One logged iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub stage: u8,
    pub iteration: usize,
    pub view: usize,
    pub total: f64,
    pub color: f64,
    pub normal_penalty: f64,
    pub normal_tv: f64,
    pub material_tv: f64,
    pub env_tv: f64,
    pub skipped_grads: u64,
    pub wall_time: f64,
}

impl LogEntry {
    pub fn new(stage: u8, iteration: usize, view: usize) -> Self {
        Self {
            stage,
            iteration,
            view,
            total: 0.0,
            color: 0.0,
            normal_penalty: 0.0,
            normal_tv: 0.0,
            material_tv: 0.0,
            env_tv: 0.0,
            skipped_grads: 0,
            wall_time: 0.0,
        }
    }
}

/// Writes entries as JSON lines.
pub fn write_log(entries: &[LogEntry], out: &mut impl std::io::Write) -> std::io::Result<()> {
    for e in entries {
        serde_json::to_writer(&mut *out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Seeded view order, reshuffled after every pass over the views.
struct ViewOrder {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl ViewOrder {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
        };
        s.next_pass();
        s
    }

    fn next_pass(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.next_pass();
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Aborts after two consecutive non-finite totals.
#[derive(Default)]
struct DivergenceGuard {
    bad: usize,
}

impl DivergenceGuard {
    /// `Ok(true)` when the update should be applied.
    fn check(&mut self, total: f64, iteration: usize) -> Result<bool> {
        if total.is_finite() {
            self.bad = 0;
            return Ok(true);
        }
        self.bad += 1;
        log::warn!("iteration {iteration}: non-finite total loss, update skipped");
        if self.bad >= 2 {
            return Err(Error::Diverged { iteration });
        }
        Ok(false)
    }
}

fn check_dataset(dataset: &SceneDataset) -> Result<Vec<Vec<f64>>> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset has no views"));
    }
    Ok(dataset.views.iter().map(|v| v.target()).collect())
}

/// Mean TV over `mask` with its gradient scaled by `weight / count`.
fn mean_tv(field: &[f64], w: usize, h: usize, c: usize, mask: &[bool], weight: f64) -> (f64, Vec<f64>) {
    let (sum, mut grad, count) = loss_tv_grad(field, w, h, c, mask);
    if count == 0 {
        return (0.0, grad);
    }
    let s = weight / count as f64;
    grad.iter_mut().for_each(|g| *g *= s);
    (sum / count as f64, grad)
}

pub struct Stage1Output {
    pub cloud: GaussianCloud,
    pub history: Vec<LogEntry>,
}

/// Render options used by stage 1 for a given schedule.
pub fn stage1_render_options(schedule: &StageSchedule) -> RenderOptions {
    RenderOptions {
        depth_mode: schedule.depth_mode,
        normals: true,
        materials: false,
        background: schedule.background,
        raster: RasterConfig::default(),
    }
}

/// Stage-1 losses for one view, returned with the upstream frame gradients.
fn stage1_view_loss(
    frame: &crate::raster::FrameBuffers,
    target: &[f64],
    cam: &crate::Camera,
    schedule: &StageSchedule,
    entry: &mut LogEntry,
) -> Result<FrameGrads> {
    let (w, h) = (cam.width, cam.height);
    let (lc, gc) = loss_color_grad(&frame.color, target, w, h, 3)?;
    let pseudo = normals_to_world(&depth_to_pseudo_normal(&frame.depth, &frame.coverage, cam), cam);
    let (lp, mut gn, _) = loss_normal_penalty_grad(&frame.normal, &pseudo, &frame.coverage, schedule.normal_norm);
    let lambda = schedule.lambda_normal_tv;
    let (tv, gtv) = mean_tv(&frame.normal, w, h, 3, &frame.coverage, lambda);
    gn.iter_mut().zip(&gtv).for_each(|(a, b)| *a += b);
    entry.color = lc;
    entry.normal_penalty = lp;
    entry.normal_tv = tv;
    entry.total = lc + lp + lambda * tv;
    Ok(FrameGrads {
        color: gc,
        normal: gn,
        ..Default::default()
    })
}

/// Stage-1 loss of `cloud` on one view without updating anything.
pub fn stage1_loss(cloud: &GaussianCloud, dataset: &SceneDataset, view: usize, schedule: &StageSchedule) -> Result<LogEntry> {
    let v = dataset
        .views
        .get(view)
        .ok_or_else(|| Error::invalid(format!("no view {view}")))?;
    let opts = stage1_render_options(schedule);
    let frame = crate::raster::rasterize_forward(cloud, &v.camera, &opts);
    let mut entry = LogEntry::new(1, 0, view);
    stage1_view_loss(&frame, &v.target(), &v.camera, schedule, &mut entry)?;
    Ok(entry)
}

/// Fits geometry and appearance; material fields are left untouched.
pub fn run_stage1(dataset: &SceneDataset, cloud: &GaussianCloud, schedule: &StageSchedule) -> Result<Stage1Output> {
    schedule.validate()?;
    cloud.validate()?;
    let targets = check_dataset(dataset)?;
    let mut cloud = cloud.clone();
    let groups = ParamGroup::GEOMETRY;
    let mut adam = AdamState::default();
    let sh_len = cloud.sh_len();
    for g in groups {
        adam.add_group(g.name(), schedule.lr.for_group(g), cloud.len() * g.dim(sh_len));
    }
    let opts = stage1_render_options(schedule);
    let mut order = ViewOrder::new(dataset.len(), schedule.seed);
    let mut guard = DivergenceGuard::default();
    let mut history = Vec::with_capacity(schedule.stage1_iterations);
    let start = Instant::now();
    for it in 0..schedule.stage1_iterations {
        let vi = order.next();
        let cam = &dataset.views[vi].camera;
        let pass = render_pass(&cloud, cam, ColorSource::Sh, &opts);
        let mut entry = LogEntry::new(1, it, vi);
        let up = stage1_view_loss(&pass.frame, &targets[vi], cam, schedule, &mut entry)?;
        if guard.check(entry.total, it)? {
            let grad = pass.backward(&cloud, cam, ColorSource::Sh, &opts, &up);
            let mut params: Vec<Vec<f64>> = groups.iter().map(|g| cloud.gather(*g)).collect();
            let grads: Vec<Vec<f64>> = groups.iter().map(|g| gather_grad(&grad.gaussians, *g)).collect();
            step_groups(&mut adam, &mut params, &grads)?;
            for (g, p) in groups.iter().zip(&params) {
                cloud.scatter(*g, p);
            }
            cloud.gaussians.iter_mut().for_each(Gaussian::renormalize);
        }
        entry.skipped_grads = adam.skipped;
        entry.wall_time = start.elapsed().as_secs_f64();
        history.push(entry);
    }
    Ok(Stage1Output { cloud, history })
}

fn step_groups(adam: &mut AdamState, params: &mut [Vec<f64>], grads: &[Vec<f64>]) -> Result<()> {
    let mut p: Vec<&mut [f64]> = params.iter_mut().map(|v| v.as_mut_slice()).collect();
    let g: Vec<&[f64]> = grads.iter().map(|v| v.as_slice()).collect();
    adam.adam_step(&mut p, &g)
}

/// Shading inputs of one Gaussian seen from `eye`.
pub fn shade_point(g: &Gaussian, eye: &Vector3<f64>) -> ShadePoint {
    let a = g.albedo();
    ShadePoint {
        position: g.position,
        normal: g.unit_normal(),
        view: (eye - g.position).normalize(),
        material: Material {
            albedo: [a.x, a.y, a.z],
            roughness: g.roughness(),
            metallic: g.metallic(),
        },
    }
}

/// Per-Gaussian shading seen from `eye`.
pub fn shade_cloud(cloud: &GaussianCloud, eye: &Vector3<f64>, lighting: &Lighting) -> Vec<ShadeTerms> {
    par::map_range(cloud.len(), |i| shade_terms(&shade_point(&cloud.gaussians[i], eye), lighting))
}

/// Render options used by stage 3 and by shaded renders.
pub fn shaded_render_options(background: [f64; 3]) -> RenderOptions {
    RenderOptions {
        depth_mode: DepthMode::Linear,
        normals: false,
        materials: true,
        background,
        raster: RasterConfig::default(),
    }
}

pub struct Stage3Output {
    pub cloud: GaussianCloud,
    pub env: EnvironmentMap,
    pub illumination: VolumeGrid,
    pub history: Vec<LogEntry>,
}

const SHADE_CHUNK: usize = 256;

/// Fits materials, the environment and (optionally) the illumination probes.
///
/// Geometry, appearance, normals and occlusion stay bit-identical.
pub fn run_stage3(
    dataset: &SceneDataset,
    cloud: &GaussianCloud,
    volumes: Option<&BakedVolumes>,
    env: &EnvironmentMap,
    lut: &BrdfLut,
    schedule: &StageSchedule,
) -> Result<Stage3Output> {
    let volumes = volumes.ok_or_else(|| Error::Precondition("stage 3 needs baked occlusion and illumination volumes".into()))?;
    schedule.validate()?;
    cloud.validate()?;
    let targets = check_dataset(dataset)?;
    let mut cloud = cloud.clone();
    let mut env = env.clone();
    let mut illumination = volumes.illumination.clone();
    let prefilter = Prefilter::new(env.width, env.height, DEFAULT_LEVELS)?;

    let groups = ParamGroup::MATERIAL;
    let mut adam = AdamState::default();
    for g in groups {
        adam.add_group(g.name(), schedule.lr.for_group(g), cloud.len() * g.dim(0));
    }
    adam.add_group("env", schedule.lr.env, env.raw.len());
    let illum_lr = if schedule.optimize_illumination {
        schedule.lr.illumination
    } else {
        0.0
    };
    adam.add_group("illumination", illum_lr, illumination.coeffs.len());

    let opts = shaded_render_options(schedule.background);
    let mut order = ViewOrder::new(dataset.len(), schedule.seed);
    let mut guard = DivergenceGuard::default();
    let mut history = Vec::with_capacity(schedule.stage3_iterations);
    let start = Instant::now();
    let env_mask = vec![true; env.num_texels()];
    for it in 0..schedule.stage3_iterations {
        let vi = order.next();
        let cam = &dataset.views[vi].camera;
        let (w, h) = (cam.width, cam.height);
        let assets = EnvAssets::build(&env, &prefilter)?;
        let lighting = Lighting {
            env: &assets,
            lut,
            occlusion: Some(&volumes.occlusion),
            illumination: Some(&illumination),
        };
        let eye = cam.center();
        let terms = shade_cloud(&cloud, &eye, &lighting);
        let colors: Vec<[f64; 3]> = terms.iter().map(ShadeTerms::radiance).collect();
        let source = ColorSource::Given(&colors);
        let pass = render_pass(&cloud, cam, source, &opts);
        let frame = &pass.frame;

        let mut entry = LogEntry::new(3, it, vi);
        let (ls, gs) = loss_l1_grad(&frame.color, &targets[vi]);
        let (mtv, gm) = mean_tv(&frame.features, w, h, MATERIAL_CHANNELS, &frame.coverage, schedule.lambda_material);
        let radiance = env.radiance();
        let (etv, ge) = mean_tv(&radiance, env.width, env.height, 3, &env_mask, schedule.lambda_env);
        entry.color = ls;
        entry.material_tv = mtv;
        entry.env_tv = etv;
        entry.total = ls + schedule.lambda_material * mtv + schedule.lambda_env * etv;

        if guard.check(entry.total, it)? {
            let up = FrameGrads {
                color: gs,
                features: gm,
                ..Default::default()
            };
            let cg = pass.backward(&cloud, cam, source, &opts, &up);
            let chunks = cloud.len().div_ceil(SHADE_CHUNK);
            let per_chunk: Vec<(Vec<[f64; 5]>, LightingGrad)> = par::map_range(chunks, |c| {
                let mut lg = LightingGrad::zeros(&lighting);
                let range = c * SHADE_CHUNK..((c + 1) * SHADE_CHUNK).min(cloud.len());
                let mats = range
                    .map(|i| {
                        let g = &cloud.gaussians[i];
                        let mg = shade_backward(&shade_point(g, &eye), &lighting, &terms[i], cg.colors[i], &mut lg);
                        let a = g.albedo();
                        let r = g.roughness();
                        let m = g.metallic();
                        let gg = &cg.gaussians[i];
                        [
                            mg.albedo[0] * a.x * (1.0 - a.x) + gg.albedo_logit.x,
                            mg.albedo[1] * a.y * (1.0 - a.y) + gg.albedo_logit.y,
                            mg.albedo[2] * a.z * (1.0 - a.z) + gg.albedo_logit.z,
                            mg.roughness * r * (1.0 - r) + gg.roughness_logit,
                            mg.metallic * m * (1.0 - m) + gg.metallic_logit,
                        ]
                    })
                    .collect();
                (mats, lg)
            });
            let mut lg = LightingGrad::zeros(&lighting);
            let mut mat_grads = Vec::with_capacity(cloud.len());
            for (mats, part) in per_chunk {
                lg.add(&part);
                mat_grads.extend(mats);
            }
            let mut env_grad = lg.env_raw(&env, &prefilter);
            for (i, g) in env_grad.iter_mut().enumerate() {
                *g += ge[i] * sigmoid(env.raw[i]);
            }
            let grads = vec![
                mat_grads.iter().flat_map(|m| [m[0], m[1], m[2]]).collect::<Vec<_>>(),
                mat_grads.iter().map(|m| m[3]).collect(),
                mat_grads.iter().map(|m| m[4]).collect(),
                env_grad,
                lg.illumination,
            ];
            let mut params: Vec<Vec<f64>> = groups.iter().map(|g| cloud.gather(*g)).collect();
            params.push(std::mem::take(&mut env.raw));
            params.push(std::mem::take(&mut illumination.coeffs));
            step_groups(&mut adam, &mut params, &grads)?;
            illumination.coeffs = params.pop().expect("illumination group");
            env.raw = params.pop().expect("env group");
            for (g, p) in groups.iter().zip(&params) {
                cloud.scatter(*g, p);
            }
        }
        entry.skipped_grads = adam.skipped;
        entry.wall_time = start.elapsed().as_secs_f64();
        history.push(entry);
    }
    Ok(Stage3Output {
        cloud,
        env,
        illumination,
        history,
    })
}
