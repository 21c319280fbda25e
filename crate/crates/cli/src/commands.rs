use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use gsir_core::bake::{ambient_occlusion, bake_volumes, grid_bounds, BakedVolumes};
use gsir_core::io::{
    load_env_pfm, load_gaussian_ply, load_image, metric_normal_mae, metric_psnr, metric_scaled_psnr, metric_ssim,
    save_env_pfm, save_gaussian_ply, save_pfm, save_png, synth_scene, ImageBuffer, SceneDataset, View,
};
use gsir_core::optim::{run_stage1, run_stage3, shade_cloud, write_log, LogEntry};
use gsir_core::pbr::{precompute_env_brdf_lut, BrdfLut, EnvAssets, EnvironmentMap, Lighting, Prefilter, ShadeTerms, DEFAULT_LEVELS};
use gsir_core::raster::{rasterize_with_colors, ColorSource, RenderOptions};
use gsir_core::{Camera, GaussianCloud, RasterConfig};
use serde_json::{json, Value};

use crate::config::{Channel, RunConfig};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub const CLOUD: &str = "cloud.ply";
pub const VOLUMES: &str = "volumes.gsirvol";
pub const ENV: &str = "env.pfm";
pub const LOG: &str = "log.jsonl";
pub const CONFIG: &str = "config.json";
pub const RENDERS: &str = "renders";

fn output_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg
        .output
        .clone()
        .ok_or_else(|| CliError::Precondition("no output directory given (--output)".into()))?;
    fs::create_dir_all(&out).map_err(|e| CliError::Precondition(format!("cannot create {}: {e}", out.display())))?;
    Ok(out)
}

fn dataset_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.dataset
        .as_deref()
        .ok_or_else(|| CliError::Precondition("no dataset given (--dataset)".into()))
}

fn load_dataset(cfg: &RunConfig) -> Result<SceneDataset> {
    let p = dataset_path(cfg)?;
    require(p, "dataset")?;
    Ok(SceneDataset::load(p)?)
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Precondition(format!("{what} not found at {}", path.display())))
    }
}

fn write_config(out: &Path, cfg: &RunConfig) -> Result<()> {
    let text = serde_json::to_string_pretty(cfg).expect("config serializes");
    write_text(&out.join(CONFIG), &(text + "\n"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| gsir_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_history(path: &Path, history: &[LogEntry], append: bool) -> Result<()> {
    let mut buf = Vec::new();
    if append && path.exists() {
        buf = fs::read(path).map_err(|e| gsir_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    }
    write_log(history, &mut buf).expect("writing to memory");
    fs::write(path, buf).map_err(|e| gsir_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn split(cfg: &RunConfig, ds: &SceneDataset) -> (SceneDataset, SceneDataset) {
    if cfg.holdout == 0 {
        (ds.clone(), ds.clone())
    } else {
        ds.holdout(cfg.holdout)
    }
}

fn select_views<'a>(cfg: &RunConfig, views: &'a [View]) -> Result<Vec<&'a View>> {
    if cfg.views.is_empty() {
        return Ok(views.iter().collect());
    }
    cfg.views
        .iter()
        .map(|name| {
            views
                .iter()
                .find(|v| &v.name == name)
                .ok_or_else(|| CliError::Precondition(format!("view '{name}' is not in the dataset")))
        })
        .collect()
}

fn lut(cfg: &RunConfig) -> Result<BrdfLut> {
    Ok(precompute_env_brdf_lut(cfg.lut_samples, cfg.lut_res, 0)?)
}

fn load_cloud(out: &Path) -> Result<GaussianCloud> {
    let p = out.join(CLOUD);
    require(&p, "fitted cloud (run fit-geometry first)")?;
    Ok(load_gaussian_ply(&p)?)
}

fn load_volumes(out: &Path) -> Result<BakedVolumes> {
    let p = out.join(VOLUMES);
    require(&p, "baked volumes (run bake first)")?;
    Ok(BakedVolumes::load(&p)?)
}

fn load_env(path: &Path, cfg: &RunConfig) -> Result<EnvironmentMap> {
    let env = load_env_pfm(path)?;
    if (env.width, env.height) != (cfg.env_width, cfg.env_height) {
        log::info!(
            "resampling environment {}×{} to {}×{}",
            env.width,
            env.height,
            cfg.env_width,
            cfg.env_height
        );
        return Ok(env.resampled(cfg.env_width, cfg.env_height));
    }
    Ok(env)
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let out = output_dir(cfg)?;
    let mut scene = synth_scene(cfg.kind, cfg.synth_params(), cfg.seed)?;
    let lut = lut(cfg)?;
    let prefilter = Prefilter::new(scene.env.width, scene.env.height, DEFAULT_LEVELS)?;
    let assets = EnvAssets::build(&scene.env, &prefilter)?;
    let direct = Lighting {
        env: &assets,
        lut: &lut,
        occlusion: None,
        illumination: None,
    };
    scene.set_appearance(&direct);
    let bounds = grid_bounds(&scene.cloud, cfg.grid_inflate)?;
    let volumes = bake_volumes(&scene.cloud, bounds, &cfg.bake_config(), &RasterConfig::default())?;
    let lighting = Lighting {
        occlusion: Some(&volumes.occlusion),
        illumination: Some(&volumes.illumination),
        ..direct
    };
    scene.set_appearance(&lighting);
    let cams = scene.orbit_cameras(cfg.num_views, cfg.width, cfg.height, cfg.seed);
    let ds = scene.render_dataset(&cams, &lighting, cfg.background)?;
    ds.write(&out)?;
    for (v, cam) in ds.views.iter().zip(&cams) {
        let gt = scene.ground_truth(cam);
        save_pfm(
            &ImageBuffer::from_f64(cam.width, cam.height, 1, &gt.depth)?,
            &out.join("gt").join(format!("{}_depth.pfm", v.name)),
        )?;
    }
    save_gaussian_ply(&scene.cloud, &out.join("gt_cloud.ply"))?;
    save_env_pfm(&scene.env, &out.join("gt_env.pfm"))?;
    volumes.save(&out.join("gt_volumes.gsirvol"))?;
    let init = scene.init_cloud(cfg.init_count, cfg.init_noise, cfg.sh_degree, cfg.seed)?;
    save_gaussian_ply(&init, &out.join("init.ply"))?;
    write_config(&out, cfg)?;
    log::info!("wrote {} views to {}", ds.len(), out.display());
    Ok(())
}

pub fn fit_geometry(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let init_path = match &cfg.init {
        Some(p) => p.clone(),
        None => dataset_path(cfg)?.join("init.ply"),
    };
    require(&init_path, "initial cloud")?;
    let init = load_gaussian_ply(&init_path)?;
    let out = output_dir(cfg)?;
    let (train, _) = split(cfg, &ds);
    let result = run_stage1(&train, &init, &cfg.schedule())?;
    save_gaussian_ply(&result.cloud, &out.join(CLOUD))?;
    write_history(&out.join(LOG), &result.history, false)?;
    write_config(&out, cfg)?;
    if let Some(last) = result.history.last() {
        log::info!("stage 1 finished: total {:.5}, color {:.5}", last.total, last.color);
    }
    Ok(())
}

pub fn bake(cfg: &RunConfig) -> Result<()> {
    let out = output_dir(cfg)?;
    let cloud = load_cloud(&out)?;
    let bounds = grid_bounds(&cloud, cfg.grid_inflate)?;
    let volumes = bake_volumes(&cloud, bounds, &cfg.bake_config(), &RasterConfig::default())?;
    volumes.save(&out.join(VOLUMES))?;
    write_config(&out, cfg)?;
    Ok(())
}

pub fn decompose(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let out = output_dir(cfg)?;
    let cloud = load_cloud(&out)?;
    let volumes = load_volumes(&out)?;
    let env = match &cfg.env {
        Some(p) => {
            require(p, "environment map")?;
            load_env(p, cfg)?
        }
        None => EnvironmentMap::constant(cfg.env_width, cfg.env_height, [cfg.env_init; 3]),
    };
    let lut = lut(cfg)?;
    let (train, _) = split(cfg, &ds);
    let result = run_stage3(&train, &cloud, Some(&volumes), &env, &lut, &cfg.schedule())?;
    save_gaussian_ply(&result.cloud, &out.join(CLOUD))?;
    save_env_pfm(&result.env, &out.join(ENV))?;
    BakedVolumes {
        occlusion: volumes.occlusion,
        illumination: result.illumination,
    }
    .save(&out.join(VOLUMES))?;
    write_history(&out.join(LOG), &result.history, true)?;
    write_config(&out, cfg)?;
    Ok(())
}

struct Shading {
    volumes: BakedVolumes,
    assets: EnvAssets,
    lut: BrdfLut,
}

impl Shading {
    fn new(cfg: &RunConfig, volumes: BakedVolumes, env: &EnvironmentMap) -> Result<Self> {
        let prefilter = Prefilter::new(env.width, env.height, DEFAULT_LEVELS)?;
        Ok(Self {
            volumes,
            assets: EnvAssets::build(env, &prefilter)?,
            lut: lut(cfg)?,
        })
    }

    fn lighting(&self) -> Lighting<'_> {
        Lighting {
            env: &self.assets,
            lut: &self.lut,
            occlusion: Some(&self.volumes.occlusion),
            illumination: Some(&self.volumes.illumination),
        }
    }

    fn radiance(&self, cloud: &GaussianCloud, cam: &Camera) -> Vec<[f64; 3]> {
        shade_cloud(cloud, &cam.center(), &self.lighting())
            .iter()
            .map(ShadeTerms::radiance)
            .collect()
    }
}

fn render_options(cfg: &RunConfig, channels: &[Channel]) -> RenderOptions {
    RenderOptions {
        depth_mode: cfg.depth_mode,
        normals: channels.contains(&Channel::Normal),
        materials: channels
            .iter()
            .any(|c| matches!(c, Channel::Albedo | Channel::Roughness | Channel::Metallic)),
        background: cfg.background,
        raster: RasterConfig::default(),
    }
}

fn save_channel(dir: &Path, view: &str, name: &str, ext: &str, img: &ImageBuffer) -> Result<()> {
    let path = dir.join(format!("{view}_{name}.{ext}"));
    if ext == "pfm" {
        save_pfm(img, &path)?;
    } else {
        save_png(img, &path)?;
    }
    Ok(())
}

fn feature_channel(features: &[f64], k: usize, len: usize) -> Vec<f64> {
    (0..features.len() / 5)
        .flat_map(|p| features[p * 5 + k..p * 5 + k + len].to_vec())
        .collect()
}

pub fn render(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let out = output_dir(cfg)?;
    let cloud = load_cloud(&out)?;
    let channels = &cfg.channels;
    let needs_volumes = channels.iter().any(|c| matches!(c, Channel::Pbr | Channel::Ao));
    let volumes = if needs_volumes { Some(load_volumes(&out)?) } else { None };
    let shading = if channels.contains(&Channel::Pbr) {
        let env_path = out.join(ENV);
        require(&env_path, "recovered environment (run decompose first)")?;
        let env = load_env(&env_path, cfg)?;
        Some(Shading::new(cfg, volumes.clone().expect("loaded above"), &env)?)
    } else {
        None
    };
    let dir = out.join(RENDERS);
    fs::create_dir_all(&dir).map_err(|e| gsir_core::Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let opts = render_options(cfg, channels);
    for view in select_views(cfg, &ds.views)? {
        let cam = &view.camera;
        let (w, h) = (cam.width, cam.height);
        let frame = rasterize_with_colors(&cloud, cam, ColorSource::Sh, &opts);
        for ch in channels {
            let img = match ch {
                Channel::Color => ImageBuffer::from_f64(w, h, 3, &frame.color)?,
                Channel::Depth => ImageBuffer::from_f64(w, h, 1, &frame.depth)?,
                Channel::Normal => ImageBuffer::from_f64(w, h, 3, &frame.normal)?,
                Channel::Albedo => ImageBuffer::from_f64(w, h, 3, &feature_channel(&frame.features, 0, 3))?,
                Channel::Roughness => ImageBuffer::from_f64(w, h, 1, &feature_channel(&frame.features, 3, 1))?,
                Channel::Metallic => ImageBuffer::from_f64(w, h, 1, &feature_channel(&frame.features, 4, 1))?,
                Channel::Pbr => {
                    let s = shading.as_ref().expect("built above");
                    let colors = s.radiance(&cloud, cam);
                    let f = rasterize_with_colors(&cloud, cam, ColorSource::Given(&colors), &RenderOptions {
                        normals: false,
                        materials: false,
                        ..opts.clone()
                    });
                    ImageBuffer::from_f64(w, h, 3, &f.color)?
                }
                Channel::Ao => {
                    let occ = &volumes.as_ref().expect("loaded above").occlusion;
                    let ao: Vec<[f64; 3]> = cloud
                        .gaussians
                        .iter()
                        .map(|g| [ambient_occlusion(occ, &g.position, &g.unit_normal()); 3])
                        .collect();
                    let f = rasterize_with_colors(&cloud, cam, ColorSource::Given(&ao), &RenderOptions {
                        normals: false,
                        materials: false,
                        background: [0.0; 3],
                        ..opts.clone()
                    });
                    let gray: Vec<f64> = f.color.chunks(3).map(|c| c[0]).collect();
                    ImageBuffer::from_f64(w, h, 1, &gray)?
                }
            };
            save_channel(&dir, &view.name, ch.name(), ch.extension(), &img)?;
        }
    }
    write_config(&out, cfg)?;
    Ok(())
}

pub fn relight(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let out = output_dir(cfg)?;
    let env_path = cfg
        .env
        .as_deref()
        .ok_or_else(|| CliError::Precondition("relight needs an environment map (--env)".into()))?;
    require(env_path, "environment map")?;
    let env = load_env(env_path, cfg)?;
    let cloud = load_cloud(&out)?;
    let shading = Shading::new(cfg, load_volumes(&out)?, &env)?;
    let dir = out.join(RENDERS);
    fs::create_dir_all(&dir).map_err(|e| gsir_core::Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let opts = render_options(cfg, &[]);
    for view in select_views(cfg, &ds.views)? {
        let cam = &view.camera;
        let colors = shading.radiance(&cloud, cam);
        let f = rasterize_with_colors(&cloud, cam, ColorSource::Given(&colors), &opts);
        save_channel(&dir, &view.name, "relit", "png", &ImageBuffer::from_f64(cam.width, cam.height, 3, &f.color)?)?;
    }
    write_config(&out, cfg)?;
    Ok(())
}

fn read_optional(path: &Path) -> Result<Option<ImageBuffer>> {
    if path.exists() {
        Ok(Some(load_image(path)?))
    } else {
        Ok(None)
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Metrics of the renders in `{output}/renders` against the dataset's targets.
pub fn evaluate(cfg: &RunConfig) -> Result<Value> {
    let ds = load_dataset(cfg)?;
    let out = cfg
        .output
        .clone()
        .ok_or_else(|| CliError::Precondition("no run directory given (--output)".into()))?;
    let dir = out.join(RENDERS);
    require(&dir, "renders (run render first)")?;
    let gt_dir = dataset_path(cfg)?.join("gt");
    let (_, test) = split(cfg, &ds);
    let mut per_view = Vec::new();
    let mut sums: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for view in select_views(cfg, &test.views)? {
        let (w, h) = (view.camera.width, view.camera.height);
        let mut m = serde_json::Map::new();
        m.insert("name".into(), json!(view.name));
        let mut record = |key: String, v: f64, m: &mut serde_json::Map<String, Value>| {
            sums.entry(key.clone()).or_default().push(v);
            m.insert(key, json!(v));
        };
        let target = view.image.rgb();
        for ch in ["color", "pbr", "relit"] {
            if let Some(img) = read_optional(&dir.join(format!("{}_{ch}.png", view.name)))? {
                let pred = img.rgb();
                record(format!("{ch}_psnr"), metric_psnr(&pred, &target)?, &mut m);
                record(format!("{ch}_ssim"), metric_ssim(&pred, &target, w, h, 3)?, &mut m);
            }
        }
        let gt = view.gt_normals();
        if let (Some(img), Some((n, mask))) = (read_optional(&dir.join(format!("{}_normal.pfm", view.name)))?, &gt) {
            let pred = img.rgb();
            let valid: Vec<bool> = mask
                .iter()
                .enumerate()
                .map(|(p, &ok)| ok && pred[3 * p..3 * p + 3].iter().any(|v| *v != 0.0))
                .collect();
            if valid.iter().any(|v| *v) {
                record("normal_mae".into(), metric_normal_mae(&pred, n, &valid)?, &mut m);
            }
        }
        if let (Some(img), Some(gt_albedo), Some((_, mask))) = (
            read_optional(&dir.join(format!("{}_albedo.png", view.name)))?,
            &view.albedo,
            &gt,
        ) {
            record("albedo_psnr".into(), metric_scaled_psnr(&img.rgb(), &gt_albedo.rgb(), mask, 3)?, &mut m);
        }
        let gt_depth = read_optional(&gt_dir.join(format!("{}_depth.pfm", view.name)))?;
        let depth = read_optional(&dir.join(format!("{}_depth.pfm", view.name)))?;
        if let (Some(d), Some(g)) = (depth, gt_depth) {
            let far = view.camera.far as f32;
            let errs: Vec<f64> = d
                .data
                .iter()
                .zip(&g.data)
                .filter(|(a, b)| **a < far && **b < far)
                .map(|(a, b)| (*a as f64 - *b as f64).abs())
                .collect();
            if !errs.is_empty() {
                record("depth_mae".into(), mean(&errs), &mut m);
            }
        }
        per_view.push(Value::Object(m));
    }
    if sums.is_empty() {
        return Err(CliError::Precondition(format!("no renders to evaluate under {}", dir.display())));
    }
    let means: serde_json::Map<String, Value> = sums.iter().map(|(k, v)| (k.clone(), json!(mean(v)))).collect();
    Ok(json!({ "mean": means, "views": per_view }))
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let report = evaluate(cfg)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    // a closed pipe (e.g. `| head`) is not an error for a report
    let _ = writeln!(std::io::stdout().lock(), "{text}");
    if let Some(out) = &cfg.output {
        write_text(&out.join("eval.json"), &(text + "\n"))?;
    }
    Ok(())
}
