//! Run configuration: JSON file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use gsir_core::bake::BakeConfig;
use gsir_core::geometry::NormalNorm;
use gsir_core::io::{SynthKind, SynthParams};
use gsir_core::optim::{LearningRates, StageSchedule};
use gsir_core::DepthMode;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Image channels the renderer can write.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    /// Appearance color from the fitted SH coefficients.
    Color,
    /// Physically based shading under the recovered environment.
    Pbr,
    Depth,
    Normal,
    Albedo,
    Roughness,
    Metallic,
    /// Ambient occlusion from the baked occlusion volume.
    Ao,
}

impl Channel {
    pub fn name(&self) -> &'static str {
        match self {
            Channel::Color => "color",
            Channel::Pbr => "pbr",
            Channel::Depth => "depth",
            Channel::Normal => "normal",
            Channel::Albedo => "albedo",
            Channel::Roughness => "roughness",
            Channel::Metallic => "metallic",
            Channel::Ao => "ao",
        }
    }

    /// Depth and normals keep their raw values in PFM; the rest are PNG.
    pub fn extension(&self) -> &'static str {
        match self {
            Channel::Depth | Channel::Normal => "pfm",
            _ => "png",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub env: Option<PathBuf>,
    pub seed: u64,
    pub holdout: usize,

    pub stage1_iterations: usize,
    pub stage3_iterations: usize,
    pub lambda_normal_tv: f64,
    pub lambda_material: f64,
    pub lambda_env: f64,
    pub normal_norm: NormalNorm,
    pub depth_mode: DepthMode,
    pub optimize_illumination: bool,
    pub background: [f64; 3],
    pub lr: LearningRates,

    pub grid_dims: [usize; 3],
    pub face_res: usize,
    pub bake_degree: usize,
    pub tau: Option<f64>,
    pub grid_inflate: f64,

    pub env_width: usize,
    pub env_height: usize,
    pub env_init: f64,
    pub lut_samples: usize,
    pub lut_res: usize,

    pub channels: Vec<Channel>,
    pub views: Vec<String>,

    pub kind: SynthKind,
    pub count: usize,
    pub radius: f64,
    pub num_views: usize,
    pub width: usize,
    pub height: usize,
    pub init_count: usize,
    pub init_noise: f64,
    pub sh_degree: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = StageSchedule::default();
        let p = SynthParams::default();
        Self {
            dataset: None,
            output: None,
            init: None,
            env: None,
            seed: 0,
            holdout: 0,
            stage1_iterations: s.stage1_iterations,
            stage3_iterations: s.stage3_iterations,
            lambda_normal_tv: s.lambda_normal_tv,
            lambda_material: s.lambda_material,
            lambda_env: s.lambda_env,
            normal_norm: s.normal_norm,
            depth_mode: s.depth_mode,
            optimize_illumination: s.optimize_illumination,
            background: s.background,
            lr: s.lr,
            grid_dims: [8, 8, 8],
            face_res: 32,
            bake_degree: 2,
            tau: None,
            grid_inflate: 0.05,
            env_width: p.env_width,
            env_height: p.env_height,
            env_init: 0.5,
            lut_samples: 4096,
            lut_res: 32,
            channels: vec![Channel::Color, Channel::Depth, Channel::Normal],
            views: Vec::new(),
            kind: SynthKind::Sphere,
            count: p.count,
            radius: p.radius,
            num_views: 24,
            width: 64,
            height: 64,
            init_count: p.count,
            init_noise: 0.02,
            sh_degree: 3,
        }
    }
}

impl RunConfig {
    /// Defaults, then the JSON file (if any), then the flags.
    pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<Self, String> {
        let mut root = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
                let v: Value = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))?;
                match v {
                    Value::Object(m) => m,
                    _ => return Err(format!("{}: expected a JSON object", p.display())),
                }
            }
            None => Map::new(),
        };
        let flag_map = match serde_json::to_value(flags).map_err(|e| e.to_string())? {
            Value::Object(m) => m,
            _ => unreachable!("flags serialize to an object"),
        };
        for (k, v) in flag_map {
            if let Some(field) = k.strip_prefix("lr_") {
                let lr = root.entry("lr").or_insert_with(|| Value::Object(Map::new()));
                match lr {
                    Value::Object(m) => {
                        m.insert(field.to_string(), v);
                    }
                    _ => return Err("key 'lr' must be an object".into()),
                }
            } else {
                root.insert(k, v);
            }
        }
        let cfg: RunConfig = serde_json::from_value(Value::Object(root)).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.schedule().validate().map_err(|e| e.to_string())?;
        let positive = [
            ("face_res", self.face_res),
            ("env_width", self.env_width),
            ("env_height", self.env_height),
            ("lut_samples", self.lut_samples),
            ("lut_res", self.lut_res),
            ("num_views", self.num_views),
            ("width", self.width),
            ("height", self.height),
            ("init_count", self.init_count),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(format!("{k} must be positive"));
            }
        }
        if self.grid_dims.contains(&0) {
            return Err("grid_dims must be positive".into());
        }
        if self.lut_res < 16 {
            return Err("lut_res must be at least 16".into());
        }
        if let Some(t) = self.tau {
            if !(t > 0.0) {
                return Err(format!("tau must be positive, got {t}"));
            }
        }
        if !(self.radius > 0.0) || !(self.init_noise >= 0.0) || !(self.grid_inflate >= 0.0) {
            return Err("radius must be positive; init_noise and grid_inflate non-negative".into());
        }
        if !(self.env_init > 0.0) {
            return Err("env_init must be positive".into());
        }
        if self.sh_degree > 3 || !(2..=3).contains(&self.bake_degree) {
            return Err("sh_degree must be at most 3 and bake_degree 2 or 3".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> StageSchedule {
        StageSchedule {
            stage1_iterations: self.stage1_iterations,
            stage3_iterations: self.stage3_iterations,
            lambda_normal_tv: self.lambda_normal_tv,
            lambda_material: self.lambda_material,
            lambda_env: self.lambda_env,
            normal_norm: self.normal_norm,
            depth_mode: self.depth_mode,
            optimize_illumination: self.optimize_illumination,
            background: self.background,
            lr: self.lr,
            seed: self.seed,
        }
    }

    pub fn bake_config(&self) -> BakeConfig {
        BakeConfig {
            dims: self.grid_dims,
            face_res: self.face_res,
            degree: self.bake_degree,
            tau: self.tau,
            inflate: self.grid_inflate,
        }
    }

    pub fn synth_params(&self) -> SynthParams {
        SynthParams {
            count: self.count,
            radius: self.radius,
            env_width: self.env_width,
            env_height: self.env_height,
            ..Default::default()
        }
    }
}

/// Flags mirroring the run-config keys.
#[derive(Debug, Default, Clone, Args, Serialize)]
pub struct Overrides {
    /// Dataset directory (transforms.json, images/, gt/)
    #[arg(long, help_heading = "Paths")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Run directory for outputs
    #[arg(long, help_heading = "Paths")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Initial cloud for fit-geometry [default: <dataset>/init.ply]
    #[arg(long, help_heading = "Paths")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<PathBuf>,
    /// Lat-long environment PFM (relight target, or decompose initialization)
    #[arg(long, help_heading = "Paths")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub env: Option<PathBuf>,
    /// Seed for every random stream
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Hold out every k-th view for evaluation (0 trains on all views)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub holdout: Option<usize>,

    /// Geometry-stage iterations
    #[arg(long, help_heading = "Optimization")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage1_iterations: Option<usize>,
    /// Decomposition-stage iterations
    #[arg(long, help_heading = "Optimization")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage3_iterations: Option<usize>,
    /// Weight of the rendered-normal total variation
    #[arg(long, help_heading = "Optimization")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_normal_tv: Option<f64>,
    /// Weight of the material total variation
    #[arg(long, help_heading = "Optimization")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_material: Option<f64>,
    /// Weight of the environment total variation
    #[arg(long, help_heading = "Optimization")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_env: Option<f64>,
    /// Norm of the normal penalty (l1|l2)
    #[arg(long, help_heading = "Optimization")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normal_norm: Option<NormalNorm>,
    /// Depth mode (vol_accum|peak|linear) for pseudo-normals and depth renders
    #[arg(long, help_heading = "Optimization")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth_mode: Option<DepthMode>,
    /// Refine the baked illumination probes during decomposition
    #[arg(long, help_heading = "Optimization")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimize_illumination: Option<bool>,
    /// Background color r,g,b
    #[arg(long, value_delimiter = ',', help_heading = "Optimization")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub background: Option<Vec<f64>>,
    /// Learning rate of positions
    #[arg(long, help_heading = "Learning rates")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_position: Option<f64>,
    /// Learning rate of log-scales
    #[arg(long, help_heading = "Learning rates")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_scale: Option<f64>,
    /// Learning rate of rotations
    #[arg(long, help_heading = "Learning rates")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_rotation: Option<f64>,
    /// Learning rate of opacity logits
    #[arg(long, help_heading = "Learning rates")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_opacity: Option<f64>,
    /// Learning rate of SH color coefficients
    #[arg(long, help_heading = "Learning rates")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_sh: Option<f64>,
    /// Learning rate of normals
    #[arg(long, help_heading = "Learning rates")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_normal: Option<f64>,
    /// Learning rate of albedo logits
    #[arg(long, help_heading = "Learning rates")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_albedo: Option<f64>,
    /// Learning rate of roughness logits
    #[arg(long, help_heading = "Learning rates")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_roughness: Option<f64>,
    /// Learning rate of metallic logits
    #[arg(long, help_heading = "Learning rates")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_metallic: Option<f64>,
    /// Learning rate of the environment texels
    #[arg(long, help_heading = "Learning rates")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_env: Option<f64>,
    /// Learning rate of the illumination probes
    #[arg(long, help_heading = "Learning rates")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_illumination: Option<f64>,

    /// Probe grid size x,y,z
    #[arg(long, value_delimiter = ',', help_heading = "Baking")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_dims: Option<Vec<usize>>,
    /// Cubemap face resolution
    #[arg(long, help_heading = "Baking")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub face_res: Option<usize>,
    /// SH degree of the volumes (2 or 3)
    #[arg(long, help_heading = "Baking")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bake_degree: Option<usize>,
    /// Occlusion distance threshold [default: a tenth of the grid diagonal]
    #[arg(long, help_heading = "Baking")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    /// Fractional growth of the cloud bounds for the grid
    #[arg(long, help_heading = "Baking")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_inflate: Option<f64>,

    /// Environment map width
    #[arg(long, help_heading = "Shading")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub env_width: Option<usize>,
    /// Environment map height
    #[arg(long, help_heading = "Shading")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub env_height: Option<usize>,
    /// Constant radiance of the initial environment
    #[arg(long, help_heading = "Shading")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub env_init: Option<f64>,
    /// Samples per BRDF table entry
    #[arg(long, help_heading = "Shading")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lut_samples: Option<usize>,
    /// BRDF table resolution
    #[arg(long, help_heading = "Shading")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lut_res: Option<usize>,

    /// Channels to render
    #[arg(long, value_delimiter = ',', help_heading = "Rendering")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channels: Option<Vec<Channel>>,
    /// View names to render or evaluate [default: all]
    #[arg(long, value_delimiter = ',', help_heading = "Rendering")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub views: Option<Vec<String>>,

    /// Synthetic scene (sphere|box|shell)
    #[arg(long, help_heading = "Synthetic scenes")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<SynthKind>,
    /// Ground-truth Gaussian count
    #[arg(long, help_heading = "Synthetic scenes")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    /// Scene radius
    #[arg(long, help_heading = "Synthetic scenes")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    /// Number of orbit views
    #[arg(long, help_heading = "Synthetic scenes")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_views: Option<usize>,
    /// Image width
    #[arg(long, help_heading = "Synthetic scenes")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    /// Image height
    #[arg(long, help_heading = "Synthetic scenes")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    /// Gaussians in the initial cloud
    #[arg(long, help_heading = "Synthetic scenes")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_count: Option<usize>,
    /// Position noise of the initial cloud, relative to the radius
    #[arg(long, help_heading = "Synthetic scenes")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_noise: Option<f64>,
    /// Color SH degree of the initial cloud
    #[arg(long, help_heading = "Synthetic scenes")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sh_degree: Option<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"seed": 4, "stage1_iterations": 7, "lr": {"sh": 0.5}}"#).unwrap();
        let flags = Overrides {
            stage1_iterations: Some(9),
            lr_position: Some(0.25),
            grid_dims: Some(vec![2, 3, 4]),
            ..Default::default()
        };
        let c = RunConfig::resolve(Some(&p), &flags).unwrap();
        assert_eq!((c.seed, c.stage1_iterations), (4, 9));
        assert_eq!((c.lr.sh, c.lr.position), (0.5, 0.25));
        assert_eq!(c.lr.scale, LearningRates::default().scale);
        assert_eq!(c.grid_dims, [2, 3, 4]);
    }

    #[test]
    fn unknown_and_invalid_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"stage_one": 3}"#).unwrap();
        assert!(RunConfig::resolve(Some(&p), &Overrides::default()).unwrap_err().contains("stage_one"));
        std::fs::write(&p, r#"{"lambda_env": -1}"#).unwrap();
        assert!(RunConfig::resolve(Some(&p), &Overrides::default()).is_err());
        std::fs::write(&p, r#"{"grid_dims": [1, 2]}"#).unwrap();
        assert!(RunConfig::resolve(Some(&p), &Overrides::default()).is_err());
    }

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
    }
}
