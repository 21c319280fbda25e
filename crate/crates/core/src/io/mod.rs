//! Asset formats, datasets, synthetic scenes and image metrics.

pub mod cameras;
pub mod dataset;
pub mod image;
pub mod metrics;
pub mod ply;
pub mod synth;

pub use cameras::{load_cameras, opengl_to_opencv, save_cameras, CameraFrame};
pub use dataset::{SceneDataset, View};
pub use image::{load_image, load_pfm, load_png, save_pfm, save_png, ImageBuffer};
pub use metrics::{channel_scales, metric_normal_mae, metric_psnr, metric_scaled_psnr, metric_ssim};
pub use ply::{load_gaussian_ply, save_gaussian_ply};
pub use synth::{synth_scene, SynthKind, SynthParams, SynthScene};

use std::path::Path;

use crate::error::Result;
use crate::pbr::EnvironmentMap;

/// Writes the environment radiance as a 3-channel PFM.
pub fn save_env_pfm(env: &EnvironmentMap, path: &Path) -> Result<()> {
    save_pfm(&ImageBuffer::from_f64(env.width, env.height, 3, &env.radiance())?, path)
}

/// Reads a lat-long radiance PFM (gray maps are replicated to RGB).
pub fn load_env_pfm(path: &Path) -> Result<EnvironmentMap> {
    let img = load_pfm(path)?;
    EnvironmentMap::from_radiance(img.width, img.height, &img.rgb())
}
