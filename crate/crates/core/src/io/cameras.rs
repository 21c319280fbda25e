//! Camera files in the NeRF-synthetic `transforms.json` layout.
//!
//! Frames store an OpenGL-style camera-to-world matrix (+x right, +y up,
//! camera looking down −z). Optional per-frame `fl_x`, `fl_y`, `cx`, `cy`,
//! `w`, `h` override the shared `camera_angle_x`; `w`/`h` may also sit at the
//! top level. When no size is given it is read from the frame's image.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::bake::{read_file, write_file};
use crate::camera::Camera;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct FrameJson {
    file_path: String,
    transform_matrix: [[f64; 4]; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fl_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fl_y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cx: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    w: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    h: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    normal_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    albedo_path: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct TransformsJson {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    camera_angle_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    w: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    h: Option<usize>,
    frames: Vec<FrameJson>,
}

/// One posed view of a camera file.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame {
    pub camera: Camera,
    /// Image path as written in the file, relative to the file's directory.
    pub file_path: String,
    pub normal_path: Option<String>,
    pub albedo_path: Option<String>,
}

/// `diag(1, −1, −1, 1)`: flips camera y and z between OpenGL and OpenCV axes.
pub fn axis_flip() -> Matrix4<f64> {
    Matrix4::from_diagonal(&Vector4::new(1.0, -1.0, -1.0, 1.0))
}

/// OpenGL camera-to-world to the renderer's world-to-camera: `(C·F)⁻¹`.
pub fn opengl_to_opencv(c2w: &Matrix4<f64>) -> Option<Matrix4<f64>> {
    (c2w * axis_flip()).try_inverse()
}

/// Inverse of [`opengl_to_opencv`].
pub fn opencv_to_opengl(w2c: &Matrix4<f64>) -> Option<Matrix4<f64>> {
    Some(w2c.try_inverse()? * axis_flip())
}

/// Resolves an image path from a camera file, adding `.png` when it has no extension.
pub fn resolve_image(base: &Path, file_path: &str) -> PathBuf {
    let p = base.join(file_path);
    if p.extension().is_none() {
        p.with_extension("png")
    } else {
        p
    }
}

pub fn load_cameras(path: &Path) -> Result<Vec<CameraFrame>> {
    let ctx = path.display().to_string();
    let t: TransformsJson =
        serde_json::from_slice(&read_file(path)?).map_err(|e| Error::parse(&ctx, e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::with_capacity(t.frames.len());
    for (i, f) in t.frames.iter().enumerate() {
        let fctx = || format!("{ctx}: frame {i}");
        let rows = &f.transform_matrix;
        let c2w = Matrix4::from_fn(|r, c| rows[r][c]);
        if !c2w.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("{}: transform_matrix", fctx())));
        }
        let w2c = opengl_to_opencv(&c2w).ok_or_else(|| Error::parse(fctx(), "transform_matrix is not invertible"))?;
        let (w, h) = match (f.w.or(t.w), f.h.or(t.h)) {
            (Some(w), Some(h)) => (w, h),
            _ => {
                let img = resolve_image(base, &f.file_path);
                let (w, h) = image::image_dimensions(&img)
                    .map_err(|e| Error::parse(fctx(), format!("no image size given and {}: {e}", img.display())))?;
                (w as usize, h as usize)
            }
        };
        let fx = match (f.fl_x, t.camera_angle_x) {
            (Some(fx), _) => fx,
            (None, Some(a)) => w as f64 / (2.0 * (0.5 * a).tan()),
            (None, None) => return Err(Error::parse(fctx(), "neither fl_x nor camera_angle_x given")),
        };
        let cam = Camera::new(
            fx,
            f.fl_y.unwrap_or(fx),
            f.cx.unwrap_or(w as f64 / 2.0),
            f.cy.unwrap_or(h as f64 / 2.0),
            w,
            h,
            w2c,
        );
        cam.validate().map_err(|e| Error::parse(fctx(), e.to_string()))?;
        out.push(CameraFrame {
            camera: cam,
            file_path: f.file_path.clone(),
            normal_path: f.normal_path.clone(),
            albedo_path: f.albedo_path.clone(),
        });
    }
    Ok(out)
}

pub fn save_cameras(frames: &[CameraFrame], path: &Path) -> Result<()> {
    let mut t = TransformsJson::default();
    if let Some(f) = frames.first() {
        let c = &f.camera;
        t.camera_angle_x = Some(2.0 * (c.width as f64 / (2.0 * c.fx)).atan());
    }
    for (i, f) in frames.iter().enumerate() {
        let c = &f.camera;
        let m = opencv_to_opengl(&c.world_to_camera)
            .ok_or_else(|| Error::invalid(format!("camera {i} extrinsics are not invertible")))?;
        t.frames.push(FrameJson {
            file_path: f.file_path.clone(),
            transform_matrix: std::array::from_fn(|r| std::array::from_fn(|k| m[(r, k)])),
            fl_x: Some(c.fx),
            fl_y: Some(c.fy),
            cx: Some(c.cx),
            cy: Some(c.cy),
            w: Some(c.width),
            h: Some(c.height),
            normal_path: f.normal_path.clone(),
            albedo_path: f.albedo_path.clone(),
        });
    }
    write_file(path, serde_json::to_string_pretty(&t)?.as_bytes())
}
