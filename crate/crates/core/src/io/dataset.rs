//! Posed training views with optional ground-truth maps.

use std::path::Path;

use nalgebra::Vector3;

use super::cameras::{load_cameras, resolve_image, save_cameras, CameraFrame};
use super::image::{load_image, save_pfm, save_png, ImageBuffer};
use crate::camera::Camera;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct View {
    pub name: String,
    pub camera: Camera,
    /// Linear target color.
    pub image: ImageBuffer,
    /// World-space unit normals, zero where the view sees no surface.
    pub normal: Option<ImageBuffer>,
    pub albedo: Option<ImageBuffer>,
}

impl View {
    /// Target color as `H×W×3` values.
    pub fn target(&self) -> Vec<f64> {
        self.image.rgb()
    }

    /// Ground-truth normals and their validity mask.
    pub fn gt_normals(&self) -> Option<(Vec<f64>, Vec<bool>)> {
        let n = self.normal.as_ref()?.rgb();
        let mask = n
            .chunks(3)
            .map(|v| Vector3::new(v[0], v[1], v[2]).norm() > 0.5)
            .collect();
        Some((n, mask))
    }
}

#[derive(Debug, Clone, Default)]
pub struct SceneDataset {
    pub views: Vec<View>,
    /// Optional region of interest, used to place the bake grid.
    pub bounds: Option<(Vector3<f64>, Vector3<f64>)>,
}

impl SceneDataset {
    pub fn new(views: Vec<View>) -> Result<Self> {
        for v in &views {
            let (w, h) = (v.camera.width, v.camera.height);
            let maps = [Some(&v.image), v.normal.as_ref(), v.albedo.as_ref()];
            for img in maps.into_iter().flatten() {
                if img.width != w || img.height != h {
                    return Err(Error::invalid(format!(
                        "view {}: {}×{} image for a {w}×{h} camera",
                        v.name, img.width, img.height
                    )));
                }
            }
            v.camera.validate()?;
        }
        Ok(Self { views, bounds: None })
    }

    /// Loads `transforms.json` (or the given camera file) and every referenced image.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join("transforms.json")
        } else {
            path.to_path_buf()
        };
        let base = file.parent().unwrap_or(Path::new("."));
        let frames = load_cameras(&file)?;
        let mut views = Vec::with_capacity(frames.len());
        for f in frames {
            let extra = |p: &Option<String>| -> Result<Option<ImageBuffer>> {
                p.as_ref().map(|p| load_image(&base.join(p))).transpose()
            };
            let name = Path::new(&f.file_path)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| f.file_path.clone());
            views.push(View {
                name,
                image: load_image(&resolve_image(base, &f.file_path))?,
                normal: extra(&f.normal_path)?,
                albedo: extra(&f.albedo_path)?,
                camera: f.camera,
            });
        }
        Self::new(views)
    }

    /// Writes `transforms.json`, `images/{name}.png` and ground-truth maps as PFM under `gt/`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "gt"] {
            std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        let mut frames = Vec::with_capacity(self.views.len());
        for v in &self.views {
            let file_path = format!("images/{}.png", v.name);
            save_png(&v.image, &dir.join(&file_path))?;
            let extra = |img: &Option<ImageBuffer>, kind: &str| -> Result<Option<String>> {
                let Some(img) = img else { return Ok(None) };
                let p = format!("gt/{}_{kind}.pfm", v.name);
                save_pfm(img, &dir.join(&p))?;
                Ok(Some(p))
            };
            let normal_path = extra(&v.normal, "normal")?;
            let albedo_path = extra(&v.albedo, "albedo")?;
            frames.push(CameraFrame {
                camera: v.camera.clone(),
                file_path,
                normal_path,
                albedo_path,
            });
        }
        save_cameras(&frames, &dir.join("transforms.json"))
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    /// Splits off every `k`-th view (starting at index `k−1`) as a held-out set.
    pub fn holdout(&self, k: usize) -> (SceneDataset, SceneDataset) {
        let mut train = SceneDataset {
            views: Vec::new(),
            bounds: self.bounds,
        };
        let mut test = train.clone();
        for (i, v) in self.views.iter().enumerate() {
            if k > 0 && (i + 1) % k == 0 {
                test.views.push(v.clone());
            } else {
                train.views.push(v.clone());
            }
        }
        (train, test)
    }
}
