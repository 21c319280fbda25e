//! Pinhole camera with OpenCV-style axes: +x right, +y down, +z forward.

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rigid transform.
    pub world_to_camera: Matrix4<f64>,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        world_to_camera: Matrix4<f64>,
    ) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            world_to_camera,
            near: 0.01,
            far: 100.0,
        }
    }

    /// Camera with a symmetric horizontal field of view and centered principal point.
    pub fn from_fov(fov_x: f64, width: usize, height: usize, world_to_camera: Matrix4<f64>) -> Self {
        let f = width as f64 / (2.0 * (0.5 * fov_x).tan());
        Self::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height, world_to_camera)
    }

    /// Camera at `eye` looking at `target`, with `up` projecting to screen-up.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fov_x: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let forward = (target - eye).normalize();
        let mut right = forward.cross(&up);
        if right.norm() < 1e-9 {
            right = forward.cross(&Vector3::new(1.0, 0.0, 0.0));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Self::from_fov(fov_x, width, height, rigid(rot, -(rot * eye)))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("camera focal lengths must be positive"));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::invalid("camera requires 0 < near < far"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera image must be non-empty"));
        }
        if !self.world_to_camera.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("camera extrinsics".into()));
        }
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-6 {
            return Err(Error::invalid(format!(
                "camera rotation is not orthonormal (error {err:.3e})"
            )));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera center in world space.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    pub fn project(&self, pc: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
        )
    }

    /// Camera-space direction through pixel coordinates `(u, v)` with unit z.
    pub fn pixel_dir_camera(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// World-space unit ray direction through the center of pixel `(x, y)`.
    pub fn pixel_ray(&self, x: usize, y: usize) -> Vector3<f64> {
        let d = self.pixel_dir_camera(x as f64 + 0.5, y as f64 + 0.5);
        (self.rotation().transpose() * d).normalize()
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }
}

pub fn rigid(rot: Matrix3<f64>, t: Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_centers_target() {
        let cam = Camera::look_at(
            Vector3::new(3.0, 1.0, 2.0),
            Vector3::zeros(),
            Vector3::z(),
            0.8,
            64,
            48,
        );
        cam.validate().unwrap();
        let pc = cam.to_camera(&Vector3::zeros());
        let uv = cam.project(&pc);
        assert!((uv.x - 32.0).abs() < 1e-9 && (uv.y - 24.0).abs() < 1e-9);
        assert!((cam.center() - Vector3::new(3.0, 1.0, 2.0)).norm() < 1e-12);
        // world up should map to screen up (negative y)
        let up = cam.to_camera(&Vector3::new(0.0, 0.0, 0.3));
        assert!(cam.project(&up).y < 24.0);
    }

    #[test]
    fn validation_rejects_bad_cameras() {
        let mut cam = Camera::from_fov(1.0, 8, 8, Matrix4::identity());
        cam.validate().unwrap();
        cam.near = 0.0;
        assert!(cam.validate().is_err());
        let mut cam = Camera::from_fov(1.0, 8, 8, Matrix4::identity());
        cam.world_to_camera[(0, 0)] = 2.0;
        assert!(cam.validate().is_err());
    }
}
