//! Inverse rendering with 3D Gaussian splatting.
//!
//! The pipeline has three stages. Geometry is fitted first: Gaussians carry a
//! normal that is tied to normals derived from the rendered depth. The frozen
//! geometry is then baked into regular grids of spherical-harmonics probes that
//! store directional occlusion and one bounce of splatted radiance. Finally
//! per-Gaussian materials and an environment map are optimized through a
//! split-sum Cook-Torrance shading model that is composited by the same
//! splatting rasterizer.
//!
//! All math runs on the CPU in `f64`. Data-parallel loops (tiles, probe cells,
//! lookup-table entries) go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and falls back to plain iteration otherwise.

pub mod bake;
pub mod camera;
pub mod error;
pub mod gaussian;
pub mod geometry;
pub mod io;
pub mod math;
pub mod optim;
pub mod par;
pub mod pbr;
pub mod raster;
pub mod sh;

pub use camera::Camera;
pub use error::{Error, Result};
pub use gaussian::{Gaussian, GaussianCloud};
pub use raster::{DepthMode, FrameBuffers, RasterConfig, RenderOptions};
