#![allow(dead_code)]

use gsir_core::camera::Camera;
use gsir_core::gaussian::{normalize_quat, Gaussian, GaussianCloud};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Camera at distance 4 on -y looking at the origin.
pub fn front_camera(size: usize) -> Camera {
    Camera::look_at(
        Vector3::new(0.3, -4.0, 0.5),
        Vector3::zeros(),
        Vector3::z(),
        0.7,
        size,
        size,
    )
}

pub fn random_gaussian(rng: &mut ChaCha8Rng, sh_degree: usize, spread: f64) -> Gaussian {
    let p = Vector3::new(
        rng.gen_range(-spread..spread),
        rng.gen_range(-spread..spread),
        rng.gen_range(-spread..spread),
    );
    let s = Vector3::new(
        rng.gen_range(0.08..0.35),
        rng.gen_range(0.08..0.35),
        rng.gen_range(0.08..0.35),
    );
    let q = normalize_quat([
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    ]);
    let mut g = Gaussian::new(p, s, q, rng.gen_range(0.1..0.8), sh_degree);
    for c in g.sh.iter_mut() {
        for v in c.iter_mut() {
            *v = rng.gen_range(-0.4..0.4);
        }
    }
    g.sh[0] = [rng.gen_range(0.0..1.2), rng.gen_range(0.0..1.2), rng.gen_range(0.0..1.2)];
    g.normal = Vector3::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    );
    g.albedo_logit = Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
    g.roughness_logit = rng.gen_range(-2.0..2.0);
    g.metallic_logit = rng.gen_range(-2.0..2.0);
    // raw (non-unit) quaternion so the normalization Jacobian is exercised
    let k = rng.gen_range(0.7..1.4);
    g.rotation = g.rotation.map(|v| v * k);
    g
}

pub fn random_cloud(seed: u64, n: usize, sh_degree: usize) -> GaussianCloud {
    let mut r = rng(seed);
    let mut cloud = GaussianCloud::new(sh_degree);
    for _ in 0..n {
        cloud.push(random_gaussian(&mut r, sh_degree, 0.6));
    }
    cloud
}

pub fn random_weights(seed: u64, n: usize) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

/// Rounds every raw parameter to the nearest `f32`.
pub fn quantize_f32(cloud: &mut GaussianCloud) {
    for g in gsir_core::gaussian::ParamGroup::ALL {
        let v: Vec<f64> = cloud.gather(g).iter().map(|x| *x as f32 as f64).collect();
        cloud.scatter(g, &v);
    }
}
