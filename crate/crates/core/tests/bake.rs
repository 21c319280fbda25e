mod common;

use gsir_core::bake::{
    bake_volumes, occlusion_from_depth, query_occlusion, render_cell_cubemaps, sh_project_cubemap, BakeConfig,
    Cubemap, VolumeGrid,
};
use gsir_core::io::{synth_scene, SynthKind, SynthParams};
use gsir_core::{sh, Gaussian, GaussianCloud, RasterConfig};
use nalgebra::Vector3;
use rand::Rng;

fn random_dirs(seed: u64, n: usize) -> Vec<Vector3<f64>> {
    let mut rng = common::rng(seed);
    (0..n)
        .map(|_| loop {
            let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let l = v.norm();
            if l > 0.05 && l <= 1.0 {
                break v / l;
            }
        })
        .collect()
}

#[test]
fn closed_shell_occludes_center() {
    let scene = synth_scene(SynthKind::Sphere, SynthParams { count: 1500, ..Default::default() }, 4).unwrap();
    let maps = render_cell_cubemaps(&scene.cloud, &Vector3::zeros(), 32, [0.0; 3], &RasterConfig::default());
    let occ = occlusion_from_depth(&maps.depth, 2.0).unwrap();
    let c = sh_project_cubemap(&occ, 2).unwrap();
    let dirs = random_dirs(1, 1000);
    let mean = dirs.iter().map(|d| sh::reconstruct(&c, d)).sum::<f64>() / dirs.len() as f64;
    assert!(mean > 0.9, "mean occlusion {mean}");
}

#[test]
fn wall_occludes_near_side_only() {
    // dense opaque wall in the plane x = 0
    let mut cloud = GaussianCloud::new(0);
    for i in 0..40 {
        for j in 0..40 {
            let p = Vector3::new(0.0, -4.0 + 0.2 * i as f64, -4.0 + 0.2 * j as f64);
            let mut g = Gaussian::new(p, Vector3::new(0.01, 0.15, 0.15), [1.0, 0.0, 0.0, 0.0], 0.98, 0);
            g.set_base_color([0.5; 3]);
            cloud.push(g);
        }
    }
    // probes at x = −1.5 and x = −0.5
    let lo = Vector3::new(-2.0, -0.5, -0.5);
    let hi = Vector3::new(0.0, 0.5, 0.5);
    let config = BakeConfig {
        dims: [2, 1, 1],
        face_res: 32,
        degree: 2,
        tau: Some(1.0),
        ..Default::default()
    };
    let v = bake_volumes(&cloud, (lo, hi), &config, &RasterConfig::default()).unwrap();
    let g = &v.occlusion;
    let n = Vector3::x();
    let toward = Vector3::x();
    let near = query_occlusion(g, &Vector3::new(-0.5, 0.0, 0.0), &n, &toward);
    let far = query_occlusion(g, &Vector3::new(-1.5, 0.0, 0.0), &n, &toward);
    let away = query_occlusion(g, &Vector3::new(-0.5, 0.0, 0.0), &n, &-toward);
    println!("near {near:.3} far {far:.3} away {away:.3}");
    assert!(near > 0.6, "near {near}");
    assert!(far < 0.1, "far {far}");
    assert!(away < 0.2, "away {away}");
    assert!(near > far && near > away);
}

#[test]
fn clamped_cosine_reconstruction() {
    let cm = Cubemap::from_fn(64, 1, |d| vec![d.z.max(0.0)]);
    let c = sh_project_cubemap(&cm, 2).unwrap();
    let dirs = random_dirs(2, 1000);
    let mse = dirs
        .iter()
        .map(|d| (sh::reconstruct(&c, d) - d.z.max(0.0)).powi(2))
        .sum::<f64>()
        / dirs.len() as f64;
    assert!(mse.sqrt() < 0.05, "rms {}", mse.sqrt());
}

#[test]
fn all_neighbors_pass_below_the_lattice() {
    let g = VolumeGrid::new([3, 3, 3], Vector3::zeros(), Vector3::repeat(3.0), 1, 1).unwrap();
    let x = Vector3::new(1.2, 1.7, 0.1);
    let plain = g.trilinear(&x);
    let masked = g.masked_trilinear(&x, &Vector3::z());
    for (a, b) in plain.iter().zip(&masked) {
        assert_eq!(a.0, b.0);
        assert!((a.1 - b.1).abs() < 1e-12);
    }
}

#[test]
fn bake_is_deterministic_across_workers() {
    let scene = synth_scene(SynthKind::Box, SynthParams { count: 200, ..Default::default() }, 2).unwrap();
    let bounds = gsir_core::bake::grid_bounds(&scene.cloud, 0.05).unwrap();
    let config = BakeConfig {
        dims: [3, 3, 3],
        face_res: 16,
        ..Default::default()
    };
    let raster = RasterConfig::default();
    let a = gsir_core::par::with_workers(Some(1), || bake_volumes(&scene.cloud, bounds, &config, &raster).unwrap());
    let b = gsir_core::par::with_workers(Some(4), || bake_volumes(&scene.cloud, bounds, &config, &raster).unwrap());
    assert_eq!(a.occlusion.to_bytes(), b.occlusion.to_bytes());
    assert_eq!(a.illumination.to_bytes(), b.illumination.to_bytes());
}
