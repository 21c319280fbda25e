//! Fits geometry on the synthetic sphere once per depth mode and prints the
//! held-out normal MAE of each.
//!
//! Usage: `cargo run --release --example depth_ablation [iterations] [count] [resolution]`

use std::time::Instant;

use gsir_core::io::{metric_normal_mae, synth_scene, SynthKind, SynthParams};
use gsir_core::optim::{run_stage1, StageSchedule};
use gsir_core::pbr::{precompute_env_brdf_lut, EnvAssets, Lighting, Prefilter, DEFAULT_LEVELS};
use gsir_core::raster::{rasterize_forward, RenderOptions};
use gsir_core::DepthMode;

fn arg(i: usize, default: usize) -> usize {
    std::env::args()
        .nth(i)
        .map(|s| s.parse().expect("arguments are positive integers"))
        .unwrap_or(default)
}

fn main() -> gsir_core::Result<()> {
    let iterations = arg(1, 2000);
    let count = arg(2, 600);
    let res = arg(3, 64);

    let mut scene = synth_scene(SynthKind::Sphere, SynthParams { count, ..Default::default() }, 1)?;
    let lut = precompute_env_brdf_lut(1024, 32, 0)?;
    let pf = Prefilter::new(scene.env.width, scene.env.height, DEFAULT_LEVELS)?;
    let assets = EnvAssets::build(&scene.env, &pf)?;
    let lighting = Lighting {
        env: &assets,
        lut: &lut,
        occlusion: None,
        illumination: None,
    };
    scene.set_appearance(&lighting);
    let cams = scene.orbit_cameras(20, res, res, 7);
    let (train, test) = scene.render_dataset(&cams, &lighting, [0.0; 3])?.holdout(5);
    let init = scene.init_cloud(count, 0.03, 1, 3)?;

    let opts = RenderOptions {
        normals: true,
        ..Default::default()
    };
    for mode in DepthMode::ALL {
        let start = Instant::now();
        let schedule = StageSchedule {
            stage1_iterations: iterations,
            depth_mode: mode,
            ..Default::default()
        };
        let out = run_stage1(&train, &init, &schedule)?;
        let mut mae = 0.0;
        for v in &test.views {
            let f = rasterize_forward(&out.cloud, &v.camera, &opts);
            let (gt, mask) = v.gt_normals().expect("synthetic views carry normals");
            let m: Vec<bool> = mask.iter().zip(&f.coverage).map(|(a, b)| *a && *b).collect();
            mae += metric_normal_mae(&f.normal, &gt, &m)?;
        }
        let last = out.history.last().map_or(f64::NAN, |e| e.color);
        println!(
            "{:>10}  normal MAE {:6.2}°  final color loss {:.4}  {:.1} s",
            mode.name(),
            mae / test.len() as f64,
            last,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
