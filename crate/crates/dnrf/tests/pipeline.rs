//! Cross-module integration: the volumetric renderer against the scene
//! generator's analytic ground truth, and checkpoint-driven workflows.

use dnrf::dataset::{
    generate_synthetic_scene, load_scene, save_checkpoint, AnalyticSurfaceField,
    SyntheticSceneSpec,
};
use dnrf::metrics;
use dnrf::renderer::{render_image, OccupancyGrid};
use dnrf::trainer::{evaluate, field_from_checkpoint, train, TrainConfig};
use tempfile::tempdir;

/// Rendering the analytic emissive-shell field through the full pipeline
/// (ray generation, occupancy march, BVH nearest-triangle search, blended
/// canonicalization, compositing) reproduces the generator's rasterized
/// ground truth almost exactly on an undeformed frame, and closely through
/// a strong deformation.
#[test]
fn analytic_field_render_matches_rasterized_ground_truth() {
    let dir = tempdir().unwrap();
    let spec = SyntheticSceneSpec {
        seed: 7,
        frames: 8,
        resolution: 32,
        amplitude: 0.15,
    };
    generate_synthetic_scene(dir.path(), &spec).unwrap();
    let scene = load_scene(dir.path()).unwrap();
    let field = AnalyticSurfaceField::new(scene.canonical.clone()).unwrap();
    let grid = OccupancyGrid::all_set(scene.deformed_bbox);

    // Frame 0 carries coefficient sin(0) = 0: the mesh equals the canonical
    // mesh, so only the renderer itself is under test.
    let frame = &scene.frames[0];
    let (color, depth, opacity) = render_image::<f64, _>(
        &frame.camera,
        &scene.frame_context(0),
        &frame.expression,
        &field,
        &grid,
        scene.background,
        false,
    );
    let psnr = metrics::psnr(&color, &frame.color);
    assert!(psnr > 40.0, "undeformed-frame PSNR {psnr:.2} dB");

    // Depth agrees where the surface is hit.
    let mut depth_err_sum = 0.0;
    let mut hits = 0;
    for i in 0..depth.data.len() {
        if frame.face_mask.data[i] > 0.5 && opacity.data[i] > 0.99 {
            depth_err_sum += (depth.data[i] - frame.mesh_depth.data[i]).abs() as f64;
            hits += 1;
        }
    }
    assert!(hits > 100);
    let mean_depth_err = depth_err_sum / hits as f64;
    assert!(
        mean_depth_err < 2e-3,
        "mean |depth error| {mean_depth_err:.5} m"
    );

    // A strongly deformed frame exercises canonicalization; the blended
    // map is smooth but approximate, so the bar is lower.
    let deformed_idx = 2; // sin(2*pi*2/8) = 1: peak bump
    let frame = &scene.frames[deformed_idx];
    let (color, _, _) = render_image::<f64, _>(
        &frame.camera,
        &scene.frame_context(deformed_idx),
        &frame.expression,
        &field,
        &grid,
        scene.background,
        false,
    );
    let psnr = metrics::psnr(&color, &frame.color);
    assert!(psnr > 26.0, "deformed-frame PSNR {psnr:.2} dB");
}

/// Checkpoints written by training reload into a usable field, and eval
/// produces finite metrics for an untrained model against any scene.
#[test]
fn zero_step_checkpoint_evaluates_finite() {
    let dir = tempdir().unwrap();
    generate_synthetic_scene(
        dir.path(),
        &SyntheticSceneSpec {
            seed: 3,
            frames: 3,
            resolution: 16,
            amplitude: 0.05,
        },
    )
    .unwrap();
    let scene = load_scene(dir.path()).unwrap();
    let cfg = TrainConfig {
        total_steps: 0,
        threads: 1,
        grid_config: Some(dnrf::encoding::HashGridConfig {
            levels: 2,
            table_size: 1 << 8,
            features_per_entry: 2,
            base_resolution: 4,
            finest_resolution: 8,
            bounding_box: scene.canonical_bbox,
        }),
        ..TrainConfig::default()
    };
    let ckpt = train(&scene, &cfg, None, |_| {}).unwrap();

    let path = dir.path().join("model.ckpt");
    save_checkpoint(&ckpt, &path).unwrap();
    let loaded = dnrf::dataset::load_checkpoint(&path).unwrap();
    assert_eq!(ckpt, loaded);

    let field = field_from_checkpoint(&loaded).unwrap();
    assert_eq!(field.grid.params().len(), ckpt.shadows[0].len());

    let (per_frame, mean) = evaluate(&scene, &loaded, 1, false).unwrap();
    assert_eq!(per_frame.len(), 1);
    assert!(mean.psnr.is_finite());
    assert!(mean.mse.is_finite());
    assert!(mean.ssim.is_finite());
}
