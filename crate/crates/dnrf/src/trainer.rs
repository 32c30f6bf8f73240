//! Losses, the optimization loop, and expression-code arithmetic.
//!
//! Per step: rays are drawn uniformly from a frame buffer (resampled every
//! `resample_period` steps), marched and composited, scored with a
//! region-weighted Huber color loss plus an L1 depth prior inside the face
//! mask, and backpropagated through the compositing weights into both MLPs
//! and the hash tables. One Adam step with an EMA weight average follows;
//! the occupancy grid refreshes every `occupancy_update_period` steps.
//!
//! All randomness is derived from (seed, step), so resuming from a
//! checkpoint continues the exact trajectory of an uninterrupted run; with
//! `threads = 1` whole runs are bit-reproducible.

use crate::bvh::Aabb;
use crate::dataset::{Checkpoint, Scene, CHECKPOINT_VERSION, TENSOR_COUNT};
use crate::encoding::HashGridConfig;
use crate::field::{MlpGradients, NeuralField, SampleTape};
use crate::images::{ImageF32, ImageRgbF32};
use crate::metrics;
use crate::network::{
    AdamConfig, AdamState, ExpressionCode, Mlp, NetworkError, OutputActivation, EXPRESSION_DIM,
};
use crate::renderer::{
    composite, composite_backward, direction_encoding, generate_ray, march_with, render_image,
    update_occupancy, CompositeOutput, OccupancyGrid,
};
use crate::scalar::Scalar;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("non-finite gradient at step {step}: {source}")]
    NonFiniteGradient { step: u64, source: NetworkError },
    #[error("no frames available for training")]
    EmptyTrainSet,
    #[error("checkpoint does not match this configuration: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Encoding(#[from] crate::encoding::EncodingError),
}

/// Training hyperparameters. Defaults follow the reference setup: 32k
/// steps, a 1700-frame buffer resampled every 1500 steps, Huber rho 0.1,
/// depth-prior weight 1.25, occupancy refresh every 16 steps with 2^16
/// probes.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub buffer_size: usize,
    pub resample_period: u64,
    pub rays_per_step: usize,
    pub lambda_geom: f64,
    pub huber_rho: f64,
    pub seed: u64,
    /// 1 forces a sequential ray loop (bit-reproducible runs).
    pub threads: usize,
    pub occupancy_update_period: u64,
    pub occupancy_samples: usize,
    /// Condition every sample on the frame expression instead of only the
    /// mouth region.
    pub global_conditioning: bool,
    /// Exclude the last N frames from training (the eval holdout).
    pub holdout_last: usize,
    /// Explicit training-frame subset (overrides `holdout_last`).
    pub frame_subset: Option<Vec<usize>>,
    /// Hash-grid override; defaults to the standard config over the scene's
    /// canonical box.
    pub grid_config: Option<HashGridConfig>,
    pub adam: AdamConfig,
    /// Force-set occupancy cells on a shell around the canonical mesh.
    pub isosurface_shell: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 32_000,
            buffer_size: 1_700,
            resample_period: 1_500,
            rays_per_step: 4_096,
            lambda_geom: 1.25,
            huber_rho: 0.1,
            seed: 0,
            threads: 0,
            occupancy_update_period: 16,
            occupancy_samples: 1 << 16,
            global_conditioning: false,
            holdout_last: 0,
            frame_subset: None,
            grid_config: None,
            adam: AdamConfig::default(),
            isosurface_shell: true,
        }
    }
}

/// Per-step report for logging ("step loss psnr_estimate").
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub psnr_estimate: f64,
    pub resampled: bool,
    pub occupancy_updated: bool,
    /// Occupied cells after this step's update (diagnostic).
    pub occupied_cells: usize,
}

/// Standard per-channel Huber, summed over channels:
/// `e^2/2` for `|e| < rho`, else `rho (|e| - rho/2)`.
pub fn huber_loss<S: Scalar>(pred: &[S; 3], truth: &[S; 3], rho: S) -> S {
    let mut acc = S::zero();
    let half = S::from_f64(0.5);
    for c in 0..3 {
        let e = pred[c] - truth[c];
        let a = e.abs();
        acc += if a < rho {
            half * e * e
        } else {
            rho * (a - half * rho)
        };
    }
    acc
}

/// Derivative of one Huber channel with respect to the prediction.
#[inline]
pub fn huber_grad<S: Scalar>(error: S, rho: S) -> S {
    if error.abs() < rho {
        error
    } else {
        rho * error.signum()
    }
}

/// L1 depth prior, gated to the face region.
pub fn geom_loss<S: Scalar>(depth_pred: S, depth_mesh: S, in_face: bool) -> S {
    if in_face {
        (depth_mesh - depth_pred).abs()
    } else {
        S::zero()
    }
}

/// Supervision for one ray.
#[derive(Debug, Clone, Copy)]
pub struct RayTarget<S: Scalar> {
    pub color: [S; 3],
    pub lambda_color: S,
    pub mesh_depth: S,
    pub in_face: bool,
}

/// Weighted ray loss and its gradients at the composite outputs:
/// `lambda_color * huber(color) + lambda_geom * |z - z_hat| [in face]`.
pub fn ray_loss<S: Scalar>(
    out: &CompositeOutput<S>,
    target: &RayTarget<S>,
    rho: S,
    lambda_geom: S,
) -> (S, [S; 3], S) {
    let color_term = huber_loss(&out.color, &target.color, rho);
    let depth_term = geom_loss(out.depth, target.mesh_depth, target.in_face);
    let loss = target.lambda_color * color_term + lambda_geom * depth_term;
    let mut d_color = [S::zero(); 3];
    for c in 0..3 {
        d_color[c] = target.lambda_color * huber_grad(out.color[c] - target.color[c], rho);
    }
    let depth_err = out.depth - target.mesh_depth;
    let d_depth = if target.in_face && depth_err != S::zero() {
        // d|z - z_hat| / d z_hat; zero at the kink.
        lambda_geom * depth_err.signum()
    } else {
        S::zero()
    };
    (loss, d_color, d_depth)
}

/// Delta-based expression retargeting: `T_i = T_neutral + (S_i - S_neutral)`.
pub fn transfer_expression(
    source_codes: &[ExpressionCode],
    source_neutral: &ExpressionCode,
    target_neutral: &ExpressionCode,
) -> Vec<ExpressionCode> {
    source_codes
        .iter()
        .map(|s| {
            let mut out = [0.0; EXPRESSION_DIM];
            for k in 0..EXPRESSION_DIM {
                out[k] = target_neutral.0[k] + (s.0[k] - source_neutral.0[k]);
            }
            ExpressionCode(out)
        })
        .collect()
}

fn mix_seed(seed: u64, stream: u64, step: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E3779B97F4A7C15) ^ step.wrapping_mul(0xD1B54A32D192ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

const STREAM_INIT: u64 = 1;
const STREAM_RAYS: u64 = 2;
const STREAM_BUFFER: u64 = 3;
const STREAM_OCC_CELLS: u64 = 4;
const STREAM_OCC_FRAME: u64 = 5;

/// Rounds box bounds through f32 so the value checkpoints losslessly.
fn round_box_f32(b: &Aabb) -> Aabb {
    let r = |v: f64| v as f32 as f64;
    Aabb {
        min: Vector3::new(r(b.min.x), r(b.min.y), r(b.min.z)),
        max: Vector3::new(r(b.max.x), r(b.max.y), r(b.max.z)),
    }
}

fn train_frame_indices(scene: &Scene, cfg: &TrainConfig) -> Result<Vec<usize>, TrainError> {
    let indices: Vec<usize> = match &cfg.frame_subset {
        Some(subset) => subset.clone(),
        None => {
            let n = scene.frames.len().saturating_sub(cfg.holdout_last);
            (0..n).collect()
        }
    };
    if indices.is_empty() || indices.iter().any(|&i| i >= scene.frames.len()) {
        return Err(TrainError::EmptyTrainSet);
    }
    Ok(indices)
}

/// Distinct frames for the processing buffer, resampled per epoch.
fn sample_buffer(seed: u64, epoch: u64, train_frames: &[usize], size: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_BUFFER, epoch));
    let mut pool = train_frames.to_vec();
    let take = size.min(pool.len());
    // Partial Fisher-Yates: the first `take` entries become the buffer.
    for i in 0..take {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(take);
    pool
}

fn grid_config_for(scene: &Scene, cfg: &TrainConfig) -> HashGridConfig {
    let mut grid_cfg = cfg
        .grid_config
        .clone()
        .unwrap_or_else(|| HashGridConfig::with_bounding_box(scene.canonical_bbox));
    grid_cfg.bounding_box = round_box_f32(&grid_cfg.bounding_box);
    grid_cfg
}

fn field_param_slices<'a>(field: &'a NeuralField<f32>) -> [&'a [f32]; TENSOR_COUNT] {
    [
        field.grid.params(),
        field.density_net.params(),
        field.color_net.params(),
    ]
}

fn checkpoint_from_state(
    field: &NeuralField<f32>,
    adam: &AdamState<f32>,
    occupancy: &OccupancyGrid,
    train_step: u64,
) -> Checkpoint {
    let params = field_param_slices(field);
    let collect = |t: usize| -> [Vec<f32>; TENSOR_COUNT] {
        match t {
            0 => [
                params[0].to_vec(),
                params[1].to_vec(),
                params[2].to_vec(),
            ],
            1 => [
                adam.shadow[0].clone(),
                adam.shadow[1].clone(),
                adam.shadow[2].clone(),
            ],
            2 => {
                let m: Vec<Vec<f32>> = (0..TENSOR_COUNT).map(|i| adam.moments(i).0.to_vec()).collect();
                let mut it = m.into_iter();
                [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()]
            }
            _ => {
                let v: Vec<Vec<f32>> = (0..TENSOR_COUNT).map(|i| adam.moments(i).1.to_vec()).collect();
                let mut it = v.into_iter();
                [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()]
            }
        }
    };
    Checkpoint {
        grid_config: field.grid.config().clone(),
        density_dims: field.density_net.dims().iter().map(|&d| d as u32).collect(),
        color_dims: field.color_net.dims().iter().map(|&d| d as u32).collect(),
        train_step: train_step as u32,
        adam_step: adam.step as u32,
        params: collect(0),
        shadows: collect(1),
        adam_m: collect(2),
        adam_v: collect(3),
        occupancy_bbox: *occupancy.bbox(),
        occupancy_ema: occupancy.ema().to_vec(),
    }
}

/// Rebuilds the renderable field from a checkpoint's EMA shadow parameters.
pub fn field_from_checkpoint(ckpt: &Checkpoint) -> Result<NeuralField<f32>, TrainError> {
    build_field(ckpt, &ckpt.shadows)
}

/// Rebuilds the raw training field (non-averaged parameters).
pub fn raw_field_from_checkpoint(ckpt: &Checkpoint) -> Result<NeuralField<f32>, TrainError> {
    build_field(ckpt, &ckpt.params)
}

fn build_field(
    ckpt: &Checkpoint,
    tensors: &[Vec<f32>; TENSOR_COUNT],
) -> Result<NeuralField<f32>, TrainError> {
    let dims = |d: &[u32]| d.iter().map(|&v| v as usize).collect::<Vec<_>>();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut field = NeuralField::new(ckpt.grid_config.clone(), &mut rng)?;
    let density = Mlp::new(dims(&ckpt.density_dims), OutputActivation::None, &mut rng);
    let color = Mlp::new(dims(&ckpt.color_dims), OutputActivation::Sigmoid, &mut rng);
    field.density_net = density;
    field.color_net = color;
    let expect = [
        field.grid.params().len(),
        field.density_net.param_count(),
        field.color_net.param_count(),
    ];
    for (t, tensor) in tensors.iter().enumerate() {
        if tensor.len() != expect[t] {
            return Err(TrainError::CheckpointMismatch(format!(
                "tensor {t} has {} values, expected {}",
                tensor.len(),
                expect[t]
            )));
        }
    }
    field.grid.set_params(&tensors[0]);
    field.density_net.set_params(&tensors[1]);
    field.color_net.set_params(&tensors[2]);
    Ok(field)
}

/// Rebuilds the occupancy grid from a checkpoint.
pub fn occupancy_from_checkpoint(ckpt: &Checkpoint) -> OccupancyGrid {
    let mut grid = OccupancyGrid::new(ckpt.occupancy_bbox);
    grid.restore_ema(ckpt.occupancy_ema.clone());
    grid
}

struct RaySpec {
    frame: usize,
    x: u32,
    y: u32,
}

/// Worker state reused across the rays of one chunk.
struct RayWorkspace {
    tapes: Vec<SampleTape<f32>>,
    grads: MlpGradients<f32>,
    loss: f64,
    squared_error: f64,
    rays: u64,
}

impl RayWorkspace {
    fn new(field: &NeuralField<f32>) -> Self {
        Self {
            tapes: Vec::new(),
            grads: MlpGradients::for_field(field),
            loss: 0.0,
            squared_error: 0.0,
            rays: 0,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn process_ray(
    spec: &RaySpec,
    scene: &Scene,
    field: &NeuralField<f32>,
    occupancy: &OccupancyGrid,
    cfg: &TrainConfig,
    mut table_sink: impl FnMut(usize, f32),
    ws: &mut RayWorkspace,
) {
    let frame = &scene.frames[spec.frame];
    let ctx = scene.frame_context(spec.frame);
    let ray = generate_ray(&frame.camera, (spec.x, spec.y), occupancy.bbox())
        .expect("pixels drawn in bounds");
    let dir_encoding = direction_encoding::<f32>(&ray.direction);

    let tapes = &mut ws.tapes;
    let batch = march_with(
        &ray,
        occupancy,
        &ctx,
        &frame.expression,
        cfg.global_conditioning,
        |idx, p, expr| {
            if tapes.len() <= idx {
                tapes.push(field.tape());
            }
            field
                .query_tape(p, &dir_encoding, expr, &mut tapes[idx])
                .expect("field shapes fixed at construction")
        },
    );

    let bg = [
        scene.background[0],
        scene.background[1],
        scene.background[2],
    ];
    let out = composite(&batch, bg);
    let target = RayTarget {
        color: frame.color.at(spec.x, spec.y),
        lambda_color: frame.color_weight.at(spec.x, spec.y),
        mesh_depth: frame.mesh_depth.at(spec.x, spec.y),
        in_face: frame.face_mask.at(spec.x, spec.y) > 0.5,
    };
    let (loss, d_color, d_depth) = ray_loss(
        &out,
        &target,
        cfg.huber_rho as f32,
        cfg.lambda_geom as f32,
    );
    ws.loss += loss as f64;
    for c in 0..3 {
        let e = (out.color[c] - target.color[c]) as f64;
        ws.squared_error += e * e;
    }
    ws.rays += 1;

    let sample_grads = composite_backward(&batch, bg, d_color, d_depth);
    for (i, (d_density, d_rgb)) in sample_grads.into_iter().enumerate() {
        field
            .backward_sample_with(
                &ws.tapes[i],
                d_rgb,
                d_density,
                &mut ws.grads,
                &mut table_sink,
            )
            .expect("tapes recorded this step");
    }
}

/// Runs the optimization loop and returns the final checkpoint. `on_step`
/// observes every step (loss log, schedule events).
pub fn train(
    scene: &Scene,
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
    mut on_step: impl FnMut(&StepStats),
) -> Result<Checkpoint, TrainError> {
    let train_frames = train_frame_indices(scene, cfg)?;
    let grid_cfg = grid_config_for(scene, cfg);

    let mut field;
    let mut adam;
    let mut occupancy;
    let start_step;
    match resume {
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, STREAM_INIT, 0));
            field = NeuralField::<f32>::new(grid_cfg, &mut rng)?;
            adam = AdamState::new(&field_param_slices(&field), cfg.adam);
            occupancy = OccupancyGrid::new(round_box_f32(&scene.deformed_bbox));
            if cfg.isosurface_shell {
                let bvh = crate::bvh::build_bvh(scene.canonical.clone()).expect("non-empty mesh");
                let cell = occupancy.bbox().extent().max() / crate::renderer::OCCUPANCY_RESOLUTION as f64;
                occupancy.set_isosurface_shell(&bvh, 2.0 * cell);
            }
            start_step = 0;
        }
        Some(ckpt) => {
            if ckpt.grid_config != grid_cfg {
                return Err(TrainError::CheckpointMismatch(
                    "hash grid config differs from the checkpoint".into(),
                ));
            }
            field = raw_field_from_checkpoint(ckpt)?;
            adam = AdamState::new(&field_param_slices(&field), cfg.adam);
            for t in 0..TENSOR_COUNT {
                adam.restore(
                    t,
                    ckpt.adam_m[t].clone(),
                    ckpt.adam_v[t].clone(),
                    ckpt.shadows[t].clone(),
                );
            }
            adam.step = ckpt.adam_step as u64;
            occupancy = occupancy_from_checkpoint(ckpt);
            if cfg.isosurface_shell {
                let bvh = crate::bvh::build_bvh(scene.canonical.clone()).expect("non-empty mesh");
                let cell = occupancy.bbox().extent().max() / crate::renderer::OCCUPANCY_RESOLUTION as f64;
                occupancy.set_isosurface_shell(&bvh, 2.0 * cell);
            }
            start_step = ckpt.train_step as u64;
        }
    }

    // Sequential runs accumulate table gradients directly; parallel runs
    // share one atomic buffer and drain it before the optimizer step.
    let table_grad = if cfg.threads == 1 {
        Vec::new()
    } else {
        <f32 as Scalar>::atomic_vec(field.grid.params().len())
    };
    let mut table_grad_plain = vec![0.0f32; field.grid.params().len()];
    let mut density_grad = vec![0.0f32; field.density_net.param_count()];
    let mut color_grad = vec![0.0f32; field.color_net.param_count()];

    let mut buffer =
        sample_buffer(cfg.seed, start_step / cfg.resample_period.max(1), &train_frames, cfg.buffer_size);

    for step in start_step..cfg.total_steps {
        let resampled = cfg.resample_period > 0 && step % cfg.resample_period == 0;
        if resampled {
            buffer = sample_buffer(cfg.seed, step / cfg.resample_period, &train_frames, cfg.buffer_size);
        }

        let occupancy_updated =
            cfg.occupancy_update_period > 0 && step % cfg.occupancy_update_period == 0;
        if occupancy_updated {
            let mut frame_rng =
                ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, STREAM_OCC_FRAME, step));
            let frame_idx = buffer[frame_rng.random_range(0..buffer.len())];
            let frame = &scene.frames[frame_idx];
            update_occupancy(
                &mut occupancy,
                &field,
                &scene.frame_context(frame_idx),
                &frame.expression,
                cfg.global_conditioning,
                cfg.occupancy_samples,
                mix_seed(cfg.seed, STREAM_OCC_CELLS, step),
            );
        }

        // Ray draws happen up front on one RNG so the worker layout cannot
        // change which pixels a step sees.
        let mut ray_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, STREAM_RAYS, step));
        let specs: Vec<RaySpec> = (0..cfg.rays_per_step)
            .map(|_| RaySpec {
                frame: buffer[ray_rng.random_range(0..buffer.len())],
                x: ray_rng.random_range(0..scene.width),
                y: ray_rng.random_range(0..scene.height),
            })
            .collect();

        let (loss_sum, se_sum) = if cfg.threads == 1 {
            let mut ws = RayWorkspace::new(&field);
            for spec in &specs {
                process_ray(
                    spec,
                    scene,
                    &field,
                    &occupancy,
                    cfg,
                    |offset, v| table_grad_plain[offset] += v,
                    &mut ws,
                );
            }
            for (dst, src) in density_grad.iter_mut().zip(&ws.grads.density) {
                *dst = *src;
            }
            for (dst, src) in color_grad.iter_mut().zip(&ws.grads.color) {
                *dst = *src;
            }
            (ws.loss, ws.squared_error)
        } else {
            let chunks: Vec<RayWorkspace> = specs
                .par_chunks(64)
                .map(|chunk| {
                    let mut ws = RayWorkspace::new(&field);
                    for spec in chunk {
                        process_ray(
                            spec,
                            scene,
                            &field,
                            &occupancy,
                            cfg,
                            |offset, v| f32::atomic_add(&table_grad[offset], v),
                            &mut ws,
                        );
                    }
                    ws
                })
                .collect();
            let mut merged = MlpGradients::for_field(&field);
            let mut loss = 0.0;
            let mut se = 0.0;
            for ws in &chunks {
                merged.merge(&ws.grads);
                loss += ws.loss;
                se += ws.squared_error;
            }
            density_grad.copy_from_slice(&merged.density);
            color_grad.copy_from_slice(&merged.color);
            // Drain the shared atomic buffer (and reset it in place).
            table_grad_plain
                .par_iter_mut()
                .zip(table_grad.par_iter())
                .for_each(|(dst, slot)| {
                    *dst = f32::atomic_load(slot);
                    f32::atomic_store(slot, 0.0);
                });
            (loss, se)
        };

        if !loss_sum.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }

        {
            let (grid, density_net, color_net) =
                (&mut field.grid, &mut field.density_net, &mut field.color_net);
            adam.step(
                &mut [
                    grid.params_mut(),
                    density_net.params_mut(),
                    color_net.params_mut(),
                ],
                &[&table_grad_plain, &density_grad, &color_grad],
            )
            .map_err(|source| TrainError::NonFiniteGradient { step, source })?;
        }
        if cfg.threads == 1 {
            table_grad_plain.fill(0.0);
        }

        let mse = se_sum / (cfg.rays_per_step as f64 * 3.0);
        on_step(&StepStats {
            step,
            loss: loss_sum,
            psnr_estimate: -10.0 * mse.max(1e-12).log10(),
            resampled,
            occupancy_updated,
            occupied_cells: occupancy.occupied_count(),
        });
    }

    Ok(checkpoint_from_state(&field, &adam, &occupancy, cfg.total_steps))
}

/// Held-out evaluation report.
#[derive(Debug, Clone, Copy)]
pub struct EvalMetrics {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Renders the last `holdout_last` frames from the checkpoint's EMA
/// parameters and compares against the stored target images.
pub fn evaluate(
    scene: &Scene,
    ckpt: &Checkpoint,
    holdout_last: usize,
    global_conditioning: bool,
) -> Result<(Vec<EvalMetrics>, EvalMetrics), TrainError> {
    let field = field_from_checkpoint(ckpt)?;
    let occupancy = occupancy_from_checkpoint(ckpt);
    let start = scene.frames.len().saturating_sub(holdout_last.max(1).min(scene.frames.len()));
    let mut per_frame = Vec::new();
    for idx in start..scene.frames.len() {
        let frame = &scene.frames[idx];
        let (color, _, _) = render_image(
            &frame.camera,
            &scene.frame_context(idx),
            &frame.expression,
            &field,
            &occupancy,
            scene.background,
            global_conditioning,
        );
        per_frame.push(EvalMetrics {
            mse: metrics::mse(&color, &frame.color),
            psnr: metrics::psnr(&color, &frame.color),
            ssim: metrics::ssim(&color, &frame.color),
        });
    }
    let n = per_frame.len() as f64;
    let mean = EvalMetrics {
        mse: per_frame.iter().map(|m| m.mse).sum::<f64>() / n,
        psnr: per_frame.iter().map(|m| m.psnr).sum::<f64>() / n,
        ssim: per_frame.iter().map(|m| m.ssim).sum::<f64>() / n,
    };
    Ok((per_frame, mean))
}

/// Renders one frame from a checkpoint, optionally with a yaw offset about
/// the scene center (novel-view extrapolation).
pub fn render_frame(
    scene: &Scene,
    ckpt: &Checkpoint,
    frame_idx: usize,
    yaw_offset_rad: f64,
    global_conditioning: bool,
) -> Result<(ImageRgbF32, ImageF32, ImageF32), TrainError> {
    let field = field_from_checkpoint(ckpt)?;
    let occupancy = occupancy_from_checkpoint(ckpt);
    let frame = &scene.frames[frame_idx];
    let camera = if yaw_offset_rad != 0.0 {
        frame
            .camera
            .yawed_about(scene.deformed_bbox.center(), yaw_offset_rad)
    } else {
        frame.camera.clone()
    };
    Ok(render_image(
        &camera,
        &scene.frame_context(frame_idx),
        &frame.expression,
        &field,
        &occupancy,
        scene.background,
        global_conditioning,
    ))
}

// Keep the version symbol referenced so checkpoint compatibility changes
// surface here.
const _: () = assert!(CHECKPOINT_VERSION == 1);
