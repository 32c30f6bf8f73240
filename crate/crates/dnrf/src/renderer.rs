//! Ray generation, occupancy-accelerated marching in deformed space, and
//! alpha compositing.
//!
//! Rays step at a fixed fraction of the scene box diagonal
//! ([`STEP_NORMALIZED`] in the unit-diagonal metric). Each retained sample
//! is canonicalized through the frame's mesh pair, the field is queried
//! there, and the ray terminates once transmittance drops below
//! [`EARLY_TERMINATION`]. A 128^3 occupancy bitfield over the deformed-space
//! box skips empty cells; its per-cell density EMA is refreshed from the
//! live field during training.

use crate::bvh::{Aabb, Bvh};
use crate::encoding::{encode_direction, SH_DIM};
use crate::field::RadianceField;
use crate::geometry::FaceGradients;
use crate::images::{ImageF32, ImageRgbF32};
use crate::network::{ExpressionCode, EXPRESSION_DIM};
use crate::scalar::Scalar;
use nalgebra::{Matrix3, Matrix4, Vector3};
use rayon::prelude::*;
use thiserror::Error;

/// Marching step in the unit-diagonal box metric: sqrt(3)/1024.
pub const STEP_NORMALIZED: f64 = 0.0016914558667390662;
/// Rays stop once transmittance falls below this.
pub const EARLY_TERMINATION: f64 = 1e-4;
/// Per-sample optical depth `sigma * delta` is clamped here; exp(-60) is
/// far below any transmittance the ray can still carry.
pub const MAX_OPTICAL_DEPTH: f64 = 60.0;
/// Occupancy grid resolution per axis.
pub const OCCUPANCY_RESOLUTION: usize = 128;
/// A cell is occupied while its density EMA stays above this.
pub const OCCUPANCY_THRESHOLD: f32 = 0.01;
/// Per-update EMA decay.
pub const OCCUPANCY_DECAY: f32 = 0.95;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("pixel ({x}, {y}) outside {width}x{height} image")]
    PixelOutOfBounds {
        x: u32,
        y: u32,
        width: u32,
        height: u32,
    },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
}

/// Pinhole camera: intrinsics (fx, fy, cx, cy) plus a rigid
/// world-from-camera pose. Camera space is x right, y down, z forward.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub pose: Matrix4<f64>,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        pose: Matrix4<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self, RenderError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(RenderError::InvalidCamera(format!(
                "focal lengths must be positive, got ({fx}, {fy})"
            )));
        }
        let r = pose.fixed_view::<3, 3>(0, 0);
        let gram = r.transpose() * r;
        if (gram - Matrix3::identity()).norm() > 1e-6 {
            return Err(RenderError::InvalidCamera(
                "pose rotation block is not orthonormal".into(),
            ));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            pose,
            width,
            height,
        })
    }

    /// Camera looking from `eye` toward `target`.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, RenderError> {
        let forward = (target - eye).normalize();
        let right = up.cross(&forward).normalize();
        let down = forward.cross(&right);
        let mut pose = Matrix4::identity();
        pose.fixed_view_mut::<3, 1>(0, 0).copy_from(&right);
        pose.fixed_view_mut::<3, 1>(0, 1).copy_from(&down);
        pose.fixed_view_mut::<3, 1>(0, 2).copy_from(&forward);
        pose.fixed_view_mut::<3, 1>(0, 3).copy_from(&eye);
        Camera::new(fx, fy, cx, cy, pose, width, height)
    }

    pub fn center(&self) -> Vector3<f64> {
        self.pose.fixed_view::<3, 1>(0, 3).into()
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.pose.fixed_view::<3, 3>(0, 0).into()
    }

    /// The camera rotated by `angle` radians about the vertical (y) axis
    /// through `pivot` — a novel-view orbit of the same scene.
    pub fn yawed_about(&self, pivot: Vector3<f64>, angle: f64) -> Camera {
        let rot = nalgebra::Rotation3::from_axis_angle(&Vector3::y_axis(), angle);
        let mut motion = Matrix4::identity();
        motion
            .fixed_view_mut::<3, 3>(0, 0)
            .copy_from(rot.matrix());
        let t = pivot - rot * pivot;
        motion.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Camera {
            pose: motion * self.pose,
            ..self.clone()
        }
    }
}

/// A ray with its integration bounds (meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

/// Pixel-center ray: direction `pose * K^-1 * (x+0.5, y+0.5, 1)`, bounds
/// clipped to `clip` (an empty near..far range when the ray misses it).
pub fn generate_ray(cam: &Camera, pixel: (u32, u32), clip: &Aabb) -> Result<Ray, RenderError> {
    let (x, y) = pixel;
    if x >= cam.width || y >= cam.height {
        return Err(RenderError::PixelOutOfBounds {
            x,
            y,
            width: cam.width,
            height: cam.height,
        });
    }
    let u = (x as f64 + 0.5 - cam.cx) / cam.fx;
    let v = (y as f64 + 0.5 - cam.cy) / cam.fy;
    let direction = (cam.rotation() * Vector3::new(u, v, 1.0)).normalize();
    let origin = cam.center();
    let (near, far) = clip
        .clip_ray(&origin, &direction, 0.0, f64::INFINITY)
        .map(|(n, f)| (n.max(0.0), f))
        .unwrap_or((0.0, 0.0));
    Ok(Ray {
        origin,
        direction,
        near,
        far,
    })
}

/// 128^3 occupancy bits plus the density EMA that drives them.
#[derive(Debug, Clone)]
pub struct OccupancyGrid {
    bbox: Aabb,
    inv_cell: Vector3<f64>,
    bits: Vec<u64>,
    ema: Vec<f32>,
    shell: Option<Vec<u64>>,
}

const CELL_COUNT: usize = OCCUPANCY_RESOLUTION * OCCUPANCY_RESOLUTION * OCCUPANCY_RESOLUTION;
const WORD_COUNT: usize = CELL_COUNT / 64;

impl OccupancyGrid {
    pub fn new(bbox: Aabb) -> Self {
        let extent = bbox.extent();
        Self {
            bbox,
            inv_cell: Vector3::new(
                OCCUPANCY_RESOLUTION as f64 / extent.x,
                OCCUPANCY_RESOLUTION as f64 / extent.y,
                OCCUPANCY_RESOLUTION as f64 / extent.z,
            ),
            bits: vec![0; WORD_COUNT],
            ema: vec![0.0; CELL_COUNT],
            shell: None,
        }
    }

    /// Fully occupied grid (dense marching).
    pub fn all_set(bbox: Aabb) -> Self {
        let mut g = Self::new(bbox);
        g.bits.fill(u64::MAX);
        g.ema.fill(1.0);
        g
    }

    pub fn bbox(&self) -> &Aabb {
        &self.bbox
    }

    pub fn ema(&self) -> &[f32] {
        &self.ema
    }

    /// Restores EMA state (checkpoint resume) and recomputes the bits.
    pub fn restore_ema(&mut self, ema: Vec<f32>) {
        assert_eq!(ema.len(), CELL_COUNT);
        self.ema = ema;
        self.recompute_bits();
    }

    #[inline]
    fn cell_of(&self, p: &Vector3<f64>) -> Option<usize> {
        let n = OCCUPANCY_RESOLUTION as i64;
        let mut idx = [0usize; 3];
        for i in 0..3 {
            let c = ((p[i] - self.bbox.min[i]) * self.inv_cell[i]).floor() as i64;
            if c < 0 || c >= n {
                return None;
            }
            idx[i] = c as usize;
        }
        Some(
            idx[0]
                + OCCUPANCY_RESOLUTION * (idx[1] + OCCUPANCY_RESOLUTION * idx[2]),
        )
    }

    #[inline]
    pub fn is_occupied(&self, p: &Vector3<f64>) -> bool {
        match self.cell_of(p) {
            Some(c) => self.bits[c / 64] >> (c % 64) & 1 == 1,
            None => false,
        }
    }

    pub fn occupied_count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn occupied_cells(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.occupied_count());
        for (wi, &w) in self.bits.iter().enumerate() {
            let mut w = w;
            while w != 0 {
                let b = w.trailing_zeros();
                out.push((wi * 64) as u32 + b);
                w &= w - 1;
            }
        }
        out
    }

    /// Min corner and extent of one cell.
    pub fn cell_box(&self, cell: usize) -> (Vector3<f64>, Vector3<f64>) {
        let x = cell % OCCUPANCY_RESOLUTION;
        let y = cell / OCCUPANCY_RESOLUTION % OCCUPANCY_RESOLUTION;
        let z = cell / (OCCUPANCY_RESOLUTION * OCCUPANCY_RESOLUTION);
        let extent = self.bbox.extent() / OCCUPANCY_RESOLUTION as f64;
        let min = self.bbox.min
            + Vector3::new(
                x as f64 * extent.x,
                y as f64 * extent.y,
                z as f64 * extent.z,
            );
        (min, extent)
    }

    fn recompute_bits(&mut self) {
        for (wi, word) in self.bits.iter_mut().enumerate() {
            let mut w = 0u64;
            for b in 0..64 {
                if self.ema[wi * 64 + b] > OCCUPANCY_THRESHOLD {
                    w |= 1 << b;
                }
            }
            if let Some(shell) = &self.shell {
                w |= shell[wi];
            }
            *word = w;
        }
    }

    /// Force-sets every cell whose center lies within `radius` of the mesh
    /// surface; the set persists through future updates.
    pub fn set_isosurface_shell(&mut self, bvh: &Bvh, radius: f64) {
        let words: Vec<u64> = (0..WORD_COUNT)
            .into_par_iter()
            .map(|wi| {
                let mut w = 0u64;
                for b in 0..64 {
                    let (min, extent) = self.cell_box(wi * 64 + b);
                    let center = min + extent * 0.5;
                    if bvh.nearest(&center).distance <= radius {
                        w |= 1 << b;
                    }
                }
                w
            })
            .collect();
        self.shell = Some(words);
        self.recompute_bits();
    }
}

/// Per-frame geometry bundle the renderer consumes.
#[derive(Clone, Copy)]
pub struct FrameContext<'a> {
    pub bvh: &'a Bvh,
    pub gradients: &'a FaceGradients,
    /// Per-face conditioning flags on the shared topology.
    pub mouth_faces: &'a [bool],
}

/// One retained ray sample.
#[derive(Debug, Clone, Copy)]
pub struct RaySample<S: Scalar> {
    /// Distance along the ray, meters.
    pub t: S,
    /// Step size in the unit-diagonal metric (constant).
    pub delta: S,
    /// Deformed-space position.
    pub position: Vector3<f64>,
    /// Canonicalized position.
    pub canonical: Vector3<f64>,
    /// Nearest deformed-space face.
    pub face: u32,
    pub density: S,
    pub rgb: [S; 3],
}

#[derive(Debug, Clone, Default)]
pub struct RaySampleBatch<S: Scalar> {
    pub samples: Vec<RaySample<S>>,
}

#[inline]
fn optical_depth<S: Scalar>(density: S, delta: S) -> S {
    (density * delta).min(S::from_f64(MAX_OPTICAL_DEPTH))
}

/// Marches one ray, invoking `query(sample_index, canonical_point,
/// expression)` for every retained sample. The caller-supplied closure is
/// how the trainer records tapes while sharing the exact marching logic
/// with plain rendering.
pub fn march_with<S: Scalar>(
    ray: &Ray,
    grid: &OccupancyGrid,
    frame: &FrameContext,
    expression: &ExpressionCode,
    global_conditioning: bool,
    mut query: impl FnMut(usize, [S; 3], &[S; EXPRESSION_DIM]) -> (S, [S; 3]),
) -> RaySampleBatch<S> {
    let mut batch = RaySampleBatch {
        samples: Vec::new(),
    };
    if ray.far <= ray.near {
        return batch;
    }
    let delta_world = STEP_NORMALIZED * grid.bbox.diagonal();
    let delta = S::from_f64(STEP_NORMALIZED);
    let expr_frame = expression.as_scalars::<S>();
    let expr_ones = ExpressionCode::ones().as_scalars::<S>();
    let mut transmittance = S::one();
    let mut k = 0u64;
    loop {
        let t = ray.near + (k as f64 + 0.5) * delta_world;
        if t >= ray.far {
            break;
        }
        k += 1;
        let p = ray.origin + ray.direction * t;
        if !grid.is_occupied(&p) {
            continue;
        }
        let hit = frame.bvh.nearest(&p);
        let canonical = frame.gradients.canonicalize(&p, hit.face);
        let expr = if global_conditioning || frame.mouth_faces[hit.face] {
            &expr_frame
        } else {
            &expr_ones
        };
        let p_canon = [
            S::from_f64(canonical.x),
            S::from_f64(canonical.y),
            S::from_f64(canonical.z),
        ];
        let (density, rgb) = query(batch.samples.len(), p_canon, expr);
        batch.samples.push(RaySample {
            t: S::from_f64(t),
            delta,
            position: p,
            canonical,
            face: hit.face as u32,
            density,
            rgb,
        });
        transmittance *= (-optical_depth(density, delta)).exp();
        if transmittance < S::from_f64(EARLY_TERMINATION) {
            break;
        }
    }
    batch
}

/// Marches one ray through `field`.
pub fn march_ray<S: Scalar, F: RadianceField<S>>(
    ray: &Ray,
    grid: &OccupancyGrid,
    frame: &FrameContext,
    field: &F,
    expression: &ExpressionCode,
    global_conditioning: bool,
) -> RaySampleBatch<S> {
    let dir_encoding = direction_encoding::<S>(&ray.direction);
    march_with(
        ray,
        grid,
        frame,
        expression,
        global_conditioning,
        |_, p, expr| field.query(p, &dir_encoding, expr),
    )
}

/// SH encoding of a (nonzero) ray direction.
pub fn direction_encoding<S: Scalar>(direction: &Vector3<f64>) -> [S; SH_DIM] {
    encode_direction([
        S::from_f64(direction.x),
        S::from_f64(direction.y),
        S::from_f64(direction.z),
    ])
    .expect("ray directions are unit length")
}

/// Alpha-composited color, expected depth, and opacity of one ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositeOutput<S: Scalar> {
    pub color: [S; 3],
    pub depth: S,
    pub opacity: S,
    /// Transmittance left after the last sample (the background weight).
    pub final_transmittance: S,
}

/// `alpha_n = 1 - exp(-sigma_n delta_n)`, `T_n = prod_{k<n} (1 - alpha_k)`;
/// color `sum T_n alpha_n c_n + T_{N+1} bg`, depth `sum T_n alpha_n t_n`,
/// opacity `sum T_n alpha_n`. Samples must be ordered by increasing t.
pub fn composite<S: Scalar>(batch: &RaySampleBatch<S>, background: [S; 3]) -> CompositeOutput<S> {
    let mut transmittance = S::one();
    let mut color = [S::zero(); 3];
    let mut depth = S::zero();
    let mut opacity = S::zero();
    let mut prev_t = S::neg_infinity();
    for s in &batch.samples {
        assert!(s.t > prev_t, "samples must be strictly increasing in t");
        prev_t = s.t;
        let keep = (-optical_depth(s.density, s.delta)).exp();
        let alpha = S::one() - keep;
        let w = transmittance * alpha;
        for c in 0..3 {
            color[c] += w * s.rgb[c];
        }
        depth += w * s.t;
        opacity += w;
        transmittance *= keep;
    }
    for c in 0..3 {
        color[c] += transmittance * background[c];
    }
    CompositeOutput {
        color,
        depth,
        opacity,
        final_transmittance: transmittance,
    }
}

/// Gradient of (color, depth) outputs with respect to every sample's
/// density and color. Returns one `(d_density, d_rgb)` pair per sample.
pub fn composite_backward<S: Scalar>(
    batch: &RaySampleBatch<S>,
    background: [S; 3],
    d_color: [S; 3],
    d_depth: S,
) -> Vec<(S, [S; 3])> {
    let n = batch.samples.len();
    let mut trans = Vec::with_capacity(n);
    let mut transmittance = S::one();
    for s in &batch.samples {
        trans.push(transmittance);
        transmittance *= (-optical_depth(s.density, s.delta)).exp();
    }
    let t_final = transmittance;

    let mut out = vec![(S::zero(), [S::zero(); 3]); n];
    // Suffix sums over m > n of T_m alpha_m c_m and T_m alpha_m t_m.
    let mut suffix_c = [S::zero(); 3];
    let mut suffix_t = S::zero();
    for i in (0..n).rev() {
        let s = &batch.samples[i];
        let raw = s.density * s.delta;
        let clamped = raw > S::from_f64(MAX_OPTICAL_DEPTH);
        let keep = (-optical_depth(s.density, s.delta)).exp();
        let alpha = S::one() - keep;
        let w = trans[i] * alpha;

        let mut d_rgb = [S::zero(); 3];
        for c in 0..3 {
            d_rgb[c] = d_color[c] * w;
        }
        // d alpha_n / d sigma_n = delta * keep; the 1/(1-alpha) inside the
        // suffix term cancels against it, so no division appears.
        let mut acc = S::zero();
        for c in 0..3 {
            acc += d_color[c] * (trans[i] * s.rgb[c] * keep - suffix_c[c] - t_final * background[c]);
        }
        acc += d_depth * (trans[i] * s.t * keep - suffix_t);
        let d_density = if clamped { S::zero() } else { s.delta * acc };
        out[i] = (d_density, d_rgb);

        for c in 0..3 {
            suffix_c[c] += w * s.rgb[c];
        }
        suffix_t += w * s.t;
    }
    out
}

/// Full-frame render: color, expected depth, and opacity images.
pub fn render_image<S: Scalar, F: RadianceField<S>>(
    camera: &Camera,
    frame: &FrameContext,
    expression: &ExpressionCode,
    field: &F,
    grid: &OccupancyGrid,
    background: [f32; 3],
    global_conditioning: bool,
) -> (ImageRgbF32, ImageF32, ImageF32) {
    let (w, h) = (camera.width, camera.height);
    let bg = [
        S::from_f32(background[0]),
        S::from_f32(background[1]),
        S::from_f32(background[2]),
    ];
    let rows: Vec<Vec<([f32; 3], f32, f32)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let ray = generate_ray(camera, (x, y), grid.bbox()).expect("pixel in bounds");
                    let batch = march_ray(&ray, grid, frame, field, expression, global_conditioning);
                    let out = composite(&batch, bg);
                    (
                        [
                            out.color[0].to_f32(),
                            out.color[1].to_f32(),
                            out.color[2].to_f32(),
                        ],
                        out.depth.to_f32(),
                        out.opacity.to_f32(),
                    )
                })
                .collect()
        })
        .collect();
    let mut color = ImageRgbF32::new(w, h);
    let mut depth = ImageF32::new(w, h);
    let mut opacity = ImageF32::new(w, h);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (c, d, o)) in row.into_iter().enumerate() {
            color.set(x as u32, y as u32, c);
            depth.set(x as u32, y as u32, d);
            opacity.set(x as u32, y as u32, o);
        }
    }
    (color, depth, opacity)
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn hash_unit3(seed: u64, cell: u64) -> [f64; 3] {
    let mut state = seed ^ cell.wrapping_mul(0xD1B54A32D192ED03);
    let mut out = [0.0; 3];
    for o in out.iter_mut() {
        *o = (splitmix64(&mut state) >> 11) as f64 / (1u64 << 53) as f64;
    }
    out
}

/// One occupancy refresh: probes `sample_count` seeded random cells plus
/// every currently-set cell at one jittered point each, mapped through the
/// given frame's deformation into the field. Per-cell EMA becomes
/// `max(decay * ema, density)`; bits are recomputed afterwards.
pub fn update_occupancy<S: Scalar, F: RadianceField<S>>(
    grid: &mut OccupancyGrid,
    field: &F,
    frame: &FrameContext,
    expression: &ExpressionCode,
    global_conditioning: bool,
    sample_count: usize,
    seed: u64,
) {
    use rand::{Rng, SeedableRng};
    let mut candidates = grid.bits.clone();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..sample_count {
        let c = rng.random_range(0..CELL_COUNT);
        candidates[c / 64] |= 1 << (c % 64);
    }

    let expr_frame = expression.as_scalars::<S>();
    let expr_ones = ExpressionCode::ones().as_scalars::<S>();
    let updates: Vec<(usize, f32)> = (0..WORD_COUNT)
        .into_par_iter()
        .flat_map_iter(|wi| {
            let word = candidates[wi];
            let grid = &*grid;
            let expr_frame = &expr_frame;
            let expr_ones = &expr_ones;
            (0..64).filter_map(move |b| {
                if word >> b & 1 == 0 {
                    return None;
                }
                let cell = wi * 64 + b;
                let (min, extent) = grid.cell_box(cell);
                let jitter = hash_unit3(seed, cell as u64);
                let p = Vector3::new(
                    min.x + jitter[0] * extent.x,
                    min.y + jitter[1] * extent.y,
                    min.z + jitter[2] * extent.z,
                );
                let hit = frame.bvh.nearest(&p);
                let canonical = frame.gradients.canonicalize(&p, hit.face);
                let expr = if global_conditioning || frame.mouth_faces[hit.face] {
                    expr_frame
                } else {
                    expr_ones
                };
                let density = field
                    .density(
                        [
                            S::from_f64(canonical.x),
                            S::from_f64(canonical.y),
                            S::from_f64(canonical.z),
                        ],
                        expr,
                    )
                    .to_f32();
                let decayed = OCCUPANCY_DECAY * grid.ema[cell];
                Some((cell, decayed.max(density)))
            })
        })
        .collect();
    for (cell, v) in updates {
        grid.ema[cell] = v;
    }
    grid.recompute_bits();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ScalingMode, TriangleMesh};
    use std::sync::Arc;

    fn identity_pose() -> Matrix4<f64> {
        Matrix4::identity()
    }

    fn unit_clip() -> Aabb {
        Aabb {
            min: Vector3::repeat(-10.0),
            max: Vector3::repeat(10.0),
        }
    }

    #[test]
    fn center_pixel_points_forward() {
        let cam = Camera::new(256.0, 256.0, 255.5, 255.5, identity_pose(), 512, 512).unwrap();
        // Pixel (cx - 0.5, cy - 0.5) = (255, 255) lands exactly on the
        // principal point.
        let ray = generate_ray(&cam, (255, 255), &unit_clip()).unwrap();
        assert!((ray.direction - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
        assert_eq!(ray.origin, Vector3::zeros());
        assert!((ray.direction.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn corner_pixel_direction() {
        let cam = Camera::new(256.0, 256.0, 256.5, 256.5, identity_pose(), 512, 512).unwrap();
        let ray = generate_ray(&cam, (0, 0), &unit_clip()).unwrap();
        let expect = Vector3::new(-1.0, -1.0, 1.0).normalize();
        assert!((ray.direction - expect).norm() < 1e-6);
    }

    #[test]
    fn out_of_bounds_pixel_is_an_error() {
        let cam = Camera::new(100.0, 100.0, 32.0, 32.0, identity_pose(), 64, 64).unwrap();
        assert!(matches!(
            generate_ray(&cam, (64, 0), &unit_clip()),
            Err(RenderError::PixelOutOfBounds { .. })
        ));
    }

    #[test]
    fn invalid_camera_is_rejected() {
        assert!(Camera::new(0.0, 1.0, 0.0, 0.0, identity_pose(), 8, 8).is_err());
        let mut skew = Matrix4::identity();
        skew[(0, 1)] = 0.5;
        assert!(Camera::new(10.0, 10.0, 4.0, 4.0, skew, 8, 8).is_err());
    }

    fn sample<S: Scalar>(t: f64, density: f64, rgb: [f64; 3]) -> RaySample<S> {
        RaySample {
            t: S::from_f64(t),
            delta: S::from_f64(STEP_NORMALIZED),
            position: Vector3::zeros(),
            canonical: Vector3::zeros(),
            face: 0,
            density: S::from_f64(density),
            rgb: [
                S::from_f64(rgb[0]),
                S::from_f64(rgb[1]),
                S::from_f64(rgb[2]),
            ],
        }
    }

    #[test]
    fn empty_batch_composites_to_background() {
        let batch = RaySampleBatch::<f64>::default();
        let out = composite(&batch, [0.2, 0.4, 0.6]);
        assert_eq!(out.color, [0.2, 0.4, 0.6]);
        assert_eq!(out.depth, 0.0);
        assert_eq!(out.opacity, 0.0);
    }

    #[test]
    fn opaque_sample_hides_background() {
        let mut batch = RaySampleBatch::<f64>::default();
        // sigma*delta far beyond the clamp: alpha 1 after rounding.
        batch.samples.push(sample(1.5, 1e9, [1.0, 0.0, 0.0]));
        let out = composite(&batch, [1.0, 1.0, 1.0]);
        assert!((out.color[0] - 1.0).abs() < 1e-9);
        assert!(out.color[1] < 1e-9);
        assert!((out.depth - 1.5).abs() < 1e-9);
        assert!((out.opacity - 1.0).abs() < 1e-9);
    }

    #[test]
    fn two_sample_hand_evaluated_composite() {
        // alpha_1 = 1/2 (sigma*delta = ln 2), alpha_2 ~= 1.
        let mut batch = RaySampleBatch::<f64>::default();
        let ln2_sigma = std::f64::consts::LN_2 / STEP_NORMALIZED;
        batch.samples.push(sample(1.0, ln2_sigma, [0.8, 0.2, 0.0]));
        batch.samples.push(sample(2.0, 1e9, [0.0, 0.4, 1.0]));
        let out = composite(&batch, [0.0, 0.0, 0.0]);
        for c in 0..3 {
            let expect = 0.5 * batch.samples[0].rgb[c] + 0.5 * batch.samples[1].rgb[c];
            assert!((out.color[c] - expect).abs() < 1e-9);
        }
        assert!((out.depth - (0.5 * 1.0 + 0.5 * 2.0)).abs() < 1e-9);
        assert!((out.opacity - 1.0).abs() < 1e-9);
    }

    #[test]
    #[should_panic(expected = "strictly increasing")]
    fn out_of_order_samples_panic() {
        let mut batch = RaySampleBatch::<f64>::default();
        batch.samples.push(sample(2.0, 1.0, [0.0; 3]));
        batch.samples.push(sample(1.0, 1.0, [0.0; 3]));
        composite(&batch, [0.0; 3]);
    }

    #[test]
    fn weights_and_final_transmittance_sum_to_one() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let mut batch = RaySampleBatch::<f64>::default();
            let n = rng.random_range(0..40);
            let mut t = 0.1;
            for _ in 0..n {
                t += rng.random::<f64>() * 0.2 + 1e-6;
                batch
                    .samples
                    .push(sample(t, rng.random::<f64>() * 2000.0, [rng.random(), rng.random(), rng.random()]));
            }
            let out = composite(&batch, [0.0; 3]);
            assert!((out.opacity + out.final_transmittance - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn transmittance_is_monotone_nonincreasing() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let mut batch = RaySampleBatch::<f64>::default();
        for k in 0..30 {
            batch
                .samples
                .push(sample(0.1 * (k + 1) as f64, rng.random::<f64>() * 500.0, [0.5; 3]));
        }
        let mut transmittance = 1.0;
        for s in &batch.samples {
            let next = transmittance * (-(s.density * s.delta).min(MAX_OPTICAL_DEPTH)).exp();
            assert!(next <= transmittance);
            transmittance = next;
        }
    }

    #[test]
    fn composite_backward_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let mut batch = RaySampleBatch::<f64>::default();
            let n = rng.random_range(1..8);
            let mut t = 0.2;
            for _ in 0..n {
                t += rng.random::<f64>() * 0.3 + 0.01;
                batch.samples.push(sample(
                    t,
                    rng.random::<f64>() * 800.0,
                    [rng.random(), rng.random(), rng.random()],
                ));
            }
            let bg = [rng.random(), rng.random(), rng.random()];
            let d_color = [
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
            ];
            let d_depth = rng.random::<f64>() - 0.5;
            let grads = composite_backward(&batch, bg, d_color, d_depth);

            let loss = |b: &RaySampleBatch<f64>| {
                let out = composite(b, bg);
                out.color
                    .iter()
                    .zip(&d_color)
                    .map(|(c, u)| c * u)
                    .sum::<f64>()
                    + out.depth * d_depth
            };
            for i in 0..batch.samples.len() {
                let h = 1e-4;
                let mut plus = batch.clone();
                plus.samples[i].density += h;
                let mut minus = batch.clone();
                minus.samples[i].density -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let denom = fd.abs().max(grads[i].0.abs()).max(1e-6);
                assert!(
                    ((fd - grads[i].0) / denom).abs() < 1e-4,
                    "density grad sample {i}: fd {fd} vs {}",
                    grads[i].0
                );
                for c in 0..3 {
                    let mut plus = batch.clone();
                    plus.samples[i].rgb[c] += h;
                    let mut minus = batch.clone();
                    minus.samples[i].rgb[c] -= h;
                    let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                    let denom = fd.abs().max(grads[i].1[c].abs()).max(1e-6);
                    assert!(((fd - grads[i].1[c]) / denom).abs() < 1e-4);
                }
            }
        }
    }

    /// Field stub with constant density and color.
    struct ConstField {
        density: f64,
        rgb: [f64; 3],
    }

    impl RadianceField<f64> for ConstField {
        fn density(&self, _p: [f64; 3], _e: &[f64; EXPRESSION_DIM]) -> f64 {
            self.density
        }
        fn query(
            &self,
            _p: [f64; 3],
            _d: &[f64; SH_DIM],
            _e: &[f64; EXPRESSION_DIM],
        ) -> (f64, [f64; 3]) {
            (self.density, self.rgb)
        }
    }

    fn quad_mesh() -> Arc<TriangleMesh> {
        Arc::new(
            TriangleMesh::new(
                vec![
                    Vector3::new(-1.0, -1.0, 2.0),
                    Vector3::new(1.0, -1.0, 2.0),
                    Vector3::new(-1.0, 1.0, 2.0),
                    Vector3::new(1.0, 1.0, 2.0),
                ],
                vec![[0, 1, 2], [1, 3, 2]],
            )
            .unwrap(),
        )
    }

    fn frame_parts() -> (Arc<TriangleMesh>, crate::bvh::Bvh, FaceGradients, Vec<bool>) {
        let mesh = quad_mesh();
        let bvh = crate::bvh::build_bvh(mesh.clone()).unwrap();
        let grads = FaceGradients::precompute(&mesh, &mesh, ScalingMode::GeometricSqrt).unwrap();
        (mesh.clone(), bvh, grads, vec![false; mesh.face_count()])
    }

    fn test_ray() -> Ray {
        Ray {
            origin: Vector3::new(0.1, -0.2, 0.0),
            direction: Vector3::z(),
            near: 0.5,
            far: 3.5,
        }
    }

    #[test]
    fn cleared_grid_marches_to_empty_batch() {
        let (_mesh, bvh, grads, mouth) = frame_parts();
        let frame = FrameContext {
            bvh: &bvh,
            gradients: &grads,
            mouth_faces: &mouth,
        };
        let grid = OccupancyGrid::new(Aabb {
            min: Vector3::repeat(-2.0),
            max: Vector3::new(2.0, 2.0, 4.0),
        });
        let field = ConstField {
            density: 1.0,
            rgb: [0.5; 3],
        };
        let batch = march_ray(&test_ray(), &grid, &frame, &field, &ExpressionCode::ones(), false);
        assert!(batch.samples.is_empty());
    }

    #[test]
    fn full_grid_with_constant_field_samples_everywhere() {
        let (_mesh, bvh, grads, mouth) = frame_parts();
        let frame = FrameContext {
            bvh: &bvh,
            gradients: &grads,
            mouth_faces: &mouth,
        };
        let grid = OccupancyGrid::all_set(Aabb {
            min: Vector3::repeat(-2.0),
            max: Vector3::new(2.0, 2.0, 4.0),
        });
        let field = ConstField {
            density: 1.0,
            rgb: [0.5; 3],
        };
        let batch = march_ray(&test_ray(), &grid, &frame, &field, &ExpressionCode::ones(), false);
        assert!(!batch.samples.is_empty());
        for s in &batch.samples {
            assert_eq!(s.density, 1.0);
            assert_eq!(s.rgb, [0.5; 3]);
            assert!(s.t > 0.5 && s.t < 3.5);
        }
        // Identity deformation: canonical equals deformed.
        for s in &batch.samples {
            assert!((s.canonical - s.position).norm() < 1e-9);
        }
    }

    #[test]
    fn all_set_grid_equals_dense_march() {
        let (_mesh, bvh, grads, mouth) = frame_parts();
        let frame = FrameContext {
            bvh: &bvh,
            gradients: &grads,
            mouth_faces: &mouth,
        };
        let bbox = Aabb {
            min: Vector3::repeat(-2.0),
            max: Vector3::new(2.0, 2.0, 4.0),
        };
        let grid = OccupancyGrid::all_set(bbox);
        let field = ConstField {
            density: 40.0,
            rgb: [0.3, 0.6, 0.9],
        };
        let ray = test_ray();
        let batch = march_ray(&ray, &grid, &frame, &field, &ExpressionCode::ones(), false);

        // Dense reference march without any grid test.
        let delta_world = STEP_NORMALIZED * bbox.diagonal();
        let mut expect_t = Vec::new();
        let mut transmittance = 1.0f64;
        let mut k = 0;
        loop {
            let t = ray.near + (k as f64 + 0.5) * delta_world;
            if t >= ray.far {
                break;
            }
            k += 1;
            expect_t.push(t);
            transmittance *= (-(40.0 * STEP_NORMALIZED)).exp();
            if transmittance < EARLY_TERMINATION {
                break;
            }
        }
        assert_eq!(batch.samples.len(), expect_t.len());
        for (s, t) in batch.samples.iter().zip(&expect_t) {
            assert_eq!(s.t, *t);
        }
    }

    #[test]
    fn early_termination_stops_the_march() {
        let (_mesh, bvh, grads, mouth) = frame_parts();
        let frame = FrameContext {
            bvh: &bvh,
            gradients: &grads,
            mouth_faces: &mouth,
        };
        let bbox = Aabb {
            min: Vector3::repeat(-2.0),
            max: Vector3::new(2.0, 2.0, 4.0),
        };
        let grid = OccupancyGrid::all_set(bbox);
        let opaque = ConstField {
            density: 1e9,
            rgb: [1.0; 3],
        };
        let batch = march_ray(&test_ray(), &grid, &frame, &opaque, &ExpressionCode::ones(), false);
        assert_eq!(batch.samples.len(), 1);
    }

    #[test]
    fn update_occupancy_sets_probed_cells_for_unit_density() {
        let (_mesh, bvh, grads, mouth) = frame_parts();
        let frame = FrameContext {
            bvh: &bvh,
            gradients: &grads,
            mouth_faces: &mouth,
        };
        let mut grid = OccupancyGrid::new(Aabb {
            min: Vector3::repeat(-2.0),
            max: Vector3::new(2.0, 2.0, 4.0),
        });
        let field = ConstField {
            density: 1.0,
            rgb: [0.5; 3],
        };
        update_occupancy(&mut grid, &field, &frame, &ExpressionCode::ones(), false, 4096, 7);
        let count = grid.occupied_count();
        // 4096 draws with replacement over 2M cells: essentially all set.
        assert!(count > 3900 && count <= 4096, "count = {count}");
    }

    #[test]
    fn zero_density_field_decays_all_bits_clear() {
        let (_mesh, bvh, grads, mouth) = frame_parts();
        let frame = FrameContext {
            bvh: &bvh,
            gradients: &grads,
            mouth_faces: &mouth,
        };
        let mut grid = OccupancyGrid::all_set(Aabb {
            min: Vector3::repeat(-2.0),
            max: Vector3::new(2.0, 2.0, 4.0),
        });
        let field = ConstField {
            density: 0.0,
            rgb: [0.0; 3],
        };
        for step in 0..200 {
            update_occupancy(&mut grid, &field, &frame, &ExpressionCode::ones(), false, 64, step);
            if grid.occupied_count() == 0 {
                return;
            }
        }
        panic!(
            "bits did not decay clear: {} still set",
            grid.occupied_count()
        );
    }

    #[test]
    fn render_image_is_deterministic_and_background_when_empty() {
        let (_mesh, bvh, grads, mouth) = frame_parts();
        let frame = FrameContext {
            bvh: &bvh,
            gradients: &grads,
            mouth_faces: &mouth,
        };
        let grid = OccupancyGrid::new(Aabb {
            min: Vector3::repeat(-2.0),
            max: Vector3::new(2.0, 2.0, 4.0),
        });
        let field = ConstField {
            density: 1.0,
            rgb: [0.5; 3],
        };
        let cam = Camera::look_at(
            Vector3::new(0.0, 0.0, -1.0),
            Vector3::new(0.0, 0.0, 2.0),
            Vector3::y(),
            16.0,
            16.0,
            8.0,
            8.0,
            16,
            16,
        )
        .unwrap();
        let (c1, d1, o1) = render_image(&cam, &frame, &ExpressionCode::ones(), &field, &grid, [0.9, 0.8, 0.7], false);
        let (c2, d2, o2) = render_image(&cam, &frame, &ExpressionCode::ones(), &field, &grid, [0.9, 0.8, 0.7], false);
        assert_eq!(c1, c2);
        assert_eq!(d1, d2);
        assert_eq!(o1, o2);
        for px in &c1.data {
            assert_eq!(*px, [0.9, 0.8, 0.7]);
        }
        assert!(d1.data.iter().all(|&v| v == 0.0));
        assert!(o1.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depth_of_opaque_rays_lies_within_bounds() {
        let (_mesh, bvh, grads, mouth) = frame_parts();
        let frame = FrameContext {
            bvh: &bvh,
            gradients: &grads,
            mouth_faces: &mouth,
        };
        let bbox = Aabb {
            min: Vector3::repeat(-2.0),
            max: Vector3::new(2.0, 2.0, 4.0),
        };
        let grid = OccupancyGrid::all_set(bbox);
        let field = ConstField {
            density: 300.0,
            rgb: [0.5; 3],
        };
        let ray = test_ray();
        let batch = march_ray(&ray, &grid, &frame, &field, &ExpressionCode::ones(), false);
        let out = composite(&batch, [0.0; 3]);
        assert!(out.opacity > 1e-6);
        let normalized = out.depth / out.opacity;
        assert!(normalized >= ray.near && normalized <= ray.far);
    }

    #[test]
    fn yawed_camera_preserves_pivot_distance() {
        let cam = Camera::look_at(
            Vector3::new(0.0, 0.0, -3.0),
            Vector3::zeros(),
            Vector3::y(),
            32.0,
            32.0,
            16.0,
            16.0,
            32,
            32,
        )
        .unwrap();
        let pivot = Vector3::zeros();
        let turned = cam.yawed_about(pivot, 0.7);
        assert!((turned.center().norm() - 3.0).abs() < 1e-9);
        let r = turned.rotation();
        assert!(((r.transpose() * r) - Matrix3::identity()).norm() < 1e-9);
    }
}
