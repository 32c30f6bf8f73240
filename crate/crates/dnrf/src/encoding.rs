//! Positional and directional encodings for the radiance field.
//!
//! Positions in canonical space are encoded with a trainable
//! multi-resolution feature grid: each level interpolates 8 corner entries
//! trilinearly, coarse levels index their lattice directly, fine levels fall
//! back to spatial hashing. View directions are encoded with the first four
//! real spherical-harmonics bands (16 values).

use crate::bvh::Aabb;
use crate::scalar::Scalar;
use rand::Rng;
use thiserror::Error;

/// Hash constants for the spatial hash (the x component multiplies by 1).
pub const HASH_PRIME_Y: u32 = 2_654_435_761;
pub const HASH_PRIME_Z: u32 = 805_459_861;

/// Output width of the direction encoding (bands 0..=3).
pub const SH_DIM: usize = 16;

#[derive(Debug, Error)]
pub enum EncodingError {
    #[error("direction vector is zero")]
    ZeroDirection,
    #[error("invalid hash grid config: {0}")]
    InvalidConfig(String),
}

/// Geometry of the multi-resolution grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HashGridConfig {
    pub levels: usize,
    pub table_size: usize,
    pub features_per_entry: usize,
    pub base_resolution: u32,
    pub finest_resolution: u32,
    /// Canonical-space box the grid covers; queries outside are clamped.
    pub bounding_box: Aabb,
}

impl HashGridConfig {
    /// Grid hyperparameters: 16 levels, 2^18 entries, 8 features per entry,
    /// resolutions 16 through 2048.
    pub fn with_bounding_box(bounding_box: Aabb) -> Self {
        Self {
            levels: 16,
            table_size: 1 << 18,
            features_per_entry: 8,
            base_resolution: 16,
            finest_resolution: 2048,
            bounding_box,
        }
    }

    pub fn validate(&self) -> Result<(), EncodingError> {
        if self.levels < 1 {
            return Err(EncodingError::InvalidConfig("levels must be >= 1".into()));
        }
        if self.finest_resolution < self.base_resolution {
            return Err(EncodingError::InvalidConfig(
                "finest resolution below base resolution".into(),
            ));
        }
        if !self.table_size.is_power_of_two() {
            return Err(EncodingError::InvalidConfig(
                "table size must be a power of two".into(),
            ));
        }
        if self.features_per_entry < 1 {
            return Err(EncodingError::InvalidConfig(
                "features_per_entry must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Per-level growth factor `b = exp((ln finest - ln base)/(levels-1))`.
    pub fn growth_factor(&self) -> f64 {
        if self.levels <= 1 {
            return 1.0;
        }
        (((self.finest_resolution as f64).ln() - (self.base_resolution as f64).ln())
            / (self.levels - 1) as f64)
            .exp()
    }

    /// `N_l = floor(base * b^l)`.
    pub fn level_resolution(&self, level: usize) -> u32 {
        let b = self.growth_factor();
        (self.base_resolution as f64 * b.powi(level as i32)).floor() as u32
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.features_per_entry
    }
}

/// Spatial hash of an integer lattice coordinate into `table_size` buckets:
/// `(x ^ y*P2 ^ z*P3) mod table_size`, wrapping arithmetic.
#[inline]
pub fn spatial_hash(cell: [u32; 3], table_size: usize) -> usize {
    let h = cell[0] ^ cell[1].wrapping_mul(HASH_PRIME_Y) ^ cell[2].wrapping_mul(HASH_PRIME_Z);
    (h as usize) % table_size
}

#[derive(Debug, Clone, Copy)]
struct LevelLayout {
    resolution: u32,
    /// Flat scalar offset of this level's table.
    offset: usize,
    /// Corner lattice indexed directly when it fits in the table.
    dense: bool,
}

/// Trainable multi-resolution feature grid. Parameters live in one flat
/// array, entry-major (entry index * features_per_entry + feature).
#[derive(Debug, Clone)]
pub struct HashGrid<S: Scalar> {
    config: HashGridConfig,
    levels: Vec<LevelLayout>,
    tables: Vec<S>,
}

/// Gradient contributions for the touched table entries, as
/// (flat scalar offset of the entry, one gradient value per feature).
pub type SparseTableGradient<S> = Vec<(usize, Vec<S>)>;

impl<S: Scalar> HashGrid<S> {
    pub fn new(config: HashGridConfig, rng: &mut impl Rng) -> Result<Self, EncodingError> {
        config.validate()?;
        let mut levels = Vec::with_capacity(config.levels);
        let mut offset = 0usize;
        for l in 0..config.levels {
            let res = config.level_resolution(l);
            // Corners run 0..=res, so a dense level needs (res+1)^3 slots.
            let lattice = (res as usize + 1).pow(3);
            let dense = lattice <= config.table_size;
            let entries = if dense { lattice } else { config.table_size };
            levels.push(LevelLayout {
                resolution: res,
                offset,
                dense,
            });
            offset += entries * config.features_per_entry;
        }
        // Small symmetric init keeps early densities near exp(0).
        let tables = (0..offset)
            .map(|_| S::from_f64(rng.random_range(-1e-4..=1e-4)))
            .collect();
        Ok(Self {
            config,
            levels,
            tables,
        })
    }

    pub fn config(&self) -> &HashGridConfig {
        &self.config
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    pub fn params(&self) -> &[S] {
        &self.tables
    }

    pub fn params_mut(&mut self) -> &mut [S] {
        &mut self.tables
    }

    pub fn set_params(&mut self, params: &[S]) {
        assert_eq!(params.len(), self.tables.len());
        self.tables.copy_from_slice(params);
    }

    /// Flat scalar offset of the entry holding lattice corner `cell` of
    /// `level`.
    fn corner_offset(&self, level: usize, cell: [u32; 3]) -> usize {
        let layout = &self.levels[level];
        let entry = if layout.dense {
            let n = layout.resolution as usize + 1;
            cell[0] as usize + n * (cell[1] as usize + n * cell[2] as usize)
        } else {
            spatial_hash(cell, self.config.table_size)
        };
        layout.offset + entry * self.config.features_per_entry
    }

    /// Visits the 8 corner entries of every level with their trilinear
    /// weights. The input point is clamped to the bounding box first.
    pub fn visit_corners(&self, p: [S; 3], mut visit: impl FnMut(usize, usize, S)) {
        let bb = &self.config.bounding_box;
        let mut unit = [S::zero(); 3];
        for i in 0..3 {
            let min = S::from_f64(bb.min[i]);
            let max = S::from_f64(bb.max[i]);
            let span = max - min;
            let u = if span > S::zero() {
                (p[i] - min) / span
            } else {
                S::zero()
            };
            unit[i] = u.max(S::zero()).min(S::one());
        }
        for (level, layout) in self.levels.iter().enumerate() {
            let res = S::from_f64(layout.resolution as f64);
            let mut cell = [0u32; 3];
            let mut frac = [S::zero(); 3];
            for i in 0..3 {
                let s = unit[i] * res;
                let c = s.floor().to_f64() as i64;
                let c = c.clamp(0, layout.resolution as i64 - 1) as u32;
                cell[i] = c;
                frac[i] = s - S::from_f64(c as f64);
            }
            for corner in 0..8u32 {
                let mut w = S::one();
                let mut coords = [0u32; 3];
                for i in 0..3 {
                    if corner >> i & 1 == 1 {
                        coords[i] = cell[i] + 1;
                        w *= frac[i];
                    } else {
                        coords[i] = cell[i];
                        w *= S::one() - frac[i];
                    }
                }
                visit(level, self.corner_offset(level, coords), w);
            }
        }
    }

    /// Concatenated trilinear interpolation over all levels.
    pub fn encode_position(&self, p: [S; 3]) -> Vec<S> {
        let mut out = vec![S::zero(); self.output_dim()];
        self.encode_position_into(p, &mut out);
        out
    }

    pub fn encode_position_into(&self, p: [S; 3], out: &mut [S]) {
        let f = self.config.features_per_entry;
        debug_assert_eq!(out.len(), self.output_dim());
        out.fill(S::zero());
        self.visit_corners(p, |level, offset, w| {
            if w == S::zero() {
                return;
            }
            let dst = &mut out[level * f..(level + 1) * f];
            let src = &self.tables[offset..offset + f];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * *s;
            }
        });
    }

    /// Routes the upstream feature gradient back to the touched entries
    /// with the same trilinear weights. Zero-weight corners and zero
    /// upstream slices produce no contributions.
    pub fn encode_position_backward(&self, p: [S; 3], upstream: &[S]) -> SparseTableGradient<S> {
        assert_eq!(upstream.len(), self.output_dim());
        let f = self.config.features_per_entry;
        let mut grads: SparseTableGradient<S> = Vec::new();
        self.visit_corners(p, |level, offset, w| {
            if w == S::zero() {
                return;
            }
            let up = &upstream[level * f..(level + 1) * f];
            if up.iter().all(|&g| g == S::zero()) {
                return;
            }
            grads.push((offset, up.iter().map(|&g| g * w).collect()));
        });
        grads
    }

    /// Backward pass emitting raw (flat offset, gradient) scalar pairs.
    pub fn visit_gradient(&self, p: [S; 3], upstream: &[S], mut sink: impl FnMut(usize, S)) {
        let f = self.config.features_per_entry;
        self.visit_corners(p, |level, offset, w| {
            if w == S::zero() {
                return;
            }
            let up = &upstream[level * f..(level + 1) * f];
            for (k, &g) in up.iter().enumerate() {
                if g != S::zero() {
                    sink(offset + k, g * w);
                }
            }
        });
    }

    /// Backward pass accumulating into an atomic gradient buffer (used by
    /// the trainer so worker threads can share one buffer).
    pub fn accumulate_gradient_atomic(&self, p: [S; 3], upstream: &[S], grad: &[S::Atomic]) {
        debug_assert_eq!(grad.len(), self.tables.len());
        self.visit_gradient(p, upstream, |offset, v| S::atomic_add(&grad[offset], v));
    }
}

// Real spherical-harmonics constants, bands 0..=3.
const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_92;
const SH_C2_0: f64 = 1.092_548_430_592_079_2;
const SH_C2_1: f64 = 0.315_391_565_252_520_05;
const SH_C2_2: f64 = 0.546_274_215_296_039_6;
const SH_C3_0: f64 = 0.590_043_589_926_643_5;
const SH_C3_1: f64 = 2.890_611_442_640_554;
const SH_C3_2: f64 = 0.457_045_799_464_465_74;
const SH_C3_3: f64 = 0.373_176_332_590_115_4;
const SH_C3_4: f64 = 1.445_305_721_320_277;

/// Real spherical-harmonics values of the normalized direction, bands
/// l = 0..=3 with m ascending inside each band.
pub fn encode_direction<S: Scalar>(v: [S; 3]) -> Result<[S; SH_DIM], EncodingError> {
    let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if norm == S::zero() {
        return Err(EncodingError::ZeroDirection);
    }
    let x = (v[0] / norm).to_f64();
    let y = (v[1] / norm).to_f64();
    let z = (v[2] / norm).to_f64();

    let (x2, y2, z2) = (x * x, y * y, z * z);
    let mut out = [0.0f64; SH_DIM];
    out[0] = SH_C0;
    out[1] = SH_C1 * y;
    out[2] = SH_C1 * z;
    out[3] = SH_C1 * x;
    out[4] = SH_C2_0 * x * y;
    out[5] = SH_C2_0 * y * z;
    out[6] = SH_C2_1 * (3.0 * z2 - 1.0);
    out[7] = SH_C2_0 * x * z;
    out[8] = SH_C2_2 * (x2 - y2);
    out[9] = SH_C3_0 * y * (3.0 * x2 - y2);
    out[10] = SH_C3_1 * x * y * z;
    out[11] = SH_C3_2 * y * (5.0 * z2 - 1.0);
    out[12] = SH_C3_3 * z * (5.0 * z2 - 3.0);
    out[13] = SH_C3_2 * x * (5.0 * z2 - 1.0);
    out[14] = SH_C3_4 * z * (x2 - y2);
    out[15] = SH_C3_0 * x * (x2 - 3.0 * y2);

    let mut cast = [S::zero(); SH_DIM];
    for (c, v) in cast.iter_mut().zip(out) {
        *c = S::from_f64(v);
    }
    Ok(cast)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_box() -> Aabb {
        Aabb {
            min: Vector3::zeros(),
            max: Vector3::repeat(1.0),
        }
    }

    fn small_config() -> HashGridConfig {
        // b = 2 exactly: resolutions 4, 8, 16, 32; first two levels dense,
        // last two hashed with a 2^10 table.
        HashGridConfig {
            levels: 4,
            table_size: 1 << 10,
            features_per_entry: 2,
            base_resolution: 4,
            finest_resolution: 32,
            bounding_box: unit_box(),
        }
    }

    #[test]
    fn hash_of_origin_is_zero() {
        assert_eq!(spatial_hash([0, 0, 0], 1 << 18), 0);
    }

    #[test]
    fn hash_is_deterministic() {
        let c = [123u32, 456, 789];
        assert_eq!(spatial_hash(c, 1 << 18), spatial_hash(c, 1 << 18));
    }

    #[test]
    fn hash_occupancy_is_uniform_across_deciles() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let table = 1usize << 18;
        let mut counts = vec![0u32; table];
        for _ in 0..1_000_000 {
            let cell = [
                rng.random::<u32>() % 4096,
                rng.random::<u32>() % 4096,
                rng.random::<u32>() % 4096,
            ];
            counts[spatial_hash(cell, table)] += 1;
        }
        let decile = table / 10;
        for d in 0..10 {
            let lo = d * decile;
            let hi = if d == 9 { table } else { lo + decile };
            let sum: u64 = counts[lo..hi].iter().map(|&c| c as u64).sum();
            let expected = 1_000_000.0 * (hi - lo) as f64 / table as f64;
            let ratio = sum as f64 / expected;
            assert!(
                (ratio - 1.0).abs() < 0.05,
                "decile {d} occupancy off: {ratio}"
            );
        }
    }

    #[test]
    fn default_level_resolutions_hit_base_and_finest() {
        let cfg = HashGridConfig::with_bounding_box(unit_box());
        assert_eq!(cfg.level_resolution(0), 16);
        let finest = cfg.level_resolution(cfg.levels - 1);
        assert!((finest as i64 - 2048).abs() <= 1, "finest = {finest}");
        for l in 1..cfg.levels {
            assert!(cfg.level_resolution(l) > cfg.level_resolution(l - 1));
        }
        assert_eq!(cfg.output_dim(), 128);
    }

    #[test]
    fn zero_tables_encode_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut grid = HashGrid::<f64>::new(small_config(), &mut rng).unwrap();
        grid.params_mut().fill(0.0);
        let out = grid.encode_position([0.3, 0.7, 0.2]);
        assert!(out.iter().all(|&v| v == 0.0));
        assert_eq!(out.len(), 8);
    }

    #[test]
    fn corner_point_selects_single_entry_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let grid = HashGrid::<f64>::new(small_config(), &mut rng).unwrap();
        // (0.25, 0.5, 0.75) lies on a lattice corner of every level since
        // every resolution is a multiple of 4.
        let p = [0.25, 0.5, 0.75];
        let out = grid.encode_position(p);
        let f = grid.config().features_per_entry;
        for (level, layout) in grid.levels.iter().enumerate() {
            let n = layout.resolution as f64;
            let cell = [
                (0.25 * n) as u32,
                (0.5 * n) as u32,
                (0.75 * n) as u32,
            ];
            let offset = grid.corner_offset(level, cell);
            for k in 0..f {
                assert_eq!(out[level * f + k], grid.tables[offset + k]);
            }
        }
        // The far boundary corner also resolves exactly.
        let out = grid.encode_position([1.0, 1.0, 1.0]);
        for (level, layout) in grid.levels.iter().enumerate() {
            let r = layout.resolution;
            let offset = grid.corner_offset(level, [r, r, r]);
            for k in 0..f {
                assert_eq!(out[level * f + k], grid.tables[offset + k]);
            }
        }
    }

    #[test]
    fn matches_hand_unrolled_trilinear_interpolation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = HashGridConfig {
            levels: 1,
            table_size: 1 << 12,
            features_per_entry: 3,
            base_resolution: 7,
            finest_resolution: 7,
            bounding_box: unit_box(),
        };
        let grid = HashGrid::<f64>::new(cfg, &mut rng).unwrap();
        for _ in 0..50 {
            let p = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            let out = grid.encode_position(p);

            // Hand-unrolled 8-corner interpolation.
            let n = 7.0;
            let s = [p[0] * n, p[1] * n, p[2] * n];
            let c = [
                (s[0].floor() as u32).min(6),
                (s[1].floor() as u32).min(6),
                (s[2].floor() as u32).min(6),
            ];
            let w = [
                s[0] - c[0] as f64,
                s[1] - c[1] as f64,
                s[2] - c[2] as f64,
            ];
            let mut expect = [0.0f64; 3];
            for dz in 0..2u32 {
                for dy in 0..2u32 {
                    for dx in 0..2u32 {
                        let weight = (if dx == 1 { w[0] } else { 1.0 - w[0] })
                            * (if dy == 1 { w[1] } else { 1.0 - w[1] })
                            * (if dz == 1 { w[2] } else { 1.0 - w[2] });
                        let off =
                            grid.corner_offset(0, [c[0] + dx, c[1] + dy, c[2] + dz]);
                        for k in 0..3 {
                            expect[k] += weight * grid.tables[off + k];
                        }
                    }
                }
            }
            for k in 0..3 {
                assert!((out[k] - expect[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn backward_zero_upstream_is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grid = HashGrid::<f64>::new(small_config(), &mut rng).unwrap();
        let upstream = vec![0.0; grid.output_dim()];
        assert!(grid
            .encode_position_backward([0.2, 0.3, 0.4], &upstream)
            .is_empty());
    }

    #[test]
    fn backward_on_corner_routes_to_one_entry_per_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid = HashGrid::<f64>::new(small_config(), &mut rng).unwrap();
        let upstream = vec![1.0; grid.output_dim()];
        let grads = grid.encode_position_backward([0.25, 0.5, 0.75], &upstream);
        assert_eq!(grads.len(), grid.config().levels);
        for (_, g) in &grads {
            assert!(g.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn backward_touches_at_most_eight_entries_per_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let grid = HashGrid::<f64>::new(small_config(), &mut rng).unwrap();
        let upstream = vec![1.0; grid.output_dim()];
        for _ in 0..50 {
            let p = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            let grads = grid.encode_position_backward(p, &upstream);
            assert!(grads.len() <= 8 * grid.config().levels);
        }
    }

    #[test]
    fn backward_matches_central_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut grid = HashGrid::<f64>::new(small_config(), &mut rng).unwrap();
        let dim = grid.output_dim();
        for _ in 0..10 {
            let p = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            let upstream: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
            // Aggregate duplicate offsets (hash collisions share an entry).
            let mut analytic: std::collections::HashMap<usize, Vec<f64>> =
                std::collections::HashMap::new();
            for (off, g) in grid.encode_position_backward(p, &upstream) {
                let slot = analytic.entry(off).or_insert_with(|| vec![0.0; g.len()]);
                for (a, b) in slot.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let h = 1e-5;
            for (&off, grads) in &analytic {
                for (k, &g) in grads.iter().enumerate() {
                    let idx = off + k;
                    let orig = grid.tables[idx];
                    grid.tables[idx] = orig + h;
                    let plus: f64 = grid
                        .encode_position(p)
                        .iter()
                        .zip(&upstream)
                        .map(|(o, u)| o * u)
                        .sum();
                    grid.tables[idx] = orig - h;
                    let minus: f64 = grid
                        .encode_position(p)
                        .iter()
                        .zip(&upstream)
                        .map(|(o, u)| o * u)
                        .sum();
                    grid.tables[idx] = orig;
                    let fd = (plus - minus) / (2.0 * h);
                    let denom = fd.abs().max(g.abs()).max(1e-8);
                    assert!(
                        ((fd - g) / denom).abs() < 1e-4,
                        "fd {fd} vs analytic {g}"
                    );
                }
            }
        }
    }

    #[test]
    fn atomic_accumulation_matches_sparse_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let grid = HashGrid::<f64>::new(small_config(), &mut rng).unwrap();
        let dim = grid.output_dim();
        let upstream: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
        let p = [0.37, 0.81, 0.12];
        let atomic = f64::atomic_vec(grid.params().len());
        grid.accumulate_gradient_atomic(p, &upstream, &atomic);
        let mut dense = vec![0.0; grid.params().len()];
        for (off, g) in grid.encode_position_backward(p, &upstream) {
            for (k, v) in g.iter().enumerate() {
                dense[off + k] += v;
            }
        }
        for (i, &d) in dense.iter().enumerate() {
            assert!((f64::atomic_load(&atomic[i]) - d).abs() < 1e-12);
        }
    }

    #[test]
    fn points_outside_the_box_are_clamped() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let grid = HashGrid::<f64>::new(small_config(), &mut rng).unwrap();
        let inside = grid.encode_position([0.0, 1.0, 0.5]);
        let outside = grid.encode_position([-3.0, 7.0, 0.5]);
        assert_eq!(inside, outside);
    }

    #[test]
    fn sh_constant_band() {
        let d = encode_direction([0.3f64, -0.4, 0.8]).unwrap();
        assert!((d[0] - 0.28209479).abs() < 1e-7);
    }

    #[test]
    fn sh_z_axis_kills_nonzonal_terms() {
        let d = encode_direction([0.0f64, 0.0, 1.0]).unwrap();
        for (i, &v) in d.iter().enumerate() {
            // Zonal harmonics sit at indices 0 (l=0), 2 (l=1), 6 (l=2),
            // 12 (l=3); everything else vanishes on the z axis.
            if matches!(i, 0 | 2 | 6 | 12) {
                assert!(v.abs() > 1e-3, "component {i} unexpectedly zero");
            } else {
                assert!(v.abs() < 1e-7, "component {i} = {v}");
            }
        }
    }

    #[test]
    fn sh_is_scale_invariant() {
        let a = encode_direction([0.2f64, 0.5, -0.7]).unwrap();
        let b = encode_direction([0.4f64, 1.0, -1.4]).unwrap();
        assert_eq!(a, b);
        assert!(encode_direction([0.0f64, 0.0, 0.0]).is_err());
    }
}
