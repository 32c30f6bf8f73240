//! Binary checkpoint: the complete training state.
//!
//! Layout: magic "DNRF", u32 version, grid config, MLP dims, step counters,
//! then length-prefixed f32 arrays (parameters, EMA shadows, Adam moments)
//! and the occupancy EMA. Everything multi-byte is little-endian 32-bit.
//! Round trips are bit-exact; resuming from a mid-training checkpoint
//! continues the exact trajectory of an uninterrupted run.

use crate::bvh::Aabb;
use crate::dataset::DatasetError;
use crate::encoding::HashGridConfig;
use nalgebra::Vector3;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DNRF";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Adam tensor order: hash tables, density net, color net.
pub const TENSOR_COUNT: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub grid_config: HashGridConfig,
    pub density_dims: Vec<u32>,
    pub color_dims: Vec<u32>,
    pub train_step: u32,
    pub adam_step: u32,
    /// Raw (non-averaged) parameters.
    pub params: [Vec<f32>; TENSOR_COUNT],
    /// EMA shadows; rendering and eval read these.
    pub shadows: [Vec<f32>; TENSOR_COUNT],
    pub adam_m: [Vec<f32>; TENSOR_COUNT],
    pub adam_v: [Vec<f32>; TENSOR_COUNT],
    pub occupancy_bbox: Aabb,
    pub occupancy_ema: Vec<f32>,
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_f32(w: &mut impl Write, v: f32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_array(w: &mut impl Write, data: &[f32]) -> std::io::Result<()> {
    write_u32(w, data.len() as u32)?;
    for &v in data {
        write_f32(w, v)?;
    }
    Ok(())
}

fn write_box(w: &mut impl Write, b: &Aabb) -> std::io::Result<()> {
    for i in 0..3 {
        write_f32(w, b.min[i] as f32)?;
    }
    for i in 0..3 {
        write_f32(w, b.max[i] as f32)?;
    }
    Ok(())
}

fn write_dims(w: &mut impl Write, dims: &[u32]) -> std::io::Result<()> {
    write_u32(w, dims.len() as u32)?;
    for &d in dims {
        write_u32(w, d)?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn u32(&mut self) -> Result<u32, DatasetError> {
        let mut buf = [0u8; 4];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| DatasetError::CorruptPayload("truncated checkpoint".into()))?;
        Ok(u32::from_le_bytes(buf))
    }

    fn f32(&mut self) -> Result<f32, DatasetError> {
        Ok(f32::from_bits(self.u32()?))
    }

    fn array(&mut self, max_len: usize) -> Result<Vec<f32>, DatasetError> {
        let n = self.u32()? as usize;
        if n > max_len {
            return Err(DatasetError::CorruptPayload(format!(
                "array length {n} exceeds limit {max_len}"
            )));
        }
        let mut bytes = vec![0u8; n * 4];
        self.inner
            .read_exact(&mut bytes)
            .map_err(|_| DatasetError::CorruptPayload("truncated array".into()))?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn bbox(&mut self) -> Result<Aabb, DatasetError> {
        let mut v = [0f64; 6];
        for x in v.iter_mut() {
            *x = self.f32()? as f64;
        }
        Ok(Aabb {
            min: Vector3::new(v[0], v[1], v[2]),
            max: Vector3::new(v[3], v[4], v[5]),
        })
    }

    fn dims(&mut self) -> Result<Vec<u32>, DatasetError> {
        let n = self.u32()? as usize;
        if n > 64 {
            return Err(DatasetError::CorruptPayload("implausible dim count".into()));
        }
        (0..n).map(|_| self.u32()).collect()
    }
}

// Upper bound on any serialized array, as a corruption guard.
const MAX_ARRAY: usize = 1 << 28;

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(|e| DatasetError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let emit = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        w.write_all(&CHECKPOINT_MAGIC)?;
        write_u32(w, CHECKPOINT_VERSION)?;
        let cfg = &ckpt.grid_config;
        write_u32(w, cfg.levels as u32)?;
        write_u32(w, cfg.table_size as u32)?;
        write_u32(w, cfg.features_per_entry as u32)?;
        write_u32(w, cfg.base_resolution)?;
        write_u32(w, cfg.finest_resolution)?;
        write_box(w, &cfg.bounding_box)?;
        write_dims(w, &ckpt.density_dims)?;
        write_dims(w, &ckpt.color_dims)?;
        write_u32(w, ckpt.train_step)?;
        write_u32(w, ckpt.adam_step)?;
        for group in [&ckpt.params, &ckpt.shadows, &ckpt.adam_m, &ckpt.adam_v] {
            for tensor in group {
                write_array(w, tensor)?;
            }
        }
        write_box(w, &ckpt.occupancy_bbox)?;
        write_array(w, &ckpt.occupancy_ema)?;
        w.flush()
    };
    emit(&mut w).map_err(|e| DatasetError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, DatasetError> {
    let file = File::open(path).map_err(|e| DatasetError::io(path, e))?;
    let mut r = Reader {
        inner: BufReader::new(file),
    };
    let mut magic = [0u8; 4];
    r.inner
        .read_exact(&mut magic)
        .map_err(|_| DatasetError::CorruptPayload("file shorter than magic".into()))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(DatasetError::CorruptPayload("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(DatasetError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let levels = r.u32()? as usize;
    let table_size = r.u32()? as usize;
    let features_per_entry = r.u32()? as usize;
    let base_resolution = r.u32()?;
    let finest_resolution = r.u32()?;
    let bounding_box = r.bbox()?;
    let grid_config = HashGridConfig {
        levels,
        table_size,
        features_per_entry,
        base_resolution,
        finest_resolution,
        bounding_box,
    };
    let density_dims = r.dims()?;
    let color_dims = r.dims()?;
    let train_step = r.u32()?;
    let adam_step = r.u32()?;

    let mut groups: Vec<[Vec<f32>; TENSOR_COUNT]> = Vec::new();
    for _ in 0..4 {
        let a = r.array(MAX_ARRAY)?;
        let b = r.array(MAX_ARRAY)?;
        let c = r.array(MAX_ARRAY)?;
        groups.push([a, b, c]);
    }
    let adam_v = groups.pop().unwrap();
    let adam_m = groups.pop().unwrap();
    let shadows = groups.pop().unwrap();
    let params = groups.pop().unwrap();

    let occupancy_bbox = r.bbox()?;
    let occupancy_ema = r.array(MAX_ARRAY)?;

    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing).unwrap_or(0) != 0 {
        return Err(DatasetError::CorruptPayload(
            "trailing bytes after payload".into(),
        ));
    }

    // Cross-check declared lengths.
    for group in [&params, &shadows, &adam_m, &adam_v] {
        for t in 1..TENSOR_COUNT {
            if group[t].len() != params[t].len() {
                return Err(DatasetError::CorruptPayload(format!(
                    "tensor {t} length mismatch across groups"
                )));
            }
        }
    }

    Ok(Checkpoint {
        grid_config,
        density_dims,
        color_dims,
        train_step,
        adam_step,
        params,
        shadows,
        adam_m,
        adam_v,
        occupancy_bbox,
        occupancy_ema,
    })
}
