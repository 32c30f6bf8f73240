//! Scene files, synthetic scene generation, and checkpoints.
//!
//! A scene directory holds a canonical mesh, per-frame assets
//! (`frames/NNNN.{obj,png,mask.png,w.pfm,z.pfm}`), and a line-oriented
//! `manifest` tying them together:
//!
//! ```text
//! format dnrf-scene
//! version 1
//! resolution <w> <h>
//! background <r> <g> <b>
//! canonical_mesh <path>
//! canonical_bbox <minx miny minz maxx maxy maxz>
//! deformed_bbox <minx miny minz maxx maxy maxz>
//! mouth_faces <face indices...>
//! frame_count <n>
//! frame <i> mesh|color|mask|weights|depth <path>
//! frame <i> camera <fx fy cx cy> <12 pose values, row-major 3x4>
//! frame <i> expression <16 values>
//! ```
//!
//! Numbers are plain decimal text; float fields round-trip exactly through
//! Rust's shortest representation.

mod checkpoint;
mod obj;
mod synthetic;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
    TENSOR_COUNT,
};
pub use obj::{read_obj, write_obj};
pub use synthetic::{generate_synthetic_scene, SyntheticSceneSpec};

use crate::bvh::{build_bvh, Aabb, Bvh, BvhError};
use crate::encoding::{EncodingError, SH_DIM};
use crate::field::RadianceField;
use crate::geometry::{FaceGradients, GeometryError, ScalingMode, TriangleMesh};
use crate::images::{ImageError, ImageF32, ImageRgbF32};
use crate::network::{ExpressionCode, EXPRESSION_DIM};
use crate::renderer::{Camera, FrameContext, RenderError};
use crate::scalar::Scalar;
use nalgebra::{Matrix4, Vector3};
use rayon::prelude::*;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("manifest error in {path}: {message}")]
    Manifest { path: String, message: String },
    #[error("frame {frame} mesh is not a topology twin of the canonical mesh")]
    TopologyMismatch { frame: usize },
    #[error("checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptPayload(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Bvh(#[from] BvhError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
}

impl DatasetError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Per-frame entry of the manifest (paths relative to the scene root).
#[derive(Debug, Clone, PartialEq)]
pub struct FrameManifest {
    pub mesh: String,
    pub color: String,
    pub mask: String,
    pub weights: String,
    pub depth: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-from-camera pose, row-major 3x4.
    pub pose: [f64; 12],
    pub expression: [f64; EXPRESSION_DIM],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneManifest {
    pub width: u32,
    pub height: u32,
    pub background: [f32; 3],
    pub canonical_mesh: String,
    pub canonical_bbox: Aabb,
    pub deformed_bbox: Aabb,
    pub mouth_faces: Vec<u32>,
    pub frames: Vec<FrameManifest>,
}

fn manifest_err(path: &Path, message: impl Into<String>) -> DatasetError {
    DatasetError::Manifest {
        path: path.display().to_string(),
        message: message.into(),
    }
}

pub fn parse_manifest(path: &Path) -> Result<SceneManifest, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
    let mut width = None;
    let mut height = None;
    let mut background = None;
    let mut canonical_mesh = None;
    let mut canonical_bbox = None;
    let mut deformed_bbox = None;
    let mut mouth_faces = Vec::new();
    let mut frame_count = None;
    let mut frames: Vec<Option<FrameManifest>> = Vec::new();

    let parse_floats = |tokens: &[&str], n: usize, what: &str| -> Result<Vec<f64>, DatasetError> {
        if tokens.len() != n {
            return Err(manifest_err(path, format!("{what}: expected {n} values")));
        }
        tokens
            .iter()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| manifest_err(path, format!("{what}: bad number '{t}'")))
            })
            .collect()
    };
    let parse_box = |tokens: &[&str], what: &str| -> Result<Aabb, DatasetError> {
        let v = parse_floats(tokens, 6, what)?;
        Ok(Aabb {
            min: Vector3::new(v[0], v[1], v[2]),
            max: Vector3::new(v[3], v[4], v[5]),
        })
    };

    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let ctx = format!("line {}", ln + 1);
        match tokens[0] {
            "format" => {
                if tokens.get(1) != Some(&"dnrf-scene") {
                    return Err(manifest_err(path, format!("{ctx}: unknown format")));
                }
            }
            "version" => {
                if tokens.get(1) != Some(&"1") {
                    return Err(manifest_err(path, format!("{ctx}: unsupported version")));
                }
            }
            "resolution" => {
                let v = parse_floats(&tokens[1..], 2, &ctx)?;
                width = Some(v[0] as u32);
                height = Some(v[1] as u32);
            }
            "background" => {
                let v = parse_floats(&tokens[1..], 3, &ctx)?;
                background = Some([v[0] as f32, v[1] as f32, v[2] as f32]);
            }
            "canonical_mesh" => {
                canonical_mesh = Some(
                    tokens
                        .get(1)
                        .ok_or_else(|| manifest_err(path, format!("{ctx}: missing path")))?
                        .to_string(),
                );
            }
            "canonical_bbox" => canonical_bbox = Some(parse_box(&tokens[1..], &ctx)?),
            "deformed_bbox" => deformed_bbox = Some(parse_box(&tokens[1..], &ctx)?),
            "mouth_faces" => {
                for t in &tokens[1..] {
                    mouth_faces.push(
                        t.parse::<u32>()
                            .map_err(|_| manifest_err(path, format!("{ctx}: bad face index")))?,
                    );
                }
            }
            "frame_count" => {
                let n: usize = tokens
                    .get(1)
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| manifest_err(path, format!("{ctx}: bad count")))?;
                frame_count = Some(n);
                frames.resize(n, None);
            }
            "frame" => {
                let idx: usize = tokens
                    .get(1)
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| manifest_err(path, format!("{ctx}: bad frame index")))?;
                if idx >= frames.len() {
                    return Err(manifest_err(
                        path,
                        format!("{ctx}: frame {idx} outside frame_count"),
                    ));
                }
                let entry = frames[idx].get_or_insert_with(|| FrameManifest {
                    mesh: String::new(),
                    color: String::new(),
                    mask: String::new(),
                    weights: String::new(),
                    depth: String::new(),
                    fx: 0.0,
                    fy: 0.0,
                    cx: 0.0,
                    cy: 0.0,
                    pose: [0.0; 12],
                    expression: [0.0; EXPRESSION_DIM],
                });
                let key = tokens
                    .get(2)
                    .ok_or_else(|| manifest_err(path, format!("{ctx}: missing key")))?;
                match *key {
                    "mesh" | "color" | "mask" | "weights" | "depth" => {
                        let value = tokens
                            .get(3)
                            .ok_or_else(|| manifest_err(path, format!("{ctx}: missing path")))?
                            .to_string();
                        match *key {
                            "mesh" => entry.mesh = value,
                            "color" => entry.color = value,
                            "mask" => entry.mask = value,
                            "weights" => entry.weights = value,
                            _ => entry.depth = value,
                        }
                    }
                    "camera" => {
                        let v = parse_floats(&tokens[3..], 16, &ctx)?;
                        entry.fx = v[0];
                        entry.fy = v[1];
                        entry.cx = v[2];
                        entry.cy = v[3];
                        entry.pose.copy_from_slice(&v[4..16]);
                    }
                    "expression" => {
                        let v = parse_floats(&tokens[3..], EXPRESSION_DIM, &ctx)?;
                        entry.expression.copy_from_slice(&v);
                    }
                    other => {
                        return Err(manifest_err(path, format!("{ctx}: unknown key '{other}'")))
                    }
                }
            }
            other => return Err(manifest_err(path, format!("{ctx}: unknown record '{other}'"))),
        }
    }

    let frame_count =
        frame_count.ok_or_else(|| manifest_err(path, "missing frame_count record"))?;
    let mut out_frames = Vec::with_capacity(frame_count);
    for (i, f) in frames.into_iter().enumerate() {
        let f = f.ok_or_else(|| manifest_err(path, format!("frame {i} has no records")))?;
        for (name, value) in [
            ("mesh", &f.mesh),
            ("color", &f.color),
            ("mask", &f.mask),
            ("weights", &f.weights),
            ("depth", &f.depth),
        ] {
            if value.is_empty() {
                return Err(manifest_err(path, format!("frame {i} missing {name} path")));
            }
        }
        if f.fx == 0.0 {
            return Err(manifest_err(path, format!("frame {i} missing camera")));
        }
        out_frames.push(f);
    }

    Ok(SceneManifest {
        width: width.ok_or_else(|| manifest_err(path, "missing resolution"))?,
        height: height.ok_or_else(|| manifest_err(path, "missing resolution"))?,
        background: background.ok_or_else(|| manifest_err(path, "missing background"))?,
        canonical_mesh: canonical_mesh
            .ok_or_else(|| manifest_err(path, "missing canonical_mesh"))?,
        canonical_bbox: canonical_bbox
            .ok_or_else(|| manifest_err(path, "missing canonical_bbox"))?,
        deformed_bbox: deformed_bbox
            .ok_or_else(|| manifest_err(path, "missing deformed_bbox"))?,
        mouth_faces,
        frames: out_frames,
    })
}

pub fn write_manifest(path: &Path, m: &SceneManifest) -> Result<(), DatasetError> {
    use std::fmt::Write as _;
    let mut s = String::new();
    let bbox_line = |name: &str, b: &Aabb, s: &mut String| {
        let _ = writeln!(
            s,
            "{name} {} {} {} {} {} {}",
            b.min.x, b.min.y, b.min.z, b.max.x, b.max.y, b.max.z
        );
    };
    let _ = writeln!(s, "format dnrf-scene");
    let _ = writeln!(s, "version 1");
    let _ = writeln!(s, "resolution {} {}", m.width, m.height);
    let _ = writeln!(
        s,
        "background {} {} {}",
        m.background[0], m.background[1], m.background[2]
    );
    let _ = writeln!(s, "canonical_mesh {}", m.canonical_mesh);
    bbox_line("canonical_bbox", &m.canonical_bbox, &mut s);
    bbox_line("deformed_bbox", &m.deformed_bbox, &mut s);
    if !m.mouth_faces.is_empty() {
        let list: Vec<String> = m.mouth_faces.iter().map(|f| f.to_string()).collect();
        let _ = writeln!(s, "mouth_faces {}", list.join(" "));
    }
    let _ = writeln!(s, "frame_count {}", m.frames.len());
    for (i, f) in m.frames.iter().enumerate() {
        let _ = writeln!(s, "frame {i} mesh {}", f.mesh);
        let _ = writeln!(s, "frame {i} color {}", f.color);
        let _ = writeln!(s, "frame {i} mask {}", f.mask);
        let _ = writeln!(s, "frame {i} weights {}", f.weights);
        let _ = writeln!(s, "frame {i} depth {}", f.depth);
        let pose: Vec<String> = f.pose.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(
            s,
            "frame {i} camera {} {} {} {} {}",
            f.fx,
            f.fy,
            f.cx,
            f.cy,
            pose.join(" ")
        );
        let expr: Vec<String> = f.expression.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "frame {i} expression {}", expr.join(" "));
    }
    std::fs::write(path, s).map_err(|e| DatasetError::io(path, e))
}

/// One loaded frame: assets plus lazily built acceleration structures.
#[derive(Debug)]
pub struct FrameRecord {
    pub id: usize,
    pub mesh: Arc<TriangleMesh>,
    pub camera: Camera,
    pub color: ImageRgbF32,
    pub face_mask: ImageF32,
    pub color_weight: ImageF32,
    pub mesh_depth: ImageF32,
    pub expression: ExpressionCode,
    canonical: Arc<TriangleMesh>,
    bvh: OnceLock<Arc<Bvh>>,
    gradients: OnceLock<Arc<FaceGradients>>,
}

impl FrameRecord {
    /// Deformed-space BVH, built on first access.
    pub fn bvh(&self) -> &Arc<Bvh> {
        self.bvh
            .get_or_init(|| Arc::new(build_bvh(self.mesh.clone()).expect("mesh is non-empty")))
    }

    /// Per-face deformation gradients, built on first access.
    pub fn gradients(&self) -> &Arc<FaceGradients> {
        self.gradients.get_or_init(|| {
            Arc::new(
                FaceGradients::precompute(&self.mesh, &self.canonical, ScalingMode::GeometricSqrt)
                    .expect("meshes validated at load"),
            )
        })
    }
}

/// Fully loaded scene, immutable after load.
#[derive(Debug)]
pub struct Scene {
    pub root: PathBuf,
    pub canonical: Arc<TriangleMesh>,
    pub canonical_bbox: Aabb,
    pub deformed_bbox: Aabb,
    pub background: [f32; 3],
    pub mouth_faces: Vec<u32>,
    /// Per-face conditioning flags on the shared topology.
    pub mouth_flags: Vec<bool>,
    pub frames: Vec<FrameRecord>,
    pub width: u32,
    pub height: u32,
}

impl Scene {
    /// Geometry bundle the renderer needs for one frame.
    pub fn frame_context(&self, frame: usize) -> FrameContext<'_> {
        let f = &self.frames[frame];
        FrameContext {
            bvh: f.bvh(),
            gradients: f.gradients(),
            mouth_faces: &self.mouth_flags,
        }
    }
}

/// Loads and validates a scene directory.
pub fn load_scene(root: &Path) -> Result<Scene, DatasetError> {
    let manifest_path = root.join("manifest");
    let manifest = parse_manifest(&manifest_path)?;
    let canonical = Arc::new(read_obj(&root.join(&manifest.canonical_mesh))?);

    let mouth_flags = {
        let mut flags = vec![false; canonical.face_count()];
        for &f in &manifest.mouth_faces {
            if f as usize >= flags.len() {
                return Err(manifest_err(
                    &manifest_path,
                    format!("mouth face {f} outside face count {}", flags.len()),
                ));
            }
            flags[f as usize] = true;
        }
        flags
    };

    let frames: Result<Vec<FrameRecord>, DatasetError> = manifest
        .frames
        .par_iter()
        .enumerate()
        .map(|(id, fm)| {
            let mesh = Arc::new(read_obj(&root.join(&fm.mesh))?);
            if !mesh.same_topology(&canonical) {
                return Err(DatasetError::TopologyMismatch { frame: id });
            }
            let mut pose = Matrix4::identity();
            for r in 0..3 {
                for c in 0..4 {
                    pose[(r, c)] = fm.pose[r * 4 + c];
                }
            }
            let camera = Camera::new(
                fm.fx,
                fm.fy,
                fm.cx,
                fm.cy,
                pose,
                manifest.width,
                manifest.height,
            )?;
            let color = ImageRgbF32::load_png(&root.join(&fm.color))?;
            let face_mask_img = ImageF32::from_png_gray(&root.join(&fm.mask))?;
            let color_weight = ImageF32::load_pfm(&root.join(&fm.weights))?;
            let mesh_depth = ImageF32::load_pfm(&root.join(&fm.depth))?;
            for (name, (w, h)) in [
                ("color", (color.width, color.height)),
                ("mask", (face_mask_img.width, face_mask_img.height)),
                ("weights", (color_weight.width, color_weight.height)),
                ("depth", (mesh_depth.width, mesh_depth.height)),
            ] {
                if (w, h) != (manifest.width, manifest.height) {
                    return Err(manifest_err(
                        &manifest_path,
                        format!("frame {id} {name} image is {w}x{h}, expected manifest resolution"),
                    ));
                }
            }
            for (i, (&m, &z)) in face_mask_img.data.iter().zip(&mesh_depth.data).enumerate() {
                if m > 0.0 && !z.is_finite() {
                    return Err(manifest_err(
                        &manifest_path,
                        format!("frame {id} depth not finite at masked pixel {i}"),
                    ));
                }
            }
            Ok(FrameRecord {
                id,
                mesh,
                camera,
                color,
                face_mask: face_mask_img,
                color_weight,
                mesh_depth,
                expression: ExpressionCode(fm.expression),
                canonical: canonical.clone(),
                bvh: OnceLock::new(),
                gradients: OnceLock::new(),
            })
        })
        .collect();

    Ok(Scene {
        root: root.to_path_buf(),
        canonical,
        canonical_bbox: manifest.canonical_bbox,
        deformed_bbox: manifest.deformed_bbox,
        background: manifest.background,
        mouth_faces: manifest.mouth_faces,
        mouth_flags,
        frames: frames?,
        width: manifest.width,
        height: manifest.height,
    })
}

/// Surface-attached emission color: a fixed smooth palette over the unit
/// direction from the canonical center. Shared by the synthetic rasterizer
/// and the analytic field so both label the same surface point identically.
pub fn emission_palette(dir: &Vector3<f64>) -> [f32; 3] {
    let d0 = dir.dot(&Vector3::new(1.0, 0.3, 0.2));
    let d1 = dir.dot(&Vector3::new(0.1, 1.0, -0.4));
    let d2 = dir.dot(&Vector3::new(-0.3, 0.5, 1.0));
    [
        (0.5 + 0.45 * (2.0 * d0).sin()) as f32,
        (0.5 + 0.45 * (2.5 * d1 + 1.0).sin()) as f32,
        (0.5 + 0.45 * (1.7 * d2 + 2.0).sin()) as f32,
    ]
}

/// Ground-truth radiance field of the synthetic scenes: an opaque emissive
/// shell just inside the canonical mesh surface. Lets the renderer be
/// validated against the scene generator's rasterizer without any training.
pub struct AnalyticSurfaceField {
    bvh: Bvh,
    mesh: Arc<TriangleMesh>,
    shell_depth: f64,
    density: f64,
}

impl AnalyticSurfaceField {
    pub fn new(canonical: Arc<TriangleMesh>) -> Result<Self, DatasetError> {
        let bvh = build_bvh(canonical.clone())?;
        Ok(Self {
            bvh,
            mesh: canonical,
            // Covers the facet sagitta plus a couple of marching steps.
            shell_depth: 0.006,
            density: 5e4,
        })
    }

    fn density_f64(&self, p: &Vector3<f64>) -> f64 {
        let hit = self.bvh.nearest(p);
        if hit.distance > self.shell_depth {
            return 0.0;
        }
        let tri = self.mesh.triangle(hit.face);
        let normal = (tri[1] - tri[0]).cross(&(tri[2] - tri[0]));
        if (p - hit.closest_point).dot(&normal) <= 0.0 {
            self.density
        } else {
            0.0
        }
    }
}

impl<S: Scalar> RadianceField<S> for AnalyticSurfaceField {
    fn density(&self, p: [S; 3], _expression: &[S; EXPRESSION_DIM]) -> S {
        let pv = Vector3::new(p[0].to_f64(), p[1].to_f64(), p[2].to_f64());
        S::from_f64(self.density_f64(&pv))
    }

    fn query(
        &self,
        p: [S; 3],
        _dir_encoding: &[S; SH_DIM],
        _expression: &[S; EXPRESSION_DIM],
    ) -> (S, [S; 3]) {
        let pv = Vector3::new(p[0].to_f64(), p[1].to_f64(), p[2].to_f64());
        let density = self.density_f64(&pv);
        let rgb = if pv.norm() > 0.0 {
            emission_palette(&pv.normalize())
        } else {
            [0.5; 3]
        };
        (
            S::from_f64(density),
            [
                S::from_f32(rgb[0]),
                S::from_f32(rgb[1]),
                S::from_f32(rgb[2]),
            ],
        )
    }
}
