//! Triangle meshes, per-triangle Frenet frames, and deformation gradients.
//!
//! A deformed mesh and its canonical twin share the same face array, so face
//! index `k` identifies corresponding triangles in both spaces. The affine
//! map taking points from deformed to canonical space around one triangle is
//! `F = L_canon * diag(lambda, lambda, lambda, 1) * L_def^-1`, where `L` is
//! the triangle's Frenet frame written as a homogeneous rigid transform and
//! `lambda` compensates isotropic size change. Away from a single triangle,
//! the maps of the nearest face and its edge-adjacent faces are blended with
//! exponential distance weights to avoid seams.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use thiserror::Error;

/// Triangles with area at or below this are rejected when a mesh is built.
pub const DEGENERATE_AREA: f64 = 1e-12;

/// Exponential falloff for edge-adjacent faces in the blend.
pub const BLEND_BETA_ADJACENT: f64 = 4.0;
/// Exponential falloff for the nearest face itself.
pub const BLEND_BETA_NEAREST: f64 = 1.0;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("degenerate triangle at face {face}: area {area} <= {}", DEGENERATE_AREA)]
    DegenerateTriangle { face: usize, area: f64 },
    #[error("face {face} references vertex {vertex} but mesh has {vertex_count} vertices")]
    FaceIndexOutOfBounds {
        face: usize,
        vertex: u32,
        vertex_count: usize,
    },
    #[error("mesh has no faces")]
    EmptyMesh,
}

/// Up to three faces sharing an edge with one face.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FaceAdjacency {
    faces: [u32; 3],
    len: u8,
}

impl FaceAdjacency {
    fn push(&mut self, face: u32) {
        debug_assert!((self.len as usize) < 3);
        self.faces[self.len as usize] = face;
        self.len += 1;
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.faces[..self.len as usize]
    }
}

/// An immutable triangle mesh with per-face edge adjacency.
#[derive(Debug, Clone)]
pub struct TriangleMesh {
    vertices: Vec<Vector3<f64>>,
    faces: Vec<[u32; 3]>,
    adjacency: Vec<FaceAdjacency>,
}

impl TriangleMesh {
    /// Validates face indices, rejects degenerate triangles, and builds the
    /// shared-edge adjacency.
    pub fn new(vertices: Vec<Vector3<f64>>, faces: Vec<[u32; 3]>) -> Result<Self, GeometryError> {
        if faces.is_empty() {
            return Err(GeometryError::EmptyMesh);
        }
        for (fi, f) in faces.iter().enumerate() {
            for &v in f {
                if v as usize >= vertices.len() {
                    return Err(GeometryError::FaceIndexOutOfBounds {
                        face: fi,
                        vertex: v,
                        vertex_count: vertices.len(),
                    });
                }
            }
            let [a, b, c] = *f;
            let area = triangle_area(
                &vertices[a as usize],
                &vertices[b as usize],
                &vertices[c as usize],
            );
            if area <= DEGENERATE_AREA {
                return Err(GeometryError::DegenerateTriangle { face: fi, area });
            }
        }
        let adjacency = build_adjacency(&faces);
        Ok(Self {
            vertices,
            faces,
            adjacency,
        })
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn adjacency(&self, face: usize) -> &[u32] {
        self.adjacency[face].as_slice()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// The three corner positions of a face.
    pub fn triangle(&self, face: usize) -> [Vector3<f64>; 3] {
        let [a, b, c] = self.faces[face];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    pub fn centroid(&self, face: usize) -> Vector3<f64> {
        let [a, b, c] = self.triangle(face);
        (a + b + c) / 3.0
    }

    /// True when `other` has the identical face array (topology twins).
    pub fn same_topology(&self, other: &TriangleMesh) -> bool {
        self.faces == other.faces
    }

    /// Axis-aligned bounds over all vertices.
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            min = min.inf(v);
            max = max.sup(v);
        }
        (min, max)
    }
}

fn build_adjacency(faces: &[[u32; 3]]) -> Vec<FaceAdjacency> {
    use std::collections::HashMap;
    // Edge key is the sorted vertex pair; each face registers its 3 edges.
    let mut edge_faces: HashMap<(u32, u32), Vec<u32>> = HashMap::new();
    for (fi, f) in faces.iter().enumerate() {
        for k in 0..3 {
            let a = f[k];
            let b = f[(k + 1) % 3];
            let key = (a.min(b), a.max(b));
            edge_faces.entry(key).or_default().push(fi as u32);
        }
    }
    let mut adjacency = vec![FaceAdjacency::default(); faces.len()];
    for (fi, f) in faces.iter().enumerate() {
        for k in 0..3 {
            let a = f[k];
            let b = f[(k + 1) % 3];
            let key = (a.min(b), a.max(b));
            // First other face on this edge; meshes here are manifold so
            // there is at most one.
            if let Some(&g) = edge_faces[&key].iter().find(|&&g| g != fi as u32) {
                adjacency[fi].push(g);
            }
        }
    }
    adjacency
}

#[inline]
fn triangle_area(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

/// Per-triangle Frenet frame: orthonormal rotation (columns tangent,
/// bitangent, normal), translation at the first vertex, and the area.
#[derive(Debug, Clone, Copy)]
pub struct TriangleFrame {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub area: f64,
}

impl TriangleFrame {
    /// The frame as a homogeneous 4x4 transform `L`.
    pub fn homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Inverse of `L`, using rigidity: `[R^T, -R^T t; 0 1]`.
    pub fn homogeneous_inverse(&self) -> Matrix4<f64> {
        let rt = self.rotation.transpose();
        let t = -rt * self.translation;
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        m
    }
}

/// Frenet frame of one triangle: tangent along the first edge, normal from
/// the edge cross product, bitangent completing the right-handed basis.
pub fn triangle_frame(mesh: &TriangleMesh, face: usize) -> Result<TriangleFrame, GeometryError> {
    let [v0, v1, v2] = mesh.triangle(face);
    triangle_frame_from_vertices(&v0, &v1, &v2).map_err(|_| {
        let area = triangle_area(&v0, &v1, &v2);
        GeometryError::DegenerateTriangle { face, area }
    })
}

pub fn triangle_frame_from_vertices(
    v0: &Vector3<f64>,
    v1: &Vector3<f64>,
    v2: &Vector3<f64>,
) -> Result<TriangleFrame, GeometryError> {
    let e0 = v1 - v0;
    let e1 = v2 - v0;
    let cross = e0.cross(&e1);
    let area = 0.5 * cross.norm();
    if area <= DEGENERATE_AREA {
        return Err(GeometryError::DegenerateTriangle { face: 0, area });
    }
    let tangent = e0.normalize();
    let normal = cross.normalize();
    let bitangent = normal.cross(&tangent);
    Ok(TriangleFrame {
        rotation: Matrix3::from_columns(&[tangent, bitangent, normal]),
        translation: *v0,
        area,
    })
}

/// How the isotropic scale `lambda` inside the deformation gradient is
/// derived from the twin triangles' areas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScalingMode {
    /// `lambda = sqrt(a_canon / a_def)`: maps a uniformly scaled triangle
    /// exactly onto its twin.
    #[default]
    GeometricSqrt,
    /// `lambda = a_def / a_canon`, the printed area ratio.
    LiteralAreaRatio,
}

/// Homogeneous 4x4 map from deformed to canonical space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformationGradient {
    pub matrix: Matrix4<f64>,
}

impl DeformationGradient {
    pub fn identity() -> Self {
        Self {
            matrix: Matrix4::identity(),
        }
    }
}

/// `F = L_canon * diag(lambda, lambda, lambda, 1) * L_def^-1`.
pub fn deformation_gradient(
    def_frame: &TriangleFrame,
    canon_frame: &TriangleFrame,
    mode: ScalingMode,
) -> DeformationGradient {
    let lambda = match mode {
        ScalingMode::GeometricSqrt => (canon_frame.area / def_frame.area).sqrt(),
        ScalingMode::LiteralAreaRatio => def_frame.area / canon_frame.area,
    };
    let mut scale = Matrix4::identity();
    scale[(0, 0)] = lambda;
    scale[(1, 1)] = lambda;
    scale[(2, 2)] = lambda;
    let mut matrix = canon_frame.homogeneous() * scale * def_frame.homogeneous_inverse();
    // The factors have exact (0,0,0,1) bottom rows; pin it against rounding.
    matrix[(3, 0)] = 0.0;
    matrix[(3, 1)] = 0.0;
    matrix[(3, 2)] = 0.0;
    matrix[(3, 3)] = 1.0;
    DeformationGradient { matrix }
}

/// Distance-weighted blend of the nearest face's gradient with its
/// edge-adjacent faces': `w_f = exp(-beta * |c_f - p|)` with `beta = 4` for
/// adjacent faces and `beta = 1` for the nearest face, `c_f` the deformed
/// centroid.
pub fn blended_gradient(
    p: &Vector3<f64>,
    mesh_def: &TriangleMesh,
    mesh_canon: &TriangleMesh,
    nearest_face: usize,
    mode: ScalingMode,
) -> Result<DeformationGradient, GeometryError> {
    let mut sum = Matrix4::zeros();
    let mut weight_sum = 0.0;

    let mut accumulate = |face: usize, beta: f64| -> Result<(), GeometryError> {
        let def = triangle_frame(mesh_def, face)?;
        let canon = triangle_frame(mesh_canon, face)?;
        let grad = deformation_gradient(&def, &canon, mode);
        let centroid = mesh_def.centroid(face);
        let w = (-beta * (centroid - p).norm()).exp();
        sum += grad.matrix * w;
        weight_sum += w;
        Ok(())
    };

    accumulate(nearest_face, BLEND_BETA_NEAREST)?;
    for &adj in mesh_def.adjacency(nearest_face) {
        accumulate(adj as usize, BLEND_BETA_ADJACENT)?;
    }

    let mut matrix = sum / weight_sum;
    matrix[(3, 0)] = 0.0;
    matrix[(3, 1)] = 0.0;
    matrix[(3, 2)] = 0.0;
    matrix[(3, 3)] = 1.0;
    Ok(DeformationGradient { matrix })
}

/// Applies the homogeneous map to a point (w stays 1 by construction).
#[inline]
pub fn canonicalize(p: &Vector3<f64>, gradient: &DeformationGradient) -> Vector3<f64> {
    let q = gradient.matrix * Vector4::new(p.x, p.y, p.z, 1.0);
    Vector3::new(q.x, q.y, q.z)
}

/// Per-face gradients and centroids of one (deformed, canonical) mesh pair,
/// precomputed so the per-sample blend only evaluates weights.
#[derive(Debug, Clone)]
pub struct FaceGradients {
    gradients: Vec<Matrix4<f64>>,
    centroids: Vec<Vector3<f64>>,
    adjacency: Vec<FaceAdjacency>,
}

impl FaceGradients {
    pub fn precompute(
        mesh_def: &TriangleMesh,
        mesh_canon: &TriangleMesh,
        mode: ScalingMode,
    ) -> Result<Self, GeometryError> {
        assert!(
            mesh_def.same_topology(mesh_canon),
            "face gradients need topology twins"
        );
        let n = mesh_def.face_count();
        let mut gradients = Vec::with_capacity(n);
        let mut centroids = Vec::with_capacity(n);
        for face in 0..n {
            let def = triangle_frame(mesh_def, face)?;
            let canon = triangle_frame(mesh_canon, face)?;
            gradients.push(deformation_gradient(&def, &canon, mode).matrix);
            centroids.push(mesh_def.centroid(face));
        }
        Ok(Self {
            gradients,
            centroids,
            adjacency: mesh_def.adjacency.clone(),
        })
    }

    /// Same blend as [`blended_gradient`], from the precomputed tables.
    pub fn blended(&self, p: &Vector3<f64>, nearest_face: usize) -> DeformationGradient {
        let w0 = (-BLEND_BETA_NEAREST * (self.centroids[nearest_face] - p).norm()).exp();
        let mut sum = self.gradients[nearest_face] * w0;
        let mut weight_sum = w0;
        for &adj in self.adjacency[nearest_face].as_slice() {
            let adj = adj as usize;
            let w = (-BLEND_BETA_ADJACENT * (self.centroids[adj] - p).norm()).exp();
            sum += self.gradients[adj] * w;
            weight_sum += w;
        }
        let mut matrix = sum / weight_sum;
        matrix[(3, 0)] = 0.0;
        matrix[(3, 1)] = 0.0;
        matrix[(3, 2)] = 0.0;
        matrix[(3, 3)] = 1.0;
        DeformationGradient { matrix }
    }

    /// Blend applied directly to a point.
    #[inline]
    pub fn canonicalize(&self, p: &Vector3<f64>, nearest_face: usize) -> Vector3<f64> {
        canonicalize(p, &self.blended(p, nearest_face))
    }
}
