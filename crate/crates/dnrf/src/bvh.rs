//! Bounding-volume hierarchy over mesh triangles for nearest-triangle
//! queries.
//!
//! The tree is built by median split on the longest centroid axis (queries
//! are points, so a balanced tree is enough); leaves hold at most
//! [`LEAF_SIZE`] faces. Queries are branch-and-bound descents that prune
//! nodes whose box distance exceeds the best triangle distance found so
//! far. Ties are broken toward the lowest face index so results do not
//! depend on traversal order.

use crate::geometry::TriangleMesh;
use nalgebra::Vector3;
use std::sync::Arc;
use thiserror::Error;

pub const LEAF_SIZE: usize = 4;

#[derive(Debug, Error)]
pub enum BvhError {
    #[error("cannot build a BVH over an empty mesh")]
    EmptyMesh,
}

/// Axis-aligned box, `min <= max` componentwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn empty() -> Self {
        Self {
            min: Vector3::repeat(f64::INFINITY),
            max: Vector3::repeat(f64::NEG_INFINITY),
        }
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vector3<f64>>) -> Self {
        let mut b = Self::empty();
        for p in points {
            b.grow(p);
        }
        b
    }

    pub fn grow(&mut self, p: &Vector3<f64>) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&other.min),
            max: self.max.sup(&other.max),
        }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Contains `other` allowing `slack` of numerical play.
    pub fn contains_box(&self, other: &Aabb, slack: f64) -> bool {
        (0..3).all(|i| other.min[i] >= self.min[i] - slack && other.max[i] <= self.max[i] + slack)
    }

    pub fn center(&self) -> Vector3<f64> {
        (self.min + self.max) * 0.5
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.max - self.min
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    /// Uniformly pad every side by `fraction` of the largest extent.
    pub fn padded(&self, fraction: f64) -> Aabb {
        let pad = self.extent().max() * fraction;
        Aabb {
            min: self.min - Vector3::repeat(pad),
            max: self.max + Vector3::repeat(pad),
        }
    }

    pub fn clamp_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            p.x.clamp(self.min.x, self.max.x),
            p.y.clamp(self.min.y, self.max.y),
            p.z.clamp(self.min.z, self.max.z),
        )
    }

    /// Euclidean distance from `p` to the box (0 inside).
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        (p - self.clamp_point(p)).norm()
    }

    /// Entry/exit parameters of `origin + t*dir` against the box, clipped to
    /// `[t0, t1]`; `None` when the segment misses.
    pub fn clip_ray(
        &self,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        t0: f64,
        t1: f64,
    ) -> Option<(f64, f64)> {
        let mut near = t0;
        let mut far = t1;
        for i in 0..3 {
            if dir[i].abs() < 1e-300 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[i];
            let mut ta = (self.min[i] - origin[i]) * inv;
            let mut tb = (self.max[i] - origin[i]) * inv;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            near = near.max(ta);
            far = far.min(tb);
            if near > far {
                return None;
            }
        }
        Some((near, far))
    }
}

/// Closest point on the closed triangle `(a, b, c)` to `p`.
///
/// Region classification via barycentric sign tests (face, three edges,
/// three vertices all handled exactly).
pub fn closest_point_on_triangle(
    p: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
) -> Vector3<f64> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }

    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }

    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }

    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }

    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }

    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }

    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

/// Distance and closest point from `p` to the closed triangle.
pub fn point_triangle_distance(
    p: &Vector3<f64>,
    tri: &[Vector3<f64>; 3],
) -> (f64, Vector3<f64>) {
    let q = closest_point_on_triangle(p, &tri[0], &tri[1], &tri[2]);
    ((p - q).norm(), q)
}

#[derive(Debug, Clone, Copy)]
struct BvhNode {
    aabb: Aabb,
    // Leaf when count > 0: faces are perm[start..start+count].
    // Internal otherwise: children at left and left + 1 is not guaranteed,
    // so both indices are stored.
    left: u32,
    right: u32,
    start: u32,
    count: u32,
}

impl BvhNode {
    fn is_leaf(&self) -> bool {
        self.count > 0
    }
}

/// Result of a nearest-triangle query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NearestTriangle {
    pub face: usize,
    pub distance: f64,
    pub closest_point: Vector3<f64>,
}

/// BVH over the faces of one mesh. Queries are read-only and thread-safe.
#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<BvhNode>,
    perm: Vec<u32>,
    mesh: Arc<TriangleMesh>,
}

/// Builds a BVH over `mesh` by median split on the longest centroid axis.
pub fn build_bvh(mesh: Arc<TriangleMesh>) -> Result<Bvh, BvhError> {
    let n = mesh.face_count();
    if n == 0 {
        return Err(BvhError::EmptyMesh);
    }
    let centroids: Vec<Vector3<f64>> = (0..n).map(|f| mesh.centroid(f)).collect();
    let face_boxes: Vec<Aabb> = (0..n)
        .map(|f| {
            let tri = mesh.triangle(f);
            Aabb::from_points(tri.iter())
        })
        .collect();

    let mut perm: Vec<u32> = (0..n as u32).collect();
    let mut nodes = Vec::with_capacity(2 * n / LEAF_SIZE + 1);
    build_node(&mut nodes, &mut perm, 0, n, &centroids, &face_boxes);
    Ok(Bvh { nodes, perm, mesh })
}

fn build_node(
    nodes: &mut Vec<BvhNode>,
    perm: &mut [u32],
    start: usize,
    end: usize,
    centroids: &[Vector3<f64>],
    face_boxes: &[Aabb],
) -> u32 {
    let mut aabb = Aabb::empty();
    let mut centroid_box = Aabb::empty();
    for &f in &perm[start..end] {
        aabb = aabb.union(&face_boxes[f as usize]);
        centroid_box.grow(&centroids[f as usize]);
    }

    let count = end - start;
    let extent = centroid_box.extent();
    let axis = extent.imax();
    let index = nodes.len() as u32;
    if count <= LEAF_SIZE || extent[axis] == 0.0 {
        nodes.push(BvhNode {
            aabb,
            left: 0,
            right: 0,
            start: start as u32,
            count: count as u32,
        });
        return index;
    }

    let mid = count / 2;
    perm[start..end].select_nth_unstable_by(mid, |&a, &b| {
        centroids[a as usize][axis]
            .partial_cmp(&centroids[b as usize][axis])
            .unwrap()
    });

    nodes.push(BvhNode {
        aabb,
        left: 0,
        right: 0,
        start: 0,
        count: 0,
    });
    let left = build_node(nodes, perm, start, start + mid, centroids, face_boxes);
    let right = build_node(nodes, perm, start + mid, end, centroids, face_boxes);
    nodes[index as usize].left = left;
    nodes[index as usize].right = right;
    index
}

impl Bvh {
    pub fn mesh(&self) -> &Arc<TriangleMesh> {
        &self.mesh
    }

    pub fn root_aabb(&self) -> &Aabb {
        &self.nodes[0].aabb
    }

    /// Globally nearest face to `p`; ties go to the lowest face index.
    pub fn nearest(&self, p: &Vector3<f64>) -> NearestTriangle {
        let mut best = NearestTriangle {
            face: usize::MAX,
            distance: f64::INFINITY,
            closest_point: *p,
        };
        self.descend(0, p, &mut best);
        best
    }

    fn descend(&self, node_idx: u32, p: &Vector3<f64>, best: &mut NearestTriangle) {
        let node = &self.nodes[node_idx as usize];
        if node.is_leaf() {
            for &f in &self.perm[node.start as usize..(node.start + node.count) as usize] {
                let tri = self.mesh.triangle(f as usize);
                let (d, q) = point_triangle_distance(p, &tri);
                if d < best.distance || (d == best.distance && (f as usize) < best.face) {
                    *best = NearestTriangle {
                        face: f as usize,
                        distance: d,
                        closest_point: q,
                    };
                }
            }
            return;
        }
        let l = node.left;
        let r = node.right;
        let dl = self.nodes[l as usize].aabb.distance(p);
        let dr = self.nodes[r as usize].aabb.distance(p);
        let (first, first_d, second, second_d) = if dl <= dr {
            (l, dl, r, dr)
        } else {
            (r, dr, l, dl)
        };
        // Equal-distance nodes are still visited so the lowest-index tie
        // rule holds independently of tree shape.
        if first_d <= best.distance {
            self.descend(first, p, best);
        }
        if second_d <= best.distance {
            self.descend(second, p, best);
        }
    }

    /// Structural invariant sweep: coverage (every face in exactly one
    /// leaf), child containment, and depth bound. Intended for tests.
    pub fn validate(&self) -> Result<(), String> {
        let n = self.mesh.face_count();
        let mut seen = vec![0u32; n];
        let mut max_depth = 0usize;
        let mut stack = vec![(0u32, 1usize)];
        while let Some((idx, depth)) = stack.pop() {
            max_depth = max_depth.max(depth);
            let node = &self.nodes[idx as usize];
            if node.is_leaf() {
                for &f in &self.perm[node.start as usize..(node.start + node.count) as usize] {
                    seen[f as usize] += 1;
                    let tri = self.mesh.triangle(f as usize);
                    let tri_box = Aabb::from_points(tri.iter());
                    if !node.aabb.contains_box(&tri_box, 1e-9) {
                        return Err(format!("leaf {idx} does not contain face {f}"));
                    }
                }
            } else {
                for child in [node.left, node.right] {
                    if !node
                        .aabb
                        .contains_box(&self.nodes[child as usize].aabb, 1e-9)
                    {
                        return Err(format!("node {idx} does not contain child {child}"));
                    }
                    stack.push((child, depth + 1));
                }
            }
        }
        if let Some(f) = seen.iter().position(|&c| c != 1) {
            return Err(format!("face {f} appears in {} leaves", seen[f]));
        }
        if max_depth > 64 {
            return Err(format!("depth {max_depth} exceeds 64"));
        }
        Ok(())
    }

    /// Checks that every node's box distance lower-bounds the distance to
    /// each triangle it contains (pruning soundness), for one query point.
    pub fn check_pruning_bound(&self, p: &Vector3<f64>) -> bool {
        let mut stack = vec![0u32];
        while let Some(idx) = stack.pop() {
            let node = &self.nodes[idx as usize];
            let lower = node.aabb.distance(p);
            if node.is_leaf() {
                for &f in &self.perm[node.start as usize..(node.start + node.count) as usize] {
                    let tri = self.mesh.triangle(f as usize);
                    let (d, _) = point_triangle_distance(p, &tri);
                    if lower > d + 1e-12 {
                        return false;
                    }
                }
            } else {
                stack.push(node.left);
                stack.push(node.right);
            }
        }
        true
    }
}

/// Free-function form of [`Bvh::nearest`].
pub fn nearest_triangle(bvh: &Bvh, p: &Vector3<f64>) -> NearestTriangle {
    bvh.nearest(p)
}

/// Brute-force nearest face; the reference the BVH is checked against.
pub fn nearest_triangle_brute_force(mesh: &TriangleMesh, p: &Vector3<f64>) -> NearestTriangle {
    let mut best = NearestTriangle {
        face: usize::MAX,
        distance: f64::INFINITY,
        closest_point: *p,
    };
    for f in 0..mesh.face_count() {
        let tri = mesh.triangle(f);
        let (d, q) = point_triangle_distance(p, &tri);
        if d < best.distance {
            best = NearestTriangle {
                face: f,
                distance: d,
                closest_point: q,
            };
        }
    }
    best
}
