//! Minimal ASCII OBJ reader/writer (`v` and `f` records only).
//!
//! Vertices are written with Rust's shortest round-trip float formatting,
//! so write/read cycles reproduce coordinates exactly. Face order in the
//! file defines topology identity across frames.

use crate::dataset::DatasetError;
use crate::geometry::TriangleMesh;
use nalgebra::Vector3;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub fn write_obj(path: &Path, mesh: &TriangleMesh) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(|e| DatasetError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = || -> std::io::Result<()> {
        for v in mesh.vertices() {
            writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
        }
        for f in mesh.faces() {
            writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
        }
        w.flush()
    };
    emit().map_err(|e| DatasetError::io(path, e))
}

pub fn read_obj(path: &Path) -> Result<TriangleMesh, DatasetError> {
    let bad = |line_no: usize, reason: &str| DatasetError::Manifest {
        path: path.display().to_string(),
        message: format!("obj line {line_no}: {reason}"),
    };
    let file = File::open(path).map_err(|e| DatasetError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DatasetError::io(path, e))?;
        let line_no = i + 1;
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let mut coord = [0.0f64; 3];
                for c in coord.iter_mut() {
                    *c = tokens
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| bad(line_no, "bad vertex"))?;
                }
                vertices.push(Vector3::new(coord[0], coord[1], coord[2]));
            }
            Some("f") => {
                let mut idx = [0u32; 3];
                for v in idx.iter_mut() {
                    // `a/b/c` attribute syntax: the position index leads.
                    let token = tokens.next().ok_or_else(|| bad(line_no, "bad face"))?;
                    let first = token.split('/').next().unwrap();
                    let one_based: i64 = first
                        .parse()
                        .map_err(|_| bad(line_no, "bad face index"))?;
                    if one_based < 1 {
                        return Err(bad(line_no, "face indices must be positive"));
                    }
                    *v = (one_based - 1) as u32;
                }
                if tokens.next().is_some() {
                    return Err(bad(line_no, "only triangles are supported"));
                }
                faces.push(idx);
            }
            // Comments and any other record types are ignored.
            _ => {}
        }
    }
    TriangleMesh::new(vertices, faces).map_err(DatasetError::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn obj_round_trip_is_exact() {
        let mesh = TriangleMesh::new(
            vec![
                Vector3::new(0.1234567891234, -0.5, 3.0e-7),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.0, 1.0, 0.25),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.obj");
        write_obj(&path, &mesh).unwrap();
        let loaded = read_obj(&path).unwrap();
        assert_eq!(mesh.vertices(), loaded.vertices());
        assert_eq!(mesh.faces(), loaded.faces());
    }

    #[test]
    fn reader_accepts_slash_attributes_and_comments() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.obj");
        std::fs::write(
            &path,
            "# comment\nv 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf 1/1/1 2/2/2 3/3/3\n",
        )
        .unwrap();
        let mesh = read_obj(&path).unwrap();
        assert_eq!(mesh.face_count(), 1);
        assert_eq!(mesh.faces()[0], [0, 1, 2]);
    }

    #[test]
    fn quads_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("q.obj");
        std::fs::write(&path, "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n").unwrap();
        assert!(read_obj(&path).is_err());
    }
}
