//! Wavefront OBJ import (triangles only, positions; v/vt/vn face forms).

use super::{MeshError, TriangleMesh};
use nalgebra::Point3;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

/// Reads an OBJ file. Only `v` and `f` records are used; normals are
/// recomputed from the faces. Polygons are fan-triangulated.
pub fn read_obj(path: &Path) -> Result<TriangleMesh, MeshError> {
    let reader = BufReader::new(File::open(path)?);
    let mut vertices: Vec<Point3<f64>> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();

    for line in reader.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let mut take = || -> Result<f64, MeshError> {
                    tokens
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| MeshError::Parse(format!("bad vertex: {line}")))
                };
                let x = take()?;
                let y = take()?;
                let z = take()?;
                vertices.push(Point3::new(x, y, z));
            }
            Some("f") => {
                let idx: Vec<u32> = tokens
                    .map(|t| parse_face_index(t, vertices.len()))
                    .collect::<Result<_, _>>()?;
                if idx.len() < 3 {
                    return Err(MeshError::Parse(format!("face with <3 vertices: {line}")));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {} // vn/vt/o/g/s/usemtl ignored
        }
    }
    TriangleMesh::new(vertices, faces)
}

/// OBJ face tokens look like `3`, `3/1`, `3//2` or `3/1/2`; indices are
/// 1-based and may be negative (relative to the end).
fn parse_face_index(token: &str, vertex_count: usize) -> Result<u32, MeshError> {
    let first = token.split('/').next().unwrap_or("");
    let value: i64 = first
        .parse()
        .map_err(|_| MeshError::Parse(format!("bad face index: {token}")))?;
    let index = if value > 0 {
        value - 1
    } else if value < 0 {
        vertex_count as i64 + value
    } else {
        return Err(MeshError::Parse("face index 0".into()));
    };
    if index < 0 || index as usize >= vertex_count {
        return Err(MeshError::Parse(format!("face index out of range: {token}")));
    }
    Ok(index as u32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn reads_quad_with_mixed_face_forms() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("quad.obj");
        let mut f = File::create(&path).unwrap();
        writeln!(f, "# quad").unwrap();
        writeln!(f, "v 0 0 0").unwrap();
        writeln!(f, "v 1 0 0").unwrap();
        writeln!(f, "v 1 1 0").unwrap();
        writeln!(f, "v 0 1 0").unwrap();
        writeln!(f, "vn 0 0 1").unwrap();
        writeln!(f, "f 1/1/1 2//1 3 4").unwrap();
        drop(f);

        let mesh = read_obj(&path).unwrap();
        assert_eq!(mesh.vertices.len(), 4);
        assert_eq!(mesh.faces.len(), 2); // fan-triangulated quad
    }

    #[test]
    fn negative_indices_resolve_from_end() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("neg.obj");
        std::fs::write(&path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n").unwrap();
        let mesh = read_obj(&path).unwrap();
        assert_eq!(mesh.faces, vec![[0, 1, 2]]);
    }
}
