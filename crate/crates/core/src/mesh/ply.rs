//! ASCII PLY read/write: positions, normals, optional uchar colors,
//! triangular faces only.

use super::{MeshError, TriangleMesh};
use nalgebra::{Point3, Vector3};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// Writes the mesh as ASCII PLY. Normals are always written; colors only
/// when present (quantized to uchar).
pub fn write_ply(mesh: &TriangleMesh, path: &Path) -> Result<(), MeshError> {
    let mut w = BufWriter::new(File::create(path)?);
    let has_color = mesh.colors.is_some();
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", mesh.vertices.len())?;
    writeln!(w, "property float x")?;
    writeln!(w, "property float y")?;
    writeln!(w, "property float z")?;
    writeln!(w, "property float nx")?;
    writeln!(w, "property float ny")?;
    writeln!(w, "property float nz")?;
    if has_color {
        writeln!(w, "property uchar red")?;
        writeln!(w, "property uchar green")?;
        writeln!(w, "property uchar blue")?;
    }
    writeln!(w, "element face {}", mesh.faces.len())?;
    writeln!(w, "property list uchar int vertex_indices")?;
    writeln!(w, "end_header")?;
    for (i, v) in mesh.vertices.iter().enumerate() {
        let n = mesh.normals[i];
        write!(w, "{} {} {} {} {} {}", v.x, v.y, v.z, n.x, n.y, n.z)?;
        if let Some(colors) = &mesh.colors {
            let c = colors[i];
            let q = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
            write!(w, " {} {} {}", q(c[0]), q(c[1]), q(c[2]))?;
        }
        writeln!(w)?;
    }
    for f in &mesh.faces {
        writeln!(w, "3 {} {} {}", f[0], f[1], f[2])?;
    }
    Ok(())
}

/// Reads an ASCII PLY with at least x/y/z vertex properties. Normals and
/// uchar colors are picked up when present; normals are recomputed from the
/// faces otherwise.
pub fn read_ply(path: &Path) -> Result<TriangleMesh, MeshError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();

    let magic = next_line(&mut lines)?;
    if magic.trim() != "ply" {
        return Err(MeshError::Parse("missing ply magic".into()));
    }

    let mut vertex_count = 0usize;
    let mut face_count = 0usize;
    let mut vertex_props: Vec<String> = Vec::new();
    let mut current_element = String::new();
    loop {
        let line = next_line(&mut lines)?;
        let line = line.trim();
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.first().copied() {
            Some("format") => {
                if tokens.get(1) != Some(&"ascii") {
                    return Err(MeshError::Parse("only ascii ply supported".into()));
                }
            }
            Some("comment") | Some("obj_info") => {}
            Some("element") => {
                current_element = tokens.get(1).unwrap_or(&"").to_string();
                let count: usize = tokens
                    .get(2)
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| MeshError::Parse(format!("bad element line: {line}")))?;
                match current_element.as_str() {
                    "vertex" => vertex_count = count,
                    "face" => face_count = count,
                    _ => {}
                }
            }
            Some("property") => {
                if current_element == "vertex" {
                    let name = tokens.last().unwrap_or(&"").to_string();
                    vertex_props.push(name);
                }
            }
            Some("end_header") => break,
            _ => return Err(MeshError::Parse(format!("unexpected header line: {line}"))),
        }
    }

    let idx = |name: &str| vertex_props.iter().position(|p| p == name);
    let (ix, iy, iz) = match (idx("x"), idx("y"), idx("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(MeshError::Parse("vertex element missing x/y/z".into())),
    };
    let normal_idx = match (idx("nx"), idx("ny"), idx("nz")) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => None,
    };
    let color_idx = match (idx("red"), idx("green"), idx("blue")) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => None,
    };

    let mut vertices = Vec::with_capacity(vertex_count);
    let mut normals = Vec::with_capacity(vertex_count);
    let mut colors = Vec::with_capacity(vertex_count);
    for _ in 0..vertex_count {
        let line = next_line(&mut lines)?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| MeshError::Parse(format!("bad vertex line: {e}")))?;
        if vals.len() < vertex_props.len() {
            return Err(MeshError::Parse("short vertex line".into()));
        }
        vertices.push(Point3::new(vals[ix], vals[iy], vals[iz]));
        if let Some((a, b, c)) = normal_idx {
            normals.push(Vector3::new(vals[a], vals[b], vals[c]));
        }
        if let Some((a, b, c)) = color_idx {
            colors.push([vals[a] / 255.0, vals[b] / 255.0, vals[c] / 255.0]);
        }
    }

    let mut faces = Vec::with_capacity(face_count);
    for _ in 0..face_count {
        let line = next_line(&mut lines)?;
        let vals: Vec<u32> = line
            .split_whitespace()
            .map(|t| t.parse::<u32>())
            .collect::<Result<_, _>>()
            .map_err(|e| MeshError::Parse(format!("bad face line: {e}")))?;
        match vals.as_slice() {
            [3, a, b, c] => faces.push([*a, *b, *c]),
            _ => return Err(MeshError::Parse("only triangular faces supported".into())),
        }
    }

    let mut mesh = if normals.len() == vertices.len() {
        // Stored normals may carry quantization error; renormalize.
        let normals = normals
            .into_iter()
            .map(|n| {
                let len = n.norm();
                if len > 1e-12 {
                    n / len
                } else {
                    Vector3::z()
                }
            })
            .collect();
        TriangleMesh::with_normals(vertices, normals, faces)?
    } else {
        TriangleMesh::new(vertices, faces)?
    };
    if colors.len() == mesh.vertices.len() {
        mesh.colors = Some(colors);
    }
    Ok(mesh)
}

fn next_line(lines: &mut std::io::Lines<BufReader<File>>) -> Result<String, MeshError> {
    loop {
        match lines.next() {
            Some(Ok(line)) => {
                if !line.trim().is_empty() {
                    return Ok(line);
                }
            }
            Some(Err(e)) => return Err(MeshError::Io(e)),
            None => return Err(MeshError::Parse("unexpected end of file".into())),
        }
    }
}
