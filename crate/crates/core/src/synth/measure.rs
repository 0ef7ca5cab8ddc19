//! Girth measurement: slice a mesh with a horizontal plane and return the
//! perimeter of the longest closed cross-section loop.

use crate::mesh::TriangleMesh;
use nalgebra::Point3;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("the plane at height {0} does not intersect the mesh")]
    NoIntersection(f64),
    #[error("the cross-section has no closed loop")]
    NoClosedLoop,
    #[error("axis index {0} out of range (0, 1, or 2)")]
    BadAxis(usize),
}

/// Coordinate of `p` along `axis` (0 = x, 1 = y, 2 = z).
fn coord(p: &Point3<f64>, axis: usize) -> f64 {
    p.coords[axis]
}

fn lerp(a: &Point3<f64>, b: &Point3<f64>, t: f64) -> Point3<f64> {
    Point3::from(a.coords + (b.coords - a.coords) * t)
}

/// Endpoints hash into buckets so that chains connect despite rounding.
fn quantize(p: &Point3<f64>) -> (i64, i64, i64) {
    const SCALE: f64 = 1e8;
    (
        (p.x * SCALE).round() as i64,
        (p.y * SCALE).round() as i64,
        (p.z * SCALE).round() as i64,
    )
}

/// Measures the perimeter of the longest closed loop where the plane
/// `coordinate[axis] == height` cuts the mesh surface.
pub fn measure_circumference(
    mesh: &TriangleMesh,
    height: f64,
    axis: usize,
) -> Result<f64, MeasureError> {
    if axis > 2 {
        return Err(MeasureError::BadAxis(axis));
    }
    // Signed distance of each vertex to the plane; exact zeros get nudged so
    // every crossing lies strictly inside an edge.
    let side: Vec<f64> = mesh
        .vertices
        .iter()
        .map(|v| {
            let d = coord(v, axis) - height;
            if d.abs() < 1e-12 {
                1e-12
            } else {
                d
            }
        })
        .collect();

    let mut segments: Vec<(Point3<f64>, Point3<f64>)> = Vec::new();
    for f in &mesh.faces {
        let idx = [f[0] as usize, f[1] as usize, f[2] as usize];
        let d = [side[idx[0]], side[idx[1]], side[idx[2]]];
        let mut crossings: Vec<Point3<f64>> = Vec::new();
        for e in 0..3 {
            let (i, j) = (e, (e + 1) % 3);
            if d[i] * d[j] < 0.0 {
                let t = d[i] / (d[i] - d[j]);
                crossings.push(lerp(&mesh.vertices[idx[i]], &mesh.vertices[idx[j]], t));
            }
        }
        if crossings.len() == 2 {
            segments.push((crossings[0], crossings[1]));
        }
    }
    if segments.is_empty() {
        return Err(MeasureError::NoIntersection(height));
    }

    // Chain segments into loops: walk from endpoint to endpoint until the
    // start reappears. Each segment is used once.
    let mut by_endpoint: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, (a, b)) in segments.iter().enumerate() {
        by_endpoint.entry(quantize(a)).or_default().push(i);
        by_endpoint.entry(quantize(b)).or_default().push(i);
    }
    let mut used = vec![false; segments.len()];
    let mut best = 0.0_f64;
    let mut found_loop = false;
    for start in 0..segments.len() {
        if used[start] {
            continue;
        }
        used[start] = true;
        let start_key = quantize(&segments[start].0);
        let mut cursor = segments[start].1;
        let mut length = (segments[start].1 - segments[start].0).norm();
        let mut closed = false;
        loop {
            let key = quantize(&cursor);
            if key == start_key {
                closed = true;
                break;
            }
            let Some(candidates) = by_endpoint.get(&key) else {
                break;
            };
            let Some(&next) = candidates.iter().find(|&&s| !used[s]) else {
                break;
            };
            used[next] = true;
            let (a, b) = segments[next];
            let forward = if quantize(&a) == key { b } else { a };
            length += (b - a).norm();
            cursor = forward;
        }
        if closed {
            found_loop = true;
            best = best.max(length);
        }
    }
    if !found_loop {
        return Err(MeasureError::NoClosedLoop);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::shapes::{cuboid, cylinder, icosphere};
    use nalgebra::{Point3, UnitQuaternion, Vector3};
    use std::f64::consts::PI;

    #[test]
    fn cylinder_girth_matches_formula() {
        let mesh = cylinder(0.15, 1.0, &Point3::origin(), 256);
        let girth = measure_circumference(&mesh, 0.1, 1).unwrap();
        let expect = 2.0 * PI * 0.15;
        assert!(
            (girth - expect).abs() / expect < 0.01,
            "girth {girth} vs {expect}"
        );
    }

    #[test]
    fn unit_cube_mid_height_is_exactly_four() {
        let mesh = cuboid(&Point3::origin(), &Vector3::new(0.5, 0.5, 0.5));
        let girth = measure_circumference(&mesh, 0.0, 1).unwrap();
        assert!((girth - 4.0).abs() < 1e-9, "girth {girth}");
    }

    #[test]
    fn icosphere_equator_close_to_great_circle() {
        let mesh = icosphere(0.5, &Point3::origin(), 4);
        let girth = measure_circumference(&mesh, 0.0, 1).unwrap();
        let expect = 2.0 * PI * 0.5;
        assert!(
            (expect - girth) / expect < 0.02 && girth < expect,
            "girth {girth} vs {expect}"
        );
    }

    #[test]
    fn rotation_about_axis_leaves_girth_unchanged() {
        let mesh = icosphere(0.5, &Point3::origin(), 3);
        let base = measure_circumference(&mesh, 0.2, 1).unwrap();
        let rot = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 1.234);
        let mut turned = mesh.clone();
        for v in turned.vertices.iter_mut() {
            *v = Point3::from(rot * v.coords);
        }
        let girth = measure_circumference(&turned, 0.2, 1).unwrap();
        assert!(
            (girth - base).abs() / base < 0.001,
            "girth {girth} vs {base}"
        );
    }

    #[test]
    fn plane_outside_mesh_errors() {
        let mesh = icosphere(0.5, &Point3::origin(), 2);
        assert!(matches!(
            measure_circumference(&mesh, 2.0, 1),
            Err(MeasureError::NoIntersection(_))
        ));
        assert!(matches!(
            measure_circumference(&mesh, 0.0, 9),
            Err(MeasureError::BadAxis(9))
        ));
    }

    #[test]
    fn two_nested_loops_reports_the_longer() {
        // Two cylinders side by side with different radii: slicing yields two
        // loops; the bigger circumference wins.
        let big = cylinder(0.2, 1.0, &Point3::new(-0.5, 0.0, 0.0), 128);
        let small = cylinder(0.1, 1.0, &Point3::new(0.5, 0.0, 0.0), 128);
        let mut both = big.clone();
        let offset = both.vertices.len() as u32;
        both.vertices.extend(small.vertices.iter().cloned());
        both.normals.extend(small.normals.iter().cloned());
        both.faces
            .extend(small.faces.iter().map(|f| [f[0] + offset, f[1] + offset, f[2] + offset]));
        let girth = measure_circumference(&both, 0.0, 1).unwrap();
        let expect = 2.0 * PI * 0.2;
        assert!((girth - expect).abs() / expect < 0.01, "girth {girth}");
    }
}
