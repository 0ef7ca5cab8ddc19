//! Procedural test geometry: analytic primitives, signed distance helpers,
//! and the capsule-limb mannequin used as the default synthetic subject.
//!
//! Conventions: the vertical axis is y (image rows grow with +y), the
//! camera looks along +z, and the mannequin stands head-up at negative y,
//! centered on the y axis.

use crate::mesh::TriangleMesh;
use crate::tsdf::{extract_mesh, TsdfVolume};
use nalgebra::{Point3, Vector3};
use std::collections::HashMap;

/// Unit-sphere icosahedron subdivided `subdivisions` times, scaled and
/// translated. Subdivision 0 has 12 vertices; each level quadruples faces.
pub fn icosphere(radius: f64, center: &Point3<f64>, subdivisions: u32) -> TriangleMesh {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vector3<f64>> = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ]
    .into_iter()
    .map(|(x, y, z)| Vector3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoint: HashMap<(u32, u32), u32> = HashMap::new();
        let mut next_faces = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mid = [0u32; 3];
            for (i, (a, b)) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])].into_iter().enumerate() {
                let key = (a.min(b), a.max(b));
                mid[i] = *midpoint.entry(key).or_insert_with(|| {
                    let m = (vertices[a as usize] + vertices[b as usize]).normalize();
                    vertices.push(m);
                    (vertices.len() - 1) as u32
                });
            }
            next_faces.push([f[0], mid[0], mid[2]]);
            next_faces.push([f[1], mid[1], mid[0]]);
            next_faces.push([f[2], mid[2], mid[1]]);
            next_faces.push([mid[0], mid[1], mid[2]]);
        }
        faces = next_faces;
    }
    let verts = vertices
        .into_iter()
        .map(|v| center + v * radius)
        .collect();
    TriangleMesh::new(verts, faces).expect("icosphere construction")
}

/// Closed cylinder along y with fan caps, wound outward.
pub fn cylinder(radius: f64, height: f64, center: &Point3<f64>, segments: usize) -> TriangleMesh {
    assert!(segments >= 3);
    let mut vertices = Vec::new();
    let (y0, y1) = (center.y - height / 2.0, center.y + height / 2.0);
    for &y in &[y0, y1] {
        for s in 0..segments {
            let a = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
            vertices.push(Point3::new(
                center.x + radius * a.cos(),
                y,
                center.z + radius * a.sin(),
            ));
        }
    }
    let bottom_center = vertices.len() as u32;
    vertices.push(Point3::new(center.x, y0, center.z));
    let top_center = vertices.len() as u32;
    vertices.push(Point3::new(center.x, y1, center.z));
    let mut faces = Vec::new();
    let n = segments as u32;
    for s in 0..n {
        let t = (s + 1) % n;
        // Side quad.
        faces.push([s, n + s, t]);
        faces.push([t, n + s, n + t]);
        // Caps.
        faces.push([bottom_center, s, t]);
        faces.push([top_center, n + t, n + s]);
    }
    TriangleMesh::new(vertices, faces).expect("cylinder construction")
}

/// Axis-aligned box from 12 triangles.
pub fn cuboid(center: &Point3<f64>, half: &Vector3<f64>) -> TriangleMesh {
    let mut vertices = Vec::with_capacity(8);
    for c in 0..8u8 {
        vertices.push(Point3::new(
            center.x + if c & 1 == 1 { half.x } else { -half.x },
            center.y + if c & 2 == 2 { half.y } else { -half.y },
            center.z + if c & 4 == 4 { half.z } else { -half.z },
        ));
    }
    let faces = vec![
        [0, 2, 1],
        [1, 2, 3], // -z... faces oriented outward
        [4, 5, 6],
        [5, 7, 6],
        [0, 1, 4],
        [1, 5, 4],
        [2, 6, 3],
        [3, 6, 7],
        [0, 4, 2],
        [2, 4, 6],
        [1, 3, 5],
        [3, 7, 5],
    ];
    TriangleMesh::new(vertices, faces).expect("cuboid construction")
}

/// Torus around the y axis: major radius in the xz plane.
pub fn torus(
    center: &Point3<f64>,
    major_radius: f64,
    minor_radius: f64,
    major_segments: usize,
    minor_segments: usize,
) -> TriangleMesh {
    let mut vertices = Vec::new();
    for i in 0..major_segments {
        let a = 2.0 * std::f64::consts::PI * i as f64 / major_segments as f64;
        let ring_center = Vector3::new(major_radius * a.cos(), 0.0, major_radius * a.sin());
        let radial = Vector3::new(a.cos(), 0.0, a.sin());
        for j in 0..minor_segments {
            let b = 2.0 * std::f64::consts::PI * j as f64 / minor_segments as f64;
            let p = ring_center + radial * (minor_radius * b.cos())
                + Vector3::new(0.0, minor_radius * b.sin(), 0.0);
            vertices.push(center + p);
        }
    }
    let mut faces = Vec::new();
    let (nm, nn) = (major_segments as u32, minor_segments as u32);
    for i in 0..nm {
        for j in 0..nn {
            let a = i * nn + j;
            let b = i * nn + (j + 1) % nn;
            let c = ((i + 1) % nm) * nn + j;
            let d = ((i + 1) % nm) * nn + (j + 1) % nn;
            faces.push([a, b, c]);
            faces.push([b, d, c]);
        }
    }
    TriangleMesh::new(vertices, faces).expect("torus construction")
}

/// Signed distance to a capsule (line segment with radius).
pub fn capsule_sdf(p: &Point3<f64>, a: &Point3<f64>, b: &Point3<f64>, radius: f64) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm() - radius
}

/// A capsule of the mannequin body plan.
#[derive(Debug, Clone, Copy)]
pub struct BodyCapsule {
    pub a: Point3<f64>,
    pub b: Point3<f64>,
    pub radius: f64,
}

/// Capsule layout of a roughly 1.5 m tall figure standing head-up along -y,
/// arms slightly away from the torso so surfaces never come close enough
/// to fuse together.
pub fn mannequin_capsules() -> Vec<BodyCapsule> {
    let c = |ax: f64, ay: f64, az: f64, bx: f64, by: f64, bz: f64, r: f64| BodyCapsule {
        a: Point3::new(ax, ay, az),
        b: Point3::new(bx, by, bz),
        radius: r,
    };
    vec![
        // Head.
        c(0.0, -0.58, 0.0, 0.0, -0.64, 0.0, 0.10),
        // Torso down to the pelvis.
        c(0.0, -0.44, 0.0, 0.0, 0.02, 0.0, 0.16),
        c(0.0, 0.02, 0.0, 0.0, 0.14, 0.0, 0.13),
        // Legs.
        c(-0.09, 0.16, 0.0, -0.09, 0.72, 0.0, 0.07),
        c(0.09, 0.16, 0.0, 0.09, 0.72, 0.0, 0.07),
        // Arms, angled outward.
        c(-0.24, -0.40, 0.0, -0.33, -0.04, 0.0, 0.05),
        c(0.24, -0.40, 0.0, 0.33, -0.04, 0.0, 0.05),
    ]
}

/// Signed distance of the mannequin union.
pub fn mannequin_sdf(p: &Point3<f64>) -> f64 {
    mannequin_capsules()
        .iter()
        .map(|cap| capsule_sdf(p, &cap.a, &cap.b, cap.radius))
        .fold(f64::INFINITY, f64::min)
}

/// Meshes an arbitrary signed distance field over `[min, max]`.
pub fn mesh_from_sdf<F: Fn(&Point3<f64>) -> f64 + Sync>(
    sdf: F,
    min: &Point3<f64>,
    max: &Point3<f64>,
    voxel: f64,
) -> TriangleMesh {
    let mut vol = TsdfVolume::enclosing(min, max, voxel, 2).expect("sdf volume");
    // Wide band so extraction sees smooth values everywhere near 0.
    vol.truncation = 4.0 * voxel;
    vol.fill_from_sdf(|p| sdf(p));
    extract_mesh(&vol)
}

/// The default synthetic subject, meshed at the requested voxel size
/// (0.02 m gives roughly 10k vertices), centered at the origin.
pub fn mannequin(voxel: f64) -> TriangleMesh {
    mesh_from_sdf(
        mannequin_sdf,
        &Point3::new(-0.45, -0.80, -0.30),
        &Point3::new(0.45, 0.85, 0.30),
        voxel,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn icosphere_vertices_on_sphere() {
        let c = Point3::new(0.2, -0.1, 2.0);
        let s = icosphere(0.5, &c, 3);
        assert_eq!(s.vertex_count(), 642);
        for v in &s.vertices {
            assert_relative_eq!((v - c).norm(), 0.5, epsilon = 1e-12);
        }
        assert!(s.is_watertight());
        assert_eq!(s.euler_characteristic(), 2);
    }

    #[test]
    fn cylinder_and_cuboid_are_closed() {
        let cyl = cylinder(0.15, 1.0, &Point3::origin(), 48);
        assert!(cyl.is_watertight());
        let the_box = cuboid(&Point3::new(0.0, 0.0, 2.0), &Vector3::new(0.5, 0.5, 0.5));
        assert!(the_box.is_watertight());
        assert_eq!(the_box.euler_characteristic(), 2);
        // Outward normals: vertex normals of a box point away from center.
        for (v, n) in the_box.vertices.iter().zip(&the_box.normals) {
            assert!(n.dot(&(v - Point3::new(0.0, 0.0, 2.0))) > 0.0);
        }
    }

    #[test]
    fn torus_has_genus_one() {
        let t = torus(&Point3::origin(), 0.3, 0.1, 48, 24);
        assert!(t.is_watertight());
        assert_eq!(t.euler_characteristic(), 0);
    }

    #[test]
    fn capsule_sdf_matches_geometry() {
        let a = Point3::new(0.0, 0.0, 0.0);
        let b = Point3::new(0.0, 1.0, 0.0);
        assert_relative_eq!(capsule_sdf(&Point3::new(0.3, 0.5, 0.0), &a, &b, 0.1), 0.2);
        assert_relative_eq!(capsule_sdf(&Point3::new(0.0, -0.2, 0.0), &a, &b, 0.1), 0.1);
        assert_relative_eq!(capsule_sdf(&Point3::new(0.0, 0.5, 0.05), &a, &b, 0.1), -0.05);
    }

    #[test]
    fn mannequin_is_closed_and_person_sized() {
        let m = mannequin(0.02);
        assert!(m.vertex_count() > 4_000, "got {}", m.vertex_count());
        assert!(m.vertex_count() < 40_000);
        assert!(m.is_watertight(), "mannequin must be closed");
        let (min, max) = m.aabb();
        let height = max.y - min.y;
        assert!((1.2..1.8).contains(&height), "height {height}");
        // Arms and legs produce a figure wider than deep.
        assert!(max.x - min.x > 0.55);
        assert!(max.z - min.z < 0.45);
    }

    #[test]
    fn mannequin_sdf_negative_inside_torso() {
        assert!(mannequin_sdf(&Point3::new(0.0, -0.2, 0.0)) < -0.1);
        assert!(mannequin_sdf(&Point3::new(0.0, -1.5, 0.0)) > 0.5);
    }
}
