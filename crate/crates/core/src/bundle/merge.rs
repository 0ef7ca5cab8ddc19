//! Fusing aligned partial scans into one surface.
//!
//! Every scan vertex is an oriented surface sample. Each voxel of a fresh
//! volume collects the samples whose tangent disc it falls on (within the
//! truncation band along the normal, within a small tangential radius) and
//! averages their signed plane offsets, weighted by tangential closeness.
//! Marching cubes over that field closes the seams and overlaps between
//! scans into a single mesh.

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;

use super::{BundleError, BundleState};
use crate::grid::PointGrid;
use crate::mesh::TriangleMesh;
use crate::scans::VolumeSpec;
use crate::tsdf::extract_mesh;

/// Tangential splat radius in voxels: how far sideways a sample reaches.
/// Needs to exceed half the vertex spacing of the input scans or gaps
/// between samples leave unobserved voxels inside the surface.
const SPLAT_RADIUS_VOXELS: f64 = 2.0;

/// Merges the bundle's aligned scans into one mesh on the given volume.
pub fn merge_scans(state: &BundleState, spec: &VolumeSpec) -> Result<TriangleMesh, BundleError> {
    let deformed: Vec<TriangleMesh> = (0..state.scans.len())
        .map(|j| state.deformed_scan(j))
        .collect();
    merge_meshes(&deformed, spec)
}

/// Merges any set of mutually aligned meshes into one mesh.
///
/// A full turn's worth of scans yields a closed surface; if the inputs do
/// not cover the subject all around, the result stays open and a warning
/// is logged.
pub fn merge_meshes(meshes: &[TriangleMesh], spec: &VolumeSpec) -> Result<TriangleMesh, BundleError> {
    let mut points: Vec<Point3<f64>> = Vec::new();
    let mut normals: Vec<Vector3<f64>> = Vec::new();
    for mesh in meshes {
        for (v, n) in mesh.vertices.iter().zip(&mesh.normals) {
            let len = n.norm();
            if len > 1e-12 {
                points.push(*v);
                normals.push(n / len);
            }
        }
    }
    if points.is_empty() {
        return Err(BundleError::EmptyScans);
    }

    let mu = spec.truncation;
    let r_tan = SPLAT_RADIUS_VOXELS * spec.voxel_size;
    let reach = (mu * mu + r_tan * r_tan).sqrt();
    let grid = PointGrid::build(&points, reach);

    let mut volume = spec.allocate()?;
    let [nx, ny, _] = volume.dims;
    let slab = nx * ny;
    let fused: Vec<(f32, f32)> = (0..volume.voxel_count())
        .into_par_iter()
        .map(|i| {
            let x = i % nx;
            let y = (i / nx) % ny;
            let z = i / slab;
            let c = volume.voxel_center(x, y, z);
            let mut num = 0.0;
            let mut den = 0.0;
            for idx in grid.within_radius(&c, reach) {
                let p = points[idx as usize];
                let n = normals[idx as usize];
                let offset = c - p;
                let d = offset.dot(&n);
                if d.abs() > mu {
                    continue;
                }
                let tang = (offset - d * n).norm();
                if tang > r_tan {
                    continue;
                }
                let w = 1.0 - tang / r_tan;
                num += w * d;
                den += w;
            }
            if den > 0.0 {
                let sdf = (num / den / mu).clamp(-1.0, 1.0);
                (sdf as f32, den as f32)
            } else {
                (0.0, 0.0)
            }
        })
        .collect();
    for (i, (sdf, w)) in fused.into_iter().enumerate() {
        volume.tsdf[i] = sdf;
        volume.weight[i] = w;
    }

    let mesh = extract_mesh(&volume);
    if mesh.vertices.is_empty() {
        log::warn!("merge produced no surface; the volume may not cover the scans");
    } else if mesh.boundary_edge_count_main_component() > 0 {
        log::warn!(
            "merged surface is not closed ({} boundary edges); \
             the scans likely do not cover a full turn",
            mesh.boundary_edge_count_main_component()
        );
    }
    Ok(mesh)
}
