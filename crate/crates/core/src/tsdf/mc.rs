//! Marching cubes over the 0-isosurface of a TSDF volume.
//!
//! The 256-entry case table is generated once at first use instead of
//! being transcribed: for every sign pattern, each cube face contributes
//! directed boundary chords between its cut edges (with the two-diagonal
//! ambiguity always resolved by separating the inside corners), the chords
//! chain into closed loops, and each loop is fan-triangulated. Because the
//! chord choice depends only on the four corner signs of a face, adjacent
//! cells always agree on their shared face and the extracted surface is
//! crack-free by construction.
//!
//! Cells emit triangles only when all eight corner voxels have been
//! observed (weight > 0). Vertices are welded on shared lattice edges so
//! the output mesh is connected and closed surfaces come out watertight.

use super::{tsdf_gradient, TsdfVolume};
use crate::mesh::TriangleMesh;
use nalgebra::{Point3, Vector3};
use std::collections::HashMap;
use std::sync::OnceLock;

/// Corner `c` of a cell sits at offset `(c&1, c>>1&1, c>>2&1)`.
#[inline]
fn corner_offset(c: u8) -> [usize; 3] {
    [(c & 1) as usize, ((c >> 1) & 1) as usize, ((c >> 2) & 1) as usize]
}

/// The 12 cell edges: ids 0-3 along x, 4-7 along y, 8-11 along z.
const EDGES: [(u8, u8); 12] = [
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
    (0, 2),
    (1, 3),
    (4, 6),
    (5, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

fn edge_between(a: u8, b: u8) -> u8 {
    EDGES
        .iter()
        .position(|&(x, y)| (x, y) == (a, b) || (x, y) == (b, a))
        .expect("corners are not cell-edge neighbors") as u8
}

/// Per sign-pattern triangles, as triples of cell edge ids.
fn case_table() -> &'static Vec<Vec<[u8; 3]>> {
    static TABLE: OnceLock<Vec<Vec<[u8; 3]>>> = OnceLock::new();
    TABLE.get_or_init(build_case_table)
}

/// Corner cycles of the six faces, counter-clockwise as seen from outside
/// the cell.
fn face_cycles() -> [[u8; 4]; 6] {
    let pos = |c: u8| {
        let o = corner_offset(c);
        Vector3::new(o[0] as f64, o[1] as f64, o[2] as f64)
    };
    let mut faces = [[0u8; 4]; 6];
    let mut fi = 0;
    for axis in 0..3u8 {
        let (u, w) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for side in 0..2u8 {
            let mut cyc = [0u8; 4];
            for (i, (uu, ww)) in [(0, 0), (1, 0), (1, 1), (0, 1)].into_iter().enumerate() {
                let mut c = side << axis;
                c |= (uu as u8) << u;
                c |= (ww as u8) << w;
                cyc[i] = c;
            }
            let normal = (pos(cyc[1]) - pos(cyc[0])).cross(&(pos(cyc[2]) - pos(cyc[1])));
            let mut outward = Vector3::zeros();
            outward[axis as usize] = if side == 1 { 1.0 } else { -1.0 };
            if normal.dot(&outward) < 0.0 {
                cyc.swap(1, 3);
            }
            faces[fi] = cyc;
            fi += 1;
        }
    }
    faces
}

fn build_case_table() -> Vec<Vec<[u8; 3]>> {
    let faces = face_cycles();
    (0u16..256)
        .map(|mask| {
            let inside = |c: u8| mask >> c & 1 == 1;
            // Directed chords (from_edge, to_edge) over all faces; walking a
            // chord keeps the inside region on the left when the face is
            // viewed from outside the cell.
            let mut chords: Vec<(u8, u8)> = Vec::new();
            for cyc in &faces {
                let ins = [
                    inside(cyc[0]),
                    inside(cyc[1]),
                    inside(cyc[2]),
                    inside(cyc[3]),
                ];
                let e = |i: usize| edge_between(cyc[i % 4], cyc[(i + 1) % 4]);
                match ins.iter().filter(|&&b| b).count() {
                    0 | 4 => {}
                    1 => {
                        let i = ins.iter().position(|&b| b).unwrap();
                        chords.push((e(i), e(i + 3)));
                    }
                    3 => {
                        let j = ins.iter().position(|&b| !b).unwrap();
                        chords.push((e(j + 3), e(j)));
                    }
                    2 => {
                        if let Some(i) = (0..4).find(|&i| ins[i] && ins[(i + 1) % 4]) {
                            // The pair test also matches diagonals when i and
                            // i+2 are inside; re-check adjacency.
                            if !ins[(i + 2) % 4] {
                                chords.push((e(i + 1), e(i + 3)));
                                continue;
                            }
                        }
                        // Diagonal: isolate each inside corner separately.
                        let i = if ins[0] { 0 } else { 1 };
                        debug_assert!(ins[i] && ins[i + 2] && !ins[(i + 1) % 4] && !ins[(i + 3) % 4]);
                        chords.push((e(i), e(i + 3)));
                        chords.push((e(i + 2), e(i + 1)));
                    }
                    _ => unreachable!(),
                }
            }
            // Each cut edge appears exactly once as a source and once as a
            // destination, so the chords chain into disjoint closed loops.
            let mut next: HashMap<u8, u8> = HashMap::new();
            for &(from, to) in &chords {
                let prev = next.insert(from, to);
                debug_assert!(prev.is_none(), "duplicate chord source");
            }
            let mut triangles = Vec::new();
            let mut remaining: Vec<u8> = {
                let mut v: Vec<u8> = next.keys().copied().collect();
                v.sort_unstable();
                v
            };
            while let Some(&start) = remaining.first() {
                let mut loop_edges = vec![start];
                let mut cur = start;
                loop {
                    cur = next[&cur];
                    if cur == start {
                        break;
                    }
                    loop_edges.push(cur);
                }
                remaining.retain(|e| !loop_edges.contains(e));
                // Chord direction leaves inside-on-the-left; reversing the
                // loop before fanning makes triangle winding agree with
                // outward (positive-side) normals.
                loop_edges.reverse();
                for i in 1..loop_edges.len() - 1 {
                    triangles.push([loop_edges[0], loop_edges[i], loop_edges[i + 1]]);
                }
            }
            triangles
        })
        .collect()
}

/// Extracts the 0-isosurface. Vertex normals come from the sampled
/// distance gradient (pointing toward the positive, outside region) with
/// the area-weighted face normal as fallback near volume borders.
pub fn extract_mesh(volume: &TsdfVolume) -> TriangleMesh {
    let table = case_table();
    let [dx, dy, dz] = volume.dims;
    let mut vertex_ids: HashMap<(u8, usize, usize, usize), u32> = HashMap::new();
    let mut positions: Vec<Point3<f64>> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();

    let mut corner_vals = [0.0f64; 8];
    for z in 0..dz - 1 {
        for y in 0..dy - 1 {
            for x in 0..dx - 1 {
                let mut observed = true;
                let mut mask = 0usize;
                for c in 0..8u8 {
                    let o = corner_offset(c);
                    let idx = volume.index(x + o[0], y + o[1], z + o[2]);
                    if volume.weight[idx] <= 0.0 {
                        observed = false;
                        break;
                    }
                    // Nudge exact zeros to the positive side so crossings
                    // never land on lattice points (keeps welding clean).
                    let mut v = volume.tsdf[idx] as f64;
                    if v.abs() < 1e-12 {
                        v = 1e-12;
                    }
                    corner_vals[c as usize] = v;
                    if v < 0.0 {
                        mask |= 1 << c;
                    }
                }
                if !observed || mask == 0 || mask == 255 {
                    continue;
                }
                for tri in &table[mask] {
                    let mut ids = [0u32; 3];
                    for (slot, &edge) in tri.iter().enumerate() {
                        let (ca, cb) = EDGES[edge as usize];
                        let oa = corner_offset(ca);
                        let key = (edge / 4, x + oa[0], y + oa[1], z + oa[2]);
                        ids[slot] = *vertex_ids.entry(key).or_insert_with(|| {
                            let va = corner_vals[ca as usize];
                            let vb = corner_vals[cb as usize];
                            let t = va / (va - vb);
                            let ob = corner_offset(cb);
                            let lattice = Vector3::new(
                                (x + oa[0]) as f64
                                    + t * (ob[0] as f64 - oa[0] as f64),
                                (y + oa[1]) as f64
                                    + t * (ob[1] as f64 - oa[1] as f64),
                                (z + oa[2]) as f64
                                    + t * (ob[2] as f64 - oa[2] as f64),
                            );
                            positions.push(volume.origin + lattice * volume.voxel_size);
                            (positions.len() - 1) as u32
                        });
                    }
                    faces.push(ids);
                }
            }
        }
    }

    if faces.is_empty() {
        return TriangleMesh::empty();
    }
    let mut mesh = TriangleMesh {
        vertices: positions,
        normals: Vec::new(),
        faces,
        colors: None,
    };
    mesh.recompute_normals();
    for i in 0..mesh.vertex_count() {
        if let Ok(Some(g)) = tsdf_gradient(volume, &mesh.vertices[i]) {
            let n = g.norm();
            if n > 1e-9 {
                mesh.normals[i] = g / n;
            }
        }
    }
    mesh
}
