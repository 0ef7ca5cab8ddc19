//! Degraded copies of a ground-truth mesh, standing in for the coarse inner
//! model an upstream predictor would supply: decimate, perturb along
//! normals, smooth.

use crate::mesh::TriangleMesh;
use nalgebra::Point3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::{BinaryHeap, HashSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("input mesh must be a closed manifold")]
    OpenInput,
    #[error("decimation ratio {0} outside (0, 1]")]
    BadRatio(f64),
    #[error("decimation broke the closed-manifold property")]
    BrokenManifold,
}

/// Min-heap candidate: an undirected edge keyed by its length.
struct Candidate {
    length: f64,
    a: u32,
    b: u32,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.length == other.length && self.a == other.a && self.b == other.b
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Reversed so the BinaryHeap pops the shortest edge first.
        other
            .length
            .total_cmp(&self.length)
            .then(other.a.cmp(&self.a))
            .then(other.b.cmp(&self.b))
    }
}

/// Shortest-edge collapse down to `target_faces`, refusing any collapse
/// whose neighborhoods would stop being a disk (the standard link test:
/// the two endpoints may share only the two vertices across the collapsed
/// edge). Returns the compacted mesh.
fn decimate(mesh: &TriangleMesh, target_faces: usize) -> Result<TriangleMesh, PriorError> {
    let n = mesh.vertices.len();
    let mut positions: Vec<Point3<f64>> = mesh.vertices.clone();
    let mut faces: Vec<[u32; 3]> = mesh.faces.clone();
    let mut face_alive = vec![true; faces.len()];
    let mut live_faces = faces.len();
    let mut vertex_alive = vec![true; n];
    let mut neighbors: Vec<HashSet<u32>> = vec![HashSet::new(); n];
    let mut vfaces: Vec<HashSet<usize>> = vec![HashSet::new(); n];
    for (fi, f) in faces.iter().enumerate() {
        for k in 0..3 {
            let a = f[k];
            let b = f[(k + 1) % 3];
            neighbors[a as usize].insert(b);
            neighbors[b as usize].insert(a);
            vfaces[a as usize].insert(fi);
        }
    }

    let mut heap: BinaryHeap<Candidate> = BinaryHeap::new();
    let push_edge = |heap: &mut BinaryHeap<Candidate>,
                         positions: &Vec<Point3<f64>>,
                         a: u32,
                         b: u32| {
        let (a, b) = (a.min(b), a.max(b));
        let length = (positions[a as usize] - positions[b as usize]).norm();
        heap.push(Candidate { length, a, b });
    };
    for (a, nb) in neighbors.iter().enumerate() {
        for &b in nb {
            if (a as u32) < b {
                push_edge(&mut heap, &positions, a as u32, b);
            }
        }
    }

    while live_faces > target_faces.max(4) {
        let Some(c) = heap.pop() else { break };
        let (a, b) = (c.a as usize, c.b as usize);
        if !vertex_alive[a] || !vertex_alive[b] || !neighbors[a].contains(&c.b) {
            continue;
        }
        let current = (positions[a] - positions[b]).norm();
        if (current - c.length).abs() > 1e-12 {
            // Stale entry: the endpoint moved since this was queued.
            push_edge(&mut heap, &positions, c.a, c.b);
            continue;
        }
        // Faces sharing the edge; a closed manifold has exactly two.
        let shared: Vec<usize> = vfaces[a]
            .intersection(&vfaces[b])
            .copied()
            .filter(|&fi| face_alive[fi])
            .collect();
        if shared.len() != 2 {
            continue;
        }
        // Link test: common neighbors must be exactly the two opposite
        // vertices of the shared faces.
        let mut opposite: HashSet<u32> = HashSet::new();
        for &fi in &shared {
            for &v in &faces[fi] {
                if v != c.a && v != c.b {
                    opposite.insert(v);
                }
            }
        }
        let common: HashSet<u32> = neighbors[a]
            .intersection(&neighbors[b])
            .copied()
            .collect();
        if common != opposite || opposite.len() != 2 {
            continue;
        }

        // Collapse b into a at the midpoint.
        positions[a] = Point3::from((positions[a].coords + positions[b].coords) * 0.5);
        vertex_alive[b] = false;
        for &fi in &shared {
            if face_alive[fi] {
                face_alive[fi] = false;
                live_faces -= 1;
                for &v in &faces[fi] {
                    vfaces[v as usize].remove(&fi);
                }
            }
        }
        let b_faces: Vec<usize> = vfaces[b].iter().copied().collect();
        for fi in b_faces {
            if !face_alive[fi] {
                continue;
            }
            for v in faces[fi].iter_mut() {
                if *v == c.b {
                    *v = c.a;
                }
            }
            vfaces[a].insert(fi);
        }
        vfaces[b].clear();
        let b_neighbors: Vec<u32> = neighbors[b].iter().copied().collect();
        neighbors[b].clear();
        for nb in b_neighbors {
            let set = &mut neighbors[nb as usize];
            set.remove(&c.b);
            if nb != c.a {
                set.insert(c.a);
                neighbors[a].insert(nb);
            }
        }
        neighbors[a].remove(&c.a);
        neighbors[a].remove(&c.b);
        for &nb in neighbors[a].clone().iter() {
            push_edge(&mut heap, &positions, c.a, nb);
        }
    }

    // Compact to surviving vertices and faces.
    let mut remap = vec![u32::MAX; n];
    let mut out_vertices = Vec::new();
    for (i, alive) in vertex_alive.iter().enumerate() {
        if *alive {
            remap[i] = out_vertices.len() as u32;
            out_vertices.push(positions[i]);
        }
    }
    let out_faces: Vec<[u32; 3]> = faces
        .iter()
        .zip(&face_alive)
        .filter(|(_, alive)| **alive)
        .map(|(f, _)| [remap[f[0] as usize], remap[f[1] as usize], remap[f[2] as usize]])
        .collect();
    let mut out = TriangleMesh::empty();
    out.vertices = out_vertices;
    out.faces = out_faces;
    out.recompute_normals();
    if !out.is_closed_manifold() {
        return Err(PriorError::BrokenManifold);
    }
    Ok(out)
}

/// Builds a degraded stand-in for `truth`: faces reduced to
/// `decimation_ratio` of the input, positions shifted along their normals by
/// seeded Gaussian noise of `noise_sigma` meters, then uniformly
/// Laplacian-smoothed. The result stays a closed manifold or the call
/// fails.
pub fn provide_prior(
    truth: &TriangleMesh,
    decimation_ratio: f64,
    noise_sigma: f64,
    smoothing_iterations: usize,
) -> Result<TriangleMesh, PriorError> {
    if !(decimation_ratio > 0.0 && decimation_ratio <= 1.0) {
        return Err(PriorError::BadRatio(decimation_ratio));
    }
    if !truth.is_closed_manifold() {
        return Err(PriorError::OpenInput);
    }
    if decimation_ratio == 1.0 && noise_sigma == 0.0 && smoothing_iterations == 0 {
        return Ok(truth.clone());
    }
    let target = ((truth.face_count() as f64) * decimation_ratio).ceil() as usize;
    let mut mesh = if decimation_ratio < 1.0 {
        decimate(truth, target)?
    } else {
        truth.clone()
    };

    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).expect("positive sigma");
        let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0001);
        let offsets: Vec<f64> = (0..mesh.vertices.len())
            .map(|_| normal.sample(&mut rng))
            .collect();
        for (v, (n, s)) in mesh
            .vertices
            .iter_mut()
            .zip(mesh.normals.iter().zip(&offsets))
        {
            *v += n * *s;
        }
    }

    if smoothing_iterations > 0 {
        let adjacency = mesh.vertex_adjacency();
        for _ in 0..smoothing_iterations {
            let moved: Vec<Point3<f64>> = mesh
                .vertices
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let nb = &adjacency[i];
                    if nb.is_empty() {
                        return *v;
                    }
                    let mut mean = nalgebra::Vector3::zeros();
                    for &j in nb {
                        mean += mesh.vertices[j as usize].coords;
                    }
                    mean /= nb.len() as f64;
                    Point3::from(v.coords + 0.5 * (mean - v.coords))
                })
                .collect();
            mesh.vertices = moved;
        }
    }
    mesh.recompute_normals();
    if !mesh.is_closed_manifold() {
        return Err(PriorError::BrokenManifold);
    }
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::shapes::{icosphere, torus};
    use nalgebra::Point3;

    #[test]
    fn identity_settings_return_identical_mesh() {
        let sphere = icosphere(0.5, &Point3::origin(), 3);
        let out = provide_prior(&sphere, 1.0, 0.0, 0).unwrap();
        assert_eq!(out.vertices, sphere.vertices);
        assert_eq!(out.faces, sphere.faces);
    }

    #[test]
    fn decimation_hits_face_budget_and_stays_closed() {
        let sphere = icosphere(0.5, &Point3::origin(), 4);
        let out = provide_prior(&sphere, 0.2, 0.0, 0).unwrap();
        let target = (sphere.face_count() as f64 * 0.2).ceil() as usize;
        assert!(out.face_count() <= target + 2, "faces {}", out.face_count());
        assert!(out.face_count() >= target / 2);
        assert!(out.is_closed_manifold());
        assert_eq!(out.euler_characteristic(), 2);
    }

    #[test]
    fn degraded_sphere_radial_error_in_band() {
        let sphere = icosphere(0.5, &Point3::origin(), 4);
        let out = provide_prior(&sphere, 0.2, 0.005, 1).unwrap();
        let mean_err: f64 = out
            .vertices
            .iter()
            .map(|v| (v.coords.norm() - 0.5).abs())
            .sum::<f64>()
            / out.vertices.len() as f64;
        assert!(
            (0.003..=0.008).contains(&mean_err),
            "mean radial error {mean_err}"
        );
    }

    #[test]
    fn torus_keeps_its_genus() {
        let donut = torus(&Point3::origin(), 0.4, 0.12, 48, 24);
        assert_eq!(donut.euler_characteristic(), 0);
        let out = provide_prior(&donut, 0.2, 0.0, 0).unwrap();
        assert_eq!(out.euler_characteristic(), 0);
        assert!(out.is_closed_manifold());
    }

    #[test]
    fn open_input_is_rejected() {
        let mut open = icosphere(0.5, &Point3::origin(), 2);
        open.faces.pop();
        assert!(matches!(
            provide_prior(&open, 0.5, 0.0, 0),
            Err(PriorError::OpenInput)
        ));
        assert!(matches!(
            provide_prior(&icosphere(0.3, &Point3::origin(), 1), 0.0, 0.0, 0),
            Err(PriorError::BadRatio(_))
        ));
    }

    #[test]
    fn smoothing_shrinks_toward_the_centroid() {
        let sphere = icosphere(0.5, &Point3::origin(), 3);
        let out = provide_prior(&sphere, 1.0, 0.0, 10).unwrap();
        let mean_r: f64 =
            out.vertices.iter().map(|v| v.coords.norm()).sum::<f64>() / out.vertices.len() as f64;
        assert!(mean_r < 0.5 && mean_r > 0.4, "mean radius {mean_r}");
    }
}
