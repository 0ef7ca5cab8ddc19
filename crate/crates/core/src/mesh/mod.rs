//! Indexed triangle meshes: the geometry currency of the whole engine.

mod obj;
mod ply;

pub use obj::read_obj;
pub use ply::{read_ply, write_ply};

use nalgebra::{Point3, Vector3};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("mesh has no vertices")]
    Empty,
    #[error("face {face} references vertex {index} out of range ({count} vertices)")]
    IndexOutOfRange { face: usize, index: u32, count: usize },
    #[error("normal {0} is not unit length")]
    BadNormal(usize),
    #[error("normal count {normals} does not match vertex count {vertices}")]
    CountMismatch { normals: usize, vertices: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

/// Triangle surface with per-vertex positions, unit normals and optional
/// RGB colors in [0,1]. Faces are triples of vertex indices.
///
/// Construction drops exactly-degenerate (zero area) faces and guarantees
/// in-range indices and unit normals, so downstream code never re-checks.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Point3<f64>>,
    pub normals: Vec<Vector3<f64>>,
    pub faces: Vec<[u32; 3]>,
    pub colors: Option<Vec<[f64; 3]>>,
}

impl TriangleMesh {
    /// A mesh with no vertices or faces.
    pub fn empty() -> Self {
        TriangleMesh {
            vertices: Vec::new(),
            normals: Vec::new(),
            faces: Vec::new(),
            colors: None,
        }
    }

    /// Builds a mesh and derives area-weighted vertex normals from the faces.
    pub fn new(vertices: Vec<Point3<f64>>, faces: Vec<[u32; 3]>) -> Result<Self, MeshError> {
        let mut mesh = TriangleMesh {
            vertices,
            normals: Vec::new(),
            faces,
            colors: None,
        };
        mesh.validate_and_clean()?;
        mesh.recompute_normals();
        Ok(mesh)
    }

    /// Builds a mesh with caller-supplied unit normals.
    pub fn with_normals(
        vertices: Vec<Point3<f64>>,
        normals: Vec<Vector3<f64>>,
        faces: Vec<[u32; 3]>,
    ) -> Result<Self, MeshError> {
        if normals.len() != vertices.len() {
            return Err(MeshError::CountMismatch {
                normals: normals.len(),
                vertices: vertices.len(),
            });
        }
        for (i, n) in normals.iter().enumerate() {
            if (n.norm() - 1.0).abs() > 1e-6 {
                return Err(MeshError::BadNormal(i));
            }
        }
        let mut mesh = TriangleMesh {
            vertices,
            normals,
            faces,
            colors: None,
        };
        mesh.validate_and_clean()?;
        Ok(mesh)
    }

    fn validate_and_clean(&mut self) -> Result<(), MeshError> {
        if self.vertices.is_empty() {
            return Err(MeshError::Empty);
        }
        let count = self.vertices.len();
        for (fi, f) in self.faces.iter().enumerate() {
            for &i in f {
                if i as usize >= count {
                    return Err(MeshError::IndexOutOfRange { face: fi, index: i, count });
                }
            }
        }
        let verts = &self.vertices;
        self.faces.retain(|f| {
            let a = verts[f[0] as usize];
            let b = verts[f[1] as usize];
            let c = verts[f[2] as usize];
            (b - a).cross(&(c - a)).norm() > 1e-16
        });
        Ok(())
    }

    /// Area-weighted vertex normals; vertices not referenced by any face get
    /// an arbitrary unit normal so the unit invariant always holds.
    pub fn recompute_normals(&mut self) {
        let mut acc = vec![Vector3::zeros(); self.vertices.len()];
        for f in &self.faces {
            let a = self.vertices[f[0] as usize];
            let b = self.vertices[f[1] as usize];
            let c = self.vertices[f[2] as usize];
            let n = (b - a).cross(&(c - a)); // magnitude = 2x area
            for &i in f {
                acc[i as usize] += n;
            }
        }
        self.normals = acc
            .into_iter()
            .map(|n| {
                let len = n.norm();
                if len > 1e-20 {
                    n / len
                } else {
                    Vector3::z()
                }
            })
            .collect();
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn centroid(&self) -> Point3<f64> {
        let mut c = Vector3::zeros();
        for v in &self.vertices {
            c += v.coords;
        }
        Point3::from(c / self.vertices.len().max(1) as f64)
    }

    pub fn area(&self) -> f64 {
        self.faces
            .iter()
            .map(|f| {
                let a = self.vertices[f[0] as usize];
                let b = self.vertices[f[1] as usize];
                let c = self.vertices[f[2] as usize];
                0.5 * (b - a).cross(&(c - a)).norm()
            })
            .sum()
    }

    /// Axis-aligned bounding box as (min, max) corners.
    pub fn aabb(&self) -> (Point3<f64>, Point3<f64>) {
        let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        (lo, hi)
    }

    /// Map from undirected edge to the number of incident faces.
    fn edge_incidence(&self) -> HashMap<(u32, u32), u32> {
        let mut edges: HashMap<(u32, u32), u32> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let a = f[k];
                let b = f[(k + 1) % 3];
                let key = (a.min(b), a.max(b));
                *edges.entry(key).or_insert(0) += 1;
            }
        }
        edges
    }

    /// Number of undirected edges bounded by exactly one face.
    pub fn boundary_edge_count(&self) -> usize {
        self.edge_incidence().values().filter(|&&c| c == 1).count()
    }

    pub fn is_watertight(&self) -> bool {
        self.boundary_edge_count() == 0
    }

    /// True when every undirected edge is shared by exactly two faces, the
    /// strict closed-surface condition (rules out fins as well as holes).
    pub fn is_closed_manifold(&self) -> bool {
        !self.faces.is_empty() && self.edge_incidence().values().all(|&c| c == 2)
    }

    /// Boundary edges restricted to the largest face-connected component.
    /// Lets callers ignore floating debris when checking watertightness.
    pub fn boundary_edge_count_main_component(&self) -> usize {
        if self.faces.is_empty() {
            return 0;
        }
        // Union faces that share an edge.
        let mut parent: Vec<usize> = (0..self.faces.len()).collect();
        fn find(parent: &mut Vec<usize>, i: usize) -> usize {
            let mut i = i;
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        let mut edge_face: HashMap<(u32, u32), usize> = HashMap::new();
        for (fi, f) in self.faces.iter().enumerate() {
            for k in 0..3 {
                let a = f[k];
                let b = f[(k + 1) % 3];
                let key = (a.min(b), a.max(b));
                if let Some(&other) = edge_face.get(&key) {
                    let ra = find(&mut parent, fi);
                    let rb = find(&mut parent, other);
                    parent[ra] = rb;
                } else {
                    edge_face.insert(key, fi);
                }
            }
        }
        let mut sizes: HashMap<usize, usize> = HashMap::new();
        for fi in 0..self.faces.len() {
            *sizes.entry(find(&mut parent, fi)).or_insert(0) += 1;
        }
        let main_root = *sizes.iter().max_by_key(|(_, &s)| s).unwrap().0;

        let mut edges: HashMap<(u32, u32), (u32, bool)> = HashMap::new();
        for (fi, f) in self.faces.iter().enumerate() {
            let in_main = find(&mut parent, fi) == main_root;
            for k in 0..3 {
                let a = f[k];
                let b = f[(k + 1) % 3];
                let key = (a.min(b), a.max(b));
                let e = edges.entry(key).or_insert((0, false));
                e.0 += 1;
                e.1 |= in_main;
            }
        }
        edges.values().filter(|(c, main)| *c == 1 && *main).count()
    }

    /// Euler characteristic V - E + F (coarse genus/manifoldness check).
    pub fn euler_characteristic(&self) -> i64 {
        let v = self.vertices.len() as i64;
        let e = self.edge_incidence().len() as i64;
        let f = self.faces.len() as i64;
        v - e + f
    }

    /// One-ring vertex adjacency (undirected, deduplicated, sorted).
    pub fn vertex_adjacency(&self) -> Vec<Vec<u32>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for f in &self.faces {
            for k in 0..3 {
                let a = f[k] as usize;
                let b = f[(k + 1) % 3];
                adj[a].push(b);
                adj[b as usize].push(f[k]);
            }
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        adj
    }
}
