//! Sparse deformation graph over a surface.
//!
//! A set of nodes is sampled on the mesh so that nodes are at least one
//! sampling radius apart along the surface and every vertex stays within
//! twice the radius of some node. Each node carries a rigid transform
//! (stored as a dual quaternion); surface points interpolate the transforms
//! of their k nearest nodes with Gaussian weights fixed at binding time.

use crate::dualquat::{blend_items, blend_jet, BlendJet, DualQuat, RigidTransform, MAX_BLEND};
use crate::grid::PointGrid;
use crate::mesh::TriangleMesh;
use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use std::collections::BinaryHeap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("mesh has no vertices to sample nodes from")]
    EmptyMesh,
    #[error("sampling radius must be positive, got {0}")]
    BadRadius(f64),
    #[error("requested {k} nearest nodes but the graph has only {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("point outside graph support")]
    OutsideSupport,
    #[error("binding width {0} exceeds the supported maximum {max}", max = MAX_BLEND)]
    BindingTooWide(usize),
}

/// One deformation node: a position on the surface, the rigid motion it
/// carries, and the indices of its nearest fellow nodes.
#[derive(Debug, Clone)]
pub struct Node {
    pub position: Point3<f64>,
    pub transform: DualQuat,
    pub neighbors: Vec<u32>,
}

/// Interpolation weights of one surface point over its nearest nodes.
/// Weights are normalized and frozen when the binding is created.
#[derive(Debug, Clone, Copy)]
pub struct Binding {
    nodes: [u32; MAX_BLEND],
    weights: [f64; MAX_BLEND],
    len: u8,
}

impl Binding {
    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn entries(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        (0..self.len as usize).map(move |i| (self.nodes[i], self.weights[i]))
    }

    pub fn node_ids(&self) -> &[u32] {
        &self.nodes[..self.len as usize]
    }
}

/// Per-vertex bindings for a mesh; `None` marks a vertex outside support.
#[derive(Debug, Clone, Default)]
pub struct VertexBindings(pub Vec<Option<Binding>>);

#[derive(Debug, Clone)]
pub struct DeformationGraph {
    pub nodes: Vec<Node>,
    /// Sampling radius; also sets the Gaussian falloff of binding weights.
    pub radius: f64,
    /// Number of nodes blended per surface point.
    pub binding_k: usize,
    /// Undirected regularization edges, each stored once with low index first.
    pub edges: Vec<(u32, u32)>,
}

/// Nodes blended per surface point.
pub const DEFAULT_BINDING_K: usize = 4;

/// Shortest-path distances over the mesh edge graph from a set of sources,
/// updated incrementally: `relax_from` only ever lowers distances.
struct GeodesicField {
    dist: Vec<f64>,
}

#[derive(PartialEq)]
struct HeapEntry(f64, u32);
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Reverse so the BinaryHeap pops the smallest distance first.
        other
            .0
            .partial_cmp(&self.0)
            .unwrap()
            .then(other.1.cmp(&self.1))
    }
}

impl GeodesicField {
    fn new(n: usize) -> Self {
        GeodesicField {
            dist: vec![f64::INFINITY; n],
        }
    }

    fn relax_from(&mut self, source: u32, adjacency: &[Vec<(u32, f64)>]) {
        let mut heap = BinaryHeap::new();
        self.dist[source as usize] = 0.0;
        heap.push(HeapEntry(0.0, source));
        while let Some(HeapEntry(d, v)) = heap.pop() {
            if d > self.dist[v as usize] {
                continue;
            }
            for &(w, len) in &adjacency[v as usize] {
                let nd = d + len;
                if nd < self.dist[w as usize] {
                    self.dist[w as usize] = nd;
                    heap.push(HeapEntry(nd, w));
                }
            }
        }
    }
}

fn edge_adjacency(mesh: &TriangleMesh) -> Vec<Vec<(u32, f64)>> {
    let n = mesh.vertex_count();
    let mut adj: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
    let mut push = |a: u32, b: u32, verts: &[Point3<f64>]| {
        let len = (verts[a as usize] - verts[b as usize]).norm();
        adj[a as usize].push((b, len));
    };
    for f in &mesh.faces {
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
            push(a, b, &mesh.vertices);
            push(b, a, &mesh.vertices);
        }
    }
    for list in &mut adj {
        list.sort_unstable_by(|a, b| a.0.cmp(&b.0).then(a.1.partial_cmp(&b.1).unwrap()));
        list.dedup_by_key(|e| e.0);
    }
    adj
}

/// Samples deformation nodes on `mesh` by greedy farthest-point selection
/// under edge-graph geodesic distance. The first vertex seeds the process;
/// each round the vertex farthest from all chosen nodes becomes a node,
/// until no vertex is farther than `radius` away. Disconnected pieces are
/// seeded independently at their lowest vertex index. Every node then links
/// to its `degree` nearest fellow nodes in Euclidean distance.
pub fn sample_node_graph(
    mesh: &TriangleMesh,
    radius: f64,
    degree: usize,
) -> Result<DeformationGraph, GraphError> {
    if mesh.vertex_count() == 0 {
        return Err(GraphError::EmptyMesh);
    }
    if !(radius > 0.0) {
        return Err(GraphError::BadRadius(radius));
    }
    let n = mesh.vertex_count();
    let adjacency = edge_adjacency(mesh);
    let mut field = GeodesicField::new(n);
    let mut node_vertices: Vec<u32> = Vec::new();

    // Isolated vertices and separate components never receive finite
    // distances from earlier seeds, so the max-distance scan naturally
    // lands on them; seeding order stays deterministic by preferring the
    // lowest unreached vertex index.
    let add = |v: u32, field: &mut GeodesicField, nodes: &mut Vec<u32>| {
        nodes.push(v);
        field.relax_from(v, &adjacency);
    };
    add(0, &mut field, &mut node_vertices);
    loop {
        let mut best_v = None;
        let mut best_d = radius;
        for (v, &d) in field.dist.iter().enumerate() {
            if d.is_infinite() {
                best_v = Some(v as u32);
                best_d = f64::INFINITY;
                break;
            }
            if d >= best_d && (best_v.is_none() || d > best_d) {
                best_v = Some(v as u32);
                best_d = d;
            }
        }
        match best_v {
            Some(v) if best_d >= radius => add(v, &mut field, &mut node_vertices),
            _ => break,
        }
    }

    let positions: Vec<Point3<f64>> = node_vertices
        .iter()
        .map(|&v| mesh.vertices[v as usize])
        .collect();
    let grid = PointGrid::build(&positions, radius.max(1e-9));
    let neighbor_count = degree.min(positions.len().saturating_sub(1));
    let nodes: Vec<Node> = positions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut near = grid.k_nearest(p, neighbor_count + 1);
            near.retain(|&(j, _)| j as usize != i);
            near.truncate(neighbor_count);
            Node {
                position: *p,
                transform: DualQuat::identity(),
                neighbors: near.into_iter().map(|(j, _)| j).collect(),
            }
        })
        .collect();

    let mut edges = Vec::new();
    for (i, node) in nodes.iter().enumerate() {
        for &j in &node.neighbors {
            let (a, b) = if (i as u32) < j {
                (i as u32, j)
            } else {
                (j, i as u32)
            };
            edges.push((a, b));
        }
    }
    edges.sort_unstable();
    edges.dedup();

    Ok(DeformationGraph {
        nodes,
        radius,
        binding_k: DEFAULT_BINDING_K,
        edges,
    })
}

/// Indices of the `k` nodes nearest to `point`, ascending by Euclidean
/// distance, ties broken toward the lower node index.
pub fn knn_nodes(
    graph: &DeformationGraph,
    point: &Point3<f64>,
    k: usize,
) -> Result<Vec<u32>, GraphError> {
    if k > graph.nodes.len() {
        return Err(GraphError::KTooLarge {
            k,
            n: graph.nodes.len(),
        });
    }
    let mut all: Vec<(u32, f64)> = graph
        .nodes
        .iter()
        .enumerate()
        .map(|(i, nd)| (i as u32, (nd.position - point).norm()))
        .collect();
    all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    Ok(all.into_iter().map(|(i, _)| i).collect())
}

impl DeformationGraph {
    /// A one-node graph carrying a single rigid transform. Every point
    /// within the (large) radius blends to exactly that transform, which
    /// makes this the natural way to express a globally rigid motion, e.g.
    /// the identity warp used when bootstrapping from the first frame.
    pub fn single(transform: &RigidTransform, position: Point3<f64>, radius: f64) -> Self {
        DeformationGraph {
            nodes: vec![Node {
                position,
                transform: DualQuat::from_rigid(transform),
                neighbors: Vec::new(),
            }],
            radius,
            binding_k: 1,
            edges: Vec::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_positions(&self) -> Vec<Point3<f64>> {
        self.nodes.iter().map(|n| n.position).collect()
    }

    pub fn set_identity(&mut self) {
        for n in &mut self.nodes {
            n.transform = DualQuat::identity();
        }
    }

    /// Raw (unnormalized) Gaussian weight of `node` at `point`.
    fn raw_weight(&self, node: u32, point: &Point3<f64>) -> f64 {
        let d2 = (self.nodes[node as usize].position - point).norm_squared();
        (-d2 / (2.0 * self.radius * self.radius)).exp()
    }

    /// Builds the binding of one point: its k nearest nodes with normalized
    /// Gaussian weights. Returns `None` when every raw weight underflows,
    /// i.e. the point lies outside the graph's support.
    pub fn bind_point(&self, point: &Point3<f64>) -> Option<Binding> {
        self.bind_point_with(point, None)
    }

    fn bind_point_with(&self, point: &Point3<f64>, grid: Option<&PointGrid>) -> Option<Binding> {
        let k = self.binding_k.min(self.nodes.len());
        if k == 0 || k > MAX_BLEND {
            return None;
        }
        let ids: Vec<u32> = match grid {
            Some(g) => g.k_nearest(point, k).into_iter().map(|(i, _)| i).collect(),
            None => knn_nodes(self, point, k).ok()?,
        };
        let mut nodes = [0u32; MAX_BLEND];
        let mut weights = [0.0f64; MAX_BLEND];
        let mut total = 0.0;
        for (slot, &id) in ids.iter().enumerate() {
            let w = self.raw_weight(id, point);
            nodes[slot] = id;
            weights[slot] = w;
            total += w;
        }
        if weights[..ids.len()].iter().all(|&w| w < 1e-12) {
            return None;
        }
        for w in weights.iter_mut().take(ids.len()) {
            *w /= total;
        }
        Some(Binding {
            nodes,
            weights,
            len: ids.len() as u8,
        })
    }

    /// Bindings for a batch of points, computed in parallel with a shared
    /// node grid. Order matches the input.
    pub fn bind_points(&self, points: &[Point3<f64>]) -> VertexBindings {
        let binder = self.binder();
        let bindings = points.par_iter().map(|p| binder.bind(p)).collect();
        VertexBindings(bindings)
    }

    /// A reusable accelerator for many binding queries against this graph.
    pub fn binder(&self) -> Binder<'_> {
        Binder {
            graph: self,
            grid: PointGrid::build(&self.node_positions(), self.radius.max(1e-9)),
        }
    }

    fn blend_items_of(&self, binding: &Binding) -> Vec<(f64, DualQuat)> {
        binding
            .entries()
            .map(|(id, w)| (w, self.nodes[id as usize].transform))
            .collect()
    }

    /// Rigid transform interpolated at `binding`.
    pub fn blend_binding(&self, binding: &Binding) -> Result<RigidTransform, GraphError> {
        blend_items(&self.blend_items_of(binding)).ok_or(GraphError::OutsideSupport)
    }

    /// Warped position and normal with exact derivatives with respect to
    /// each bound node's six-component twist update.
    pub fn blend_jet_binding(
        &self,
        binding: &Binding,
        v: &Point3<f64>,
        n: &Vector3<f64>,
    ) -> Result<BlendJet, GraphError> {
        blend_jet(&self.blend_items_of(binding), v, n).ok_or(GraphError::OutsideSupport)
    }
}

/// Rigid transform interpolated at an arbitrary point from its k nearest
/// nodes. Fails with an out-of-support error when every candidate weight is
/// below 1e-12.
pub fn blend_transform(
    graph: &DeformationGraph,
    point: &Point3<f64>,
) -> Result<RigidTransform, GraphError> {
    let binding = graph.bind_point(point).ok_or(GraphError::OutsideSupport)?;
    graph.blend_binding(&binding)
}

/// Applies the graph's motion to every vertex and normal of `mesh`.
/// Positions move by the full blended rigid transform; normals rotate by
/// its rotation part only.
pub fn warp_mesh(
    graph: &DeformationGraph,
    mesh: &TriangleMesh,
) -> Result<TriangleMesh, GraphError> {
    let bindings = graph.bind_points(&mesh.vertices);
    warp_mesh_bound(graph, mesh, &bindings)
}

/// Same as [`warp_mesh`] but reuses precomputed bindings.
pub fn warp_mesh_bound(
    graph: &DeformationGraph,
    mesh: &TriangleMesh,
    bindings: &VertexBindings,
) -> Result<TriangleMesh, GraphError> {
    assert_eq!(bindings.0.len(), mesh.vertex_count());
    let warped: Result<Vec<(Point3<f64>, Vector3<f64>)>, GraphError> = mesh
        .vertices
        .par_iter()
        .zip(mesh.normals.par_iter())
        .zip(bindings.0.par_iter())
        .map(|((v, n), b)| {
            let b = b.as_ref().ok_or(GraphError::OutsideSupport)?;
            let t = self_blend(graph, b)?;
            Ok((t.apply(v), t.rotate(n)))
        })
        .collect();
    let warped = warped?;
    let mut out = mesh.clone();
    for (i, (p, n)) in warped.into_iter().enumerate() {
        out.vertices[i] = p;
        out.normals[i] = n;
    }
    Ok(out)
}

fn self_blend(graph: &DeformationGraph, b: &Binding) -> Result<RigidTransform, GraphError> {
    graph.blend_binding(b)
}

/// Applies the graph's motion where it can: vertices beyond the graph's
/// support (or whose blend degenerates) stay where they are. Normals are
/// recomputed from the warped faces afterwards. Used when a mesh
/// legitimately extends past the deformed region.
pub fn warp_mesh_lenient(graph: &DeformationGraph, mesh: &TriangleMesh) -> TriangleMesh {
    let bindings = graph.bind_points(&mesh.vertices);
    let mut out = mesh.clone();
    out.vertices = mesh
        .vertices
        .par_iter()
        .zip(bindings.0.par_iter())
        .map(|(v, b)| {
            b.as_ref()
                .and_then(|b| graph.blend_binding(b).ok())
                .map(|t| t.apply(v))
                .unwrap_or(*v)
        })
        .collect();
    out.recompute_normals();
    out
}

/// Grid-accelerated binding queries; build once, query many points.
pub struct Binder<'g> {
    graph: &'g DeformationGraph,
    grid: PointGrid,
}

impl Binder<'_> {
    pub fn bind(&self, point: &Point3<f64>) -> Option<Binding> {
        self.graph.bind_point_with(point, Some(&self.grid))
    }

    /// Euclidean distance to the nearest node, or infinity for an empty graph.
    pub fn nearest_node_distance(&self, point: &Point3<f64>) -> f64 {
        self.grid
            .k_nearest(point, 1)
            .first()
            .map(|&(_, d)| d)
            .unwrap_or(f64::INFINITY)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;

    /// A flat triangle strip along +x: two rows of vertices, `segments`
    /// quads split into triangles. Edge-graph geodesics track x distance.
    pub fn strip(segments: usize, dx: f64, height: f64) -> TriangleMesh {
        let mut vertices = Vec::new();
        for i in 0..=segments {
            vertices.push(Point3::new(i as f64 * dx, 0.0, 0.0));
            vertices.push(Point3::new(i as f64 * dx, height, 0.0));
        }
        let mut faces = Vec::new();
        for i in 0..segments {
            let a = (2 * i) as u32;
            faces.push([a, a + 2, a + 1]);
            faces.push([a + 1, a + 2, a + 3]);
        }
        TriangleMesh::new(vertices, faces).unwrap()
    }

    /// Reference shortest-path distances, O(V^2), kept independent of the
    /// heap-based field used by the sampler.
    fn reference_geodesic(mesh: &TriangleMesh, source: u32) -> Vec<f64> {
        let adj = edge_adjacency(mesh);
        let n = mesh.vertex_count();
        let mut dist = vec![f64::INFINITY; n];
        let mut done = vec![false; n];
        dist[source as usize] = 0.0;
        for _ in 0..n {
            let mut u = None;
            let mut best = f64::INFINITY;
            for v in 0..n {
                if !done[v] && dist[v] < best {
                    best = dist[v];
                    u = Some(v);
                }
            }
            let Some(u) = u else { break };
            done[u] = true;
            for &(w, len) in &adj[u] {
                if dist[u] + len < dist[w as usize] {
                    dist[w as usize] = dist[u] + len;
                }
            }
        }
        dist
    }

    #[test]
    fn single_far_spaced_triangle_yields_one_node() {
        let mesh = TriangleMesh::new(
            vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(0.01, 0.0, 0.0),
                Point3::new(0.0, 0.01, 0.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let g = sample_node_graph(&mesh, 1.0, 8).unwrap();
        assert_eq!(g.node_count(), 1);
        assert!(g.nodes[0].neighbors.is_empty());
        assert!(g.edges.is_empty());
    }

    #[test]
    fn strip_sampling_respects_spacing_and_coverage() {
        let mesh = strip(50, 0.02, 0.005);
        let radius = 0.1;
        let g = sample_node_graph(&mesh, radius, 4).unwrap();
        assert!(
            (5..=12).contains(&g.node_count()),
            "unexpected node count {}",
            g.node_count()
        );
        // First node sits at vertex 0.
        assert_relative_eq!(g.nodes[0].position.x, 0.0);
        // Pairwise geodesic separation >= radius, checked with the
        // reference field.
        let vertex_of = |p: &Point3<f64>| {
            mesh.vertices
                .iter()
                .position(|v| (v - p).norm() < 1e-12)
                .unwrap() as u32
        };
        for (i, a) in g.nodes.iter().enumerate() {
            let dist = reference_geodesic(&mesh, vertex_of(&a.position));
            for (j, b) in g.nodes.iter().enumerate() {
                if i != j {
                    let d = dist[vertex_of(&b.position) as usize];
                    assert!(d >= radius - 1e-12, "nodes {i},{j} only {d} apart");
                }
            }
        }
        // Every vertex within 2 * radius of some node (Euclidean is a
        // lower bound on geodesic, so this is implied but cheap to check).
        for v in &mesh.vertices {
            let nearest = g
                .nodes
                .iter()
                .map(|n| (n.position - v).norm())
                .fold(f64::INFINITY, f64::min);
            assert!(nearest <= 2.0 * radius);
        }
    }

    #[test]
    fn neighbors_have_requested_degree() {
        let mesh = strip(60, 0.02, 0.005);
        let g = sample_node_graph(&mesh, 0.08, 4).unwrap();
        assert!(g.node_count() > 5);
        for n in &g.nodes {
            assert_eq!(n.neighbors.len(), 4);
        }
        // Symmetric closure: each stored edge appears once, low index first.
        for &(a, b) in &g.edges {
            assert!(a < b);
            let fwd = g.nodes[a as usize].neighbors.contains(&b);
            let bwd = g.nodes[b as usize].neighbors.contains(&a);
            assert!(fwd || bwd);
        }
    }

    #[test]
    fn knn_orders_by_distance_then_index() {
        let mesh = strip(10, 0.1, 0.01);
        let g = sample_node_graph(&mesh, 0.15, 4).unwrap();
        // Make distances unambiguous by querying off to one side.
        let q = Point3::new(0.0, 0.0, 0.0);
        let ids = knn_nodes(&g, &q, g.node_count()).unwrap();
        let mut last = -1.0;
        for id in &ids {
            let d = (g.nodes[*id as usize].position - q).norm();
            assert!(d >= last);
            last = d;
        }
        let too_many = knn_nodes(&g, &q, g.node_count() + 1);
        assert!(matches!(too_many, Err(GraphError::KTooLarge { .. })));
        // Exact ties go to the lower index: two nodes mirrored about the
        // query point.
        let tie = DeformationGraph {
            nodes: vec![
                Node {
                    position: Point3::new(1.0, 0.0, 0.0),
                    transform: DualQuat::identity(),
                    neighbors: vec![1],
                },
                Node {
                    position: Point3::new(-1.0, 0.0, 0.0),
                    transform: DualQuat::identity(),
                    neighbors: vec![0],
                },
            ],
            radius: 1.0,
            binding_k: 2,
            edges: vec![(0, 1)],
        };
        let ids = knn_nodes(&tie, &Point3::new(0.0, 0.0, 0.0), 2).unwrap();
        assert_eq!(&ids[..2], &[0, 1]);
    }

    #[test]
    fn identity_graph_warps_to_same_mesh() {
        let mesh = strip(20, 0.05, 0.01);
        let g = sample_node_graph(&mesh, 0.1, 4).unwrap();
        let warped = warp_mesh(&g, &mesh).unwrap();
        for (a, b) in mesh.vertices.iter().zip(&warped.vertices) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn uniform_translation_moves_every_vertex() {
        let mesh = strip(20, 0.05, 0.01);
        let mut g = sample_node_graph(&mesh, 0.1, 4).unwrap();
        let t = Vector3::new(0.03, -0.01, 0.2);
        for n in &mut g.nodes {
            n.transform = DualQuat::from_rigid(&RigidTransform::from_translation(t));
        }
        let warped = warp_mesh(&g, &mesh).unwrap();
        for (a, b) in mesh.vertices.iter().zip(&warped.vertices) {
            assert_relative_eq!(a + t, *b, epsilon = 1e-9);
        }
        for (a, b) in mesh.normals.iter().zip(&warped.normals) {
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn far_point_is_outside_support() {
        let mesh = strip(10, 0.05, 0.01);
        let g = sample_node_graph(&mesh, 0.1, 4).unwrap();
        let far = Point3::new(100.0, 100.0, 100.0);
        let err = blend_transform(&g, &far).unwrap_err();
        assert!(matches!(err, GraphError::OutsideSupport));
        assert_eq!(err.to_string(), "point outside graph support");
    }

    #[test]
    fn blend_weights_fall_off_with_distance() {
        let mesh = strip(40, 0.05, 0.01);
        let g = sample_node_graph(&mesh, 0.12, 4).unwrap();
        let q = g.nodes[2].position;
        let b = g.bind_point(&q).unwrap();
        // The closest node (the one we queried at) dominates.
        let (best_id, best_w) = b.entries().max_by(|a, b| a.1.partial_cmp(&b.1).unwrap()).unwrap();
        assert_eq!(best_id, 2);
        let sum: f64 = b.entries().map(|(_, w)| w).sum();
        assert_relative_eq!(sum, 1.0, epsilon = 1e-12);
        assert!(best_w > 0.25);
    }

    #[test]
    fn rotation_about_axis_matches_closed_form() {
        let mesh = strip(20, 0.05, 0.01);
        let mut g = sample_node_graph(&mesh, 0.1, 4).unwrap();
        let center = Point3::new(0.5, 0.0, 0.0);
        let rt = RigidTransform::rotation_about(&center, &Vector3::y_axis(), 0.4);
        for n in &mut g.nodes {
            n.transform = DualQuat::from_rigid(&rt);
        }
        let warped = warp_mesh(&g, &mesh).unwrap();
        for (a, b) in mesh.vertices.iter().zip(&warped.vertices) {
            assert_relative_eq!(rt.apply(a), *b, epsilon = 1e-9);
        }
    }
}
