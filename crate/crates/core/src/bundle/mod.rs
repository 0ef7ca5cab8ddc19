//! Global refinement of partial scans after a full turn: each scan gets its
//! own small alignment deformation, all scans share per-key-frame warps
//! into the live views, and the two families are optimized alternately so
//! the scan loop closes onto the depth and silhouette evidence. The result
//! is a set of mutually aligned scans ready for [`merge_scans`].
//!
//! Four energy terms drive the refinement: scan-to-scan overlap closure,
//! point-to-plane agreement with depth at selected key frames, silhouette
//! agreement through a signed distance transform of the input masks, and
//! per-graph rigidity smoothing. Key frames are re-picked before every
//! iteration as the worst offenders per uniform sequence segment.

pub mod merge;

pub use crate::dt::{distance_transform, DistanceTransformImage};
pub use merge::{merge_meshes, merge_scans};

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;

use crate::dualquat::{DualQuat, RigidTransform};
use crate::frame::DepthFrame;
use crate::graph::{
    sample_node_graph, warp_mesh_lenient, DeformationGraph, GraphError, VertexBindings,
};
use crate::grid::PointGrid;
use crate::mesh::TriangleMesh;
use crate::raster::rasterize;
use crate::scans::PartialScan;
use crate::solver::residuals::{
    GlobalBinding, LoopClosure, PointToPlane, SilhouettePull, SmoothEdge,
};
use crate::solver::{gauss_newton_step, ResidualBlock, SolverError, SolverSettings};
use crate::tracking::{MIN_FACING, NORMAL_MAX_JUMP};
use crate::tsdf::TsdfError;

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error("loop closure needs at least 2 partial scans, got {0}")]
    NeedTwoScans(usize),
    #[error("{frames} frames but {graphs} tracked graphs")]
    MismatchedInputs { frames: usize, graphs: usize },
    #[error("cannot divide a sequence into {0} segments")]
    BadSegments(usize),
    #[error("{frames} frames cannot fill {segments} key-frame segments")]
    SequenceTooShort { frames: usize, segments: usize },
    #[error(
        "no overlap found between adjacent scans {first} and {second}; \
         they cannot be closed into a loop"
    )]
    NonOverlapping { first: usize, second: usize },
    #[error("no scans to merge")]
    EmptyScans,
    #[error("scan {0} has no alignment graph")]
    MissingGraph(usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Tsdf(#[from] TsdfError),
}

/// Weights, schedules and gates of the joint refinement.
#[derive(Debug, Clone)]
pub struct BundleConfig {
    /// Weight of the scan-to-scan overlap term.
    pub lambda_loop: f64,
    /// Weight of the key-frame depth term.
    pub lambda_depth: f64,
    /// Weight of the key-frame silhouette term (pixels², hence small).
    pub lambda_silhouette: f64,
    /// Weight of the per-graph rigidity term.
    pub lambda_smooth: f64,
    /// Alternating outer iterations.
    pub outer_iterations: usize,
    /// Number of uniform sequence segments; one depth and one silhouette
    /// key frame are picked per segment.
    pub key_segments: usize,
    /// Node sampling radius for per-scan alignment graphs.
    pub node_radius: f64,
    /// Regularization neighbors per alignment-graph node.
    pub node_degree: usize,
    /// Distance gate for loop and depth correspondences, meters.
    pub max_pair_distance: f64,
    /// Normal-agreement gate for loop and depth correspondences, degrees.
    pub max_pair_normal_degrees: f64,
    /// A vertex projecting within this many pixels of the rendered-mask
    /// boundary joins the silhouette term.
    pub boundary_band_pixels: f64,
    pub solver: SolverSettings,
}

impl Default for BundleConfig {
    fn default() -> Self {
        BundleConfig {
            lambda_loop: 1.0,
            lambda_depth: 0.5,
            lambda_silhouette: 0.001,
            lambda_smooth: 2.0,
            outer_iterations: 25,
            key_segments: 5,
            node_radius: 0.05,
            node_degree: 4,
            max_pair_distance: 0.02,
            max_pair_normal_degrees: 60.0,
            boundary_band_pixels: 2.0,
            solver: SolverSettings::default(),
        }
    }
}

/// The frames whose depth and silhouette evidence anchors one iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyFrameSet {
    pub depth_keys: Vec<usize>,
    pub silhouette_keys: Vec<usize>,
    pub segments: usize,
}

impl KeyFrameSet {
    /// All distinct key frames, ascending.
    pub fn active_frames(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self
            .depth_keys
            .iter()
            .chain(self.silhouette_keys.iter())
            .copied()
            .collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

/// One vertex of scan `scan_p` paired with its closest counterpart on
/// another scan; the residual is point-to-plane in `scan_p`'s normal.
#[derive(Debug, Clone, Copy)]
pub struct LoopPair {
    pub scan_p: usize,
    pub vertex_p: u32,
    pub scan_q: usize,
    pub vertex_q: u32,
}

/// One scan vertex paired with the depth point under its projection in a
/// key frame; the plane normal is the warped scan normal.
#[derive(Debug, Clone, Copy)]
pub struct DepthPair {
    pub scan: usize,
    pub vertex: u32,
    pub target: Point3<f64>,
}

#[derive(Debug, Clone)]
pub struct DepthSet {
    pub frame: usize,
    pub pairs: Vec<DepthPair>,
}

/// A scan vertex projecting near the rendered silhouette of a key frame.
#[derive(Debug, Clone, Copy)]
pub struct BoundaryVertex {
    pub scan: usize,
    pub vertex: u32,
}

#[derive(Debug, Clone)]
pub struct SilhouetteSet {
    pub frame: usize,
    /// Signed distance transform of the frame's input mask.
    pub dt: DistanceTransformImage,
    pub vertices: Vec<BoundaryVertex>,
}

/// All data associations of one outer iteration.
#[derive(Debug, Clone, Default)]
pub struct Correspondences {
    pub loops: Vec<LoopPair>,
    pub depth: Vec<DepthSet>,
    pub silhouette: Vec<SilhouetteSet>,
}

/// Unweighted energy terms of one iteration plus their weighted total.
#[derive(Debug, Clone, Copy)]
pub struct EnergyRow {
    pub iteration: usize,
    pub loop_term: f64,
    pub depth_term: f64,
    pub silhouette_term: f64,
    pub smooth_term: f64,
    pub total: f64,
}

/// Outcome of [`optimize_bundle`]: aligned scans, the surviving key-frame
/// warps, and the recorded energy schedule.
#[derive(Debug, Clone)]
pub struct BundleState {
    pub scans: Vec<PartialScan>,
    /// Live warps of the finally selected key frames, ascending by frame.
    pub live_warps: Vec<(usize, DeformationGraph)>,
    pub keys: KeyFrameSet,
    pub energies: Vec<EnergyRow>,
    pub config: BundleConfig,
}

impl BundleState {
    /// Scan `j` with its alignment deformation applied (reference frame).
    pub fn deformed_scan(&self, j: usize) -> TriangleMesh {
        deformed_mesh(&self.scans[j])
    }

    /// The per-iteration energy log as CSV text.
    pub fn energy_csv(&self) -> String {
        energy_csv(&self.energies)
    }
}

pub fn energy_csv(rows: &[EnergyRow]) -> String {
    let mut out = String::from("iteration,E_loop,E_depth,E_sil,E_smooth,total\n");
    for r in rows {
        writeln!(
            out,
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            r.iteration, r.loop_term, r.depth_term, r.silhouette_term, r.smooth_term, r.total
        )
        .expect("writing to a String cannot fail");
    }
    out
}

fn deformed_mesh(scan: &PartialScan) -> TriangleMesh {
    match &scan.bundle_graph {
        Some(g) => warp_mesh_lenient(g, &scan.mesh),
        None => scan.mesh.clone(),
    }
}

/// Picks, per uniform segment, the frame with the worst geometric error and
/// the frame with the worst silhouette error. Ties go to the lower index.
pub fn select_key_frames(
    errors: &[(f64, f64)],
    segments: usize,
) -> Result<KeyFrameSet, BundleError> {
    if segments == 0 {
        return Err(BundleError::BadSegments(segments));
    }
    let len = errors.len();
    if len < segments {
        return Err(BundleError::SequenceTooShort {
            frames: len,
            segments,
        });
    }
    let mut depth_keys = Vec::with_capacity(segments);
    let mut silhouette_keys = Vec::with_capacity(segments);
    for s in 0..segments {
        let start = s * len / segments;
        let end = (s + 1) * len / segments;
        let mut best_geom = start;
        let mut best_sil = start;
        for f in start..end {
            if errors[f].0 > errors[best_geom].0 {
                best_geom = f;
            }
            if errors[f].1 > errors[best_sil].1 {
                best_sil = f;
            }
        }
        depth_keys.push(best_geom);
        silhouette_keys.push(best_sil);
    }
    Ok(KeyFrameSet {
        depth_keys,
        silhouette_keys,
        segments,
    })
}

/// All deformed scans concatenated into one mesh (for mask rendering).
fn combined_mesh(meshes: &[TriangleMesh]) -> TriangleMesh {
    let mut vertices = Vec::new();
    let mut normals = Vec::new();
    let mut faces = Vec::new();
    for m in meshes {
        let base = vertices.len() as u32;
        vertices.extend_from_slice(&m.vertices);
        normals.extend_from_slice(&m.normals);
        faces.extend(m.faces.iter().map(|f| [f[0] + base, f[1] + base, f[2] + base]));
    }
    TriangleMesh {
        vertices,
        normals,
        faces,
        colors: None,
    }
}

/// Gated projective depth association for one already-warped mesh:
/// `(vertex, target, point_to_plane_distance)` per surviving vertex.
fn depth_matches(
    warped: &TriangleMesh,
    frame: &DepthFrame,
    depth_normals: &[Option<Vector3<f64>>],
    config: &BundleConfig,
) -> Vec<(u32, Point3<f64>, f64)> {
    let cos_gate = config.max_pair_normal_degrees.to_radians().cos();
    warped
        .vertices
        .par_iter()
        .zip(warped.normals.par_iter())
        .enumerate()
        .filter_map(|(i, (v, n))| {
            if n.z >= -MIN_FACING {
                return None;
            }
            let (pu, pv) = frame.intrinsics.project_to_pixel(v)?;
            if !frame.mask_at(pu as i64, pv as i64) {
                return None;
            }
            let target = frame.point_at(pu, pv)?;
            if (v - target).norm() > config.max_pair_distance {
                return None;
            }
            let dn = depth_normals[frame.idx(pu, pv)]?;
            if n.dot(&dn) < cos_gate {
                return None;
            }
            Some((i as u32, target, (n.dot(&(v - target))).abs()))
        })
        .collect()
}

/// Misalignment of the current scans against one frame: mean gated
/// point-to-plane distance of all warped scan vertices, and the fraction
/// of pixels where the rendered mask of the warped scans disagrees with
/// the frame's input mask.
pub fn compute_frame_errors(
    deformed_scans: &[TriangleMesh],
    frame: &DepthFrame,
    live: &DeformationGraph,
    config: &BundleConfig,
) -> (f64, f64) {
    let warped: Vec<TriangleMesh> = deformed_scans
        .iter()
        .map(|m| warp_mesh_lenient(live, m))
        .collect();

    let depth_normals = frame.normal_map(NORMAL_MAX_JUMP);
    let mut total = 0.0;
    let mut count = 0usize;
    for mesh in &warped {
        for (_, _, dist) in depth_matches(mesh, frame, &depth_normals, config) {
            total += dist;
            count += 1;
        }
    }
    let geom = if count == 0 { 0.0 } else { total / count as f64 };

    let rendered = rasterize(&combined_mesh(&warped), &frame.intrinsics).coverage_mask();
    let differing = rendered
        .iter()
        .zip(frame.mask.iter())
        .filter(|(r, m)| r != m)
        .count();
    let sil = differing as f64 / rendered.len() as f64;
    (geom, sil)
}

/// Closest-vertex overlap pairs between every ordered pair of deformed
/// scans, gated by distance and normal agreement.
pub fn build_loop_pairs(
    deformed: &[TriangleMesh],
    config: &BundleConfig,
) -> Vec<LoopPair> {
    let cos_gate = config.max_pair_normal_degrees.to_radians().cos();
    let grids: Vec<PointGrid> = deformed
        .iter()
        .map(|m| PointGrid::build(&m.vertices, config.max_pair_distance.max(1e-9)))
        .collect();
    let mut out = Vec::new();
    for p in 0..deformed.len() {
        for q in 0..deformed.len() {
            if p == q {
                continue;
            }
            let pairs: Vec<LoopPair> = deformed[p]
                .vertices
                .par_iter()
                .enumerate()
                .filter_map(|(u, vp)| {
                    let (vq, _) = grids[q].nearest_within(vp, config.max_pair_distance)?;
                    let np = &deformed[p].normals[u];
                    let nq = &deformed[q].normals[vq as usize];
                    if np.dot(nq) < cos_gate {
                        return None;
                    }
                    Some(LoopPair {
                        scan_p: p,
                        vertex_p: u as u32,
                        scan_q: q,
                        vertex_q: vq,
                    })
                })
                .collect();
            out.extend(pairs);
        }
    }
    out
}

/// Depth associations of every deformed scan against one key frame.
pub fn build_depth_set(
    deformed: &[TriangleMesh],
    frame: &DepthFrame,
    frame_index: usize,
    live: &DeformationGraph,
    config: &BundleConfig,
) -> DepthSet {
    let depth_normals = frame.normal_map(NORMAL_MAX_JUMP);
    let mut pairs = Vec::new();
    for (j, mesh) in deformed.iter().enumerate() {
        let warped = warp_mesh_lenient(live, mesh);
        pairs.extend(
            depth_matches(&warped, frame, &depth_normals, config)
                .into_iter()
                .map(|(vertex, target, _)| DepthPair {
                    scan: j,
                    vertex,
                    target,
                }),
        );
    }
    DepthSet {
        frame: frame_index,
        pairs,
    }
}

/// Boundary-vertex selection for one key frame: vertices of the warped
/// scans projecting within the boundary band of the rendered mask, plus
/// the signed distance transform of the input mask they will be scored
/// against.
pub fn build_silhouette_set(
    deformed: &[TriangleMesh],
    frame: &DepthFrame,
    frame_index: usize,
    live: &DeformationGraph,
    config: &BundleConfig,
) -> SilhouetteSet {
    let warped: Vec<TriangleMesh> = deformed
        .iter()
        .map(|m| warp_mesh_lenient(live, m))
        .collect();
    let cam = &frame.intrinsics;
    let rendered = rasterize(&combined_mesh(&warped), cam).coverage_mask();
    let rendered_dt = distance_transform(&rendered, cam.width, cam.height);
    let input_dt = distance_transform(&frame.mask, cam.width, cam.height);

    let mut vertices = Vec::new();
    for (j, mesh) in warped.iter().enumerate() {
        let near: Vec<BoundaryVertex> = mesh
            .vertices
            .par_iter()
            .zip(mesh.normals.par_iter())
            .enumerate()
            .filter_map(|(i, (v, n))| {
                // Strongly rear-facing vertices cannot shape the visible
                // silhouette; rim vertices (grazing normals) may.
                if n.z >= MIN_FACING {
                    return None;
                }
                let (pu, pv) = cam.project_to_pixel(v)?;
                if rendered_dt.values[pv * cam.width + pu] > config.boundary_band_pixels {
                    return None;
                }
                Some(BoundaryVertex {
                    scan: j,
                    vertex: i as u32,
                })
            })
            .collect();
        vertices.extend(near);
    }
    SilhouetteSet {
        frame: frame_index,
        dt: input_dt,
        vertices,
    }
}

fn live_of<'a>(
    live_warps: &'a [(usize, DeformationGraph)],
    frame: usize,
) -> Option<&'a DeformationGraph> {
    live_warps
        .iter()
        .find(|(f, _)| *f == frame)
        .map(|(_, g)| g)
}

/// Evaluates the four energy terms for the given associations. Terms are
/// reported unweighted; the total applies the configured weights. Scans
/// without an alignment graph count as rigidly fixed.
pub fn eval_bundle_energy(
    scans: &[PartialScan],
    live_warps: &[(usize, DeformationGraph)],
    corr: &Correspondences,
    frames: &[DepthFrame],
    config: &BundleConfig,
) -> EnergyRow {
    let deformed: Vec<TriangleMesh> = scans.iter().map(deformed_mesh).collect();

    let loop_term: f64 = corr
        .loops
        .par_iter()
        .map(|lp| {
            let vp = deformed[lp.scan_p].vertices[lp.vertex_p as usize];
            let np = deformed[lp.scan_p].normals[lp.vertex_p as usize];
            let vq = deformed[lp.scan_q].vertices[lp.vertex_q as usize];
            let r = np.dot(&(vp - vq));
            r * r
        })
        .sum();

    let mut depth_term = 0.0;
    for set in &corr.depth {
        let Some(live) = live_of(live_warps, set.frame) else {
            continue;
        };
        let warped: Vec<TriangleMesh> = deformed
            .iter()
            .map(|m| warp_mesh_lenient(live, m))
            .collect();
        depth_term += set
            .pairs
            .par_iter()
            .map(|p| {
                let v = warped[p.scan].vertices[p.vertex as usize];
                let n = warped[p.scan].normals[p.vertex as usize];
                let r = n.dot(&(v - p.target));
                r * r
            })
            .sum::<f64>();
    }

    let mut silhouette_term = 0.0;
    for set in &corr.silhouette {
        let Some(live) = live_of(live_warps, set.frame) else {
            continue;
        };
        let cam = &frames[set.frame].intrinsics;
        let warped: Vec<TriangleMesh> = deformed
            .iter()
            .map(|m| warp_mesh_lenient(live, m))
            .collect();
        silhouette_term += set
            .vertices
            .par_iter()
            .map(|bv| {
                let v = warped[bv.scan].vertices[bv.vertex as usize];
                if v.z <= 1e-9 {
                    return 0.0;
                }
                let u = cam.cx + cam.fx * v.x / v.z;
                let w = cam.cy + cam.fy * v.y / v.z;
                match set.dt.signed_at(u, w) {
                    Some(d) => d * d,
                    None => 0.0,
                }
            })
            .sum::<f64>();
    }

    let mut smooth_term = 0.0;
    let bundle_graphs = scans.iter().filter_map(|s| s.bundle_graph.as_ref());
    let live_graphs = live_warps.iter().map(|(_, g)| g);
    for g in bundle_graphs.chain(live_graphs) {
        for node in &g.nodes {
            let ti = node.transform.to_rigid();
            for &j in &node.neighbors {
                let xj = g.nodes[j as usize].position;
                let tj = g.nodes[j as usize].transform.to_rigid();
                smooth_term += (ti.apply(&xj) - tj.apply(&xj)).norm_squared();
            }
        }
    }

    let total = config.lambda_loop * loop_term
        + config.lambda_depth * depth_term
        + config.lambda_silhouette * silhouette_term
        + config.lambda_smooth * smooth_term;
    EnergyRow {
        iteration: 0,
        loop_term,
        depth_term,
        silhouette_term,
        smooth_term,
        total,
    }
}

fn params_of(graph: &DeformationGraph) -> Vec<DualQuat> {
    graph.nodes.iter().map(|n| n.transform).collect()
}

fn set_params(graph: &mut DeformationGraph, params: &[DualQuat]) {
    for (node, p) in graph.nodes.iter_mut().zip(params) {
        node.transform = *p;
    }
}

/// Blended rigid motion of `live` at each query point; `None` where the
/// point is outside the graph's support.
fn live_rigids(
    live: &DeformationGraph,
    points: &[Point3<f64>],
) -> Vec<Option<RigidTransform>> {
    let bindings = live.bind_points(points);
    bindings
        .0
        .iter()
        .map(|b| b.as_ref().and_then(|b| live.blend_binding(b).ok()))
        .collect()
}

fn push_smooth_blocks<'a>(
    blocks: &mut Vec<ResidualBlock<'a>>,
    graph: &DeformationGraph,
    offset: u32,
    weight: f64,
) {
    for (i, node) in graph.nodes.iter().enumerate() {
        for &j in &node.neighbors {
            blocks.push(ResidualBlock::new(
                vec![offset + i as u32, offset + j],
                weight,
                Box::new(SmoothEdge {
                    block_i: offset + i as u32,
                    block_j: offset + j,
                    xj: graph.nodes[j as usize].position,
                }),
            ));
        }
    }
}

/// Alternating refinement of scan alignments and key-frame warps.
///
/// `tracked` supplies one deformation graph per frame (the per-frame warp
/// recovered while scanning); key frames borrow their live warp from it the
/// first time they are selected. Each outer iteration re-picks key frames
/// from the current misalignment errors, rebuilds all associations, then
/// takes one solver step over the scan alignment graphs (warps frozen) and
/// one over the live warps (alignments frozen).
pub fn optimize_bundle(
    mut scans: Vec<PartialScan>,
    frames: &[DepthFrame],
    tracked: &[DeformationGraph],
    config: &BundleConfig,
) -> Result<BundleState, BundleError> {
    if scans.len() < 2 {
        return Err(BundleError::NeedTwoScans(scans.len()));
    }
    if frames.len() != tracked.len() {
        return Err(BundleError::MismatchedInputs {
            frames: frames.len(),
            graphs: tracked.len(),
        });
    }
    if config.key_segments == 0 {
        return Err(BundleError::BadSegments(0));
    }
    if frames.len() < config.key_segments {
        return Err(BundleError::SequenceTooShort {
            frames: frames.len(),
            segments: config.key_segments,
        });
    }

    // Per-scan alignment graphs and the (frozen) binding of each scan's
    // vertices to its own graph. Node layouts never change, so both live
    // for the whole optimization.
    for scan in &mut scans {
        if scan.bundle_graph.is_none() {
            scan.bundle_graph = Some(sample_node_graph(
                &scan.mesh,
                config.node_radius,
                config.node_degree,
            )?);
        }
    }
    let bundle_bindings: Vec<VertexBindings> = scans
        .iter()
        .map(|s| {
            s.bundle_graph
                .as_ref()
                .expect("populated above")
                .bind_points(&s.mesh.vertices)
        })
        .collect();
    let mut offsets = Vec::with_capacity(scans.len());
    let mut next = 0u32;
    for scan in &scans {
        offsets.push(next);
        next += scan.bundle_graph.as_ref().expect("populated above").nodes.len() as u32;
    }

    let mut pool: HashMap<usize, DeformationGraph> = HashMap::new();
    let mut keys = KeyFrameSet {
        depth_keys: Vec::new(),
        silhouette_keys: Vec::new(),
        segments: config.key_segments,
    };
    let mut energies: Vec<EnergyRow> = Vec::new();

    for iteration in 0..config.outer_iterations {
        let deformed: Vec<TriangleMesh> = scans.iter().map(deformed_mesh).collect();

        // Worst-offender key frames for this iteration.
        let errors: Vec<(f64, f64)> = (0..frames.len())
            .into_par_iter()
            .map(|f| {
                let live = pool.get(&f).unwrap_or(&tracked[f]);
                compute_frame_errors(&deformed, &frames[f], live, config)
            })
            .collect();
        keys = select_key_frames(&errors, config.key_segments)?;
        for &f in &keys.active_frames() {
            pool.entry(f).or_insert_with(|| tracked[f].clone());
        }

        // Associations for this iteration.
        let loops = build_loop_pairs(&deformed, config);
        for j in 0..scans.len() - 1 {
            let touching = loops.iter().any(|lp| {
                (lp.scan_p == j && lp.scan_q == j + 1)
                    || (lp.scan_p == j + 1 && lp.scan_q == j)
            });
            if !touching {
                return Err(BundleError::NonOverlapping {
                    first: j,
                    second: j + 1,
                });
            }
        }
        let depth_sets: Vec<DepthSet> = keys
            .depth_keys
            .par_iter()
            .map(|&f| build_depth_set(&deformed, &frames[f], f, &pool[&f], config))
            .collect();
        let sil_sets: Vec<SilhouetteSet> = keys
            .silhouette_keys
            .par_iter()
            .map(|&f| build_silhouette_set(&deformed, &frames[f], f, &pool[&f], config))
            .collect();
        let corr = Correspondences {
            loops,
            depth: depth_sets,
            silhouette: sil_sets,
        };

        // Half-step over the scan alignment graphs, live warps frozen as
        // per-vertex rigid motions taken at the current deformed positions.
        {
            let mut params: Vec<DualQuat> = Vec::new();
            for scan in &scans {
                params.extend(params_of(scan.bundle_graph.as_ref().expect("populated")));
            }
            let mut blocks: Vec<ResidualBlock> = Vec::new();
            for lp in &corr.loops {
                let (Some(bp), Some(bq)) = (
                    bundle_bindings[lp.scan_p].0[lp.vertex_p as usize].as_ref(),
                    bundle_bindings[lp.scan_q].0[lp.vertex_q as usize].as_ref(),
                ) else {
                    continue;
                };
                let gp = GlobalBinding::from_binding(bp, offsets[lp.scan_p]);
                let gq = GlobalBinding::from_binding(bq, offsets[lp.scan_q]);
                let mut touched = gp.ids().to_vec();
                touched.extend_from_slice(gq.ids());
                blocks.push(ResidualBlock::new(
                    touched,
                    config.lambda_loop,
                    Box::new(LoopClosure {
                        binding_p: gp,
                        binding_q: gq,
                        vp: scans[lp.scan_p].mesh.vertices[lp.vertex_p as usize],
                        np: scans[lp.scan_p].mesh.normals[lp.vertex_p as usize],
                        vq: scans[lp.scan_q].mesh.vertices[lp.vertex_q as usize],
                    }),
                ));
            }
            for set in &corr.depth {
                let live = &pool[&set.frame];
                let positions: Vec<Point3<f64>> = set
                    .pairs
                    .iter()
                    .map(|p| deformed[p.scan].vertices[p.vertex as usize])
                    .collect();
                let posts = live_rigids(live, &positions);
                for (pair, post) in set.pairs.iter().zip(posts) {
                    let Some(post) = post else { continue };
                    let Some(b) = bundle_bindings[pair.scan].0[pair.vertex as usize].as_ref()
                    else {
                        continue;
                    };
                    let g = GlobalBinding::from_binding(b, offsets[pair.scan]);
                    blocks.push(ResidualBlock::new(
                        g.ids().to_vec(),
                        config.lambda_depth,
                        Box::new(PointToPlane {
                            binding: g,
                            v: scans[pair.scan].mesh.vertices[pair.vertex as usize],
                            n: scans[pair.scan].mesh.normals[pair.vertex as usize],
                            target: pair.target,
                            post,
                        }),
                    ));
                }
            }
            for set in &corr.silhouette {
                let live = &pool[&set.frame];
                let cam = frames[set.frame].intrinsics;
                let positions: Vec<Point3<f64>> = set
                    .vertices
                    .iter()
                    .map(|bv| deformed[bv.scan].vertices[bv.vertex as usize])
                    .collect();
                let posts = live_rigids(live, &positions);
                for (bv, post) in set.vertices.iter().zip(posts) {
                    let Some(post) = post else { continue };
                    let Some(b) = bundle_bindings[bv.scan].0[bv.vertex as usize].as_ref()
                    else {
                        continue;
                    };
                    let g = GlobalBinding::from_binding(b, offsets[bv.scan]);
                    blocks.push(ResidualBlock::new(
                        g.ids().to_vec(),
                        config.lambda_silhouette,
                        Box::new(SilhouettePull {
                            binding: g,
                            v: scans[bv.scan].mesh.vertices[bv.vertex as usize],
                            post,
                            dt: &set.dt,
                            camera: cam,
                        }),
                    ));
                }
            }
            for (scan, &offset) in scans.iter().zip(&offsets) {
                push_smooth_blocks(
                    &mut blocks,
                    scan.bundle_graph.as_ref().expect("populated"),
                    offset,
                    config.lambda_smooth,
                );
            }
            let step = gauss_newton_step(&blocks, &params, &config.solver)?;
            for (scan, &offset) in scans.iter_mut().zip(&offsets) {
                let g = scan.bundle_graph.as_mut().expect("populated");
                let n = g.nodes.len();
                set_params(g, &step.params[offset as usize..offset as usize + n]);
            }
        }

        // Half-step over the live warps, scan alignments frozen: residuals
        // act on the freshly deformed vertices.
        let deformed: Vec<TriangleMesh> = scans.iter().map(deformed_mesh).collect();
        let active = keys.active_frames();
        {
            let mut live_offsets = Vec::with_capacity(active.len());
            let mut params: Vec<DualQuat> = Vec::new();
            for &f in &active {
                live_offsets.push(params.len() as u32);
                params.extend(params_of(&pool[&f]));
            }
            let offset_of = |frame: usize| {
                active
                    .iter()
                    .position(|&f| f == frame)
                    .map(|i| live_offsets[i])
            };
            let mut blocks: Vec<ResidualBlock> = Vec::new();
            for set in &corr.depth {
                let Some(off) = offset_of(set.frame) else { continue };
                let live = &pool[&set.frame];
                let positions: Vec<Point3<f64>> = set
                    .pairs
                    .iter()
                    .map(|p| deformed[p.scan].vertices[p.vertex as usize])
                    .collect();
                let bindings = live.bind_points(&positions);
                for (pair, b) in set.pairs.iter().zip(bindings.0.iter()) {
                    let Some(b) = b.as_ref() else { continue };
                    let g = GlobalBinding::from_binding(b, off);
                    blocks.push(ResidualBlock::new(
                        g.ids().to_vec(),
                        config.lambda_depth,
                        Box::new(PointToPlane {
                            binding: g,
                            v: deformed[pair.scan].vertices[pair.vertex as usize],
                            n: deformed[pair.scan].normals[pair.vertex as usize],
                            target: pair.target,
                            post: RigidTransform::identity(),
                        }),
                    ));
                }
            }
            for set in &corr.silhouette {
                let Some(off) = offset_of(set.frame) else { continue };
                let live = &pool[&set.frame];
                let cam = frames[set.frame].intrinsics;
                let positions: Vec<Point3<f64>> = set
                    .vertices
                    .iter()
                    .map(|bv| deformed[bv.scan].vertices[bv.vertex as usize])
                    .collect();
                let bindings = live.bind_points(&positions);
                for (bv, b) in set.vertices.iter().zip(bindings.0.iter()) {
                    let Some(b) = b.as_ref() else { continue };
                    let g = GlobalBinding::from_binding(b, off);
                    blocks.push(ResidualBlock::new(
                        g.ids().to_vec(),
                        config.lambda_silhouette,
                        Box::new(SilhouettePull {
                            binding: g,
                            v: deformed[bv.scan].vertices[bv.vertex as usize],
                            post: RigidTransform::identity(),
                            dt: &set.dt,
                            camera: cam,
                        }),
                    ));
                }
            }
            for (&f, &off) in active.iter().zip(&live_offsets) {
                push_smooth_blocks(&mut blocks, &pool[&f], off, config.lambda_smooth);
            }
            let step = gauss_newton_step(&blocks, &params, &config.solver)?;
            for (&f, &off) in active.iter().zip(&live_offsets) {
                let g = pool.get_mut(&f).expect("inserted above");
                let n = g.nodes.len();
                set_params(g, &step.params[off as usize..off as usize + n]);
            }
        }

        let live_now: Vec<(usize, DeformationGraph)> = active
            .iter()
            .map(|&f| (f, pool[&f].clone()))
            .collect();
        let mut row = eval_bundle_energy(&scans, &live_now, &corr, frames, config);
        row.iteration = iteration;
        energies.push(row);
    }

    let live_warps: Vec<(usize, DeformationGraph)> = keys
        .active_frames()
        .into_iter()
        .map(|f| {
            let g = pool.remove(&f).expect("active frames are pooled");
            (f, g)
        })
        .collect();
    Ok(BundleState {
        scans,
        live_warps,
        keys,
        energies,
        config: config.clone(),
    })
}
