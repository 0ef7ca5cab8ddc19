//! Per-frame non-rigid registration of the double-layer model.
//!
//! Both layers — the incrementally fused surface ("outer") and the coarse
//! body model ("inner") — deform through one shared node graph. Each frame
//! runs a few rounds of projective correspondence search followed by one
//! damped Gauss-Newton step over the graph transforms, minimizing
//! point-to-plane misalignment of both layers plus edge smoothness.

use crate::dualquat::DualQuat;
use crate::frame::DepthFrame;
use crate::graph::{DeformationGraph, GraphError, VertexBindings};
use crate::mesh::TriangleMesh;
use crate::solver::residuals::{GlobalBinding, PointToPlane, SmoothEdge};
use crate::solver::{gauss_newton_step, ResidualBlock, SolverError, SolverSettings};
use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use thiserror::Error;

/// Discontinuity guard for depth-map normals (meters).
pub const NORMAL_MAX_JUMP: f64 = 0.05;

/// Minimum `-n.z` of a warped model normal for its vertex to count as
/// observable. Surfaces seen at more than ~75 degrees incidence sit on the
/// silhouette, where depth is foreshortened and projective pairing tends to
/// latch onto the wrong side of a curved surface.
pub const MIN_FACING: f64 = 0.26;

/// Which layer of the double-layer model a correspondence belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Outer,
    Inner,
}

/// A surface vertex paired with its projective depth-map counterpart.
#[derive(Debug, Clone, Copy)]
pub struct CorrespondencePair {
    pub source_vertex: u32,
    pub layer: Layer,
    /// Backprojected from a masked, valid-depth pixel.
    pub target_point: Point3<f64>,
    pub target_valid: bool,
}

#[derive(Debug, Clone)]
pub struct TrackingConfig {
    pub lambda_outer: f64,
    /// Initial inner-layer weight; ramps down across the ICP rounds.
    pub lambda_inner: f64,
    pub lambda_smooth: f64,
    pub icp_iterations: usize,
    /// Fraction of `lambda_inner` still applied in the final round; the
    /// effective weight ramps linearly from 1 to this across the rounds.
    pub inner_decay: f64,
    /// Reject pairs farther apart than this (meters).
    pub max_corr_distance: f64,
    /// Reject pairs whose model and depth normals disagree by more (degrees).
    pub max_normal_angle: f64,
    /// Mean initial pair distance beyond which the frame is treated as a
    /// large motion and tracked with twice the rounds.
    pub large_motion_threshold: f64,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        TrackingConfig {
            lambda_outer: 1.0,
            lambda_inner: 1.0,
            lambda_smooth: 5.0,
            icp_iterations: 5,
            inner_decay: 0.2,
            max_corr_distance: 0.025,
            max_normal_angle: 45.0,
            large_motion_threshold: 0.01,
        }
    }
}

impl TrackingConfig {
    pub fn validate(&self) -> Result<(), TrackingError> {
        let weights_ok = self.lambda_outer >= 0.0
            && self.lambda_inner >= 0.0
            && self.lambda_smooth >= 0.0
            && self.inner_decay >= 0.0;
        if !weights_ok || self.icp_iterations < 1 {
            return Err(TrackingError::BadConfig);
        }
        Ok(())
    }

    /// Effective inner-layer weight in round `k` of `rounds`.
    fn inner_weight(&self, k: usize, rounds: usize) -> f64 {
        if rounds <= 1 {
            return self.lambda_inner;
        }
        let t = k as f64 / (rounds - 1) as f64;
        self.lambda_inner * (1.0 + (self.inner_decay - 1.0) * t)
    }
}

#[derive(Debug, Error)]
pub enum TrackingError {
    #[error("tracking lost at frame {frame_index}: only {found} correspondences")]
    Lost { frame_index: usize, found: usize },
    #[error("weights must be non-negative and icp_iterations >= 1")]
    BadConfig,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Outcome of tracking one frame.
#[derive(Debug, Clone)]
pub struct TrackResult {
    /// The input graph with updated node transforms.
    pub graph: DeformationGraph,
    /// ICP rounds actually run (doubled on large motion).
    pub rounds: usize,
    /// Pair counts of the final search round (outer, inner).
    pub pair_counts: (usize, usize),
    /// Mean pair distance of the first search round.
    pub mean_initial_distance: f64,
    /// Weighted total energy after each accepted step.
    pub energies: Vec<f64>,
}

/// Per-layer totals of the tracking energy at the current graph state.
#[derive(Debug, Clone, Copy)]
pub struct TrackingEnergy {
    pub outer: f64,
    pub inner: f64,
    pub smooth: f64,
    /// lambda-weighted sum of the three terms.
    pub total: f64,
}

fn find_with_normals(
    surface: &TriangleMesh,
    bindings: &VertexBindings,
    graph: &DeformationGraph,
    frame: &DepthFrame,
    normals: &[Option<Vector3<f64>>],
    config: &TrackingConfig,
    layer: Layer,
) -> Vec<CorrespondencePair> {
    let cos_gate = config.max_normal_angle.to_radians().cos();
    surface
        .vertices
        .par_iter()
        .zip(surface.normals.par_iter())
        .zip(bindings.0.par_iter())
        .enumerate()
        .filter_map(|(i, ((v, n), binding))| {
            let b = binding.as_ref()?;
            let t = graph.blend_binding(b).ok()?;
            let vhat = t.apply(v);
            let nhat = t.rotate(n);
            // Visibility: a vertex whose outward normal faces away from the
            // camera (or grazes it) cannot be the surface the depth sensor
            // saw, even if the angle gate below would pass on tangential
            // agreement alone.
            if nhat.z >= -MIN_FACING {
                return None;
            }
            let (pu, pv) = frame.intrinsics.project_to_pixel(&vhat)?;
            if !frame.mask_at(pu as i64, pv as i64) {
                return None;
            }
            let target = frame.point_at(pu, pv)?;
            if (vhat - target).norm() > config.max_corr_distance {
                return None;
            }
            let depth_normal = normals[frame.idx(pu, pv)]?;
            if nhat.dot(&depth_normal) < cos_gate {
                return None;
            }
            Some(CorrespondencePair {
                source_vertex: i as u32,
                layer,
                target_point: target,
                target_valid: true,
            })
        })
        .collect()
}

/// Projective data association: every bound vertex is warped, projected
/// into the frame, and paired with the backprojected depth point under its
/// pixel. Pairs failing the visibility, distance, normal-angle, mask or
/// validity gates are omitted. The depth normal is used only for gating;
/// residuals use the warped model normal.
pub fn find_correspondences(
    surface: &TriangleMesh,
    graph: &DeformationGraph,
    frame: &DepthFrame,
    config: &TrackingConfig,
    layer: Layer,
) -> Vec<CorrespondencePair> {
    let bindings = graph.bind_points(&surface.vertices);
    let normals = frame.normal_map(NORMAL_MAX_JUMP);
    find_with_normals(surface, &bindings, graph, frame, &normals, config, layer)
}

fn push_data_blocks<'a>(
    blocks: &mut Vec<ResidualBlock<'a>>,
    surface: &TriangleMesh,
    bindings: &VertexBindings,
    pairs: &[CorrespondencePair],
    weight: f64,
) {
    for pair in pairs {
        if !pair.target_valid {
            continue;
        }
        let i = pair.source_vertex as usize;
        let Some(b) = bindings.0[i].as_ref() else {
            continue;
        };
        let binding = GlobalBinding::from_binding(b, 0);
        blocks.push(ResidualBlock::new(
            binding.ids().to_vec(),
            weight,
            Box::new(PointToPlane {
                binding,
                v: surface.vertices[i],
                n: surface.normals[i],
                target: pair.target_point,
                post: crate::dualquat::RigidTransform::identity(),
            }),
        ));
    }
}

fn push_smooth_blocks<'a>(blocks: &mut Vec<ResidualBlock<'a>>, graph: &DeformationGraph, weight: f64) {
    for (i, node) in graph.nodes.iter().enumerate() {
        for &j in &node.neighbors {
            blocks.push(ResidualBlock::new(
                vec![i as u32, j],
                weight,
                Box::new(SmoothEdge {
                    block_i: i as u32,
                    block_j: j,
                    xj: graph.nodes[j as usize].position,
                }),
            ));
        }
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

/// Tracks one depth frame: `icp_iterations` rounds (doubled for large
/// motions) of correspondence search over both layers plus one Gauss-Newton
/// step each. The inner layer's weight ramps down across the rounds; when
/// it is zero the inner mesh is never touched, reducing to single-layer
/// tracking. Fewer than 6 total correspondences signal tracking loss.
pub fn track_frame(
    outer: &TriangleMesh,
    inner: &TriangleMesh,
    graph: &DeformationGraph,
    frame: &DepthFrame,
    config: &TrackingConfig,
) -> Result<TrackResult, TrackingError> {
    config.validate()?;
    let mut graph = graph.clone();
    let outer_bindings = graph.bind_points(&outer.vertices);
    let use_inner = config.lambda_inner > 0.0;
    let inner_bindings = if use_inner {
        graph.bind_points(&inner.vertices)
    } else {
        VertexBindings::default()
    };
    let normals = frame.normal_map(NORMAL_MAX_JUMP);

    let settings = SolverSettings::default();
    let mut rounds = config.icp_iterations;
    let mut mean_initial_distance = 0.0;
    let mut energies = Vec::new();
    let mut pair_counts = (0usize, 0usize);

    let mut k = 0;
    while k < rounds {
        let outer_pairs = find_with_normals(
            outer,
            &outer_bindings,
            &graph,
            frame,
            &normals,
            config,
            Layer::Outer,
        );
        let inner_pairs = if use_inner {
            find_with_normals(
                inner,
                &inner_bindings,
                &graph,
                frame,
                &normals,
                config,
                Layer::Inner,
            )
        } else {
            Vec::new()
        };
        pair_counts = (outer_pairs.len(), inner_pairs.len());
        if outer_pairs.len() + inner_pairs.len() < 6 {
            return Err(TrackingError::Lost {
                frame_index: frame.frame_index,
                found: outer_pairs.len() + inner_pairs.len(),
            });
        }

        if k == 0 {
            let binder = |pairs: &[CorrespondencePair], mesh: &TriangleMesh, b: &VertexBindings| {
                pairs
                    .iter()
                    .filter_map(|p| {
                        let i = p.source_vertex as usize;
                        let t = graph.blend_binding(b.0[i].as_ref()?).ok()?;
                        Some((t.apply(&mesh.vertices[i]) - p.target_point).norm())
                    })
                    .sum::<f64>()
            };
            let total = binder(&outer_pairs, outer, &outer_bindings)
                + if use_inner {
                    binder(&inner_pairs, inner, &inner_bindings)
                } else {
                    0.0
                };
            let n = (outer_pairs.len() + inner_pairs.len()) as f64;
            mean_initial_distance = total / n;
            if mean_initial_distance > config.large_motion_threshold {
                rounds *= 2;
            }
        }

        let mut blocks: Vec<ResidualBlock> = Vec::new();
        push_data_blocks(&mut blocks, outer, &outer_bindings, &outer_pairs, config.lambda_outer);
        if use_inner {
            push_data_blocks(
                &mut blocks,
                inner,
                &inner_bindings,
                &inner_pairs,
                config.inner_weight(k, rounds),
            );
        }
        push_smooth_blocks(&mut blocks, &graph, config.lambda_smooth);

        let params = params_of(&graph);
        let step = gauss_newton_step(&blocks, &params, &settings)?;
        if step.accepted {
            set_params(&mut graph, &step.params);
            energies.push(step.energy_after);
        } else {
            energies.push(step.energy_before);
        }
        k += 1;
    }

    Ok(TrackResult {
        graph,
        rounds,
        pair_counts,
        mean_initial_distance,
        energies,
    })
}

/// Unweighted per-term energies of the given correspondence set at the
/// current graph state, plus the lambda-weighted total. The inner weight is
/// taken at its initial (un-decayed) value.
pub fn eval_tracking_energy(
    outer: &TriangleMesh,
    inner: &TriangleMesh,
    graph: &DeformationGraph,
    pairs: &[CorrespondencePair],
    config: &TrackingConfig,
) -> Result<TrackingEnergy, TrackingError> {
    let mut e_outer = 0.0;
    let mut e_inner = 0.0;
    for pair in pairs {
        if !pair.target_valid {
            continue;
        }
        let (mesh, acc) = match pair.layer {
            Layer::Outer => (outer, &mut e_outer),
            Layer::Inner => (inner, &mut e_inner),
        };
        let i = pair.source_vertex as usize;
        let b = graph
            .bind_point(&mesh.vertices[i])
            .ok_or(GraphError::OutsideSupport)?;
        let t = graph.blend_binding(&b)?;
        let vhat = t.apply(&mesh.vertices[i]);
        let nhat = t.rotate(&mesh.normals[i]);
        let r = nhat.dot(&(vhat - pair.target_point));
        *acc += r * r;
    }
    let mut e_smooth = 0.0;
    for (i, node) in graph.nodes.iter().enumerate() {
        let ti = graph.nodes[i].transform.to_rigid();
        for &j in &node.neighbors {
            let xj = graph.nodes[j as usize].position;
            let tj = graph.nodes[j as usize].transform.to_rigid();
            e_smooth += (ti.apply(&xj) - tj.apply(&xj)).norm_squared();
        }
    }
    Ok(TrackingEnergy {
        outer: e_outer,
        inner: e_inner,
        smooth: e_smooth,
        total: config.lambda_outer * e_outer
            + config.lambda_inner * e_inner
            + config.lambda_smooth * e_smooth,
    })
}
