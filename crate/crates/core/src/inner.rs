//! Volumetric refinement of the coarse body model: pull its vertices onto
//! the fused surface's zero level set in the reference frame.
//!
//! The correction shares the node graph used by tracking, so refined
//! corrections carry over into live-frame warps. Each refinement step
//! minimizes the squared trilinear field sample of every observable warped
//! vertex plus edge smoothness, with one damped Gauss-Newton step; vertices
//! that fall in unobserved space sit out that step.

use crate::graph::{warp_mesh_lenient, DeformationGraph, GraphError, VertexBindings};
use crate::mesh::TriangleMesh;
use crate::solver::residuals::{GlobalBinding, SmoothEdge, TsdfPull};
use crate::solver::{gauss_newton_step, ResidualBlock, SolverError, SolverSettings};
use crate::tsdf::{sample_tsdf, TsdfVolume};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InnerError {
    #[error(
        "only {observed} of {total} body-model vertices fall in observed \
         volume; the model does not match the fused surface"
    )]
    MostlyUnobserved { observed: usize, total: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Coarse body model plus its accumulated volumetric correction.
#[derive(Debug, Clone)]
pub struct InnerModelState {
    /// The initial model; never mutated.
    pub base_mesh: TriangleMesh,
    /// Correction warp, shared with frame tracking.
    pub correction_graph: DeformationGraph,
    /// `base_mesh` warped by the current correction; same vertex count.
    pub corrected_mesh: TriangleMesh,
}

impl InnerModelState {
    pub fn new(base_mesh: TriangleMesh, correction_graph: DeformationGraph) -> Self {
        let corrected_mesh = warp_mesh_lenient(&correction_graph, &base_mesh);
        InnerModelState {
            base_mesh,
            correction_graph,
            corrected_mesh,
        }
    }
}

/// Outcome of one [`refine_inner_model`] call.
#[derive(Debug, Clone)]
pub struct RefineStats {
    /// Total energy before the first step, then after each step.
    pub energies: Vec<f64>,
    /// Vertices contributing to the final step.
    pub observed: usize,
    pub total: usize,
}

fn observable(
    state: &InnerModelState,
    bindings: &VertexBindings,
    volume: &TsdfVolume,
) -> Vec<u32> {
    state
        .base_mesh
        .vertices
        .par_iter()
        .zip(bindings.0.par_iter())
        .enumerate()
        .filter_map(|(i, (v, binding))| {
            let b = binding.as_ref()?;
            let t = state.correction_graph.blend_binding(b).ok()?;
            match sample_tsdf(volume, &t.apply(v)) {
                Ok(Some(_)) => Some(i as u32),
                _ => None,
            }
        })
        .collect()
}

/// Runs `iterations` damped Gauss-Newton steps pulling the warped body
/// model onto the volume's zero level set, balancing per-vertex field
/// magnitude against graph edge smoothness. The correction graph and the
/// corrected mesh are updated in place.
///
/// Errors when more than 90% of the vertices fall in unobserved volume,
/// which signals that the model and the fused surface do not match.
pub fn refine_inner_model(
    state: &mut InnerModelState,
    volume: &TsdfVolume,
    lambda_smooth: f64,
    iterations: usize,
) -> Result<RefineStats, InnerError> {
    let total = state.base_mesh.vertices.len();
    let bindings = state.correction_graph.bind_points(&state.base_mesh.vertices);
    let settings = SolverSettings::default();
    let mut energies = Vec::new();
    let mut observed = 0;

    for iter in 0..iterations {
        let live = observable(state, &bindings, volume);
        observed = live.len();
        if (total - observed) * 10 > total * 9 {
            return Err(InnerError::MostlyUnobserved { observed, total });
        }

        let mut blocks: Vec<ResidualBlock> = Vec::with_capacity(observed);
        for &i in &live {
            let b = bindings.0[i as usize].as_ref().expect("observable is bound");
            let binding = GlobalBinding::from_binding(b, 0);
            blocks.push(ResidualBlock::new(
                binding.ids().to_vec(),
                1.0,
                Box::new(TsdfPull {
                    binding,
                    v: state.base_mesh.vertices[i as usize],
                    volume,
                }),
            ));
        }
        for (i, node) in state.correction_graph.nodes.iter().enumerate() {
            for &j in &node.neighbors {
                blocks.push(ResidualBlock::new(
                    vec![i as u32, j],
                    lambda_smooth,
                    Box::new(SmoothEdge {
                        block_i: i as u32,
                        block_j: j,
                        xj: state.correction_graph.nodes[j as usize].position,
                    }),
                ));
            }
        }

        let params: Vec<_> = state
            .correction_graph
            .nodes
            .iter()
            .map(|n| n.transform)
            .collect();
        let step = gauss_newton_step(&blocks, &params, &settings)?;
        if iter == 0 {
            energies.push(step.energy_before);
        }
        if step.accepted {
            for (node, p) in state.correction_graph.nodes.iter_mut().zip(&step.params) {
                node.transform = *p;
            }
        }
        energies.push(step.energy_after);
    }

    state.corrected_mesh = warp_mesh_lenient(&state.correction_graph, &state.base_mesh);
    Ok(RefineStats {
        energies,
        observed,
        total,
    })
}
