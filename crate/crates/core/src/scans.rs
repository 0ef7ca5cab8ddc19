//! Orientation-driven chunking of a tracked sequence, and fusion of each
//! chunk into a partial scan posed in the reference frame.
//!
//! A subject turning in front of a fixed camera exposes one side at a time.
//! Fusing the whole turn into one volume lets small per-frame motion errors
//! accumulate into a smeared surface, so the sequence is instead cut into
//! runs of similar facing direction. Each run is fused independently into a
//! partial scan; stitching the scans back together is a later, global
//! alignment step that owns the [`PartialScan::bundle_graph`] slot.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Point3, Vector3};
use rayon::prelude::*;

use crate::frame::DepthFrame;
use crate::graph::DeformationGraph;
use crate::mesh::{read_ply, write_ply, MeshError, TriangleMesh};
use crate::tsdf::{
    extract_mesh, integrate_depth_cached, TsdfError, TsdfVolume, VoxelBindings,
};

/// How many chunks a full turn is cut into when the caller has no opinion.
pub const DEFAULT_CHUNK_COUNT: usize = 5;

/// Largest credible change of facing direction between consecutive frames,
/// in degrees. Tracked sequences move a few degrees per frame; a bigger jump
/// means tracking failed or frames were dropped, and the unwrapped track
/// would be ambiguous.
pub const MAX_YAW_STEP_DEGREES: f64 = 30.0;

/// Below this total rotation the subject never showed their back, so the
/// merged model cannot close; splitting still works but callers are warned.
pub const MIN_FULL_TURN_DEGREES: f64 = 300.0;

#[derive(Debug, thiserror::Error)]
pub enum ScanError {
    #[error("facing estimation needs at least 3 nodes spanning a plane, got a degenerate set of {0}")]
    DegenerateNodes(usize),
    #[error("orientation track has no frames")]
    EmptyTrack,
    #[error("facing direction jumps {step:.1} degrees into frame {frame}; the turn cannot be followed")]
    YawJump { frame: usize, step: f64 },
    #[error("cannot split a sequence into {0} chunks")]
    BadChunkCount(usize),
    #[error("chunk has no frames to fuse")]
    EmptyChunk,
    #[error("chunk has {frames} frames but {graphs} deformation graphs")]
    MismatchedInputs { frames: usize, graphs: usize },
    #[error("frames within a chunk must share one node layout")]
    GraphMismatch,
    #[error("chunk {0} fused to an empty surface; its frames saw nothing inside the volume")]
    EmptyScan(usize),
    #[error("bad scan sidecar {path}: {reason}")]
    BadSidecar { path: PathBuf, reason: String },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Tsdf(#[from] TsdfError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// One side of the subject, fused over a contiguous run of frames and
/// expressed in the reference (first-frame) coordinates.
#[derive(Debug, Clone)]
pub struct PartialScan {
    /// Fused surface in reference coordinates. Never empty.
    pub mesh: TriangleMesh,
    /// Position of this chunk within the split sequence.
    pub chunk_index: usize,
    /// First and last source frame index, inclusive.
    pub frame_range: (usize, usize),
    /// Per-scan correction graph owned by the global alignment step;
    /// `None` until that step runs.
    pub bundle_graph: Option<DeformationGraph>,
}

/// Geometry of a fusion volume, detached from its (large) sample storage so
/// each chunk can allocate a fresh volume of identical shape.
#[derive(Debug, Clone, Copy)]
pub struct VolumeSpec {
    pub origin: Point3<f64>,
    pub voxel_size: f64,
    pub dims: [usize; 3],
    pub truncation: f64,
}

impl VolumeSpec {
    pub fn of(volume: &TsdfVolume) -> Self {
        VolumeSpec {
            origin: volume.origin,
            voxel_size: volume.voxel_size,
            dims: volume.dims,
            truncation: volume.truncation,
        }
    }

    /// A fresh, fully unobserved volume of this shape.
    pub fn allocate(&self) -> Result<TsdfVolume, TsdfError> {
        TsdfVolume::new(self.origin, self.voxel_size, self.dims, self.truncation)
    }
}

/// Least-squares facing direction of a deformation graph, in degrees.
///
/// Fits one rigid motion to what the graph does to its own node positions
/// (reference position against warped position), then reads the rotation
/// component about the vertical axis. Individual node transforms may
/// disagree — that is the point of a deformation graph — so the fit is the
/// best single summary of "how far has the subject turned".
pub fn estimate_orientation(graph: &DeformationGraph) -> Result<f64, ScanError> {
    let n = graph.nodes.len();
    if n < 3 {
        return Err(ScanError::DegenerateNodes(n));
    }
    let pairs: Vec<(Point3<f64>, Point3<f64>)> = graph
        .nodes
        .iter()
        .map(|node| {
            let moved = node.transform.to_rigid().apply(&node.position);
            (node.position, moved)
        })
        .collect();
    let inv = 1.0 / n as f64;
    let centroid_ref: Vector3<f64> =
        pairs.iter().map(|(a, _)| a.coords).sum::<Vector3<f64>>() * inv;
    let centroid_moved: Vector3<f64> =
        pairs.iter().map(|(_, b)| b.coords).sum::<Vector3<f64>>() * inv;

    let mut cross = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (a, b) in &pairs {
        let da = a.coords - centroid_ref;
        let db = b.coords - centroid_moved;
        cross += da * db.transpose();
        spread += da * da.transpose();
    }
    // Nodes on a line (or a point) leave the rotation about that line
    // unconstrained; detect via the second-largest spread direction.
    let spread_sv = spread.svd(false, false).singular_values;
    if spread_sv[1] <= spread_sv[0] * 1e-9 {
        return Err(ScanError::DegenerateNodes(n));
    }

    let svd = cross.svd(true, true);
    let u = svd.u.expect("svd of a 3x3 always yields u");
    let v_t = svd.v_t.expect("svd of a 3x3 always yields v_t");
    let mut rot = v_t.transpose() * u.transpose();
    if rot.determinant() < 0.0 {
        let flip = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        rot = v_t.transpose() * flip * u.transpose();
    }
    // Yaw of the fitted rotation: the angle of its projection onto
    // rotations about the vertical (y) axis.
    let yaw = (rot[(0, 2)] - rot[(2, 0)]).atan2(rot[(0, 0)] + rot[(2, 2)]);
    Ok(yaw.to_degrees())
}

/// Facing direction per frame, unwrapped into a continuous angle so a full
/// turn reads 0..360 rather than wrapping at ±180.
#[derive(Debug, Clone)]
pub struct OrientationTrack {
    /// One unwrapped yaw per frame, degrees.
    pub yaw_degrees: Vec<f64>,
}

impl OrientationTrack {
    /// Unwraps raw per-frame yaw readings (each in degrees, any branch).
    /// Consecutive frames are assumed to differ by the physically smallest
    /// turn; a step of [`MAX_YAW_STEP_DEGREES`] or more is rejected.
    pub fn from_raw_yaws(raw: &[f64]) -> Result<Self, ScanError> {
        if raw.is_empty() {
            return Err(ScanError::EmptyTrack);
        }
        let mut yaw_degrees = Vec::with_capacity(raw.len());
        yaw_degrees.push(raw[0]);
        for (frame, &reading) in raw.iter().enumerate().skip(1) {
            let prev = yaw_degrees[frame - 1];
            let mut step = reading - prev;
            step -= 360.0 * (step / 360.0).round();
            if step.abs() >= MAX_YAW_STEP_DEGREES {
                return Err(ScanError::YawJump { frame, step });
            }
            yaw_degrees.push(prev + step);
        }
        Ok(OrientationTrack { yaw_degrees })
    }

    /// Estimates and unwraps the facing direction of a tracked sequence.
    pub fn from_graphs(graphs: &[DeformationGraph]) -> Result<Self, ScanError> {
        let raw = graphs
            .iter()
            .map(estimate_orientation)
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_raw_yaws(&raw)
    }

    pub fn len(&self) -> usize {
        self.yaw_degrees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.yaw_degrees.is_empty()
    }

    /// Total rotation covered, degrees (absolute).
    pub fn span_degrees(&self) -> f64 {
        (self.yaw_degrees[self.len() - 1] - self.yaw_degrees[0]).abs()
    }
}

/// Cuts a sequence into `n_chunks` contiguous runs covering equal amounts of
/// rotation (not equal numbers of frames: a subject turning unevenly gets
/// more frames in the chunks where they lingered).
///
/// The returned ranges are disjoint, in order, and cover every frame
/// exactly once. A track spanning less than [`MIN_FULL_TURN_DEGREES`] still
/// splits but logs a warning, since the merged model cannot close.
pub fn split_sequence(
    track: &OrientationTrack,
    n_chunks: usize,
) -> Result<Vec<Range<usize>>, ScanError> {
    if n_chunks == 0 {
        return Err(ScanError::BadChunkCount(n_chunks));
    }
    let len = track.len();
    if len == 0 {
        return Err(ScanError::EmptyTrack);
    }
    let first = track.yaw_degrees[0];
    let last = track.yaw_degrees[len - 1];
    let direction = if last >= first { 1.0 } else { -1.0 };
    // Rotation walked since the first frame, signed so it grows toward the
    // overall direction of the turn regardless of which way the subject spun.
    let walked: Vec<f64> = track
        .yaw_degrees
        .iter()
        .map(|y| (y - first) * direction)
        .collect();
    let span = walked[len - 1];
    if span < MIN_FULL_TURN_DEGREES {
        log::warn!(
            "sequence covers only {span:.0} degrees of rotation \
             (< {MIN_FULL_TURN_DEGREES:.0}); the merged model will not close"
        );
    }

    let mut cuts = Vec::with_capacity(n_chunks + 1);
    cuts.push(0usize);
    for s in 1..n_chunks {
        let boundary = span * s as f64 / n_chunks as f64;
        let cut = walked
            .iter()
            .position(|&w| w >= boundary)
            .unwrap_or(len)
            // A wobble may dip below an already-passed boundary; keep the
            // cuts monotone so the ranges stay contiguous.
            .max(cuts[s - 1]);
        cuts.push(cut);
    }
    cuts.push(len);
    Ok((0..n_chunks).map(|s| cuts[s]..cuts[s + 1]).collect())
}

/// Fuses one chunk of frames into a fresh volume and extracts its surface.
///
/// `graphs[i]` is the tracked deformation carrying reference coordinates
/// into the pose of `frames[i]`. All graphs of a chunk must share one node
/// layout (tracking only updates transforms, never node positions), which
/// lets the voxel-to-node bindings be computed once and reused per frame.
pub fn fuse_chunk(
    frames: &[DepthFrame],
    graphs: &[DeformationGraph],
    spec: &VolumeSpec,
    chunk_index: usize,
) -> Result<PartialScan, ScanError> {
    if frames.is_empty() {
        return Err(ScanError::EmptyChunk);
    }
    if frames.len() != graphs.len() {
        return Err(ScanError::MismatchedInputs {
            frames: frames.len(),
            graphs: graphs.len(),
        });
    }
    if graphs
        .iter()
        .any(|g| g.nodes.len() != graphs[0].nodes.len())
    {
        return Err(ScanError::GraphMismatch);
    }

    let mut volume = spec.allocate()?;
    let bindings = VoxelBindings::compute(&volume, &graphs[0]);
    for (frame, graph) in frames.iter().zip(graphs) {
        integrate_depth_cached(&mut volume, frame, graph, &bindings)?;
    }
    let mesh = extract_mesh(&volume);
    if mesh.vertex_count() == 0 {
        return Err(ScanError::EmptyScan(chunk_index));
    }
    Ok(PartialScan {
        mesh,
        chunk_index,
        frame_range: (
            frames[0].frame_index,
            frames[frames.len() - 1].frame_index,
        ),
        bundle_graph: None,
    })
}

/// Fuses every chunk of a split sequence, in parallel.
pub fn fuse_chunks(
    frames: &[DepthFrame],
    graphs: &[DeformationGraph],
    ranges: &[Range<usize>],
    spec: &VolumeSpec,
) -> Result<Vec<PartialScan>, ScanError> {
    ranges
        .par_iter()
        .enumerate()
        .map(|(i, r)| fuse_chunk(&frames[r.clone()], &graphs[r.clone()], spec, i))
        .collect()
}

fn scan_stem(chunk_index: usize) -> String {
    format!("chunk_{chunk_index:03}")
}

/// Writes a scan as `chunk_NNN.ply` plus a `chunk_NNN.txt` sidecar holding
/// the chunk index and frame range. Returns the mesh path.
pub fn save_partial_scan(scan: &PartialScan, dir: &Path) -> Result<PathBuf, ScanError> {
    let stem = scan_stem(scan.chunk_index);
    let mesh_path = dir.join(format!("{stem}.ply"));
    write_ply(&scan.mesh, &mesh_path)?;
    let sidecar = format!(
        "chunk_index {}\nframe_range {} {}\n",
        scan.chunk_index, scan.frame_range.0, scan.frame_range.1
    );
    fs::write(dir.join(format!("{stem}.txt")), sidecar)?;
    Ok(mesh_path)
}

/// Reads back a scan written by [`save_partial_scan`]. The alignment graph
/// is not persisted; the loaded scan starts with `bundle_graph: None`.
pub fn load_partial_scan(dir: &Path, chunk_index: usize) -> Result<PartialScan, ScanError> {
    let stem = scan_stem(chunk_index);
    let mesh = read_ply(&dir.join(format!("{stem}.ply")))?;
    let sidecar_path = dir.join(format!("{stem}.txt"));
    let text = fs::read_to_string(&sidecar_path)?;
    let bad = |reason: &str| ScanError::BadSidecar {
        path: sidecar_path.clone(),
        reason: reason.to_string(),
    };

    let mut stored_index: Option<usize> = None;
    let mut frame_range: Option<(usize, usize)> = None;
    for line in text.lines() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["chunk_index", i] => {
                stored_index = Some(i.parse().map_err(|_| bad("unreadable chunk_index"))?);
            }
            ["frame_range", a, b] => {
                let first = a.parse().map_err(|_| bad("unreadable frame_range"))?;
                let last = b.parse().map_err(|_| bad("unreadable frame_range"))?;
                frame_range = Some((first, last));
            }
            [] => {}
            _ => return Err(bad("unrecognized line")),
        }
    }
    let stored_index = stored_index.ok_or_else(|| bad("missing chunk_index"))?;
    if stored_index != chunk_index {
        return Err(bad(&format!(
            "chunk_index {stored_index} does not match file name"
        )));
    }
    let frame_range = frame_range.ok_or_else(|| bad("missing frame_range"))?;
    Ok(PartialScan {
        mesh,
        chunk_index,
        frame_range,
        bundle_graph: None,
    })
}
