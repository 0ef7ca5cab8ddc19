//! Reconstruction engine for full-body scans captured with a single fixed
//! RGBD camera while the subject slowly turns in place.
//!
//! The engine tracks a deformable double-layer model (a coarse prior shape
//! plus the incrementally fused surface) through the depth stream, fuses the
//! depth into a reference-frame TSDF volume, splits the turn into
//! orientation chunks that become partial scans, closes the loop over all
//! scans with a lightweight bundle adjustment, and finally merges and
//! textures a single watertight mesh.
//!
//! Modules follow the data flow:
//!
//! * [`mesh`], [`camera`], [`frame`] — geometry and sensor data containers.
//! * [`dualquat`], [`graph`] — dual-quaternion warp fields on embedded
//!   deformation node graphs.
//! * [`tsdf`] — truncated signed distance volume: integration, sampling,
//!   marching-cubes extraction.
//! * [`solver`] — sparse Gauss-Newton with a block-Jacobi PCG inner solver,
//!   plus every residual term used by the energies below.
//! * [`tracking`] — per-frame double-layer non-rigid ICP.
//! * [`inner`] — volumetric refinement of the prior ("inner") model.
//! * [`scans`] — orientation estimation, chunk splitting, per-chunk fusion.
//! * [`bundle`] — loop-closure bundle adjustment over partial scans and the
//!   merged watertight output.
//! * [`texture`] — multi-frame vertex color blending.
//! * [`raster`] — software z-buffer rasterizer shared by synthesis,
//!   silhouette rendering and visibility tests.
//! * [`synth`] — synthetic turntable sequences, prior generation,
//!   measurement utilities and sequence directory I/O.
//! * [`pipeline`] — configuration, orchestration and reporting.

pub mod bundle;
pub mod camera;
pub mod dt;
pub mod dualquat;
pub mod frame;
pub mod graph;
pub mod grid;
pub mod inner;
pub mod mesh;
pub mod raster;
pub mod scans;
pub mod solver;
pub mod synth;
pub mod tracking;
pub mod tsdf;

pub use camera::Intrinsics;
pub use dualquat::{DualQuat, RigidTransform};
pub use frame::DepthFrame;
pub use graph::{DeformationGraph, Node, VertexBindings};
pub use mesh::TriangleMesh;
pub use tsdf::TsdfVolume;
