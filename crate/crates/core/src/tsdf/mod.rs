//! Truncated signed distance volume in the reference frame.
//!
//! Depth maps are fused by warping each voxel center into the live frame
//! through a deformation graph, projecting it into the camera, and
//! averaging the truncated projective distance (depth minus warped z) into
//! the voxel. Surfaces come back out through trilinear sampling, central
//! difference gradients, and marching cubes.

mod mc;

pub use mc::extract_mesh;

use crate::frame::DepthFrame;
use crate::graph::{Binding, DeformationGraph};
use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

/// Weight accumulation cap: old observations stop counting once a voxel
/// has seen this many frames, keeping the volume responsive.
pub const MAX_WEIGHT: f32 = 64.0;

/// Truncation band as a multiple of voxel size.
pub const DEFAULT_TRUNCATION_FACTOR: f64 = 2.5;

#[derive(Debug, Error)]
pub enum TsdfError {
    #[error("volume dims must each be >= 2, got {0}x{1}x{2}")]
    BadDims(usize, usize, usize),
    #[error("voxel size and truncation must be positive")]
    BadScale,
    #[error("frame resolution {fw}x{fh} does not match its intrinsics {iw}x{ih}")]
    ResolutionMismatch {
        fw: usize,
        fh: usize,
        iw: usize,
        ih: usize,
    },
    #[error("point {0:?} outside the volume interior")]
    OutsideVolume(Point3<f64>),
    #[error("binding table holds {got} voxels, volume has {want}")]
    BindingMismatch { got: usize, want: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed volume dump: {0}")]
    Format(String),
}

/// Dense voxel grid of (truncated signed distance, accumulation weight).
/// `origin` is the center of voxel (0,0,0); stored distances are scaled to
/// [-1, 1] by the truncation band `truncation` (meters). Positive values
/// lie in front of the surface (toward the camera), negative behind.
#[derive(Debug, Clone)]
pub struct TsdfVolume {
    pub origin: Point3<f64>,
    pub voxel_size: f64,
    pub dims: [usize; 3],
    pub truncation: f64,
    pub tsdf: Vec<f32>,
    pub weight: Vec<f32>,
}

impl TsdfVolume {
    pub fn new(
        origin: Point3<f64>,
        voxel_size: f64,
        dims: [usize; 3],
        truncation: f64,
    ) -> Result<Self, TsdfError> {
        if dims.iter().any(|&d| d < 2) {
            return Err(TsdfError::BadDims(dims[0], dims[1], dims[2]));
        }
        if !(voxel_size > 0.0) || !(truncation > 0.0) {
            return Err(TsdfError::BadScale);
        }
        let n = dims[0] * dims[1] * dims[2];
        Ok(TsdfVolume {
            origin,
            voxel_size,
            dims,
            truncation,
            tsdf: vec![0.0; n],
            weight: vec![0.0; n],
        })
    }

    /// A volume whose voxel lattice covers `[min, max]` plus a margin of
    /// whole voxels on every side.
    pub fn enclosing(
        min: &Point3<f64>,
        max: &Point3<f64>,
        voxel_size: f64,
        margin_voxels: usize,
    ) -> Result<Self, TsdfError> {
        if !(voxel_size > 0.0) {
            return Err(TsdfError::BadScale);
        }
        let m = margin_voxels as f64;
        let origin = Point3::new(
            min.x - m * voxel_size,
            min.y - m * voxel_size,
            min.z - m * voxel_size,
        );
        let dims = [
            ((max.x - min.x) / voxel_size).ceil() as usize + 2 * margin_voxels + 1,
            ((max.y - min.y) / voxel_size).ceil() as usize + 2 * margin_voxels + 1,
            ((max.z - min.z) / voxel_size).ceil() as usize + 2 * margin_voxels + 1,
        ];
        Self::new(origin, voxel_size, dims, DEFAULT_TRUNCATION_FACTOR * voxel_size)
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Point3<f64> {
        Point3::new(
            self.origin.x + x as f64 * self.voxel_size,
            self.origin.y + y as f64 * self.voxel_size,
            self.origin.z + z as f64 * self.voxel_size,
        )
    }

    /// Continuous voxel coordinates of a metric point (voxel centers sit at
    /// integer coordinates).
    #[inline]
    pub fn grid_coords(&self, p: &Point3<f64>) -> Vector3<f64> {
        (p - self.origin) / self.voxel_size
    }

    /// Overwrites the volume with a clamped analytic signed distance field
    /// at weight 1. Positive distances are outside the solid.
    pub fn fill_from_sdf<F: Fn(&Point3<f64>) -> f64 + Sync>(&mut self, sdf: F) {
        let (dx, dy) = (self.dims[0], self.dims[1]);
        let origin = self.origin;
        let h = self.voxel_size;
        let mu = self.truncation;
        let plane = dx * dy;
        self.tsdf
            .par_chunks_mut(plane)
            .zip(self.weight.par_chunks_mut(plane))
            .enumerate()
            .for_each(|(z, (tsdf, weight))| {
                for y in 0..dy {
                    for x in 0..dx {
                        let p = Point3::new(
                            origin.x + x as f64 * h,
                            origin.y + y as f64 * h,
                            origin.z + z as f64 * h,
                        );
                        let d = (sdf(&p) / mu).clamp(-1.0, 1.0);
                        tsdf[x + dx * y] = d as f32;
                        weight[x + dx * y] = 1.0;
                    }
                }
            });
    }

    /// Writes the debug dump: a text header followed by little-endian f32
    /// (tsdf, weight) pairs with x varying fastest.
    pub fn write_dump(&self, path: &Path) -> Result<(), TsdfError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            w,
            "TSDF {} {} {} {} {} {} {} {}",
            self.dims[0],
            self.dims[1],
            self.dims[2],
            self.voxel_size,
            self.truncation,
            self.origin.x,
            self.origin.y,
            self.origin.z
        )?;
        for i in 0..self.voxel_count() {
            w.write_all(&self.tsdf[i].to_le_bytes())?;
            w.write_all(&self.weight[i].to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_dump(path: &Path) -> Result<Self, TsdfError> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut header = String::new();
        r.read_line(&mut header)?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 9 || fields[0] != "TSDF" {
            return Err(TsdfError::Format(format!("bad header {header:?}")));
        }
        let num = |s: &str| -> Result<f64, TsdfError> {
            s.parse()
                .map_err(|_| TsdfError::Format(format!("bad number {s:?}")))
        };
        let dims = [
            num(fields[1])? as usize,
            num(fields[2])? as usize,
            num(fields[3])? as usize,
        ];
        let mut vol = TsdfVolume::new(
            Point3::new(num(fields[6])?, num(fields[7])?, num(fields[8])?),
            num(fields[4])?,
            dims,
            num(fields[5])?,
        )?;
        let mut buf = vec![0u8; vol.voxel_count() * 8];
        r.read_exact(&mut buf)
            .map_err(|_| TsdfError::Format("truncated voxel data".into()))?;
        for (i, chunk) in buf.chunks_exact(8).enumerate() {
            vol.tsdf[i] = f32::from_le_bytes(chunk[0..4].try_into().unwrap());
            vol.weight[i] = f32::from_le_bytes(chunk[4..8].try_into().unwrap());
        }
        Ok(vol)
    }
}

/// Precomputed per-voxel blend bindings for one (volume, graph) pairing.
/// Voxels whose nearest node is farther than twice the graph radius are
/// outside the graph's support and stay `None`. Node transforms may change
/// between frames without invalidating the table; node positions may not.
pub struct VoxelBindings {
    pub data: Vec<Option<Binding>>,
}

impl VoxelBindings {
    pub fn compute(volume: &TsdfVolume, graph: &DeformationGraph) -> Self {
        let binder = graph.binder();
        let support = 2.0 * graph.radius;
        let (dx, dy) = (volume.dims[0], volume.dims[1]);
        let plane = dx * dy;
        let data: Vec<Option<Binding>> = (0..volume.dims[2])
            .into_par_iter()
            .flat_map_iter(|z| {
                let mut slab = Vec::with_capacity(plane);
                for y in 0..dy {
                    for x in 0..dx {
                        let c = volume.voxel_center(x, y, z);
                        let b = if binder.nearest_node_distance(&c) <= support {
                            binder.bind(&c)
                        } else {
                            None
                        };
                        slab.push(b);
                    }
                }
                slab
            })
            .collect();
        VoxelBindings { data }
    }
}

/// Fuses one depth frame into the volume through the graph's current
/// transforms (reference frame to live frame). See the module docs for the
/// per-voxel update rule.
pub fn integrate_depth(
    volume: &mut TsdfVolume,
    frame: &DepthFrame,
    graph: &DeformationGraph,
) -> Result<(), TsdfError> {
    let bindings = VoxelBindings::compute(volume, graph);
    integrate_depth_cached(volume, frame, graph, &bindings)
}

/// [`integrate_depth`] with bindings reused across frames.
pub fn integrate_depth_cached(
    volume: &mut TsdfVolume,
    frame: &DepthFrame,
    graph: &DeformationGraph,
    bindings: &VoxelBindings,
) -> Result<(), TsdfError> {
    if frame.depth.len() != frame.intrinsics.width * frame.intrinsics.height {
        return Err(TsdfError::ResolutionMismatch {
            fw: frame.depth.len() / frame.intrinsics.height.max(1),
            fh: frame.intrinsics.height,
            iw: frame.intrinsics.width,
            ih: frame.intrinsics.height,
        });
    }
    if bindings.data.len() != volume.voxel_count() {
        return Err(TsdfError::BindingMismatch {
            got: bindings.data.len(),
            want: volume.voxel_count(),
        });
    }
    let (dx, dy) = (volume.dims[0], volume.dims[1]);
    let plane = dx * dy;
    let origin = volume.origin;
    let h = volume.voxel_size;
    let mu = volume.truncation;
    volume
        .tsdf
        .par_chunks_mut(plane)
        .zip(volume.weight.par_chunks_mut(plane))
        .enumerate()
        .for_each(|(z, (tsdf, weight))| {
            for y in 0..dy {
                for x in 0..dx {
                    let i = x + dx * y;
                    let Some(binding) = &bindings.data[z * plane + i] else {
                        continue;
                    };
                    let Ok(t) = graph.blend_binding(binding) else {
                        continue;
                    };
                    let center = Point3::new(
                        origin.x + x as f64 * h,
                        origin.y + y as f64 * h,
                        origin.z + z as f64 * h,
                    );
                    let warped = t.apply(&center);
                    if warped.z <= 0.0 {
                        continue;
                    }
                    let Some((u, v)) = frame.intrinsics.project_to_pixel(&warped) else {
                        continue;
                    };
                    let Some(depth) = frame.depth_at(u as i64, v as i64) else {
                        continue;
                    };
                    let d = depth - warped.z;
                    if d < -mu {
                        continue;
                    }
                    let sample = (d.clamp(-mu, mu) / mu) as f32;
                    let w_old = weight[i];
                    tsdf[i] = (tsdf[i] * w_old + sample) / (w_old + 1.0);
                    weight[i] = (w_old + 1.0).min(MAX_WEIGHT);
                }
            }
        });
    Ok(())
}

/// Trilinear sample of the normalized distance at `point`. `Ok(None)`
/// means the surrounding voxels are all unobserved; corners with zero
/// weight are excluded by renormalizing over the observed ones.
pub fn sample_tsdf(volume: &TsdfVolume, point: &Point3<f64>) -> Result<Option<f64>, TsdfError> {
    let g = volume.grid_coords(point);
    for a in 0..3 {
        if !(g[a] >= 0.0 && g[a] <= (volume.dims[a] - 1) as f64) {
            return Err(TsdfError::OutsideVolume(*point));
        }
    }
    let base = [
        (g.x.floor() as usize).min(volume.dims[0] - 2),
        (g.y.floor() as usize).min(volume.dims[1] - 2),
        (g.z.floor() as usize).min(volume.dims[2] - 2),
    ];
    let f = [
        g.x - base[0] as f64,
        g.y - base[1] as f64,
        g.z - base[2] as f64,
    ];
    let mut num = 0.0;
    let mut den = 0.0;
    for corner in 0..8usize {
        let (cx, cy, cz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
        let idx = volume.index(base[0] + cx, base[1] + cy, base[2] + cz);
        if volume.weight[idx] <= 0.0 {
            continue;
        }
        let wt = (if cx == 1 { f[0] } else { 1.0 - f[0] })
            * (if cy == 1 { f[1] } else { 1.0 - f[1] })
            * (if cz == 1 { f[2] } else { 1.0 - f[2] });
        num += wt * volume.tsdf[idx] as f64;
        den += wt;
    }
    if den <= 1e-12 {
        return Ok(None);
    }
    Ok(Some(num / den))
}

/// Trilinear sample plus the exact gradient of the interpolant within the
/// containing cell, in normalized distance per meter. Matches
/// [`sample_tsdf`]'s renormalization over observed corners (quotient rule),
/// so it is the true local derivative of the sampled value — which a
/// Gauss-Newton step needs, unlike the cell-averaged [`tsdf_gradient`].
pub fn sample_tsdf_with_gradient(
    volume: &TsdfVolume,
    point: &Point3<f64>,
) -> Result<Option<(f64, Vector3<f64>)>, TsdfError> {
    let g = volume.grid_coords(point);
    for a in 0..3 {
        if !(g[a] >= 0.0 && g[a] <= (volume.dims[a] - 1) as f64) {
            return Err(TsdfError::OutsideVolume(*point));
        }
    }
    let base = [
        (g.x.floor() as usize).min(volume.dims[0] - 2),
        (g.y.floor() as usize).min(volume.dims[1] - 2),
        (g.z.floor() as usize).min(volume.dims[2] - 2),
    ];
    let f = [
        g.x - base[0] as f64,
        g.y - base[1] as f64,
        g.z - base[2] as f64,
    ];
    let mut num = 0.0;
    let mut den = 0.0;
    let mut dnum = Vector3::zeros();
    let mut dden = Vector3::zeros();
    for corner in 0..8usize {
        let c = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        let idx = volume.index(base[0] + c[0], base[1] + c[1], base[2] + c[2]);
        if volume.weight[idx] <= 0.0 {
            continue;
        }
        let axis = |a: usize| if c[a] == 1 { f[a] } else { 1.0 - f[a] };
        let daxis = |a: usize| if c[a] == 1 { 1.0 } else { -1.0 };
        let wt = axis(0) * axis(1) * axis(2);
        let dwt = Vector3::new(
            daxis(0) * axis(1) * axis(2),
            axis(0) * daxis(1) * axis(2),
            axis(0) * axis(1) * daxis(2),
        ) / volume.voxel_size;
        let v = volume.tsdf[idx] as f64;
        num += wt * v;
        den += wt;
        dnum += dwt * v;
        dden += dwt;
    }
    if den <= 1e-12 {
        return Ok(None);
    }
    let value = num / den;
    let grad = (dnum - dden * value) / den;
    Ok(Some((value, grad)))
}

/// Central-difference gradient of [`sample_tsdf`] with step one voxel.
/// `Ok(None)` when any probe lands in unobserved space. Smoother than the
/// within-cell gradient; useful as a robust surface-normal estimate.
pub fn tsdf_gradient(
    volume: &TsdfVolume,
    point: &Point3<f64>,
) -> Result<Option<Vector3<f64>>, TsdfError> {
    let h = volume.voxel_size;
    let mut grad = Vector3::zeros();
    for a in 0..3 {
        let mut dir = Vector3::zeros();
        dir[a] = h;
        let (Some(p), Some(m)) = (
            sample_tsdf(volume, &(point + dir))?,
            sample_tsdf(volume, &(point - dir))?,
        ) else {
            return Ok(None);
        };
        grad[a] = (p - m) / (2.0 * h);
    }
    Ok(Some(grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Intrinsics;
    use crate::dualquat::RigidTransform;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn identity_graph() -> DeformationGraph {
        DeformationGraph::single(
            &RigidTransform::identity(),
            Point3::new(0.0, 0.0, 1.0),
            10.0,
        )
    }

    fn plane_frame(depth_m: f64, cam: Intrinsics) -> DepthFrame {
        let n = cam.width * cam.height;
        DepthFrame::new(vec![depth_m; n], vec![true; n], Vec::new(), cam, 0).unwrap()
    }

    fn small_camera() -> Intrinsics {
        Intrinsics {
            width: 160,
            height: 120,
            fx: 140.0,
            fy: 140.0,
            cx: 79.5,
            cy: 59.5,
        }
    }

    /// Volume straddling z in [0.9, 1.1] in front of the camera.
    fn plane_volume(voxel: f64, mu: f64) -> TsdfVolume {
        TsdfVolume::new(
            Point3::new(-0.1, -0.1, 0.9),
            voxel,
            [21, 21, 21],
            mu,
        )
        .unwrap()
    }

    #[test]
    fn frontal_plane_integration_values() {
        let mut vol = plane_volume(0.01, 0.02);
        let frame = plane_frame(1.0, small_camera());
        integrate_depth(&mut vol, &frame, &identity_graph()).unwrap();
        // Voxel at z = 0.99 sits 1 cm in front of the surface: +0.5.
        let i_front = vol.index(10, 10, 9);
        let i_back = vol.index(10, 10, 11);
        let i_surface = vol.index(10, 10, 10);
        assert_relative_eq!(vol.tsdf[i_front] as f64, 0.5, epsilon = 1e-6);
        assert_relative_eq!(vol.weight[i_front] as f64, 1.0);
        assert_relative_eq!(vol.tsdf[i_back] as f64, -0.5, epsilon = 1e-6);
        assert_relative_eq!(vol.tsdf[i_surface] as f64, 0.0, epsilon = 1e-6);
    }

    #[test]
    fn repeat_integration_doubles_weight_keeps_value() {
        let mut vol = plane_volume(0.01, 0.02);
        let frame = plane_frame(1.0, small_camera());
        let g = identity_graph();
        integrate_depth(&mut vol, &frame, &g).unwrap();
        let before: Vec<f32> = vol.tsdf.clone();
        integrate_depth(&mut vol, &frame, &g).unwrap();
        let i = vol.index(10, 10, 9);
        assert_relative_eq!(vol.tsdf[i], before[i], epsilon = 1e-6);
        assert_relative_eq!(vol.weight[i] as f64, 2.0);
    }

    #[test]
    fn invalid_depth_pixels_leave_voxels_untouched() {
        let mut vol = plane_volume(0.01, 0.02);
        let cam = small_camera();
        let mut frame = plane_frame(1.0, cam);
        for d in frame.depth.iter_mut() {
            *d = 0.0;
        }
        integrate_depth(&mut vol, &frame, &identity_graph()).unwrap();
        assert!(vol.weight.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn far_behind_surface_untouched_but_band_clamped() {
        let mut vol = plane_volume(0.01, 0.02);
        let frame = plane_frame(1.0, small_camera());
        integrate_depth(&mut vol, &frame, &identity_graph()).unwrap();
        // 5 cm in front: clamped to +1. 5 cm behind (d = -0.05 < -mu): skipped.
        let i_far_front = vol.index(10, 10, 5);
        let i_far_back = vol.index(10, 10, 15);
        assert_relative_eq!(vol.tsdf[i_far_front] as f64, 1.0);
        assert_eq!(vol.weight[i_far_back], 0.0);
    }

    #[test]
    fn weight_cap_holds() {
        let mut vol = plane_volume(0.02, 0.05);
        let frame = plane_frame(1.0, small_camera());
        let g = identity_graph();
        let bindings = VoxelBindings::compute(&vol, &g);
        for _ in 0..70 {
            integrate_depth_cached(&mut vol, &frame, &g, &bindings).unwrap();
        }
        assert!(vol.weight.iter().all(|&w| w <= MAX_WEIGHT));
        assert!(vol.tsdf.iter().all(|&t| (-1.0..=1.0).contains(&t)));
    }

    #[test]
    fn thirty_noisy_plane_frames_denoise_the_surface() {
        let cam = small_camera();
        let sigma = 0.002;
        let noisy_frame = |seed: u64| {
            let mut rng = StdRng::seed_from_u64(seed);
            let n = cam.width * cam.height;
            let depth: Vec<f64> = (0..n)
                .map(|_| {
                    let e: f64 = rng.sample(rand_distr::StandardNormal);
                    1.0 + (e * sigma).clamp(-3.0 * sigma, 3.0 * sigma)
                })
                .collect();
            DepthFrame::new(depth, vec![true; n], Vec::new(), cam, 0).unwrap()
        };
        // RMS distance of the extracted surface to the true plane, away
        // from the volume's side walls.
        let rms_after = |k: u64| {
            let mut vol = plane_volume(0.01, 0.025);
            let g = identity_graph();
            let bindings = VoxelBindings::compute(&vol, &g);
            for s in 0..k {
                integrate_depth_cached(&mut vol, &noisy_frame(100 + s), &g, &bindings)
                    .unwrap();
            }
            let mesh = extract_mesh(&vol);
            let interior: Vec<f64> = mesh
                .vertices
                .iter()
                .filter(|p| p.x.abs() <= 0.08 && p.y.abs() <= 0.08)
                .map(|p| (p.z - 1.0).powi(2))
                .collect();
            assert!(interior.len() > 50, "too few surface samples");
            (interior.iter().sum::<f64>() / interior.len() as f64).sqrt()
        };
        let one = rms_after(1);
        let thirty = rms_after(30);
        assert!(one > 5e-4, "single noisy frame implausibly clean: {one}");
        assert!(
            thirty <= 0.4 * one,
            "rms after 30 frames {thirty} vs single frame {one}"
        );
    }

    #[test]
    fn support_gate_skips_distant_voxels() {
        let mut vol = plane_volume(0.01, 0.02);
        // Tiny radius: support only reaches 2 cm around one node.
        let g = DeformationGraph::single(
            &RigidTransform::identity(),
            Point3::new(0.0, 0.0, 1.0),
            0.01,
        );
        let frame = plane_frame(1.0, small_camera());
        integrate_depth(&mut vol, &frame, &g).unwrap();
        assert!(vol.weight[vol.index(10, 10, 9)] > 0.0);
        // A voxel 8 cm off to the side is outside support.
        assert_eq!(vol.weight[vol.index(2, 10, 9)], 0.0);
    }

    #[test]
    fn trilinear_is_exact_on_linear_fields() {
        let mut vol =
            TsdfVolume::new(Point3::new(-0.2, -0.2, -0.2), 0.02, [21, 21, 21], 1.0).unwrap();
        vol.fill_from_sdf(|p| p.x);
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..200 {
            let p = Point3::new(
                rng.gen_range(-0.18..0.18),
                rng.gen_range(-0.18..0.18),
                rng.gen_range(-0.18..0.18),
            );
            let s = sample_tsdf(&vol, &p).unwrap().unwrap();
            assert_relative_eq!(s, p.x, epsilon = 1e-6);
        }
    }

    #[test]
    fn voxel_center_sample_is_exact_and_midpoint_averages() {
        let mut vol =
            TsdfVolume::new(Point3::origin(), 0.01, [8, 8, 8], 1.0).unwrap();
        vol.fill_from_sdf(|p| (7.0 * p.x).sin() * 0.1);
        let c = vol.voxel_center(3, 4, 2);
        let s = sample_tsdf(&vol, &c).unwrap().unwrap();
        assert_relative_eq!(s, vol.tsdf[vol.index(3, 4, 2)] as f64, epsilon = 1e-12);
        let mid = Point3::new(c.x + 0.005, c.y, c.z);
        let expect =
            0.5 * (vol.tsdf[vol.index(3, 4, 2)] as f64 + vol.tsdf[vol.index(4, 4, 2)] as f64);
        assert_relative_eq!(sample_tsdf(&vol, &mid).unwrap().unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn unobserved_corners_renormalize_and_full_gaps_signal() {
        let mut vol = TsdfVolume::new(Point3::origin(), 0.01, [4, 4, 4], 1.0).unwrap();
        vol.fill_from_sdf(|_| 0.25);
        // Knock out one corner of the cell around (0.005, 0.005, 0.005).
        let dead = vol.index(0, 0, 0);
        vol.weight[dead] = 0.0;
        vol.tsdf[dead] = -9.0;
        let s = sample_tsdf(&vol, &Point3::new(0.005, 0.005, 0.005))
            .unwrap()
            .unwrap();
        assert_relative_eq!(s, 0.25, epsilon = 1e-12);
        // All-dead neighborhood yields the unobserved signal.
        for w in vol.weight.iter_mut() {
            *w = 0.0;
        }
        assert!(sample_tsdf(&vol, &Point3::new(0.015, 0.015, 0.015))
            .unwrap()
            .is_none());
        // Outside the lattice is an error.
        assert!(sample_tsdf(&vol, &Point3::new(-0.5, 0.0, 0.0)).is_err());
    }

    #[test]
    fn gradient_on_linear_and_constant_fields() {
        let mut vol =
            TsdfVolume::new(Point3::new(-0.2, -0.2, -0.2), 0.02, [21, 21, 21], 1.0).unwrap();
        vol.fill_from_sdf(|p| 2.0 * p.y);
        let g = tsdf_gradient(&vol, &Point3::new(0.01, 0.02, -0.03))
            .unwrap()
            .unwrap();
        assert_relative_eq!(g, Vector3::new(0.0, 2.0, 0.0), epsilon = 1e-6);
        vol.fill_from_sdf(|_| 0.125);
        let g = tsdf_gradient(&vol, &Point3::new(0.0, 0.0, 0.0)).unwrap().unwrap();
        assert_relative_eq!(g.norm(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn within_cell_gradient_differentiates_the_sample_exactly() {
        let mut vol =
            TsdfVolume::new(Point3::new(-0.2, -0.2, -0.2), 0.01, [41, 41, 41], 0.05).unwrap();
        vol.fill_from_sdf(|p| p.coords.norm() - 0.12);
        // Knock out one corner to exercise the renormalization path too.
        let hole = vol.index(22, 20, 20);
        vol.weight[hole] = 0.0;
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..40 {
            let p = Point3::new(
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
            );
            let Some((value, grad)) = sample_tsdf_with_gradient(&vol, &p).unwrap() else {
                continue;
            };
            assert_relative_eq!(value, sample_tsdf(&vol, &p).unwrap().unwrap(), epsilon = 1e-15);
            // Tiny central differences stay inside the same trilinear cell,
            // where the analytic gradient is exact.
            let h = 1e-7;
            for a in 0..3 {
                let mut d = Vector3::zeros();
                d[a] = h;
                let fp = sample_tsdf(&vol, &(p + d)).unwrap().unwrap();
                let fm = sample_tsdf(&vol, &(p - d)).unwrap().unwrap();
                let fd = (fp - fm) / (2.0 * h);
                assert!(
                    (fd - grad[a]).abs() < 1e-5 * grad.norm().max(1.0),
                    "axis {a}: fd {fd} vs analytic {}",
                    grad[a]
                );
            }
        }
    }

    #[test]
    fn sphere_gradient_is_radial() {
        // Direction error of the sampled gradient scales like
        // voxel_size / radius, so use a body-scale sphere on a fine grid.
        let r = 0.2;
        let voxel = 0.004;
        let n = 112usize;
        let half = (n - 1) as f64 * voxel / 2.0;
        let mut vol = TsdfVolume::new(
            Point3::new(-half, -half, -half),
            voxel,
            [n, n, n],
            // Wide band so the whole gradient stencil at r + 2 voxels stays
            // inside the unclamped linear region.
            0.025,
        )
        .unwrap();
        vol.fill_from_sdf(|p| p.coords.norm() - r);
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..50 {
            // Points two voxels outside the surface.
            let dir = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize();
            let p = Point3::origin() + dir * (r + 2.0 * voxel);
            let g = tsdf_gradient(&vol, &p).unwrap().unwrap();
            let angle = g.normalize().dot(&dir).clamp(-1.0, 1.0).acos();
            assert!(angle.to_degrees() < 2.0, "angle {}", angle.to_degrees());
        }
    }

    #[test]
    fn integration_order_insensitive() {
        let cam = small_camera();
        let g = identity_graph();
        let frames: Vec<DepthFrame> = (0..10)
            .map(|i| plane_frame(1.0 + 0.002 * i as f64, cam))
            .collect();
        let mut v1 = plane_volume(0.01, 0.02);
        let mut v2 = plane_volume(0.01, 0.02);
        let bindings = VoxelBindings::compute(&v1, &g);
        for f in &frames {
            integrate_depth_cached(&mut v1, f, &g, &bindings).unwrap();
        }
        for f in frames.iter().rev() {
            integrate_depth_cached(&mut v2, f, &g, &bindings).unwrap();
        }
        for (a, b) in v1.tsdf.iter().zip(&v2.tsdf) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn dump_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.tsdf");
        let mut vol = TsdfVolume::new(Point3::new(0.1, -0.2, 0.9), 0.01, [5, 4, 3], 0.025).unwrap();
        vol.fill_from_sdf(|p| p.z - 1.0);
        vol.write_dump(&path).unwrap();
        let back = TsdfVolume::read_dump(&path).unwrap();
        assert_eq!(back.dims, vol.dims);
        assert_relative_eq!(back.voxel_size, vol.voxel_size);
        assert_relative_eq!(back.truncation, vol.truncation);
        assert_relative_eq!(back.origin, vol.origin);
        assert_eq!(back.tsdf, vol.tsdf);
        assert_eq!(back.weight, vol.weight);
    }

    #[test]
    fn warped_integration_matches_shifted_plane() {
        // Graph translates the reference frame +2 cm along z; live-frame
        // plane at z = 1.0 should therefore appear at reference z = 0.98.
        let mut vol = plane_volume(0.01, 0.02);
        let shift = RigidTransform::from_translation(Vector3::new(0.0, 0.0, 0.02));
        let g = DeformationGraph::single(&shift, Point3::new(0.0, 0.0, 1.0), 10.0);
        let frame = plane_frame(1.0, small_camera());
        integrate_depth(&mut vol, &frame, &g).unwrap();
        // Reference voxel z = 0.98 warps to 1.0: on the surface.
        assert_relative_eq!(vol.tsdf[vol.index(10, 10, 8)] as f64, 0.0, epsilon = 1e-6);
        assert_relative_eq!(vol.tsdf[vol.index(10, 10, 7)] as f64, 0.5, epsilon = 1e-6);
    }
}
