//! Turntable sequence generator: a template mesh spins in front of a fixed
//! camera, optionally bending slightly (the "wobble") so the motion is not
//! purely rigid, and each pose is rendered to a depth/mask/color frame with
//! seeded Gaussian depth noise.
//!
//! Frame 0 is the reference pose: zero yaw and zero wobble phase, so the
//! reference frame of a reconstruction coincides with the subject placed at
//! `subject_position`.

use crate::camera::Intrinsics;
use crate::dualquat::{DualQuat, RigidTransform};
use crate::frame::DepthFrame;
use crate::graph::DeformationGraph;
use crate::mesh::TriangleMesh;
use crate::raster::rasterize;
use nalgebra::{Point3, UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

/// Sinusoidal bend of a height band, in body coordinates (y vertical, the
/// head at negative y). Points at `band_top_y` displace fully along x,
/// fading to zero at `band_bottom_y`.
#[derive(Debug, Clone, Copy)]
pub struct Wobble {
    pub amplitude: f64,
    pub period_frames: f64,
    pub band_top_y: f64,
    pub band_bottom_y: f64,
}

impl Wobble {
    fn weight(&self, y: f64) -> f64 {
        let span = self.band_bottom_y - self.band_top_y;
        if span.abs() < 1e-12 {
            return 0.0;
        }
        ((self.band_bottom_y - y) / span).clamp(0.0, 1.0)
    }

    fn phase(&self, frame: usize) -> f64 {
        (2.0 * std::f64::consts::PI * frame as f64 / self.period_frames).sin()
    }

    /// Body-frame displacement of a point at height `y` in frame `frame`.
    pub fn displacement(&self, frame: usize, y: f64) -> Vector3<f64> {
        Vector3::new(self.amplitude * self.phase(frame) * self.weight(y), 0.0, 0.0)
    }
}

/// Recipe for one synthetic capture.
#[derive(Debug, Clone)]
pub struct TurntableScript {
    /// Subject in body coordinates, roughly centered at the origin.
    pub template: TriangleMesh,
    pub n_frames: usize,
    pub total_yaw_degrees: f64,
    pub wobble: Option<Wobble>,
    pub depth_noise_sigma: f64,
    pub camera: Intrinsics,
    /// Where the body origin sits in camera space.
    pub subject_position: Vector3<f64>,
    pub seed: u64,
}

impl TurntableScript {
    pub fn new(template: TriangleMesh, n_frames: usize) -> Self {
        TurntableScript {
            template,
            n_frames,
            total_yaw_degrees: 360.0,
            wobble: None,
            depth_noise_sigma: 0.0,
            camera: Intrinsics::default_camera(),
            subject_position: Vector3::new(0.0, 0.0, 2.0),
            seed: 0,
        }
    }

    /// Yaw of frame `t` in degrees.
    pub fn yaw_degrees(&self, t: usize) -> f64 {
        if self.n_frames <= 1 {
            0.0
        } else {
            self.total_yaw_degrees * t as f64 / (self.n_frames - 1) as f64
        }
    }
}

/// Exact per-frame warps of the template, kept alongside the generated
/// frames for evaluation.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub template: TriangleMesh,
    /// Camera-space position of every template vertex, per frame.
    pub frames: Vec<Vec<Point3<f64>>>,
    pub yaw_degrees: Vec<f64>,
    pub subject_position: Vector3<f64>,
    pub wobble: Option<Wobble>,
    /// Horizontal centroid of the template; the turn axis passes through it.
    pub spin_center: Point3<f64>,
}

impl GroundTruth {
    /// The template warped into frame `t`, normals recomputed.
    pub fn warped_mesh(&self, t: usize) -> TriangleMesh {
        let mut mesh = self.template.clone();
        mesh.vertices = self.frames[t].clone();
        mesh.recompute_normals();
        mesh
    }

    /// Maps a reference-frame point (frame 0 pose) into frame `t`.
    pub fn warp_point(&self, t: usize, p_ref: &Point3<f64>) -> Point3<f64> {
        let body = p_ref - self.subject_position;
        let wob = self
            .wobble
            .map(|w| w.displacement(t, body.y))
            .unwrap_or_else(Vector3::zeros);
        let rot = UnitQuaternion::from_axis_angle(
            &Vector3::y_axis(),
            self.yaw_degrees[t].to_radians(),
        );
        let centered = Point3::from(body) + wob - self.spin_center.coords;
        Point3::from(rot * centered.coords + self.spin_center.coords + self.subject_position)
    }

    /// Per-frame rigid motion of the whole subject; exact when there is no
    /// wobble.
    pub fn rigid_transform(&self, t: usize) -> RigidTransform {
        let rot = UnitQuaternion::from_axis_angle(
            &Vector3::y_axis(),
            self.yaw_degrees[t].to_radians(),
        );
        let center = self.spin_center.coords + self.subject_position;
        let translation = center - rot * center;
        RigidTransform {
            rotation: rot,
            translation,
        }
    }

    /// Copies `graph` (nodes in the reference frame) with each node's
    /// transform set to the exact ground-truth warp at the node position:
    /// the frame's yaw rotation plus whatever translation carries the node
    /// onto its warped image.
    pub fn node_graph(&self, t: usize, graph: &DeformationGraph) -> DeformationGraph {
        let rot = UnitQuaternion::from_axis_angle(
            &Vector3::y_axis(),
            self.yaw_degrees[t].to_radians(),
        );
        let mut out = graph.clone();
        for node in &mut out.nodes {
            let target = self.warp_point(t, &node.position);
            let translation = target.coords - rot * node.position.coords;
            node.transform = DualQuat::from_rigid(&RigidTransform {
                rotation: rot,
                translation,
            });
        }
        out
    }
}

/// Renders a camera-space mesh to a depth frame: z-buffer depth, coverage
/// mask, vertex colors (flat white when the mesh carries none).
pub fn render_frame(mesh: &TriangleMesh, camera: &Intrinsics) -> DepthFrame {
    let raster = rasterize(mesh, camera);
    DepthFrame::new(
        raster.depth.clone(),
        raster.coverage_mask(),
        raster.color_u8(),
        *camera,
        0,
    )
    .expect("raster buffers match camera resolution")
}

/// Renders every scripted pose and returns the frames plus exact warps.
pub fn generate_sequence(script: &TurntableScript) -> (Vec<DepthFrame>, GroundTruth) {
    let centroid = script.template.centroid();
    let spin_center = Point3::new(centroid.x, 0.0, centroid.z);
    let mut truth = GroundTruth {
        template: script.template.clone(),
        frames: Vec::new(),
        yaw_degrees: (0..script.n_frames).map(|t| script.yaw_degrees(t)).collect(),
        subject_position: script.subject_position,
        wobble: script.wobble,
        spin_center,
    };
    // Reference positions equal body + subject offset because frame 0 has
    // zero yaw and zero wobble phase.
    let reference: Vec<Point3<f64>> = script
        .template
        .vertices
        .iter()
        .map(|v| v + script.subject_position)
        .collect();
    truth.frames = (0..script.n_frames)
        .map(|t| {
            reference
                .iter()
                .map(|p| truth.warp_point(t, p))
                .collect::<Vec<_>>()
        })
        .collect();

    let frames: Vec<DepthFrame> = (0..script.n_frames)
        .into_par_iter()
        .map(|t| {
            let mesh = truth.warped_mesh(t);
            let mut frame = render_frame(&mesh, &script.camera);
            frame.frame_index = t;
            if script.depth_noise_sigma > 0.0 {
                let sigma = script.depth_noise_sigma;
                let normal = Normal::new(0.0, sigma).expect("positive sigma");
                let mut rng =
                    ChaCha8Rng::seed_from_u64(script.seed ^ (t as u64).wrapping_mul(0x9E37_79B9));
                for d in frame.depth.iter_mut() {
                    if *d > 0.0 {
                        let noise: f64 = normal.sample(&mut rng);
                        *d = (*d + noise.clamp(-3.0 * sigma, 3.0 * sigma)).max(0.001);
                    }
                }
            }
            frame
        })
        .collect();
    (frames, truth)
}

/// Sampled node graph of the template in its reference pose, for tests that
/// need ground-truth tracked graphs.
pub fn reference_graph(
    truth: &GroundTruth,
    radius: f64,
    degree: usize,
) -> Result<DeformationGraph, crate::graph::GraphError> {
    let mut mesh = truth.template.clone();
    for v in mesh.vertices.iter_mut() {
        *v += truth.subject_position;
    }
    crate::graph::sample_node_graph(&mesh, radius, degree)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::shapes::{icosphere, mannequin};
    use approx::assert_relative_eq;

    fn half_cam() -> Intrinsics {
        Intrinsics::half_camera()
    }

    #[test]
    fn sphere_min_depth_at_tangency() {
        let mesh = icosphere(0.5, &Point3::new(0.0, 0.0, 2.0), 5);
        let frame = render_frame(&mesh, &half_cam());
        let min_depth = frame
            .depth
            .iter()
            .filter(|&&d| d > 0.0)
            .fold(f64::INFINITY, |a, &b| a.min(b));
        assert!((min_depth - 1.5).abs() < 1e-4, "min depth {min_depth}");
    }

    #[test]
    fn yaw_schedule_covers_range() {
        let script = TurntableScript {
            n_frames: 5,
            total_yaw_degrees: 180.0,
            ..TurntableScript::new(icosphere(0.3, &Point3::origin(), 1), 5)
        };
        let yaws: Vec<f64> = (0..5).map(|t| script.yaw_degrees(t)).collect();
        assert_eq!(yaws, vec![0.0, 45.0, 90.0, 135.0, 180.0]);
        let one = TurntableScript::new(icosphere(0.3, &Point3::origin(), 1), 1);
        assert_eq!(one.yaw_degrees(0), 0.0);
    }

    #[test]
    fn two_frame_half_turn_reports_180() {
        let mut script = TurntableScript::new(mannequin(0.03), 2);
        script.total_yaw_degrees = 180.0;
        script.camera = half_cam();
        let (frames, truth) = generate_sequence(&script);
        assert_eq!(frames.len(), 2);
        assert_relative_eq!(truth.yaw_degrees[1], 180.0);
        // The warp actually flipped the subject: x extremes swap sides.
        let x0: f64 = truth.frames[0].iter().map(|p| p.x).sum::<f64>();
        let max_z0 = truth.frames[0].iter().map(|p| p.z).fold(f64::MIN, f64::max);
        let max_z1 = truth.frames[1].iter().map(|p| p.z).fold(f64::MIN, f64::max);
        assert_relative_eq!(x0, truth.frames[1].iter().map(|p| p.x).sum::<f64>(), epsilon = 1e-6);
        assert_relative_eq!(max_z0, max_z1, epsilon = 0.02);
    }

    #[test]
    fn zero_noise_zero_wobble_is_deterministic() {
        let mut script = TurntableScript::new(icosphere(0.4, &Point3::origin(), 3), 4);
        script.camera = half_cam();
        let (frames, truth) = generate_sequence(&script);
        for t in 0..4 {
            let again = render_frame(&truth.warped_mesh(t), &script.camera);
            assert_eq!(frames[t].depth, again.depth, "frame {t} depth differs");
            assert_eq!(frames[t].mask, again.mask);
        }
    }

    #[test]
    fn noise_statistics_match_sigma() {
        let mut script = TurntableScript::new(icosphere(0.5, &Point3::origin(), 4), 2);
        script.camera = Intrinsics::default_camera();
        script.depth_noise_sigma = 0.002;
        script.seed = 7;
        let (noisy, truth) = generate_sequence(&script);
        let clean0 = render_frame(&truth.warped_mesh(0), &script.camera);
        let clean1 = render_frame(&truth.warped_mesh(1), &script.camera);
        let mut diffs: Vec<f64> = Vec::new();
        for (clean, noisy) in [(&clean0, &noisy[0]), (&clean1, &noisy[1])] {
            for (c, n) in clean.depth.iter().zip(&noisy.depth) {
                if *c > 0.0 && *n > 0.0 {
                    diffs.push(n - c);
                }
            }
        }
        assert!(diffs.len() >= 100_000, "need pixels, got {}", diffs.len());
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>()
            / (diffs.len() - 1) as f64;
        let std = var.sqrt();
        assert!((0.0018..=0.0022).contains(&std), "std {std}");
        // Clamping held.
        assert!(diffs.iter().all(|d| d.abs() <= 0.006 + 1e-12));
    }

    #[test]
    fn wobble_bends_only_the_selected_band() {
        let mut script = TurntableScript::new(mannequin(0.03), 8);
        script.total_yaw_degrees = 0.0;
        script.camera = half_cam();
        script.wobble = Some(Wobble {
            amplitude: 0.03,
            period_frames: 8.0,
            band_top_y: -0.6,
            band_bottom_y: 0.0,
        });
        let (_, truth) = generate_sequence(&script);
        // Frame 2 hits peak phase sin(pi/2)=1.
        for (i, v) in truth.template.vertices.iter().enumerate() {
            let moved = truth.frames[2][i].x - (v.x + script.subject_position.x);
            if v.y > 0.1 {
                assert!(moved.abs() < 1e-9, "lower body moved {moved}");
            }
            if v.y < -0.55 {
                assert!(moved > 0.025, "head should displace, got {moved}");
            }
        }
    }

    #[test]
    fn rigid_transform_matches_vertex_warps_without_wobble() {
        let mut script = TurntableScript::new(mannequin(0.04), 6);
        script.total_yaw_degrees = 300.0;
        let (_, truth) = generate_sequence(&script);
        for t in [1, 3, 5] {
            let rt = truth.rigid_transform(t);
            for (i, v) in truth.template.vertices.iter().enumerate() {
                let reference = v + truth.subject_position;
                assert_relative_eq!(rt.apply(&reference), truth.frames[t][i], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn ground_truth_node_graph_moves_nodes_exactly() {
        let mut script = TurntableScript::new(mannequin(0.04), 5);
        script.wobble = Some(Wobble {
            amplitude: 0.02,
            period_frames: 5.0,
            band_top_y: -0.6,
            band_bottom_y: 0.2,
        });
        let (_, truth) = generate_sequence(&script);
        let graph = reference_graph(&truth, 0.12, 4).unwrap();
        let g3 = truth.node_graph(3, &graph);
        for (orig, warped) in graph.nodes.iter().zip(&g3.nodes) {
            let expect = truth.warp_point(3, &orig.position);
            let got = warped.transform.to_rigid().apply(&orig.position);
            assert_relative_eq!(got, expect, epsilon = 1e-9);
        }
    }
}
