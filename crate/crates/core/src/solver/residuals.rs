//! Concrete residual terms: depth point-to-plane (outer/inner/live),
//! graph-edge smoothness, level-set pull, scan-to-scan loop closure and
//! silhouette alignment. Each produces analytic Jacobians with respect to
//! per-node twist increments; [`finite_difference_check`] validates any
//! block against central differences.

use super::{Jac36, ResidualBlock, ResidualEval, ResidualEvaluator, MAX_TOUCHED};
use crate::camera::Intrinsics;
use crate::dt::DistanceTransformImage;
use crate::dualquat::{blend_jet, BlendJet, DualQuat, RigidTransform, MAX_BLEND};
use crate::graph::Binding;
use crate::tsdf::{sample_tsdf_with_gradient, TsdfVolume};
use nalgebra::{Matrix2x3, Matrix3, Point3, RowVector2, Vector3, Vector6};

/// A blend binding whose node ids have been lifted into the flat parameter
/// vector of one solver problem (graph offset already added).
#[derive(Debug, Clone, Copy)]
pub struct GlobalBinding {
    ids: [u32; MAX_BLEND],
    weights: [f64; MAX_BLEND],
    len: u8,
}

impl GlobalBinding {
    pub fn from_binding(binding: &Binding, offset: u32) -> Self {
        let mut ids = [0u32; MAX_BLEND];
        let mut weights = [0.0f64; MAX_BLEND];
        let mut len = 0usize;
        for (node, w) in binding.entries() {
            ids[len] = node + offset;
            weights[len] = w;
            len += 1;
        }
        GlobalBinding {
            ids,
            weights,
            len: len as u8,
        }
    }

    /// Rigid attachment to exactly one parameter block.
    pub fn single(block: u32) -> Self {
        let mut ids = [0u32; MAX_BLEND];
        ids[0] = block;
        let mut weights = [0.0f64; MAX_BLEND];
        weights[0] = 1.0;
        GlobalBinding {
            ids,
            weights,
            len: 1,
        }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids[..self.len as usize]
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn jet(&self, params: &[DualQuat], v: &Point3<f64>, n: &Vector3<f64>) -> Option<BlendJet> {
        let mut items = [(0.0f64, DualQuat::identity()); MAX_BLEND];
        let len = self.len as usize;
        for k in 0..len {
            items[k] = (self.weights[k], params[self.ids[k] as usize]);
        }
        blend_jet(&items[..len], v, n)
    }
}

#[inline]
fn skew(p: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -p.z, p.y, p.z, 0.0, -p.x, -p.y, p.x, 0.0)
}

/// r = post(warp(v)) - target, three components. Used by toy problems and
/// rigid anchors.
pub struct PointToPoint {
    pub binding: GlobalBinding,
    pub v: Point3<f64>,
    pub target: Point3<f64>,
    pub post: RigidTransform,
}

impl ResidualEvaluator for PointToPoint {
    fn evaluate(&self, params: &[DualQuat], want_jacobian: bool) -> ResidualEval {
        let mut out = ResidualEval::zero(3);
        let Some(jet) = self.binding.jet(params, &self.v, &Vector3::z()) else {
            return out;
        };
        let vhat = self.post.apply(&jet.vhat);
        out.r = vhat - self.target;
        if want_jacobian {
            let rot = self.post.rotation.to_rotation_matrix();
            for k in 0..self.binding.len() {
                out.jac[k] = rot * jet.dv[k];
            }
        }
        out
    }
}

/// Point-to-plane alignment r = n_hat . (v_hat - target), where both the
/// point and its reference normal ride the blended warp and `post` is an
/// optional frozen rigid transform composed after it (identity for plain
/// tracking; the frozen other-half warp during alternation).
pub struct PointToPlane {
    pub binding: GlobalBinding,
    pub v: Point3<f64>,
    /// Unit normal at `v` in the same frame as `v`.
    pub n: Vector3<f64>,
    pub target: Point3<f64>,
    pub post: RigidTransform,
}

impl ResidualEvaluator for PointToPlane {
    fn evaluate(&self, params: &[DualQuat], want_jacobian: bool) -> ResidualEval {
        let mut out = ResidualEval::zero(1);
        let Some(jet) = self.binding.jet(params, &self.v, &self.n) else {
            return out;
        };
        let vhat = self.post.apply(&jet.vhat);
        let nhat = self.post.rotate(&jet.nhat);
        let diff = vhat - self.target;
        out.r.x = nhat.dot(&diff);
        if want_jacobian {
            let rot = self.post.rotation.to_rotation_matrix();
            for k in 0..self.binding.len() {
                let dv = rot * jet.dv[k];
                let dn = rot * jet.dn[k];
                let row = nhat.transpose() * dv + diff.transpose() * dn;
                out.jac[k].set_row(0, &row);
            }
        }
        out
    }
}

/// Rigid-consistency term on one directed graph edge:
/// r = T_i(x_j) - T_j(x_j). The owning block must list the parameter
/// blocks as [block_i, block_j].
pub struct SmoothEdge {
    pub block_i: u32,
    pub block_j: u32,
    /// Reference position of node j.
    pub xj: Point3<f64>,
}

impl ResidualEvaluator for SmoothEdge {
    fn evaluate(&self, params: &[DualQuat], want_jacobian: bool) -> ResidualEval {
        let mut out = ResidualEval::zero(3);
        let ti = params[self.block_i as usize].to_rigid();
        let tj = params[self.block_j as usize].to_rigid();
        let pi = ti.apply(&self.xj);
        let pj = tj.apply(&self.xj);
        out.r = pi - pj;
        if want_jacobian {
            // Left twist on T: delta p = omega x p + dt.
            let mut ji = Jac36::zeros();
            ji.fixed_view_mut::<3, 3>(0, 0)
                .copy_from(&(-skew(&pi.coords)));
            ji.fixed_view_mut::<3, 3>(0, 3)
                .copy_from(&Matrix3::identity());
            let mut jj = Jac36::zeros();
            jj.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&pj.coords));
            jj.fixed_view_mut::<3, 3>(0, 3)
                .copy_from(&(-Matrix3::identity()));
            out.jac[0] = ji;
            out.jac[1] = jj;
        }
        out
    }
}

/// Pulls a warped vertex onto the zero level set: r = TSDF(warp(v)).
/// Vertices leaving the observed region contribute nothing.
pub struct TsdfPull<'v> {
    pub binding: GlobalBinding,
    pub v: Point3<f64>,
    pub volume: &'v TsdfVolume,
}

impl ResidualEvaluator for TsdfPull<'_> {
    fn evaluate(&self, params: &[DualQuat], want_jacobian: bool) -> ResidualEval {
        let mut out = ResidualEval::zero(1);
        let Some(jet) = self.binding.jet(params, &self.v, &Vector3::z()) else {
            return out;
        };
        let Ok(Some((value, grad))) = sample_tsdf_with_gradient(self.volume, &jet.vhat)
        else {
            return out;
        };
        out.r.x = value;
        if want_jacobian {
            for k in 0..self.binding.len() {
                out.jac[k].set_row(0, &(grad.transpose() * jet.dv[k]));
            }
        }
        out
    }
}

/// Scan-to-scan loop closure, point-to-plane with the source scan's warped
/// normal: r = warp_p(n_p) . (warp_p(v_p) - warp_q(v_q)). The owning block
/// lists the p-side binding ids followed by the q-side ids.
pub struct LoopClosure {
    pub binding_p: GlobalBinding,
    pub binding_q: GlobalBinding,
    pub vp: Point3<f64>,
    pub np: Vector3<f64>,
    pub vq: Point3<f64>,
}

impl ResidualEvaluator for LoopClosure {
    fn evaluate(&self, params: &[DualQuat], want_jacobian: bool) -> ResidualEval {
        let mut out = ResidualEval::zero(1);
        let (Some(jp), Some(jq)) = (
            self.binding_p.jet(params, &self.vp, &self.np),
            self.binding_q.jet(params, &self.vq, &Vector3::z()),
        ) else {
            return out;
        };
        let diff = jp.vhat - jq.vhat;
        out.r.x = jp.nhat.dot(&diff);
        if want_jacobian {
            let np_len = self.binding_p.len();
            for k in 0..np_len {
                let row = jp.nhat.transpose() * jp.dv[k] + diff.transpose() * jp.dn[k];
                out.jac[k].set_row(0, &row);
            }
            for k in 0..self.binding_q.len() {
                let row = -(jp.nhat.transpose() * jq.dv[k]);
                out.jac[np_len + k].set_row(0, &row);
            }
        }
        out
    }
}

/// Pulls a vertex's projection onto the silhouette: r is the signed
/// distance-transform value at the projected pixel. Vertices projecting
/// outside the image or behind the camera contribute nothing.
pub struct SilhouettePull<'d> {
    pub binding: GlobalBinding,
    pub v: Point3<f64>,
    pub post: RigidTransform,
    pub dt: &'d DistanceTransformImage,
    pub camera: Intrinsics,
}

impl ResidualEvaluator for SilhouettePull<'_> {
    fn evaluate(&self, params: &[DualQuat], want_jacobian: bool) -> ResidualEval {
        let mut out = ResidualEval::zero(1);
        let Some(jet) = self.binding.jet(params, &self.v, &Vector3::z()) else {
            return out;
        };
        let p = self.post.apply(&jet.vhat);
        if p.z <= 1e-9 {
            return out;
        }
        let cam = &self.camera;
        let u = cam.cx + cam.fx * p.x / p.z;
        let v = cam.cy + cam.fy * p.y / p.z;
        let Some(value) = self.dt.signed_at(u, v) else {
            return out;
        };
        out.r.x = value;
        if want_jacobian {
            let Some(grad) = self.dt.signed_gradient(u, v) else {
                return out;
            };
            let iz = 1.0 / p.z;
            let dproj = Matrix2x3::new(
                cam.fx * iz,
                0.0,
                -cam.fx * p.x * iz * iz,
                0.0,
                cam.fy * iz,
                -cam.fy * p.y * iz * iz,
            );
            let g = RowVector2::new(grad.x, grad.y);
            let chain = g * dproj * self.post.rotation.to_rotation_matrix();
            for k in 0..self.binding.len() {
                out.jac[k].set_row(0, &(chain * jet.dv[k]));
            }
        }
        out
    }
}

/// Central-difference validation of one residual block's Jacobians.
/// Returns the worst error relative to the block's own derivative scale.
/// Parameter blocks listed by the block must be distinct.
pub fn finite_difference_check(
    block: &ResidualBlock,
    params: &[DualQuat],
    step: f64,
) -> f64 {
    debug_assert!(block.param_blocks.len() <= MAX_TOUCHED);
    let base = block.evaluator.evaluate(params, true);
    let mut scale = 1e-3f64;
    for a in 0..block.param_blocks.len() {
        scale = scale.max(base.jac[a].abs().max());
    }
    let mut worst = 0.0f64;
    for (a, &pb) in block.param_blocks.iter().enumerate() {
        for col in 0..6 {
            let mut delta = Vector6::zeros();
            delta[col] = step;
            let perturb = |sign: f64| -> Vec<DualQuat> {
                let mut p = params.to_vec();
                let omega = Vector3::new(delta[0], delta[1], delta[2]) * sign;
                let dt = Vector3::new(delta[3], delta[4], delta[5]) * sign;
                p[pb as usize] = p[pb as usize].apply_twist(&omega, &dt);
                p
            };
            let rp = block.evaluator.evaluate(&perturb(1.0), false);
            let rm = block.evaluator.evaluate(&perturb(-1.0), false);
            for d in 0..base.dim {
                let fd = (rp.r[d] - rm.r[d]) / (2.0 * step);
                let an = base.jac[a][(d, col)];
                worst = worst.max((fd - an).abs() / scale);
            }
        }
    }
    worst
}
