//! Rigid transforms, dual quaternions, dual-quaternion blending (DQB) and
//! the exact derivatives of a blended warp with respect to per-node twist
//! increments.
//!
//! Quaternions in this module are stored as `Vector4<f64>` in (w, x, y, z)
//! order so the 3x4 / 4x6 Jacobian blocks below have an unambiguous column
//! layout. The public [`RigidTransform`] uses nalgebra types.

use nalgebra::{Point3, Quaternion, SMatrix, UnitQuaternion, Vector3, Vector4};

/// Quaternion as (w, x, y, z).
pub(crate) type Q4 = Vector4<f64>;

#[inline]
pub(crate) fn qmul(a: &Q4, b: &Q4) -> Q4 {
    let (aw, av) = (a[0], Vector3::new(a[1], a[2], a[3]));
    let (bw, bv) = (b[0], Vector3::new(b[1], b[2], b[3]));
    let w = aw * bw - av.dot(&bv);
    let v = aw * bv + bw * av + av.cross(&bv);
    Q4::new(w, v.x, v.y, v.z)
}

#[inline]
pub(crate) fn qconj(a: &Q4) -> Q4 {
    Q4::new(a[0], -a[1], -a[2], -a[3])
}

#[inline]
fn qpure(v: &Vector3<f64>) -> Q4 {
    Q4::new(0.0, v.x, v.y, v.z)
}

/// Rotates `v` by the unit quaternion `u`: v + 2 x x (x x v + w v).
#[inline]
pub(crate) fn qrotate(u: &Q4, v: &Vector3<f64>) -> Vector3<f64> {
    let w = u[0];
    let x = Vector3::new(u[1], u[2], u[3]);
    v + 2.0 * x.cross(&(x.cross(v) + w * v))
}

/// Unit quaternion of the rotation exp([omega]x), stable for small angles.
pub(crate) fn qexp(omega: &Vector3<f64>) -> Q4 {
    let theta = omega.norm();
    let (w, k) = if theta < 1e-9 {
        // sin(t/2)/t = 1/2 - t^2/48 + O(t^4)
        (1.0 - theta * theta / 8.0, 0.5 - theta * theta / 48.0)
    } else {
        ((0.5 * theta).cos(), (0.5 * theta).sin() / theta)
    };
    let v = omega * k;
    Q4::new(w, v.x, v.y, v.z)
}

/// Rotation (unit quaternion) plus translation; acts as `R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        RigidTransform { rotation, translation }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        RigidTransform::new(UnitQuaternion::identity(), t)
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let axis = nalgebra::Unit::new_normalize(*axis);
        RigidTransform::new(UnitQuaternion::from_axis_angle(&axis, angle), Vector3::zeros())
    }

    /// Rotation of `angle` about an axis direction through `center`.
    pub fn rotation_about(center: &Point3<f64>, axis: &Vector3<f64>, angle: f64) -> Self {
        let rot = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle);
        let t = center.coords - rot * center.coords;
        RigidTransform::new(rot, t)
    }

    #[inline]
    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// `self` after `other`: (self . other)(x) = self(other(x)).
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rot_inv = self.rotation.inverse();
        RigidTransform {
            rotation: rot_inv,
            translation: -(rot_inv * self.translation),
        }
    }
}

/// Dual quaternion encoding a rigid motion; `real` is the rotation, `dual`
/// encodes translation as 0.5 * t * real. Both in (w, x, y, z) order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualQuat {
    pub real: Q4,
    pub dual: Q4,
}

impl DualQuat {
    pub fn identity() -> Self {
        DualQuat {
            real: Q4::new(1.0, 0.0, 0.0, 0.0),
            dual: Q4::zeros(),
        }
    }

    pub fn from_rigid(t: &RigidTransform) -> Self {
        let q = t.rotation.quaternion();
        let real = Q4::new(q.w, q.i, q.j, q.k);
        let dual = qmul(&qpure(&t.translation), &real) * 0.5;
        DualQuat { real, dual }
    }

    /// Extracts the rigid transform, tolerating a non-unit real part (as
    /// produced by blending) by normalizing.
    pub fn to_rigid(&self) -> RigidTransform {
        let s2 = self.real.dot(&self.real);
        let s = s2.sqrt();
        let u = self.real / s;
        let tq = qmul(&self.dual, &qconj(&self.real)) * (2.0 / s2);
        RigidTransform {
            rotation: UnitQuaternion::new_unchecked(Quaternion::new(u[0], u[1], u[2], u[3])),
            translation: Vector3::new(tq[1], tq[2], tq[3]),
        }
    }

    /// Unit norm of the real part, used by validity checks.
    pub fn real_norm(&self) -> f64 {
        self.real.norm()
    }

    /// Left-composes the local twist increment (exp([omega]x), dt):
    /// rotation becomes exp(omega) * R, translation exp(omega) * t + dt.
    pub fn apply_twist(&self, omega: &Vector3<f64>, dt: &Vector3<f64>) -> DualQuat {
        let rigid = self.to_rigid();
        let e = qexp(omega);
        let new_real = qmul(&e, &Q4::new(
            rigid.rotation.w,
            rigid.rotation.i,
            rigid.rotation.j,
            rigid.rotation.k,
        ));
        let new_t = qrotate(&e, &rigid.translation) + dt;
        let u = new_real / new_real.norm();
        DualQuat {
            real: u,
            dual: qmul(&qpure(&new_t), &u) * 0.5,
        }
    }
}

/// Upper bound on blended nodes per point (k is 4 by default, 8 max).
pub const MAX_BLEND: usize = 8;

/// Weighted DQB of (weight, dq) items. Weights are renormalized internally;
/// quaternions are sign-aligned to the first item with positive weight.
/// Returns `None` when the total weight is not positive.
pub fn blend_items(items: &[(f64, DualQuat)]) -> Option<RigidTransform> {
    let sums = blend_sums(items)?;
    Some(DualQuat { real: sums.0, dual: sums.1 }.to_rigid())
}

fn blend_sums(items: &[(f64, DualQuat)]) -> Option<(Q4, Q4)> {
    let total: f64 = items.iter().map(|(w, _)| w).sum();
    if !(total > 0.0) {
        return None;
    }
    let mut reference: Option<Q4> = None;
    let mut b_real = Q4::zeros();
    let mut b_dual = Q4::zeros();
    for (w, dq) in items {
        if *w <= 0.0 {
            continue;
        }
        let sign = match &reference {
            None => {
                reference = Some(dq.real);
                1.0
            }
            Some(r) => {
                if dq.real.dot(r) < 0.0 {
                    -1.0
                } else {
                    1.0
                }
            }
        };
        let c = sign * w / total;
        b_real += dq.real * c;
        b_dual += dq.dual * c;
    }
    Some((b_real, b_dual))
}

/// A blended warp evaluated at one point: the warped point, the rotated
/// normal, and the exact 3x6 derivative of each with respect to every
/// contributing node's twist increment (omega, dt).
#[derive(Debug, Clone)]
pub struct BlendJet {
    pub len: usize,
    pub vhat: Point3<f64>,
    pub nhat: Vector3<f64>,
    pub dv: [SMatrix<f64, 3, 6>; MAX_BLEND],
    pub dn: [SMatrix<f64, 3, 6>; MAX_BLEND],
}

/// Pure quaternion basis e_x, e_y, e_z in (w,x,y,z) order.
const QB: [Q4; 3] = [
    Q4::new(0.0, 1.0, 0.0, 0.0),
    Q4::new(0.0, 0.0, 1.0, 0.0),
    Q4::new(0.0, 0.0, 0.0, 1.0),
];

/// d(R(u) v)/du for unit quaternion u = (w, x), columns ordered (w,x,y,z).
fn rotation_jacobian(u: &Q4, v: &Vector3<f64>) -> SMatrix<f64, 3, 4> {
    let w = u[0];
    let x = Vector3::new(u[1], u[2], u[3]);
    let mut jac = SMatrix::<f64, 3, 4>::zeros();
    let col_w = 2.0 * w * v + 2.0 * x.cross(v);
    jac.set_column(0, &col_w);
    for a in 0..3 {
        let e = Vector3::ith(a, 1.0);
        let col = -2.0 * x[a] * v + 2.0 * v[a] * x + 2.0 * x.dot(v) * e + 2.0 * w * e.cross(v);
        jac.set_column(a + 1, &col);
    }
    jac
}

/// Evaluates the blended warp at `v` (with normal `n`) and its derivatives.
///
/// `items` pairs blend weights with node dual quaternions, in binding order.
/// The derivative is taken through the full blend-normalize-apply chain, so
/// it matches finite differences of the same evaluation to first order.
pub fn blend_jet(items: &[(f64, DualQuat)], v: &Point3<f64>, n: &Vector3<f64>) -> Option<BlendJet> {
    assert!(items.len() <= MAX_BLEND, "too many blend items");
    let total: f64 = items.iter().map(|(w, _)| w).sum();
    if !(total > 0.0) {
        return None;
    }

    // Signed normalized coefficients, frozen at this evaluation.
    let mut coeff = [0.0f64; MAX_BLEND];
    let mut reference: Option<Q4> = None;
    let mut b_real = Q4::zeros();
    let mut b_dual = Q4::zeros();
    for (k, (w, dq)) in items.iter().enumerate() {
        if *w <= 0.0 {
            continue;
        }
        let sign = match &reference {
            None => {
                reference = Some(dq.real);
                1.0
            }
            Some(r) => {
                if dq.real.dot(r) < 0.0 {
                    -1.0
                } else {
                    1.0
                }
            }
        };
        let c = sign * w / total;
        coeff[k] = c;
        b_real += dq.real * c;
        b_dual += dq.dual * c;
    }

    let s2 = b_real.dot(&b_real);
    if s2 < 1e-24 {
        return None; // antipodal cancellation
    }
    let s = s2.sqrt();
    let u = b_real / s;

    let v_rot = qrotate(&u, &v.coords);
    let tq = qmul(&b_dual, &qconj(&b_real)) * (2.0 / s2);
    let t = Vector3::new(tq[1], tq[2], tq[3]);
    let vhat = Point3::from(v_rot + t);
    let nhat = qrotate(&u, n);

    // Chain-rule factors shared by all nodes.
    let rot_jac_v = rotation_jacobian(&u, &v.coords); // 3x4, d(R u v)/du
    let rot_jac_n = rotation_jacobian(&u, n);
    let du_dbr = (SMatrix::<f64, 4, 4>::identity() - u * u.transpose()) / s;

    // t = (2/s^2) vec(b_d b_r*): derivatives w.r.t. b_d and b_r.
    let mut dt_dbd = SMatrix::<f64, 3, 4>::zeros();
    let mut dt_dbr = SMatrix::<f64, 3, 4>::zeros();
    let g = qmul(&b_dual, &qconj(&b_real)); // unscaled
    for a in 0..4 {
        let mut ea = Q4::zeros();
        ea[a] = 1.0;
        let col_d = qmul(&ea, &qconj(&b_real)) * (2.0 / s2);
        dt_dbd.set_column(a, &Vector3::new(col_d[1], col_d[2], col_d[3]));

        let conj_ea = qconj(&ea);
        let col_r = qmul(&b_dual, &conj_ea) * (2.0 / s2) - g * (4.0 * b_real[a] / (s2 * s2));
        dt_dbr.set_column(a, &Vector3::new(col_r[1], col_r[2], col_r[3]));
    }

    let m_v = rot_jac_v * du_dbr + dt_dbr; // 3x4, applied to db_r
    let m_n = rot_jac_n * du_dbr; // 3x4

    let mut jet = BlendJet {
        len: items.len(),
        vhat,
        nhat,
        dv: [SMatrix::zeros(); MAX_BLEND],
        dn: [SMatrix::zeros(); MAX_BLEND],
    };

    for (k, (_, dq)) in items.iter().enumerate() {
        let c = coeff[k];
        if c == 0.0 {
            continue;
        }
        let rigid = dq.to_rigid();
        let p = dq.real; // unit by node invariant
        let t_k = rigid.translation;

        // db_r/dxi and db_d/dxi, columns (omega_x, omega_y, omega_z, dt_x, dt_y, dt_z)
        let mut dbr = SMatrix::<f64, 4, 6>::zeros();
        let mut dbd = SMatrix::<f64, 4, 6>::zeros();
        for a in 0..3 {
            let dp = qmul(&QB[a], &p) * 0.5; // d(exp(w) p)/dw_a at 0
            dbr.set_column(a, &(dp * c));

            // d q_k/dw_a: q_k = 0.5 t^ p with t(w) = exp(w) t_k, p(w) = e(w) p
            let dt_a = Vector3::ith(a, 1.0).cross(&t_k);
            let dq_a = (qmul(&qpure(&dt_a), &p) + qmul(&qpure(&t_k), &dp)) * 0.5;
            dbd.set_column(a, &(dq_a * c));

            // d q_k/d(dt_a): 0.5 e_a^ p
            let dq_t = qmul(&QB[a], &p) * 0.5;
            dbd.set_column(a + 3, &(dq_t * c));
        }

        jet.dv[k] = m_v * dbr + dt_dbd * dbd;
        jet.dn[k] = m_n * dbr;
    }
    Some(jet)
}
