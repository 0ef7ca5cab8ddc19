//! Pinhole camera intrinsics and the projection conventions used everywhere.
//!
//! Camera space is right-handed with +x to the right, +y down (image rows)
//! and +z forward along the optical axis. Pixel centers sit at integer
//! coordinates, so a principal point like 319.5 is the exact middle of a
//! 640-pixel row.

use nalgebra::{Point3, Vector2};

/// Pinhole intrinsics in pixels plus the image size they apply to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Kinect-class default geometry used by the synthetic harness.
    pub fn default_camera() -> Self {
        Intrinsics {
            width: 640,
            height: 576,
            fx: 525.0,
            fy: 525.0,
            cx: 319.5,
            cy: 287.5,
        }
    }

    /// Same field of view at half resolution; handy for fast tests.
    pub fn half_camera() -> Self {
        Intrinsics {
            width: 320,
            height: 288,
            fx: 262.5,
            fy: 262.5,
            cx: 159.5,
            cy: 143.5,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.width >= 1
            && self.height >= 1
            && self.fx > 0.0
            && self.fy > 0.0
            && self.cx.is_finite()
            && self.cy.is_finite()
    }

    /// Projects a camera-space point to continuous pixel coordinates.
    /// Returns `None` for points at or behind the camera plane.
    pub fn project(&self, p: &Point3<f64>) -> Option<Vector2<f64>> {
        if p.z <= 1e-9 {
            return None;
        }
        Some(Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Nearest-pixel lookup for projective data association.
    pub fn project_to_pixel(&self, p: &Point3<f64>) -> Option<(usize, usize)> {
        let uv = self.project(p)?;
        let u = uv.x.round();
        let v = uv.y.round();
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            return None;
        }
        Some((u as usize, v as usize))
    }

    /// Back-projects the pixel center (u, v) at depth `z` meters.
    pub fn backproject(&self, u: f64, v: f64, z: f64) -> Point3<f64> {
        Point3::new((u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z)
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn project_backproject_roundtrip() {
        let intr = Intrinsics::default_camera();
        let p = Point3::new(0.3, -0.2, 1.7);
        let uv = intr.project(&p).unwrap();
        let q = intr.backproject(uv.x, uv.y, p.z);
        assert_relative_eq!(p.x, q.x, epsilon = 1e-12);
        assert_relative_eq!(p.y, q.y, epsilon = 1e-12);
    }

    #[test]
    fn principal_point_projects_to_center() {
        let intr = Intrinsics::default_camera();
        let uv = intr.project(&Point3::new(0.0, 0.0, 2.0)).unwrap();
        assert_relative_eq!(uv.x, 319.5);
        assert_relative_eq!(uv.y, 287.5);
    }

    #[test]
    fn behind_camera_rejected() {
        let intr = Intrinsics::default_camera();
        assert!(intr.project(&Point3::new(0.0, 0.0, -1.0)).is_none());
        assert!(intr.project(&Point3::new(0.0, 0.0, 0.0)).is_none());
    }
}
