//! Exact Euclidean distance transform of binary masks, plus signed
//! bilinear sampling used by the silhouette-alignment term.
//!
//! The boundary of a mask is the set of foreground pixels that touch a
//! background pixel 4-connectedly or sit on the image border. Every pixel
//! stores its Euclidean distance to the nearest boundary pixel; the signed
//! view negates distances inside the mask so the field crosses zero at the
//! silhouette like a signed distance function.

use nalgebra::Vector2;

/// Stand-in infinity that survives the parabola arithmetic below.
const BIG: f64 = 1e20;

#[derive(Debug, Clone)]
pub struct DistanceTransformImage {
    pub width: usize,
    pub height: usize,
    /// Unsigned distance to the nearest boundary pixel, in pixels.
    pub values: Vec<f64>,
    /// Copy of the input mask.
    pub inside_mask: Vec<bool>,
}

/// One-dimensional squared-distance transform (lower envelope of
/// parabolas); `f` holds source costs, `d` receives the result.
fn dt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = -BIG;
    z[1] = BIG;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                break;
            }
        }
        if s <= z[k] && k == 0 {
            // The new parabola dominates everything so far.
            v[0] = q;
            z[0] = -BIG;
            z[1] = BIG;
        } else {
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = BIG;
        }
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        d[q] = dq * dq + f[v[k]];
    }
}

/// Exact Euclidean distance transform of `mask` (row-major, `width` x
/// `height`). A mask without any foreground has no boundary; all values are
/// zero in that degenerate case.
pub fn distance_transform(mask: &[bool], width: usize, height: usize) -> DistanceTransformImage {
    assert_eq!(mask.len(), width * height, "mask size mismatch");
    let mut cost = vec![BIG; width * height];
    let mut any_boundary = false;
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if !mask[i] {
                continue;
            }
            let on_border = x == 0 || y == 0 || x + 1 == width || y + 1 == height;
            let bg_neighbor = (x > 0 && !mask[i - 1])
                || (x + 1 < width && !mask[i + 1])
                || (y > 0 && !mask[i - width])
                || (y + 1 < height && !mask[i + width]);
            if on_border || bg_neighbor {
                cost[i] = 0.0;
                any_boundary = true;
            }
        }
    }
    if !any_boundary {
        return DistanceTransformImage {
            width,
            height,
            values: vec![0.0; width * height],
            inside_mask: mask.to_vec(),
        };
    }

    // Columns, then rows.
    let mut f = vec![0.0; width.max(height)];
    let mut d = vec![0.0; width.max(height)];
    let mut v = vec![0usize; width.max(height)];
    let mut z = vec![0.0; width.max(height) + 1];
    for x in 0..width {
        for y in 0..height {
            f[y] = cost[y * width + x];
        }
        dt_1d(&f[..height], &mut d[..height], &mut v, &mut z);
        for y in 0..height {
            cost[y * width + x] = d[y];
        }
    }
    for y in 0..height {
        f[..width].copy_from_slice(&cost[y * width..(y + 1) * width]);
        dt_1d(&f[..width], &mut d[..width], &mut v, &mut z);
        cost[y * width..(y + 1) * width].copy_from_slice(&d[..width]);
    }

    DistanceTransformImage {
        width,
        height,
        values: cost.into_iter().map(f64::sqrt).collect(),
        inside_mask: mask.to_vec(),
    }
}

impl DistanceTransformImage {
    #[inline]
    fn signed_pixel(&self, x: usize, y: usize) -> f64 {
        let i = y * self.width + x;
        if self.inside_mask[i] {
            -self.values[i]
        } else {
            self.values[i]
        }
    }

    fn cell(&self, x: f64, y: f64) -> Option<(usize, usize, f64, f64)> {
        if !(x.is_finite() && y.is_finite()) {
            return None;
        }
        if x < 0.0 || y < 0.0 || x > (self.width - 1) as f64 || y > (self.height - 1) as f64 {
            return None;
        }
        let ix = (x.floor() as usize).min(self.width - 2);
        let iy = (y.floor() as usize).min(self.height - 2);
        Some((ix, iy, x - ix as f64, y - iy as f64))
    }

    /// Bilinear sample of the signed field at pixel coordinates (pixel
    /// centers on integers); `None` outside the image.
    pub fn signed_at(&self, x: f64, y: f64) -> Option<f64> {
        let (ix, iy, fx, fy) = self.cell(x, y)?;
        let v00 = self.signed_pixel(ix, iy);
        let v10 = self.signed_pixel(ix + 1, iy);
        let v01 = self.signed_pixel(ix, iy + 1);
        let v11 = self.signed_pixel(ix + 1, iy + 1);
        Some(
            v00 * (1.0 - fx) * (1.0 - fy)
                + v10 * fx * (1.0 - fy)
                + v01 * (1.0 - fx) * fy
                + v11 * fx * fy,
        )
    }

    /// Analytic gradient of [`Self::signed_at`] within its bilinear cell.
    pub fn signed_gradient(&self, x: f64, y: f64) -> Option<Vector2<f64>> {
        let (ix, iy, fx, fy) = self.cell(x, y)?;
        let v00 = self.signed_pixel(ix, iy);
        let v10 = self.signed_pixel(ix + 1, iy);
        let v01 = self.signed_pixel(ix, iy + 1);
        let v11 = self.signed_pixel(ix + 1, iy + 1);
        let dx = (v10 - v00) * (1.0 - fy) + (v11 - v01) * fy;
        let dy = (v01 - v00) * (1.0 - fx) + (v11 - v10) * fx;
        Some(Vector2::new(dx, dy))
    }
}
