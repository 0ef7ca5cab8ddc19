//! Software z-buffer rasterizer used for synthetic depth frames, rendered
//! silhouettes, and visibility tests.
//!
//! Triangles are projected through the pinhole camera and filled with
//! screen-space barycentric coordinates; depth and vertex attributes are
//! interpolated perspective-correctly (linear in 1/z). Triangles with any
//! vertex behind the camera are dropped rather than clipped, which is fine
//! for the scenes here where the subject stays well in front.

use crate::camera::Intrinsics;
use crate::mesh::TriangleMesh;
use nalgebra::Vector2;
use rayon::prelude::*;

/// Rendered buffers: depth in meters (0 = no coverage), linear-light RGB in
/// [0,1], and the index of the front-most face per pixel (-1 = none).
#[derive(Debug, Clone)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    pub face: Vec<i32>,
}

impl Raster {
    pub fn coverage_mask(&self) -> Vec<bool> {
        self.depth.iter().map(|&d| d > 0.0).collect()
    }

    pub fn color_u8(&self) -> Vec<[u8; 3]> {
        self.color
            .iter()
            .map(|c| {
                [
                    (c[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (c[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (c[2].clamp(0.0, 1.0) * 255.0).round() as u8,
                ]
            })
            .collect()
    }
}

struct ProjectedVertex {
    screen: Vector2<f64>,
    inv_z: f64,
    valid: bool,
}

/// Renders the mesh into depth/color/face-id buffers. Uncolored meshes
/// render flat white.
pub fn rasterize(mesh: &TriangleMesh, cam: &Intrinsics) -> Raster {
    let (w, h) = (cam.width, cam.height);
    let mut out = Raster {
        width: w,
        height: h,
        depth: vec![0.0; w * h],
        color: vec![[0.0; 3]; w * h],
        face: vec![-1; w * h],
    };
    let projected: Vec<ProjectedVertex> = mesh
        .vertices
        .iter()
        .map(|v| match cam.project(v) {
            Some(s) => ProjectedVertex {
                screen: s,
                inv_z: 1.0 / v.z,
                valid: true,
            },
            None => ProjectedVertex {
                screen: Vector2::zeros(),
                inv_z: 0.0,
                valid: false,
            },
        })
        .collect();

    let white = [1.0, 1.0, 1.0];
    let vertex_color = |i: u32| -> [f64; 3] {
        mesh.colors
            .as_ref()
            .map(|c| c[i as usize])
            .unwrap_or(white)
    };

    // Rasterize in parallel over horizontal bands: each band owns its rows,
    // so face order never matters beyond the z-test.
    let rows_per_band = 16usize;
    let bands: Vec<(usize, Vec<(f64, [f64; 3], i32)>)> = (0..h.div_ceil(rows_per_band))
        .into_par_iter()
        .map(|band| {
            let row0 = band * rows_per_band;
            let row1 = ((band + 1) * rows_per_band).min(h);
            let mut depth = vec![0.0f64; (row1 - row0) * w];
            let mut color = vec![[0.0; 3]; (row1 - row0) * w];
            let mut face = vec![-1i32; (row1 - row0) * w];
            for (fi, f) in mesh.faces.iter().enumerate() {
                let [a, b, c] = [&projected[f[0] as usize], &projected[f[1] as usize], &projected[f[2] as usize]];
                if !(a.valid && b.valid && c.valid) {
                    continue;
                }
                let area = (b.screen - a.screen).perp(&(c.screen - a.screen));
                if area.abs() < 1e-12 {
                    continue;
                }
                let min_x = a.screen.x.min(b.screen.x).min(c.screen.x).floor().max(0.0) as usize;
                let max_x = (a.screen.x.max(b.screen.x).max(c.screen.x).ceil() as usize).min(w - 1);
                let min_y = a
                    .screen
                    .y
                    .min(b.screen.y)
                    .min(c.screen.y)
                    .floor()
                    .max(row0 as f64) as usize;
                let max_y = (a.screen.y.max(b.screen.y).max(c.screen.y).ceil() as usize)
                    .min(row1.saturating_sub(1));
                if min_y > max_y || min_x > max_x {
                    continue;
                }
                let cols = [vertex_color(f[0]), vertex_color(f[1]), vertex_color(f[2])];
                for py in min_y..=max_y {
                    for px in min_x..=max_x {
                        let p = Vector2::new(px as f64, py as f64);
                        let w0 = (b.screen - a.screen).perp(&(p - a.screen)) / area;
                        let w1 = (c.screen - b.screen).perp(&(p - b.screen)) / area;
                        let w2 = 1.0 - w0 - w1;
                        // w0 weights c, w1 weights a, w2 weights b.
                        let (la, lb, lc) = (w1, w2, w0);
                        let eps = -1e-9;
                        if la < eps || lb < eps || lc < eps {
                            continue;
                        }
                        let inv_z = la * a.inv_z + lb * b.inv_z + lc * c.inv_z;
                        if inv_z <= 0.0 {
                            continue;
                        }
                        let z = 1.0 / inv_z;
                        let i = (py - row0) * w + px;
                        if depth[i] == 0.0 || z < depth[i] {
                            depth[i] = z;
                            face[i] = fi as i32;
                            let mut rgb = [0.0; 3];
                            for ch in 0..3 {
                                rgb[ch] = z
                                    * (la * cols[0][ch] * a.inv_z
                                        + lb * cols[1][ch] * b.inv_z
                                        + lc * cols[2][ch] * c.inv_z);
                            }
                            color[i] = rgb;
                        }
                    }
                }
            }
            (row0, depth.into_iter().zip(color).zip(face).map(|((d, c), f)| (d, c, f)).collect())
        })
        .collect();

    for (row0, band) in bands {
        for (i, (d, c, f)) in band.into_iter().enumerate() {
            let dst = row0 * w + i;
            out.depth[dst] = d;
            out.color[dst] = c;
            out.face[dst] = f;
        }
    }
    out
}

/// Depth-only rendering of the mesh (convenience wrapper).
pub fn render_depth(mesh: &TriangleMesh, cam: &Intrinsics) -> Vec<f64> {
    rasterize(mesh, cam).depth
}
