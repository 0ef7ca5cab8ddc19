//! One RGBD observation: metric depth, foreground mask, color, and the
//! camera that produced them, plus depth preprocessing (bilateral filter,
//! normal maps) and the on-disk codecs for each channel.
//!
//! Depth files are raw little-endian u16 millimeters behind a 16-byte
//! header (magic `DPTH`, u32 width/height/reserved); masks are binary PGM
//! (P5) and color is binary PPM (P6).

use crate::camera::Intrinsics;
use nalgebra::{Point3, Vector3};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("channel size {got} does not match {width}x{height}", width = .width, height = .height)]
    SizeMismatch {
        got: usize,
        width: usize,
        height: usize,
    },
    #[error("frame resolution {fw}x{fh} does not match intrinsics {iw}x{ih}")]
    ResolutionMismatch {
        fw: usize,
        fh: usize,
        iw: usize,
        ih: usize,
    },
    #[error("invalid intrinsics: fx, fy must be positive")]
    BadIntrinsics,
    #[error("negative depth value at pixel {0}")]
    NegativeDepth(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed {kind} file: {detail}")]
    Format { kind: &'static str, detail: String },
}

fn format_err(kind: &'static str, detail: impl Into<String>) -> FrameError {
    FrameError::Format {
        kind,
        detail: detail.into(),
    }
}

/// One time step of the input stream. Depth is meters with 0 marking an
/// invalid pixel; the mask is foreground/background; color is 8-bit RGB.
#[derive(Debug, Clone)]
pub struct DepthFrame {
    pub depth: Vec<f64>,
    pub mask: Vec<bool>,
    pub color: Vec<[u8; 3]>,
    pub intrinsics: Intrinsics,
    pub frame_index: usize,
}

impl DepthFrame {
    /// Builds a frame, zeroing the mask wherever depth is invalid.
    pub fn new(
        depth: Vec<f64>,
        mask: Vec<bool>,
        color: Vec<[u8; 3]>,
        intrinsics: Intrinsics,
        frame_index: usize,
    ) -> Result<Self, FrameError> {
        if !intrinsics.is_valid() {
            return Err(FrameError::BadIntrinsics);
        }
        let n = intrinsics.width * intrinsics.height;
        for (len, _name) in [(depth.len(), "depth"), (mask.len(), "mask")] {
            if len != n {
                return Err(FrameError::SizeMismatch {
                    got: len,
                    width: intrinsics.width,
                    height: intrinsics.height,
                });
            }
        }
        let color = if color.is_empty() {
            vec![[0u8; 3]; n]
        } else if color.len() == n {
            color
        } else {
            return Err(FrameError::SizeMismatch {
                got: color.len(),
                width: intrinsics.width,
                height: intrinsics.height,
            });
        };
        if let Some(i) = depth.iter().position(|&d| d < 0.0) {
            return Err(FrameError::NegativeDepth(i));
        }
        let mut frame = DepthFrame {
            depth,
            mask,
            color,
            intrinsics,
            frame_index,
        };
        frame.sync_mask();
        Ok(frame)
    }

    fn sync_mask(&mut self) {
        for (m, &d) in self.mask.iter_mut().zip(&self.depth) {
            if d <= 0.0 {
                *m = false;
            }
        }
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    #[inline]
    pub fn idx(&self, u: usize, v: usize) -> usize {
        v * self.intrinsics.width + u
    }

    /// Depth in meters at integer pixel, `None` when out of bounds or invalid.
    pub fn depth_at(&self, u: i64, v: i64) -> Option<f64> {
        if u < 0 || v < 0 || u as usize >= self.width() || v as usize >= self.height() {
            return None;
        }
        let d = self.depth[v as usize * self.width() + u as usize];
        (d > 0.0).then_some(d)
    }

    pub fn mask_at(&self, u: i64, v: i64) -> bool {
        if u < 0 || v < 0 || u as usize >= self.width() || v as usize >= self.height() {
            return false;
        }
        self.mask[v as usize * self.width() + u as usize]
    }

    /// Camera-space point of a pixel, if its depth is valid.
    pub fn point_at(&self, u: usize, v: usize) -> Option<Point3<f64>> {
        let d = self.depth_at(u as i64, v as i64)?;
        Some(self.intrinsics.backproject(u as f64, v as f64, d))
    }

    /// Bilinear color sample in [0,1]^3; pixel centers at integer coordinates.
    pub fn sample_color(&self, u: f64, v: f64) -> Option<[f64; 3]> {
        let (w, h) = (self.width() as f64, self.height() as f64);
        if !(u >= 0.0 && v >= 0.0 && u <= w - 1.0 && v <= h - 1.0) {
            return None;
        }
        let u0 = u.floor().min(w - 2.0).max(0.0);
        let v0 = v.floor().min(h - 2.0).max(0.0);
        let (fu, fv) = (u - u0, v - v0);
        let (u0, v0) = (u0 as usize, v0 as usize);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let g = |du: usize, dv: usize| self.color[self.idx(u0 + du, v0 + dv)][c] as f64 / 255.0;
            out[c] = g(0, 0) * (1.0 - fu) * (1.0 - fv)
                + g(1, 0) * fu * (1.0 - fv)
                + g(0, 1) * (1.0 - fu) * fv
                + g(1, 1) * fu * fv;
        }
        Some(out)
    }

    /// Returns a copy with bilaterally filtered depth: a Gaussian in both
    /// pixel distance and depth difference, which smooths sensor noise
    /// while leaving depth discontinuities in place.
    pub fn bilateral_filtered(&self, radius: usize, sigma_space: f64, sigma_depth: f64) -> Self {
        let (w, h) = (self.width(), self.height());
        let mut out = self.clone();
        let inv2ss = 1.0 / (2.0 * sigma_space * sigma_space);
        let inv2sd = 1.0 / (2.0 * sigma_depth * sigma_depth);
        let r = radius as i64;
        for v in 0..h as i64 {
            for u in 0..w as i64 {
                let Some(center) = self.depth_at(u, v) else {
                    continue;
                };
                let mut num = 0.0;
                let mut den = 0.0;
                for dv in -r..=r {
                    for du in -r..=r {
                        let Some(d) = self.depth_at(u + du, v + dv) else {
                            continue;
                        };
                        let dd = d - center;
                        let wgt = (-((du * du + dv * dv) as f64) * inv2ss - dd * dd * inv2sd).exp();
                        num += wgt * d;
                        den += wgt;
                    }
                }
                out.depth[(v as usize) * w + u as usize] = num / den;
            }
        }
        out
    }

    /// Camera-space normal map from central differences of the depth map.
    /// Normals are unit length and oriented toward the camera (negative z).
    /// `None` where any of the four neighbors is invalid or the local depth
    /// jump exceeds `max_jump` (a discontinuity guard).
    pub fn normal_map(&self, max_jump: f64) -> Vec<Option<Vector3<f64>>> {
        let (w, h) = (self.width(), self.height());
        let mut normals = vec![None; w * h];
        for v in 0..h as i64 {
            for u in 0..w as i64 {
                let (Some(c), Some(dl), Some(dr), Some(du_), Some(dd)) = (
                    self.depth_at(u, v),
                    self.depth_at(u - 1, v),
                    self.depth_at(u + 1, v),
                    self.depth_at(u, v - 1),
                    self.depth_at(u, v + 1),
                ) else {
                    continue;
                };
                if (dl - c).abs().max((dr - c).abs()).max((du_ - c).abs()).max((dd - c).abs())
                    > max_jump
                {
                    continue;
                }
                let p = |uu: i64, vv: i64, d: f64| {
                    self.intrinsics.backproject(uu as f64, vv as f64, d)
                };
                let dx = p(u + 1, v, dr) - p(u - 1, v, dl);
                let dy = p(u, v + 1, dd) - p(u, v - 1, du_);
                let mut n = dx.cross(&dy);
                let len = n.norm();
                if len < 1e-12 {
                    continue;
                }
                n /= len;
                if n.z > 0.0 {
                    n = -n;
                }
                normals[(v as usize) * w + u as usize] = Some(n);
            }
        }
        normals
    }

    /// Fraction of mask pixels that differ from `other`'s mask.
    pub fn mask_difference(&self, other_mask: &[bool]) -> f64 {
        let n = self.mask.len();
        assert_eq!(other_mask.len(), n);
        let diff = self
            .mask
            .iter()
            .zip(other_mask)
            .filter(|(a, b)| a != b)
            .count();
        diff as f64 / n as f64
    }
}

const DEPTH_MAGIC: &[u8; 4] = b"DPTH";

/// Writes depth as raw u16 millimeters with a 16-byte header.
pub fn write_depth_file(
    path: &Path,
    depth: &[f64],
    width: usize,
    height: usize,
    depth_scale: f64,
) -> Result<(), FrameError> {
    if depth.len() != width * height {
        return Err(FrameError::SizeMismatch {
            got: depth.len(),
            width,
            height,
        });
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(DEPTH_MAGIC)?;
    w.write_all(&(width as u32).to_le_bytes())?;
    w.write_all(&(height as u32).to_le_bytes())?;
    w.write_all(&0u32.to_le_bytes())?;
    for &d in depth {
        let ticks = if d <= 0.0 {
            0u16
        } else {
            (d / depth_scale).round().clamp(0.0, u16::MAX as f64) as u16
        };
        w.write_all(&ticks.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a depth file, returning (depth meters, width, height).
pub fn read_depth_file(path: &Path, depth_scale: f64) -> Result<(Vec<f64>, usize, usize), FrameError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut header = [0u8; 16];
    r.read_exact(&mut header)
        .map_err(|_| format_err("depth", "truncated header"))?;
    if &header[0..4] != DEPTH_MAGIC {
        return Err(format_err("depth", "bad magic"));
    }
    let width = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut buf = vec![0u8; width * height * 2];
    r.read_exact(&mut buf)
        .map_err(|_| format_err("depth", "truncated pixel data"))?;
    let depth = buf
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as f64 * depth_scale)
        .collect();
    Ok((depth, width, height))
}

/// Writes a binary PGM (P5) mask: foreground 255, background 0.
pub fn write_mask_pgm(path: &Path, mask: &[bool], width: usize, height: usize) -> Result<(), FrameError> {
    if mask.len() != width * height {
        return Err(FrameError::SizeMismatch {
            got: mask.len(),
            width,
            height,
        });
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write!(w, "P5\n{} {}\n255\n", width, height)?;
    let bytes: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_mask_pgm(path: &Path) -> Result<(Vec<bool>, usize, usize), FrameError> {
    let data = std::fs::read(path)?;
    let (width, height, maxval, offset) = parse_pnm_header(&data, b"P5")?;
    if maxval > 255 {
        return Err(format_err("pgm", "16-bit masks unsupported"));
    }
    let n = width * height;
    if data.len() < offset + n {
        return Err(format_err("pgm", "truncated pixel data"));
    }
    let half = (maxval / 2) as u8;
    let mask = data[offset..offset + n].iter().map(|&b| b > half).collect();
    Ok((mask, width, height))
}

/// Writes binary PPM (P6) color.
pub fn write_color_ppm(
    path: &Path,
    color: &[[u8; 3]],
    width: usize,
    height: usize,
) -> Result<(), FrameError> {
    if color.len() != width * height {
        return Err(FrameError::SizeMismatch {
            got: color.len(),
            width,
            height,
        });
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write!(w, "P6\n{} {}\n255\n", width, height)?;
    for px in color {
        w.write_all(px)?;
    }
    Ok(())
}

pub fn read_color_ppm(path: &Path) -> Result<(Vec<[u8; 3]>, usize, usize), FrameError> {
    let data = std::fs::read(path)?;
    let (width, height, maxval, offset) = parse_pnm_header(&data, b"P6")?;
    if maxval > 255 {
        return Err(format_err("ppm", "16-bit color unsupported"));
    }
    let n = width * height;
    if data.len() < offset + 3 * n {
        return Err(format_err("ppm", "truncated pixel data"));
    }
    let color = data[offset..offset + 3 * n]
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    Ok((color, width, height))
}

/// Parses a PNM header (magic, width, height, maxval with comments and
/// whitespace), returning the offset of the first pixel byte.
fn parse_pnm_header(data: &[u8], magic: &[u8]) -> Result<(usize, usize, u32, usize), FrameError> {
    let kind = if magic == b"P5" { "pgm" } else { "ppm" };
    if data.len() < 2 || &data[0..2] != magic {
        return Err(format_err(kind, "bad magic"));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        // Skip whitespace and '#' comments.
        loop {
            while pos < data.len() && data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < data.len() && data[pos] == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < data.len() && data[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(kind, "missing header field"));
        }
        *field = std::str::from_utf8(&data[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| format_err(kind, "bad header field"))?;
    }
    if pos >= data.len() || !data[pos].is_ascii_whitespace() {
        return Err(format_err(kind, "missing header terminator"));
    }
    pos += 1;
    Ok((fields[0] as usize, fields[1] as usize, fields[2], pos))
}

/// Camera description stored next to a sequence: focal lengths, principal
/// point, and the meters-per-tick scale of the depth files, one `key=value`
/// per line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraFile {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub depth_scale: f64,
}

pub fn write_camera_file(path: &Path, cam: &CameraFile) -> Result<(), FrameError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "fx={}", cam.fx)?;
    writeln!(w, "fy={}", cam.fy)?;
    writeln!(w, "cx={}", cam.cx)?;
    writeln!(w, "cy={}", cam.cy)?;
    writeln!(w, "depth_scale={}", cam.depth_scale)?;
    Ok(())
}

pub fn read_camera_file(path: &Path) -> Result<CameraFile, FrameError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut cam = CameraFile {
        fx: f64::NAN,
        fy: f64::NAN,
        cx: f64::NAN,
        cy: f64::NAN,
        depth_scale: f64::NAN,
    };
    for line in reader.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format_err("camera", format!("expected key=value, got {line:?}")));
        };
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| format_err("camera", format!("bad number for {key}")))?;
        match key.trim() {
            "fx" => cam.fx = value,
            "fy" => cam.fy = value,
            "cx" => cam.cx = value,
            "cy" => cam.cy = value,
            "depth_scale" => cam.depth_scale = value,
            other => {
                return Err(format_err("camera", format!("unknown key {other:?}")));
            }
        }
    }
    for (name, v) in [
        ("fx", cam.fx),
        ("fy", cam.fy),
        ("cx", cam.cx),
        ("cy", cam.cy),
        ("depth_scale", cam.depth_scale),
    ] {
        if !v.is_finite() {
            return Err(format_err("camera", format!("missing key {name}")));
        }
    }
    Ok(cam)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn flat_frame(depth_m: f64) -> DepthFrame {
        let cam = Intrinsics {
            width: 32,
            height: 24,
            fx: 30.0,
            fy: 30.0,
            cx: 15.5,
            cy: 11.5,
        };
        let n = cam.width * cam.height;
        DepthFrame::new(vec![depth_m; n], vec![true; n], Vec::new(), cam, 0).unwrap()
    }

    #[test]
    fn mask_cleared_on_invalid_depth() {
        let cam = Intrinsics {
            width: 2,
            height: 1,
            fx: 10.0,
            fy: 10.0,
            cx: 0.5,
            cy: 0.0,
        };
        let f = DepthFrame::new(vec![1.0, 0.0], vec![true, true], Vec::new(), cam, 3).unwrap();
        assert_eq!(f.mask, vec![true, false]);
        assert_eq!(f.depth_at(1, 0), None);
        assert_eq!(f.depth_at(0, 0), Some(1.0));
    }

    #[test]
    fn bilateral_preserves_flat_plane_and_edges() {
        let mut f = flat_frame(1.0);
        // A step edge down the middle.
        for v in 0..f.height() {
            for u in 16..f.width() {
                let i = f.idx(u, v);
                f.depth[i] = 1.5;
            }
        }
        let smooth = f.bilateral_filtered(2, 1.5, 0.03);
        // Values far from the edge are untouched, and the edge stays sharp.
        assert_relative_eq!(smooth.depth[smooth.idx(4, 10)], 1.0, epsilon = 1e-9);
        assert_relative_eq!(smooth.depth[smooth.idx(28, 10)], 1.5, epsilon = 1e-9);
        assert_relative_eq!(smooth.depth[smooth.idx(15, 10)], 1.0, epsilon = 1e-6);
        assert_relative_eq!(smooth.depth[smooth.idx(16, 10)], 1.5, epsilon = 1e-6);
    }

    #[test]
    fn frontal_plane_normals_point_at_camera() {
        let f = flat_frame(1.2);
        let normals = f.normal_map(0.05);
        let n = normals[f.idx(10, 10)].unwrap();
        assert_relative_eq!(n, Vector3::new(0.0, 0.0, -1.0), epsilon = 1e-9);
        // Border pixels lack neighbors.
        assert!(normals[f.idx(0, 0)].is_none());
    }

    #[test]
    fn slanted_plane_normal_matches_analytic() {
        // Plane z = 1.0 + 0.2 * x in camera space.
        let cam = Intrinsics {
            width: 64,
            height: 48,
            fx: 60.0,
            fy: 60.0,
            cx: 31.5,
            cy: 23.5,
        };
        let mut depth = vec![0.0; cam.width * cam.height];
        for v in 0..cam.height {
            for u in 0..cam.width {
                // Solve z = 1 + 0.2 * (u-cx) z / fx for z.
                let a = 0.2 * (u as f64 - cam.cx) / cam.fx;
                depth[v * cam.width + u] = 1.0 / (1.0 - a);
            }
        }
        let f = DepthFrame::new(depth, vec![true; cam.width * cam.height], Vec::new(), cam, 0)
            .unwrap();
        let normals = f.normal_map(0.2);
        let n = normals[f.idx(32, 24)].unwrap();
        let expect = Vector3::new(0.2, 0.0, -1.0).normalize();
        assert_relative_eq!(n, expect, epsilon = 1e-3);
    }

    #[test]
    fn depth_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frame_00000.depth");
        let depth = vec![0.0, 0.5, 1.234, 3.999];
        write_depth_file(&path, &depth, 2, 2, 0.001).unwrap();
        let (got, w, h) = read_depth_file(&path, 0.001).unwrap();
        assert_eq!((w, h), (2, 2));
        for (a, b) in depth.iter().zip(&got) {
            assert!((a - b).abs() <= 0.0005 + 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn mask_and_color_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mpath = dir.path().join("m.pgm");
        let mask = vec![true, false, false, true, true, false];
        write_mask_pgm(&mpath, &mask, 3, 2).unwrap();
        let (got, w, h) = read_mask_pgm(&mpath).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(got, mask);

        let cpath = dir.path().join("c.ppm");
        let color = vec![[1, 2, 3], [4, 5, 6], [250, 128, 0], [9, 9, 9]];
        write_color_ppm(&cpath, &color, 2, 2).unwrap();
        let (got, w, h) = read_color_ppm(&cpath).unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(got, color);
    }

    #[test]
    fn camera_file_roundtrip_and_unknown_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("intrinsics.json");
        let cam = CameraFile {
            fx: 525.0,
            fy: 525.0,
            cx: 319.5,
            cy: 287.5,
            depth_scale: 0.001,
        };
        write_camera_file(&path, &cam).unwrap();
        assert_eq!(read_camera_file(&path).unwrap(), cam);

        std::fs::write(&path, "fx=1\nfy=1\ncx=0\ncy=0\ndepth_scale=0.001\nbogus=3\n").unwrap();
        assert!(read_camera_file(&path).is_err());
    }

    #[test]
    fn bilinear_color_sampling() {
        let cam = Intrinsics {
            width: 2,
            height: 2,
            fx: 1.0,
            fy: 1.0,
            cx: 0.5,
            cy: 0.5,
        };
        let color = vec![[0, 0, 0], [255, 0, 0], [0, 0, 0], [255, 0, 0]];
        let f = DepthFrame::new(vec![1.0; 4], vec![true; 4], color, cam, 0).unwrap();
        let c = f.sample_color(0.5, 0.5).unwrap();
        assert_relative_eq!(c[0], 0.5, epsilon = 1e-12);
        assert!(f.sample_color(-0.1, 0.0).is_none());
    }
}
