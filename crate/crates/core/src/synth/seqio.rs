//! Directory round-trip for capture sequences: one depth/mask/color file
//! triple per frame plus a camera parameter file, and optionally the true
//! warped meshes for later evaluation.

use crate::camera::Intrinsics;
use crate::frame::{
    read_camera_file, read_color_ppm, read_depth_file, read_mask_pgm, write_camera_file,
    write_color_ppm, write_depth_file, write_mask_pgm, CameraFile, FrameError,
};
use crate::frame::DepthFrame;
use crate::mesh::write_ply;
use crate::synth::sequence::GroundTruth;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SeqError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Mesh(#[from] crate::mesh::MeshError),
    #[error("no frames found in {0}")]
    Empty(PathBuf),
    #[error("frame {index}: {message}")]
    Inconsistent { index: usize, message: String },
}

fn depth_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("frame_{t:05}.depth"))
}
fn mask_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("frame_{t:05}.mask"))
}
fn color_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("frame_{t:05}.ppm"))
}

/// Writes every frame plus `intrinsics.json`; when `truth` is given, the
/// per-frame warped meshes land in `groundtruth/frame_%05d.ply`.
pub fn save_sequence(
    dir: &Path,
    frames: &[DepthFrame],
    depth_scale: f64,
    truth: Option<&GroundTruth>,
) -> Result<(), SeqError> {
    std::fs::create_dir_all(dir)?;
    let Some(first) = frames.first() else {
        return Err(SeqError::Empty(dir.to_path_buf()));
    };
    let cam = CameraFile {
        fx: first.intrinsics.fx,
        fy: first.intrinsics.fy,
        cx: first.intrinsics.cx,
        cy: first.intrinsics.cy,
        depth_scale,
    };
    write_camera_file(&dir.join("intrinsics.json"), &cam)?;
    for (t, frame) in frames.iter().enumerate() {
        let (w, h) = (frame.intrinsics.width, frame.intrinsics.height);
        write_depth_file(&depth_path(dir, t), &frame.depth, w, h, depth_scale)?;
        write_mask_pgm(&mask_path(dir, t), &frame.mask, w, h)?;
        write_color_ppm(&color_path(dir, t), &frame.color, w, h)?;
    }
    if let Some(truth) = truth {
        let gt_dir = dir.join("groundtruth");
        std::fs::create_dir_all(&gt_dir)?;
        for t in 0..truth.frames.len() {
            let mesh = truth.warped_mesh(t);
            write_ply(&mesh, &gt_dir.join(format!("frame_{t:05}.ply")))?;
        }
    }
    Ok(())
}

/// Loads frames `frame_00000.depth` onward until the numbering stops.
/// Masks are required; color files are optional and default to black.
pub fn load_sequence(dir: &Path) -> Result<Vec<DepthFrame>, SeqError> {
    let cam = read_camera_file(&dir.join("intrinsics.json"))?;
    let mut frames = Vec::new();
    for t in 0.. {
        let dp = depth_path(dir, t);
        if !dp.exists() {
            break;
        }
        let (depth, w, h) = read_depth_file(&dp, cam.depth_scale)?;
        let (mask, mw, mh) = read_mask_pgm(&mask_path(dir, t))?;
        if (mw, mh) != (w, h) {
            return Err(SeqError::Inconsistent {
                index: t,
                message: format!("mask {mw}x{mh} does not match depth {w}x{h}"),
            });
        }
        let cp = color_path(dir, t);
        let color = if cp.exists() {
            let (color, cw, ch) = read_color_ppm(&cp)?;
            if (cw, ch) != (w, h) {
                return Err(SeqError::Inconsistent {
                    index: t,
                    message: format!("color {cw}x{ch} does not match depth {w}x{h}"),
                });
            }
            color
        } else {
            vec![[0u8; 3]; w * h]
        };
        let intrinsics = Intrinsics {
            width: w,
            height: h,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
        };
        frames.push(DepthFrame::new(depth, mask, color, intrinsics, t)?);
    }
    if frames.is_empty() {
        return Err(SeqError::Empty(dir.to_path_buf()));
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::sequence::{generate_sequence, TurntableScript};
    use crate::synth::shapes::icosphere;
    use nalgebra::Point3;

    #[test]
    fn sequence_round_trips_through_disk() {
        let mut script = TurntableScript::new(icosphere(0.4, &Point3::origin(), 3), 3);
        script.camera = Intrinsics::half_camera();
        let (frames, truth) = generate_sequence(&script);
        let dir = tempfile::tempdir().unwrap();
        save_sequence(dir.path(), &frames, 0.001, Some(&truth)).unwrap();
        let loaded = load_sequence(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        for (orig, back) in frames.iter().zip(&loaded) {
            assert_eq!(orig.mask, back.mask);
            assert_eq!(orig.color, back.color);
            // Depth survives millimeter quantization.
            for (a, b) in orig.depth.iter().zip(&back.depth) {
                if *a > 0.0 {
                    assert!((a - b).abs() <= 0.0006, "depth {a} vs {b}");
                } else {
                    assert_eq!(*b, 0.0);
                }
            }
            assert_eq!(back.intrinsics, orig.intrinsics);
        }
        assert!(dir.path().join("groundtruth/frame_00002.ply").exists());
    }

    #[test]
    fn missing_directory_and_empty_inputs_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_sequence(&dir.path().join("nope")).is_err());
        assert!(matches!(
            save_sequence(dir.path(), &[], 0.001, None),
            Err(SeqError::Empty(_))
        ));
    }
}
