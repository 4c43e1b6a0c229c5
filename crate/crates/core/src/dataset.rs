//! On-disk posed RGB-D datasets.
//!
//! A dataset directory holds `poses.jsonl`, one JSON object per frame with the
//! image id, the row-major 4×4 camera-to-world pose and the intrinsics, plus
//! `<id>.png` (8-bit RGB) and `<id>.depth` (`DPTH` binary) per frame.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Mat3, Pose, Vec3};
use crate::io::{decode_depth, decode_png, encode_depth, encode_png, write_atomic, write_text_atomic};
use crate::map_learning::{Frame, PosedDataset};
use crate::renderer::RgbdImage;

pub const POSES_FILE: &str = "poses.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub id: String,
    pub pose: [f64; 16],
    pub intrinsics: CameraIntrinsics,
}

pub fn pose_to_matrix(p: &Pose) -> [f64; 16] {
    let mut m = [0.0; 16];
    for r in 0..3 {
        for c in 0..3 {
            m[4 * r + c] = p.rotation[(r, c)];
        }
        m[4 * r + 3] = p.translation[r];
    }
    m[15] = 1.0;
    m
}

pub fn matrix_to_pose(m: &[f64; 16]) -> Result<Pose> {
    let rotation = Mat3::from_fn(|r, c| m[4 * r + c]);
    let translation = Vec3::new(m[3], m[7], m[11]);
    let orth = (rotation.transpose() * rotation - Mat3::identity()).abs().max();
    if m[12..15].iter().any(|&v| v != 0.0) || m[15] != 1.0 || orth > 1e-6 || rotation.determinant() < 0.0 {
        return Err(Error::Dataset("pose is not a rigid transform".into()));
    }
    Ok(Pose::new(rotation, translation))
}

pub fn frame_id(n: usize) -> String {
    format!("{n:06}")
}

pub fn save_dataset(dataset: &PosedDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut lines = String::new();
    for (n, f) in dataset.frames().iter().enumerate() {
        let id = frame_id(n);
        let k = f.image.intrinsics;
        write_atomic(&dir.join(format!("{id}.png")), &encode_png(k.width, k.height, &f.image.rgb)?)?;
        write_atomic(&dir.join(format!("{id}.depth")), &encode_depth(k.width, k.height, &f.image.depth))?;
        let rec = PoseRecord { id, pose: pose_to_matrix(&f.pose), intrinsics: k };
        lines.push_str(&serde_json::to_string(&rec)?);
        lines.push('\n');
    }
    write_text_atomic(&dir.join(POSES_FILE), &lines)
}

pub fn load_dataset(dir: &Path) -> Result<PosedDataset> {
    let index = dir.join(POSES_FILE);
    let text = fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?;
    let mut frames = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PoseRecord =
            serde_json::from_str(line).map_err(|e| Error::Dataset(format!("{}:{}: {e}", index.display(), line_no + 1)))?;
        rec.intrinsics.validate()?;
        let k = rec.intrinsics;
        let png_path = dir.join(format!("{}.png", rec.id));
        let depth_path = dir.join(format!("{}.depth", rec.id));
        let png = fs::read(&png_path).map_err(|e| Error::io(&png_path, e))?;
        let depth = fs::read(&depth_path).map_err(|e| Error::io(&depth_path, e))?;
        let (w, h, rgb) = decode_png(&png)?;
        let (dw, dh, depth) = decode_depth(&depth)?;
        if (w, h) != (k.width, k.height) || (dw, dh) != (k.width, k.height) {
            return Err(Error::Dataset(format!("frame {}: image size does not match intrinsics", rec.id)));
        }
        frames.push(Frame { image: RgbdImage { intrinsics: k, rgb, depth }, pose: matrix_to_pose(&rec.pose)? });
    }
    PosedDataset::new(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{se3_exp, Twist};
    use crate::io::quantize_channel;

    #[test]
    fn pose_matrix_round_trip() {
        let p = se3_exp(&Twist::new(Vec3::new(1.0, -2.0, 0.5), Vec3::new(0.3, -0.2, 1.1)));
        let back = matrix_to_pose(&pose_to_matrix(&p)).unwrap();
        assert_eq!(back, p);
        let mut bad = pose_to_matrix(&p);
        bad[0] = 3.0;
        assert!(matrix_to_pose(&bad).is_err());
    }

    #[test]
    fn directory_round_trip() {
        let k = CameraIntrinsics::new(4.0, 2.0, 1.5, 4, 3).unwrap();
        let mut frames = Vec::new();
        for n in 0..3 {
            let mut img = RgbdImage::new(k);
            for (t, v) in img.rgb.iter_mut().enumerate() {
                *v = ((t * 7 + n) % 256) as f32 / 255.0;
            }
            for (t, d) in img.depth.iter_mut().enumerate() {
                *d = 0.5 + t as f32 * 0.25;
            }
            frames.push(Frame { image: img, pose: Pose::from_translation(Vec3::new(n as f64, 0.0, 0.0)) });
        }
        let ds = PosedDataset::new(frames).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in ds.frames().iter().zip(back.frames()) {
            assert_eq!(a.pose, b.pose);
            assert_eq!(a.image.depth, b.image.depth);
            for (x, y) in a.image.rgb.iter().zip(&b.image.rgb) {
                assert_eq!(quantize_channel(*x), quantize_channel(*y));
            }
        }
        fs::remove_file(dir.path().join("000001.depth")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Io { .. })));
    }
}
