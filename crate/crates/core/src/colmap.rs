//! COLMAP sparse-model text I/O.
//!
//! Reads and writes the `cameras.txt` / `images.txt` pair produced by
//! COLMAP's sparse reconstruction, extracting per-frame camera poses and
//! intrinsics. Only the text format is supported; binary models must be
//! converted externally (`colmap model_converter`).
//!
//! Format reference: https://colmap.github.io/format.html

use std::collections::HashSet;
use std::fmt::Write as _;

use nalgebra::{UnitQuaternion, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ColmapError {
    #[error("malformed line {0}: {1}")]
    MalformedLine(usize, String),
    #[error("unsupported camera model: {0}")]
    UnsupportedModel(String),
    #[error("image {0}: quaternion norm deviates from 1 by more than 1e-6")]
    NonUnitQuaternion(u64),
    #[error("duplicate image id {0}")]
    DuplicateImageId(u64),
    #[error("duplicate frame index {0} (images {1:?})")]
    DuplicateFrameIndex(u64, Vec<String>),
    #[error("image name {0:?} carries no digit run to derive a frame index")]
    NoFrameIndex(String),
    #[error("image {0} references unknown camera id {1}")]
    UnknownCamera(u64, u32),
    #[error("invalid intrinsics on line {0}: {1}")]
    InvalidIntrinsics(usize, String),
}

/// Supported pinhole camera models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CameraModel {
    Pinhole,
    SimplePinhole,
}

impl CameraModel {
    pub fn name(&self) -> &'static str {
        match self {
            CameraModel::Pinhole => "PINHOLE",
            CameraModel::SimplePinhole => "SIMPLE_PINHOLE",
        }
    }
}

/// Intrinsic calibration of a single camera.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraIntrinsics {
    pub camera_id: u32,
    pub model: CameraModel,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), String> {
        if self.width == 0 || self.height == 0 {
            return Err("zero image dimensions".into());
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err("non-positive focal length".into());
        }
        if !(0.0..=self.width as f64).contains(&self.cx)
            || !(0.0..=self.height as f64).contains(&self.cy)
        {
            return Err("principal point outside image".into());
        }
        if self.model == CameraModel::SimplePinhole && self.fx != self.fy {
            return Err("SIMPLE_PINHOLE requires fx == fy".into());
        }
        Ok(())
    }
}

/// A single image's world-to-camera pose as estimated by SfM.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseRecord {
    pub image_id: u64,
    /// Unit quaternion (w, x, y, z) rotating world into camera coordinates,
    /// sign-canonicalized so w >= 0.
    pub rotation: UnitQuaternion<f64>,
    /// World-to-camera translation in reconstruction units.
    pub translation: Vector3<f64>,
    pub camera_id: u32,
    pub image_name: String,
    /// Ordinal position recovered from the image name's last digit run.
    pub frame_index: u64,
}

impl PoseRecord {
    /// World-space camera center, C = -R^T t.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }
}

/// Canonicalize quaternion sign so the scalar part is non-negative.
/// q and -q encode the same rotation; a fixed sign prevents spurious
/// rotation-delta spikes in trajectory analysis.
pub fn canonicalize_quaternion(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let c = q.coords; // (x, y, z, w) in nalgebra storage order
    let key = [c.w, c.x, c.y, c.z];
    for k in key {
        if k > 0.0 {
            return q;
        }
        if k < 0.0 {
            return UnitQuaternion::new_unchecked(-q.into_inner());
        }
    }
    q
}

/// Frame index from the last run of digits in an image name.
pub fn frame_index_from_name(name: &str) -> Result<u64, ColmapError> {
    let mut best: Option<(usize, usize)> = None; // (start, end) of the last digit run
    let bytes = name.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            best = Some((start, i));
        } else {
            i += 1;
        }
    }
    let (s, e) = best.ok_or_else(|| ColmapError::NoFrameIndex(name.to_string()))?;
    name[s..e]
        .parse::<u64>()
        .map_err(|_| ColmapError::NoFrameIndex(name.to_string()))
}

fn parse_f64(tok: &str, line_no: usize, line: &str) -> Result<f64, ColmapError> {
    tok.parse::<f64>()
        .map_err(|_| ColmapError::MalformedLine(line_no, line.to_string()))
}

/// Parse a COLMAP `cameras.txt` document.
pub fn parse_cameras(text: &str) -> Result<Vec<CameraIntrinsics>, ColmapError> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = trimmed.split_whitespace().collect();
        if toks.len() < 4 {
            return Err(ColmapError::MalformedLine(line_no, line.to_string()));
        }
        let camera_id: u32 = toks[0]
            .parse()
            .map_err(|_| ColmapError::MalformedLine(line_no, line.to_string()))?;
        let model = match toks[1] {
            "PINHOLE" => CameraModel::Pinhole,
            "SIMPLE_PINHOLE" => CameraModel::SimplePinhole,
            other => return Err(ColmapError::UnsupportedModel(other.to_string())),
        };
        let expected_params = match model {
            CameraModel::Pinhole => 4,
            CameraModel::SimplePinhole => 3,
        };
        if toks.len() != 4 + expected_params {
            return Err(ColmapError::MalformedLine(line_no, line.to_string()));
        }
        let width: u32 = toks[2]
            .parse()
            .map_err(|_| ColmapError::MalformedLine(line_no, line.to_string()))?;
        let height: u32 = toks[3]
            .parse()
            .map_err(|_| ColmapError::MalformedLine(line_no, line.to_string()))?;
        let params: Vec<f64> = toks[4..]
            .iter()
            .map(|t| parse_f64(t, line_no, line))
            .collect::<Result<_, _>>()?;
        let cam = match model {
            CameraModel::Pinhole => CameraIntrinsics {
                camera_id,
                model,
                width,
                height,
                fx: params[0],
                fy: params[1],
                cx: params[2],
                cy: params[3],
            },
            CameraModel::SimplePinhole => CameraIntrinsics {
                camera_id,
                model,
                width,
                height,
                fx: params[0],
                fy: params[0],
                cx: params[1],
                cy: params[2],
            },
        };
        cam.validate()
            .map_err(|msg| ColmapError::InvalidIntrinsics(line_no, msg))?;
        out.push(cam);
    }
    Ok(out)
}

/// Parse a COLMAP `images.txt` document.
///
/// Each image occupies two lines; the second (2D point observations) is
/// ignored and may be empty. Records come back sorted by frame index.
pub fn parse_images(text: &str) -> Result<Vec<PoseRecord>, ColmapError> {
    let mut out: Vec<PoseRecord> = Vec::new();
    let mut seen_ids = HashSet::new();
    let mut expect_points_line = false;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.starts_with('#') {
            continue;
        }
        if expect_points_line {
            // points line, possibly empty; ignored
            expect_points_line = false;
            continue;
        }
        if trimmed.is_empty() {
            continue;
        }
        let toks: Vec<&str> = trimmed.split_whitespace().collect();
        if toks.len() != 10 {
            return Err(ColmapError::MalformedLine(line_no, line.to_string()));
        }
        let image_id: u64 = toks[0]
            .parse()
            .map_err(|_| ColmapError::MalformedLine(line_no, line.to_string()))?;
        if !seen_ids.insert(image_id) {
            return Err(ColmapError::DuplicateImageId(image_id));
        }
        let qw = parse_f64(toks[1], line_no, line)?;
        let qx = parse_f64(toks[2], line_no, line)?;
        let qy = parse_f64(toks[3], line_no, line)?;
        let qz = parse_f64(toks[4], line_no, line)?;
        let tx = parse_f64(toks[5], line_no, line)?;
        let ty = parse_f64(toks[6], line_no, line)?;
        let tz = parse_f64(toks[7], line_no, line)?;
        let camera_id: u32 = toks[8]
            .parse()
            .map_err(|_| ColmapError::MalformedLine(line_no, line.to_string()))?;
        let image_name = toks[9].to_string();

        let norm = (qw * qw + qx * qx + qy * qy + qz * qz).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(ColmapError::NonUnitQuaternion(image_id));
        }
        // renormalize only when needed so values already unit at the
        // stored precision survive a round-trip untouched
        let q = if (norm - 1.0).abs() > 1e-9 {
            UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(
                qw / norm,
                qx / norm,
                qy / norm,
                qz / norm,
            ))
        } else {
            UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(qw, qx, qy, qz))
        };
        let frame_index = frame_index_from_name(&image_name)?;
        out.push(PoseRecord {
            image_id,
            rotation: canonicalize_quaternion(q),
            translation: Vector3::new(tx, ty, tz),
            camera_id,
            image_name,
            frame_index,
        });
        expect_points_line = true;
    }
    out.sort_by(|a, b| a.frame_index.cmp(&b.frame_index));
    for pair in out.windows(2) {
        if pair[0].frame_index == pair[1].frame_index {
            return Err(ColmapError::DuplicateFrameIndex(
                pair[0].frame_index,
                vec![pair[0].image_name.clone(), pair[1].image_name.clone()],
            ));
        }
    }
    Ok(out)
}

/// Parse a full model, checking that every pose resolves to a camera.
pub fn parse_model(
    cameras_text: &str,
    images_text: &str,
) -> Result<(Vec<CameraIntrinsics>, Vec<PoseRecord>), ColmapError> {
    let cameras = parse_cameras(cameras_text)?;
    let poses = parse_images(images_text)?;
    let ids: HashSet<u32> = cameras.iter().map(|c| c.camera_id).collect();
    for p in &poses {
        if !ids.contains(&p.camera_id) {
            return Err(ColmapError::UnknownCamera(p.image_id, p.camera_id));
        }
    }
    Ok((cameras, poses))
}

/// Floats are printed at 12 significant digits so a write/parse cycle is
/// idempotent at that precision.
fn fmt_float(v: f64) -> String {
    format!("{:.11e}", v)
}

/// Serialize a model back to `(cameras.txt, images.txt)` text.
pub fn write_model(cameras: &[CameraIntrinsics], poses: &[PoseRecord]) -> (String, String) {
    let mut cam_text = String::new();
    cam_text.push_str("# Camera list with one line of data per camera:\n");
    cam_text.push_str("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
    let _ = writeln!(cam_text, "# Number of cameras: {}", cameras.len());
    for c in cameras {
        match c.model {
            CameraModel::Pinhole => {
                let _ = writeln!(
                    cam_text,
                    "{} PINHOLE {} {} {} {} {} {}",
                    c.camera_id,
                    c.width,
                    c.height,
                    fmt_float(c.fx),
                    fmt_float(c.fy),
                    fmt_float(c.cx),
                    fmt_float(c.cy),
                );
            }
            CameraModel::SimplePinhole => {
                let _ = writeln!(
                    cam_text,
                    "{} SIMPLE_PINHOLE {} {} {} {} {}",
                    c.camera_id,
                    c.width,
                    c.height,
                    fmt_float(c.fx),
                    fmt_float(c.cx),
                    fmt_float(c.cy),
                );
            }
        }
    }

    let mut img_text = String::new();
    img_text.push_str("# Image list with two lines of data per image:\n");
    img_text.push_str("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n");
    img_text.push_str("#   POINTS2D[] as (X, Y, POINT3D_ID)\n");
    let _ = writeln!(img_text, "# Number of images: {}", poses.len());
    for p in poses {
        let q = canonicalize_quaternion(p.rotation);
        let c = q.coords;
        let _ = writeln!(
            img_text,
            "{} {} {} {} {} {} {} {} {} {}",
            p.image_id,
            fmt_float(c.w),
            fmt_float(c.x),
            fmt_float(c.y),
            fmt_float(c.z),
            fmt_float(p.translation.x),
            fmt_float(p.translation.y),
            fmt_float(p.translation.z),
            p.camera_id,
            p.image_name,
        );
        img_text.push('\n'); // empty points line
    }
    (cam_text, img_text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn parses_pinhole_camera() {
        let cams = parse_cameras("1 PINHOLE 640 480 500 500 320 240").unwrap();
        assert_eq!(cams.len(), 1);
        let c = &cams[0];
        assert_eq!(c.camera_id, 1);
        assert_eq!(c.model, CameraModel::Pinhole);
        assert_eq!((c.width, c.height), (640, 480));
        assert_eq!((c.fx, c.fy, c.cx, c.cy), (500.0, 500.0, 320.0, 240.0));
    }

    #[test]
    fn skips_comments() {
        let cams = parse_cameras("# comment\n1 PINHOLE 640 480 500 500 320 240\n").unwrap();
        assert_eq!(cams.len(), 1);
    }

    #[test]
    fn rejects_unknown_model() {
        let err = parse_cameras("1 RADIAL 640 480 500 320 240 0.1").unwrap_err();
        assert!(matches!(err, ColmapError::UnsupportedModel(ref m) if m == "RADIAL"));
    }

    #[test]
    fn rejects_wrong_token_count() {
        let err = parse_cameras("1 PINHOLE 640 480 500 500 320").unwrap_err();
        assert!(matches!(err, ColmapError::MalformedLine(1, _)));
    }

    #[test]
    fn simple_pinhole_shares_focal() {
        let cams = parse_cameras("2 SIMPLE_PINHOLE 100 100 80 50 50").unwrap();
        assert_eq!(cams[0].fx, cams[0].fy);
    }

    #[test]
    fn parses_identity_pose() {
        let poses = parse_images("1 1 0 0 0 0 0 0 1 frame_0001.png\n\n").unwrap();
        assert_eq!(poses.len(), 1);
        assert_eq!(poses[0].rotation, UnitQuaternion::identity());
        assert_eq!(poses[0].translation, Vector3::zeros());
        assert_eq!(poses[0].frame_index, 1);
    }

    #[test]
    fn sorts_by_frame_index() {
        let text = "1 1 0 0 0 0 0 0 1 frame_0002.png\n\n2 1 0 0 0 1 0 0 1 frame_0001.png\n\n";
        let poses = parse_images(text).unwrap();
        assert_eq!(poses[0].image_name, "frame_0001.png");
        assert_eq!(poses[1].image_name, "frame_0002.png");
    }

    #[test]
    fn rejects_non_unit_quaternion() {
        let err = parse_images("1 1.5 0 0 0 0 0 0 1 f1.png\n\n").unwrap_err();
        assert!(matches!(err, ColmapError::NonUnitQuaternion(1)));
    }

    #[test]
    fn renormalizes_small_deviation() {
        let eps = 5e-7;
        let text = format!("1 {} 0 0 0 0 0 0 1 f1.png\n\n", 1.0 + eps);
        let poses = parse_images(&text).unwrap();
        assert_relative_eq!(poses[0].rotation.norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_duplicate_image_id() {
        let text = "1 1 0 0 0 0 0 0 1 f1.png\n\n1 1 0 0 0 0 0 0 1 f2.png\n\n";
        let err = parse_images(text).unwrap_err();
        assert!(matches!(err, ColmapError::DuplicateImageId(1)));
    }

    #[test]
    fn rejects_name_without_digits() {
        let err = parse_images("1 1 0 0 0 0 0 0 1 nodigits.png\n\n").unwrap_err();
        assert!(matches!(err, ColmapError::NoFrameIndex(_)));
    }

    #[test]
    fn frame_index_uses_last_digit_run() {
        assert_eq!(frame_index_from_name("seg3_frame_0042.png").unwrap(), 42);
        assert_eq!(frame_index_from_name("frame_0002.png").unwrap(), 2);
    }

    #[test]
    fn round_trip_is_idempotent() {
        let cams = parse_cameras("1 PINHOLE 640 480 500.5 499.25 320.125 240").unwrap();
        let poses = parse_images("7 1 0 0 0 0.25 -1.5 3 1 frame_0009.png\n\n").unwrap();
        let (ct1, it1) = write_model(&cams, &poses);
        let (c2, p2) = parse_model(&ct1, &it1).unwrap();
        let (ct2, it2) = write_model(&c2, &p2);
        assert_eq!(ct1, ct2);
        assert_eq!(it1, it2);
    }

    #[test]
    fn empty_model_writes_headers_only() {
        let (ct, it) = write_model(&[], &[]);
        assert!(ct.lines().all(|l| l.starts_with('#')));
        assert!(it.lines().all(|l| l.starts_with('#')));
        assert!(parse_cameras(&ct).unwrap().is_empty());
        assert!(parse_images(&it).unwrap().is_empty());
    }

    fn arb_quaternion() -> impl Strategy<Value = UnitQuaternion<f64>> {
        (
            -1.0f64..1.0,
            -1.0f64..1.0,
            -1.0f64..1.0,
            0.1f64..1.0,
        )
            .prop_map(|(x, y, z, w)| {
                canonicalize_quaternion(UnitQuaternion::from_quaternion(
                    nalgebra::Quaternion::new(w, x, y, z),
                ))
            })
    }

    fn arb_model() -> impl Strategy<Value = (Vec<CameraIntrinsics>, Vec<PoseRecord>)> {
        let cam = CameraIntrinsics {
            camera_id: 1,
            model: CameraModel::Pinhole,
            width: 640,
            height: 480,
            fx: 500.0,
            fy: 480.0,
            cx: 320.0,
            cy: 240.0,
        };
        proptest::collection::vec(
            (arb_quaternion(), -10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0),
            1..20,
        )
        .prop_map(move |items| {
            let poses = items
                .into_iter()
                .enumerate()
                .map(|(i, (q, tx, ty, tz))| PoseRecord {
                    image_id: i as u64 + 1,
                    rotation: q,
                    translation: Vector3::new(tx, ty, tz),
                    camera_id: 1,
                    image_name: format!("frame_{:06}.png", i),
                    frame_index: i as u64,
                })
                .collect();
            (vec![cam.clone()], poses)
        })
    }

    proptest! {
        // parse(write(m)) == m once m is canonicalized through one cycle
        #[test]
        fn prop_round_trip((cams, poses) in arb_model()) {
            let (ct, it) = write_model(&cams, &poses);
            let (c1, p1) = parse_model(&ct, &it).unwrap();
            let (ct2, it2) = write_model(&c1, &p1);
            prop_assert_eq!(&ct, &ct2);
            prop_assert_eq!(&it, &it2);
            let (c2, p2) = parse_model(&ct2, &it2).unwrap();
            prop_assert_eq!(c1, c2);
            prop_assert_eq!(p1, p2);
        }
    }
}
