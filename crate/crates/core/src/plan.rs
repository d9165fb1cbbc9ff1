//! Scene-extension planning: the constrained camera-motion answer grammar
//! ("up or down X, left or right X, forward or back X"), smooth pose
//! segment synthesis, and extended-sequence layout bookkeeping.

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::splat::CameraPose;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("unparsable clause: {0:?}")]
    UnparsableClause(String),
    #[error("duplicate axis in directive: {0}")]
    DuplicateAxis(&'static str),
    #[error("directive out of range: {0}")]
    OutOfRange(String),
    #[error("expected {expected} directives, found {found}")]
    CountMismatch { found: usize, expected: usize },
    #[error("directives {0} and {1} are identical (expansion cannot repeat)")]
    RepeatedDirective(usize, usize),
    #[error("segment needs at least 2 frames, got {0}")]
    DegenerateFrameCount(usize),
}

/// A parsed camera-motion command. Sign convention: up, left, and
/// forward are positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtensionDirective {
    /// Signed degrees, |pitch| <= 90.
    pub pitch: f64,
    /// Signed degrees, |yaw| <= 180.
    pub yaw: f64,
    /// Signed distance in scene units.
    pub advance: f64,
}

impl ExtensionDirective {
    pub const ZERO: ExtensionDirective = ExtensionDirective {
        pitch: 0.0,
        yaw: 0.0,
        advance: 0.0,
    };

    fn validate(&self) -> Result<(), PlanError> {
        if !self.pitch.is_finite() || self.pitch.abs() > 90.0 {
            return Err(PlanError::OutOfRange(format!("pitch {}", self.pitch)));
        }
        if !self.yaw.is_finite() || self.yaw.abs() > 180.0 {
            return Err(PlanError::OutOfRange(format!("yaw {}", self.yaw)));
        }
        if !self.advance.is_finite() {
            return Err(PlanError::OutOfRange(format!("advance {}", self.advance)));
        }
        Ok(())
    }
}

/// Axes a directive clause can address.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectiveAxis {
    Pitch,
    Yaw,
    Advance,
}

/// Bookkeeping for an extended sequence: 2n+1 segments with the initial
/// segment at the center and total length T + 2nT'.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub n: usize,
    pub segment_ids: Vec<String>,
    pub init_length: usize,
    pub extension_length: usize,
    pub total_length: usize,
}

impl SequenceLayout {
    pub fn init_position(&self) -> usize {
        self.n
    }
}

fn parse_clause(clause: &str) -> Result<(DirectiveAxis, f64), PlanError> {
    let trimmed = clause.trim();
    let mut parts = trimmed.split_whitespace();
    let keyword = parts
        .next()
        .ok_or_else(|| PlanError::UnparsableClause(trimmed.to_string()))?
        .to_ascii_lowercase();
    let value_tok = parts
        .next()
        .ok_or_else(|| PlanError::UnparsableClause(trimmed.to_string()))?;
    if parts.next().is_some() {
        return Err(PlanError::UnparsableClause(trimmed.to_string()));
    }
    let value_tok = value_tok.trim_end_matches('\u{00b0}'); // optional degree sign
    let magnitude: f64 = value_tok
        .parse()
        .map_err(|_| PlanError::UnparsableClause(trimmed.to_string()))?;
    if !magnitude.is_finite() || magnitude < 0.0 {
        return Err(PlanError::OutOfRange(format!(
            "magnitude {} in {:?}",
            magnitude, trimmed
        )));
    }
    let (axis, signed) = match keyword.as_str() {
        "up" => (DirectiveAxis::Pitch, magnitude),
        "down" => (DirectiveAxis::Pitch, -magnitude),
        "left" => (DirectiveAxis::Yaw, magnitude),
        "right" => (DirectiveAxis::Yaw, -magnitude),
        "forward" => (DirectiveAxis::Advance, magnitude),
        "back" => (DirectiveAxis::Advance, -magnitude),
        _ => return Err(PlanError::UnparsableClause(trimmed.to_string())),
    };
    Ok((axis, signed))
}

/// Parse one answer of the grammar. Keywords are case-insensitive and a
/// trailing degree sign on X is ignored. Missing clauses default to zero;
/// the defaulted axes come back as warnings.
pub fn parse_directive(
    answer: &str,
) -> Result<(ExtensionDirective, Vec<DirectiveAxis>), PlanError> {
    let mut pitch: Option<f64> = None;
    let mut yaw: Option<f64> = None;
    let mut advance: Option<f64> = None;
    for clause in answer.split(',') {
        if clause.trim().is_empty() {
            continue;
        }
        let (axis, value) = parse_clause(clause)?;
        let slot = match axis {
            DirectiveAxis::Pitch => &mut pitch,
            DirectiveAxis::Yaw => &mut yaw,
            DirectiveAxis::Advance => &mut advance,
        };
        if slot.is_some() {
            let name = match axis {
                DirectiveAxis::Pitch => "pitch",
                DirectiveAxis::Yaw => "yaw",
                DirectiveAxis::Advance => "advance",
            };
            return Err(PlanError::DuplicateAxis(name));
        }
        *slot = Some(value);
    }
    let mut defaulted = Vec::new();
    if pitch.is_none() {
        defaulted.push(DirectiveAxis::Pitch);
    }
    if yaw.is_none() {
        defaulted.push(DirectiveAxis::Yaw);
    }
    if advance.is_none() {
        defaulted.push(DirectiveAxis::Advance);
    }
    let d = ExtensionDirective {
        pitch: pitch.unwrap_or(0.0),
        yaw: yaw.unwrap_or(0.0),
        advance: advance.unwrap_or(0.0),
    };
    d.validate()?;
    Ok((d, defaulted))
}

/// Emit the canonical grammar text for a directive, so that
/// parse(format(d)) == d for every in-range directive.
pub fn format_directive(d: &ExtensionDirective) -> String {
    let pitch_kw = if d.pitch < 0.0 { "down" } else { "up" };
    let yaw_kw = if d.yaw < 0.0 { "right" } else { "left" };
    let adv_kw = if d.advance < 0.0 { "back" } else { "forward" };
    format!(
        "{} {}, {} {}, {} {}",
        pitch_kw,
        d.pitch.abs(),
        yaw_kw,
        d.yaw.abs(),
        adv_kw,
        d.advance.abs()
    )
}

/// Parse a multi-answer plan (newline- or semicolon-separated). Enforces
/// the answer count and the no-repeat constraint.
pub fn parse_plan(answer: &str, expected: usize) -> Result<Vec<ExtensionDirective>, PlanError> {
    let mut out = Vec::new();
    for part in answer.split(['\n', ';']) {
        if part.trim().is_empty() {
            continue;
        }
        let (d, _) = parse_directive(part)?;
        out.push(d);
    }
    if out.len() != expected {
        return Err(PlanError::CountMismatch {
            found: out.len(),
            expected,
        });
    }
    for i in 0..out.len() {
        for j in (i + 1)..out.len() {
            if out[i] == out[j] {
                return Err(PlanError::RepeatedDirective(i, j));
            }
        }
    }
    Ok(out)
}

/// Rotation a full directive applies, expressed in the base camera's
/// local frame (x right, y down, z forward): pitch about local x first,
/// then yaw about the local up axis (-y).
pub fn directive_rotation(d: &ExtensionDirective) -> UnitQuaternion<f64> {
    let pitch = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), d.pitch.to_radians());
    let yaw = UnitQuaternion::from_axis_angle(&(-Vector3::y_axis()), d.yaw.to_radians());
    yaw * pitch
}

/// Realize a directive as a smooth pose segment. Pose k applies fraction
/// k/(frames-1) of the directive; the first pose equals the base exactly
/// and the last realizes the full rotation and advance. The center moves
/// along each pose's own viewing direction.
pub fn synthesize_trajectory(
    base: &CameraPose,
    d: &ExtensionDirective,
    frames: usize,
) -> Result<Vec<CameraPose>, PlanError> {
    if frames < 2 {
        return Err(PlanError::DegenerateFrameCount(frames));
    }
    let full = directive_rotation(d);
    let mut out = Vec::with_capacity(frames);
    for k in 0..frames {
        let f = k as f64 / (frames - 1) as f64;
        // geodesic interpolation from identity; well-defined at 180 degrees
        let delta = full.powf(f);
        // camera-to-world composes with the local delta on the right
        let rot_cw = base.rotation.inverse() * delta;
        let rotation = rot_cw.inverse();
        let forward = rot_cw * Vector3::z_axis().into_inner();
        let center = base.center + d.advance * f * forward;
        out.push(CameraPose {
            rotation,
            center,
            intrinsics: base.intrinsics.clone(),
            near: base.near,
            far: base.far,
        });
    }
    Ok(out)
}

/// Segment ordering {left_n, ..., left_1, init, right_1, ..., right_n}
/// with total length T + 2nT'.
pub fn build_layout(n: usize, init_length: usize, extension_length: usize) -> SequenceLayout {
    assert!(init_length >= 1 && extension_length >= 1);
    let mut segment_ids = Vec::with_capacity(2 * n + 1);
    for i in (1..=n).rev() {
        segment_ids.push(format!("left_{}", i));
    }
    segment_ids.push("init".to_string());
    for i in 1..=n {
        segment_ids.push(format!("right_{}", i));
    }
    SequenceLayout {
        n,
        segment_ids,
        init_length,
        extension_length,
        total_length: init_length + 2 * n * extension_length,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colmap::{CameraIntrinsics, CameraModel};
    use crate::trajectory::{detect_abnormal, Thresholds, VerdictStatus};
    use approx::assert_relative_eq;
    use nalgebra::Matrix3;
    use proptest::prelude::*;

    #[test]
    fn parses_positive_directions() {
        let (d, warn) = parse_directive("up 30, left 45, forward 2").unwrap();
        assert_eq!(
            d,
            ExtensionDirective {
                pitch: 30.0,
                yaw: 45.0,
                advance: 2.0
            }
        );
        assert!(warn.is_empty());
    }

    #[test]
    fn parses_negative_directions() {
        let (d, _) = parse_directive("down 10, right 90, back 1.5").unwrap();
        assert_eq!(
            d,
            ExtensionDirective {
                pitch: -10.0,
                yaw: -90.0,
                advance: -1.5
            }
        );
    }

    #[test]
    fn rejects_unknown_keyword() {
        let err = parse_directive("sideways 5, left 10, forward 1").unwrap_err();
        assert!(matches!(err, PlanError::UnparsableClause(ref c) if c == "sideways 5"));
    }

    #[test]
    fn missing_clause_defaults_with_warning() {
        let (d, warn) = parse_directive("left 20, forward 1").unwrap();
        assert_eq!(d.pitch, 0.0);
        assert_eq!(warn, vec![DirectiveAxis::Pitch]);
    }

    #[test]
    fn degree_sign_and_case_ignored() {
        let (d, _) = parse_directive("UP 30\u{00b0}, Left 45, FORWARD 2").unwrap();
        assert_eq!(d.pitch, 30.0);
        assert_eq!(d.yaw, 45.0);
    }

    #[test]
    fn out_of_range_pitch_rejected() {
        assert!(matches!(
            parse_directive("up 95, left 10, forward 1"),
            Err(PlanError::OutOfRange(_))
        ));
    }

    #[test]
    fn plan_of_four_distinct() {
        let text = "up 10, left 20, forward 1\nup 10, right 20, forward 1\ndown 5, left 30, back 1\nup 0, left 0, forward 2";
        let plan = parse_plan(text, 4).unwrap();
        assert_eq!(plan.len(), 4);
    }

    #[test]
    fn plan_rejects_repeats() {
        let text = "up 10, left 20, forward 1; down 5, left 30, back 1; up 10, left 20, forward 1; up 0, left 0, forward 2";
        assert!(matches!(
            parse_plan(text, 4),
            Err(PlanError::RepeatedDirective(0, 2))
        ));
    }

    #[test]
    fn plan_rejects_count_mismatch() {
        let text = "up 10, left 20, forward 1\ndown 5, left 30, back 1\nup 0, left 0, forward 2";
        assert!(matches!(
            parse_plan(text, 4),
            Err(PlanError::CountMismatch {
                found: 3,
                expected: 4
            })
        ));
    }

    fn base_pose() -> CameraPose {
        CameraPose {
            rotation: UnitQuaternion::from_euler_angles(0.1, -0.2, 0.05),
            center: Vector3::new(1.0, 2.0, 3.0),
            intrinsics: CameraIntrinsics {
                camera_id: 1,
                model: CameraModel::Pinhole,
                width: 64,
                height: 64,
                fx: 64.0,
                fy: 64.0,
                cx: 32.0,
                cy: 32.0,
            },
            near: 0.01,
            far: 100.0,
        }
    }

    #[test]
    fn zero_directive_repeats_base() {
        let base = base_pose();
        let poses = synthesize_trajectory(&base, &ExtensionDirective::ZERO, 5).unwrap();
        assert_eq!(poses.len(), 5);
        for p in &poses {
            assert_relative_eq!((p.center - base.center).norm(), 0.0, epsilon = 1e-12);
            assert_relative_eq!(p.rotation.angle_to(&base.rotation), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn yaw_interpolates_linearly() {
        let base = base_pose();
        let d = ExtensionDirective {
            pitch: 0.0,
            yaw: 90.0,
            advance: 0.0,
        };
        let poses = synthesize_trajectory(&base, &d, 3).unwrap();
        assert_relative_eq!(
            poses[1].rotation.angle_to(&base.rotation),
            45f64.to_radians(),
            epsilon = 1e-9
        );
        assert_relative_eq!(
            poses[2].rotation.angle_to(&base.rotation),
            90f64.to_radians(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn combined_rotation_matches_matrix_oracle() {
        let base = base_pose();
        let d = ExtensionDirective {
            pitch: 30.0,
            yaw: 40.0,
            advance: 0.0,
        };
        let poses = synthesize_trajectory(&base, &d, 5).unwrap();
        // independent rotation-matrix composition oracle
        let p = d.pitch.to_radians();
        let y = d.yaw.to_radians();
        let rx = Matrix3::new(
            1.0, 0.0, 0.0,
            0.0, p.cos(), -p.sin(),
            0.0, p.sin(), p.cos(),
        );
        // about the up axis (-y): equivalent to Ry(-y)
        let ry = Matrix3::new(
            (-y).cos(), 0.0, (-y).sin(),
            0.0, 1.0, 0.0,
            -(-y).sin(), 0.0, (-y).cos(),
        );
        let delta_oracle = ry * rx;
        let r_base_cw = base.rotation.inverse().to_rotation_matrix().into_inner();
        let expected_cw = r_base_cw * delta_oracle;
        let got_cw = poses[4].rotation.inverse().to_rotation_matrix().into_inner();
        assert_relative_eq!((expected_cw - got_cw).norm(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn degenerate_frame_count_rejected() {
        assert!(matches!(
            synthesize_trajectory(&base_pose(), &ExtensionDirective::ZERO, 1),
            Err(PlanError::DegenerateFrameCount(1))
        ));
    }

    #[test]
    fn small_directive_segment_stays_normal() {
        let base = base_pose();
        let d = ExtensionDirective {
            pitch: 5.0,
            yaw: 10.0,
            advance: 0.5,
        };
        let poses = synthesize_trajectory(&base, &d, 30).unwrap();
        let records: Vec<_> = poses
            .iter()
            .enumerate()
            .map(|(i, p)| p.to_pose_record(i as u64 + 1, i as u64))
            .collect();
        let verdict = detect_abnormal(&records, &Thresholds::default()).unwrap();
        assert_eq!(verdict.status, VerdictStatus::Normal);
    }

    #[test]
    fn layout_examples() {
        let l = build_layout(1, 10, 5);
        assert_eq!(l.segment_ids.len(), 3);
        assert_eq!(l.total_length, 20);
        assert_eq!(l.init_position(), 1);
        assert_eq!(l.segment_ids, vec!["left_1", "init", "right_1"]);

        let l0 = build_layout(0, 7, 3);
        assert_eq!(l0.segment_ids, vec!["init"]);
        assert_eq!(l0.total_length, 7);

        let l2 = build_layout(2, 49, 25);
        assert_eq!(l2.segment_ids.len(), 5);
        assert_eq!(l2.total_length, 149);
    }

    proptest! {
        #[test]
        fn prop_format_parse_identity(
            pitch in -90.0f64..90.0,
            yaw in -180.0f64..180.0,
            advance in -10.0f64..10.0,
        ) {
            let d = ExtensionDirective { pitch, yaw, advance };
            let (parsed, warn) = parse_directive(&format_directive(&d)).unwrap();
            prop_assert_eq!(parsed, d);
            prop_assert!(warn.is_empty());
        }

        #[test]
        fn prop_layout_arithmetic(n in 0usize..20, t in 1usize..200, tp in 1usize..100) {
            let l = build_layout(n, t, tp);
            prop_assert_eq!(l.segment_ids.len(), 2 * n + 1);
            prop_assert_eq!(l.total_length, t + 2 * n * tp);
            prop_assert_eq!(l.segment_ids.len() % 2, 1);
            prop_assert_eq!(&l.segment_ids[l.init_position()], "init");
        }
    }
}
