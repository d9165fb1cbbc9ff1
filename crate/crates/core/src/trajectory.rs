//! Camera-trajectory motion analysis and abnormal-segment detection.
//!
//! A frame is discontinuous when its translation jump exceeds T1 or its
//! rotation change exceeds T2 relative to the previous frame; any
//! discontinuity marks the whole segment abnormal.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colmap::PoseRecord;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("trajectory too short: {0} poses (need at least 2)")]
    TooShort(usize),
}

/// Inter-frame motion magnitudes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionDelta {
    /// Frame index of the later frame in the pair.
    pub frame_index: u64,
    /// Euclidean distance between consecutive camera centers.
    pub translation_jump: f64,
    /// Geodesic angle between consecutive orientations, radians in [0, pi].
    pub rotation_change: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlagKind {
    Translation,
    Rotation,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerdictStatus {
    Normal,
    Abnormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentVerdict {
    pub status: VerdictStatus,
    pub flagged_frames: Vec<(u64, FlagKind)>,
}

impl SegmentVerdict {
    pub fn is_abnormal(&self) -> bool {
        self.status == VerdictStatus::Abnormal
    }
}

/// Discontinuity thresholds. Defaults follow the cross-validated values
/// T1 = 5 (reconstruction units) and T2 = 0.5 (radians).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub t1: f64,
    pub t2: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { t1: 5.0, t2: 0.5 }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.t1 > 0.0) {
            return Err("T1 must be positive".into());
        }
        if !(self.t2 > 0.0 && self.t2 <= std::f64::consts::PI) {
            return Err("T2 must lie in (0, pi]".into());
        }
        Ok(())
    }
}

/// Motion between two consecutive poses.
///
/// Translation uses camera centers C = -R^T t (geometric motion, not raw
/// t vectors); rotation is the quaternion geodesic 2*acos(|<q_a, q_b>|),
/// which is invariant to quaternion sign.
pub fn pose_delta(a: &PoseRecord, b: &PoseRecord) -> MotionDelta {
    let translation_jump = (b.center() - a.center()).norm();
    let dot = a.rotation.coords.dot(&b.rotation.coords).abs().min(1.0);
    let rotation_change = 2.0 * dot.acos();
    MotionDelta {
        frame_index: b.frame_index,
        translation_jump,
        rotation_change,
    }
}

/// Flag every frame whose motion relative to its predecessor exceeds a
/// threshold. Comparisons are strict: a jump exactly equal to T1 does not
/// flag.
pub fn detect_abnormal(
    trajectory: &[PoseRecord],
    th: &Thresholds,
) -> Result<SegmentVerdict, TrajectoryError> {
    if trajectory.len() < 2 {
        return Err(TrajectoryError::TooShort(trajectory.len()));
    }
    let mut flagged = Vec::new();
    for pair in trajectory.windows(2) {
        let d = pose_delta(&pair[0], &pair[1]);
        let trans = d.translation_jump > th.t1;
        let rot = d.rotation_change > th.t2;
        let kind = match (trans, rot) {
            (true, true) => Some(FlagKind::Both),
            (true, false) => Some(FlagKind::Translation),
            (false, true) => Some(FlagKind::Rotation),
            (false, false) => None,
        };
        if let Some(kind) = kind {
            flagged.push((d.frame_index, kind));
        }
    }
    let status = if flagged.is_empty() {
        VerdictStatus::Normal
    } else {
        VerdictStatus::Abnormal
    };
    Ok(SegmentVerdict {
        status,
        flagged_frames: flagged,
    })
}

/// Frame indices in [0, expected) with no registered pose. A non-empty
/// result upgrades the segment to abnormal in the pipeline: an
/// unregistered frame has no pose to test.
pub fn coverage_check(poses: &[PoseRecord], expected_frame_count: u64) -> Vec<u64> {
    let registered: std::collections::HashSet<u64> =
        poses.iter().map(|p| p.frame_index).collect();
    (0..expected_frame_count)
        .filter(|i| !registered.contains(i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{Matrix3, UnitQuaternion, Vector3};
    use proptest::prelude::*;

    fn pose(frame: u64, q: UnitQuaternion<f64>, center: Vector3<f64>) -> PoseRecord {
        // t = -R c so that the record's center() equals `center`
        PoseRecord {
            image_id: frame + 1,
            rotation: q,
            translation: -(q * center),
            camera_id: 1,
            image_name: format!("frame_{:06}.png", frame),
            frame_index: frame,
        }
    }

    fn identity_pose(frame: u64, center: Vector3<f64>) -> PoseRecord {
        pose(frame, UnitQuaternion::identity(), center)
    }

    #[test]
    fn identical_poses_give_zero_delta() {
        let a = identity_pose(0, Vector3::zeros());
        let b = identity_pose(1, Vector3::zeros());
        let d = pose_delta(&a, &b);
        assert_eq!(d.translation_jump, 0.0);
        assert_eq!(d.rotation_change, 0.0);
    }

    #[test]
    fn pure_translation_is_pythagorean() {
        let a = identity_pose(0, Vector3::zeros());
        let b = identity_pose(1, Vector3::new(3.0, 4.0, 0.0));
        let d = pose_delta(&a, &b);
        assert_relative_eq!(d.translation_jump, 5.0, epsilon = 1e-12);
        assert_eq!(d.rotation_change, 0.0);
    }

    #[test]
    fn antipodal_rotation_is_pi() {
        let a = identity_pose(0, Vector3::zeros());
        let q = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), std::f64::consts::PI);
        let b = pose(1, q, Vector3::zeros());
        let d = pose_delta(&a, &b);
        assert_relative_eq!(d.rotation_change, std::f64::consts::PI, epsilon = 1e-9);
    }

    #[test]
    fn rotation_change_matches_trace_oracle() {
        let mut rng_state = 42u64;
        let mut next = || {
            // xorshift; good enough to fan out fixed test angles
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            (rng_state % 10_000) as f64 / 10_000.0 * 2.0 - 1.0
        };
        for _ in 0..50 {
            let qa = UnitQuaternion::from_euler_angles(next(), next(), next());
            let qb = UnitQuaternion::from_euler_angles(next(), next(), next());
            let a = pose(0, qa, Vector3::zeros());
            let b = pose(1, qb, Vector3::zeros());
            let d = pose_delta(&a, &b);
            let ra: Matrix3<f64> = qa.to_rotation_matrix().into_inner();
            let rb: Matrix3<f64> = qb.to_rotation_matrix().into_inner();
            let rel = ra.transpose() * rb;
            let angle = (((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0)).acos();
            assert_relative_eq!(d.rotation_change, angle, epsilon = 1e-9);
        }
    }

    fn smooth_orbit(frames: usize) -> Vec<PoseRecord> {
        (0..frames)
            .map(|i| {
                let q = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), i as f64 * 0.02);
                pose(i as u64, q, Vector3::new(i as f64 * 0.1, 0.0, 0.0))
            })
            .collect()
    }

    #[test]
    fn smooth_orbit_is_normal() {
        let verdict = detect_abnormal(&smooth_orbit(20), &Thresholds::default()).unwrap();
        assert_eq!(verdict.status, VerdictStatus::Normal);
        assert!(verdict.flagged_frames.is_empty());
    }

    #[test]
    fn displaced_center_flags_translation() {
        let mut traj = smooth_orbit(20);
        // shift frames 7.. by 10 units: one jump of 10 > T1 = 5 at frame 7
        for p in traj.iter_mut().skip(7) {
            let c = p.center() + Vector3::new(0.0, 10.0, 0.0);
            p.translation = -(p.rotation * c);
        }
        let verdict = detect_abnormal(&traj, &Thresholds::default()).unwrap();
        assert_eq!(verdict.status, VerdictStatus::Abnormal);
        assert_eq!(verdict.flagged_frames, vec![(7, FlagKind::Translation)]);
    }

    #[test]
    fn rotated_frame_flags_rotation() {
        let mut traj = smooth_orbit(20);
        let extra = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), 0.6);
        for p in traj.iter_mut().skip(11) {
            let c = p.center();
            p.rotation = extra * p.rotation;
            p.translation = -(p.rotation * c);
        }
        let verdict = detect_abnormal(&traj, &Thresholds::default()).unwrap();
        assert_eq!(verdict.status, VerdictStatus::Abnormal);
        assert_eq!(verdict.flagged_frames, vec![(11, FlagKind::Rotation)]);
    }

    #[test]
    fn boundary_jump_does_not_flag() {
        let th = Thresholds::default();
        let traj = vec![
            identity_pose(0, Vector3::zeros()),
            identity_pose(1, Vector3::new(th.t1, 0.0, 0.0)),
        ];
        let verdict = detect_abnormal(&traj, &th).unwrap();
        assert_eq!(verdict.status, VerdictStatus::Normal);
    }

    #[test]
    fn too_short_rejected() {
        let traj = vec![identity_pose(0, Vector3::zeros())];
        assert!(matches!(
            detect_abnormal(&traj, &Thresholds::default()),
            Err(TrajectoryError::TooShort(1))
        ));
    }

    #[test]
    fn coverage_complete() {
        let poses = smooth_orbit(50);
        assert!(coverage_check(&poses, 50).is_empty());
    }

    #[test]
    fn coverage_reports_missing_range() {
        let poses: Vec<_> = smooth_orbit(50)
            .into_iter()
            .filter(|p| !(10..=12).contains(&p.frame_index))
            .collect();
        assert_eq!(coverage_check(&poses, 50), vec![10, 11, 12]);
    }

    #[test]
    fn coverage_degenerate_all_missing() {
        assert_eq!(coverage_check(&[], 3), vec![0, 1, 2]);
    }

    proptest! {
        #[test]
        fn prop_delta_symmetry(
            (ax, ay, az) in (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0),
            (bx, by, bz) in (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0),
            (cx, cy, cz) in (-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0),
        ) {
            let a = pose(0, UnitQuaternion::from_euler_angles(ax, ay, az), Vector3::zeros());
            let b = pose(1, UnitQuaternion::from_euler_angles(bx, by, bz), Vector3::new(cx, cy, cz));
            let d1 = pose_delta(&a, &b);
            let d2 = pose_delta(&b, &a);
            prop_assert!((d1.translation_jump - d2.translation_jump).abs() < 1e-12);
            prop_assert!((d1.rotation_change - d2.rotation_change).abs() < 1e-12);
        }

        #[test]
        fn prop_quaternion_sign_invariance(
            (bx, by, bz) in (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0),
        ) {
            let a = pose(0, UnitQuaternion::identity(), Vector3::zeros());
            let qb = UnitQuaternion::from_euler_angles(bx, by, bz);
            let b = pose(1, qb, Vector3::zeros());
            let b_neg = PoseRecord {
                rotation: UnitQuaternion::new_unchecked(-qb.into_inner()),
                ..b.clone()
            };
            let d1 = pose_delta(&a, &b);
            let d2 = pose_delta(&a, &b_neg);
            prop_assert!((d1.rotation_change - d2.rotation_change).abs() < 1e-12);
        }

        #[test]
        fn prop_translation_scales_linearly(lambda in 1.0f64..10.0) {
            let base = smooth_orbit(10);
            let scaled: Vec<_> = base.iter().map(|p| {
                let c = p.center() * lambda;
                PoseRecord { translation: -(p.rotation * c), ..p.clone() }
            }).collect();
            for (pa, pb) in base.windows(2).zip(scaled.windows(2)) {
                let d0 = pose_delta(&pa[0], &pa[1]);
                let d1 = pose_delta(&pb[0], &pb[1]);
                prop_assert!((d1.translation_jump - lambda * d0.translation_jump).abs() < 1e-9);
            }
        }
    }
}
