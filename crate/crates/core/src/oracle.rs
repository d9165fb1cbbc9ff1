//! Synthetic ground-truth factory: seeded random Gaussian scenes, frame
//! sequences rendered along synthesized trajectories, true poses with
//! optional injected trajectory faults, and depth/normal priors derived
//! from ground truth under a known affine distortion.
//!
//! Everything downstream (anomaly detection, the QA retry loop, prior
//! alignment, reconstruction, end-to-end determinism) is verified against
//! this factory offline.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::colmap::{CameraIntrinsics, CameraModel, PoseRecord};
use crate::grid::Grid;
use crate::plan::{synthesize_trajectory, ExtensionDirective, PlanError};
use crate::priors::{stub_estimate, DepthMap, DepthSource, NormalMap, StubDistortion};
use crate::splat::{logit, render, CameraPose, Gaussian3D, RenderOptions, RenderedFrame, Scene};
use crate::trajectory::{FlagKind, Thresholds};

/// Oracle configuration; a pure function of these fields and the per-call
/// seeds determines every emitted artifact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub gaussian_count: usize,
    pub image_size: u32,
    /// Probability that a generated segment carries one injected
    /// trajectory fault.
    pub fault_probability: f64,
    /// Known affine distortion + noise applied to emitted depth priors.
    pub prior_scale: f64,
    pub prior_shift: f64,
    pub prior_noise_sigma: f64,
    pub thresholds: Thresholds,
    /// Seed for the ground-truth scene itself.
    pub scene_seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            gaussian_count: 50,
            image_size: 32,
            fault_probability: 0.0,
            prior_scale: 0.8,
            prior_shift: 0.3,
            prior_noise_sigma: 0.0,
            thresholds: Thresholds::default(),
            scene_seed: 0,
        }
    }
}

/// A fault planted into a segment's emitted poses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InjectedFault {
    /// Frame index whose inter-frame delta exceeds the threshold.
    pub frame_index: u64,
    pub kind: FlagKind,
}

/// One generated segment: rendered frames, the true trajectory, the
/// "estimated" poses (true poses, possibly with one injected fault), and
/// per-frame priors.
pub struct OracleSegment {
    pub frames: Vec<RenderedFrame>,
    pub true_poses: Vec<CameraPose>,
    pub estimated_poses: Vec<PoseRecord>,
    pub injected_fault: Option<InjectedFault>,
    pub priors: Vec<(DepthMap, NormalMap)>,
}

pub struct SyntheticOracle {
    pub scene: Scene,
    pub config: OracleConfig,
}

/// Pinhole intrinsics for a square oracle image.
pub fn oracle_intrinsics(size: u32) -> CameraIntrinsics {
    CameraIntrinsics {
        camera_id: 1,
        model: CameraModel::Pinhole,
        width: size,
        height: size,
        fx: size as f64,
        fy: size as f64,
        cx: size as f64 / 2.0,
        cy: size as f64 / 2.0,
    }
}

/// Camera at the world origin looking down +z.
pub fn oracle_base_camera(size: u32) -> CameraPose {
    CameraPose {
        rotation: UnitQuaternion::identity(),
        center: Vector3::zeros(),
        intrinsics: oracle_intrinsics(size),
        near: 0.1,
        far: 100.0,
    }
}

/// Seeded random scene in a box in front of the base camera.
pub fn random_scene(gaussian_count: usize, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussians = (0..gaussian_count)
        .map(|_| Gaussian3D {
            mean: Vector3::new(
                rng.gen_range(-1.2..1.2),
                rng.gen_range(-1.2..1.2),
                rng.gen_range(3.0..6.0),
            ),
            log_scales: Vector3::new(
                rng.gen_range(-1.6..-0.6),
                rng.gen_range(-1.6..-0.6),
                rng.gen_range(-1.6..-0.6),
            ),
            rotation: Quaternion::new(
                rng.gen_range(0.5..1.0),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            ),
            opacity_logit: logit(rng.gen_range(0.4..0.95)),
            color: Vector3::new(rng.gen(), rng.gen(), rng.gen()),
        })
        .collect();
    Scene::new(gaussians)
}

/// Normalize composited normals into a valid unit-normal map, masked by
/// alpha > 0.5, and blank rendered depth outside the same mask so the
/// derived priors only cover confident surface pixels.
pub fn ground_truth_maps(frame: &RenderedFrame) -> (DepthMap, NormalMap) {
    let (w, h) = (frame.width(), frame.height());
    let mut depth = frame.depth.clone();
    let mut normal = Grid::new(w, h, 3);
    for i in 0..w * h {
        if frame.alpha.data[i] > 0.5 {
            let n = Vector3::new(
                frame.normal.data[i * 3],
                frame.normal.data[i * 3 + 1],
                frame.normal.data[i * 3 + 2],
            );
            let norm = n.norm();
            if norm > 1e-12 {
                let u = n / norm;
                normal.data[i * 3] = u.x;
                normal.data[i * 3 + 1] = u.y;
                normal.data[i * 3 + 2] = u.z;
            }
        } else {
            depth.data[i] = 0.0;
        }
    }
    (
        DepthMap::new(depth, DepthSource::Rendered).expect("rendered depth is finite"),
        NormalMap::new(normal).expect("normalized normals are unit"),
    )
}

impl SyntheticOracle {
    pub fn new(config: OracleConfig) -> Self {
        let scene = random_scene(config.gaussian_count, config.scene_seed);
        SyntheticOracle { scene, config }
    }

    /// Generate one segment of `frame_count` frames following `directive`
    /// from `base`. The per-call `seed` drives the fault coin flip, the
    /// fault placement, and the prior noise; the same seed reproduces the
    /// segment bit for bit.
    pub fn generate_segment(
        &self,
        base: &CameraPose,
        directive: &ExtensionDirective,
        frame_count: usize,
        seed: u64,
    ) -> Result<OracleSegment, PlanError> {
        let true_poses = synthesize_trajectory(base, directive, frame_count)?;
        let opts = RenderOptions::default();
        let frames: Vec<RenderedFrame> = true_poses
            .iter()
            .map(|cam| render(&self.scene, cam, &opts))
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut estimated_poses: Vec<PoseRecord> = true_poses
            .iter()
            .enumerate()
            .map(|(i, cam)| cam.to_pose_record(i as u64 + 1, i as u64))
            .collect();
        let injected_fault = if rng.gen_bool(self.config.fault_probability) {
            Some(self.inject_fault(&mut estimated_poses, &mut rng))
        } else {
            None
        };

        let distortion = StubDistortion {
            scale: self.config.prior_scale,
            shift: self.config.prior_shift,
            noise_sigma: self.config.prior_noise_sigma,
        };
        let priors = frames
            .iter()
            .map(|frame| {
                let (gt_depth, gt_normal) = ground_truth_maps(frame);
                stub_estimate(
                    frame.width(),
                    frame.height(),
                    Some((&gt_depth, &gt_normal)),
                    &distortion,
                    &mut rng,
                )
            })
            .collect();

        Ok(OracleSegment {
            frames,
            true_poses,
            estimated_poses,
            injected_fault,
            priors,
        })
    }

    /// Plant one fault: a constant offset applied from a random frame k
    /// (k >= 1) onward, so exactly the inter-frame delta at k exceeds its
    /// threshold — translation by 2*T1, or rotation by 1.2*T2.
    fn inject_fault(&self, poses: &mut [PoseRecord], rng: &mut ChaCha8Rng) -> InjectedFault {
        let k = rng.gen_range(1..poses.len());
        let translation = rng.gen_bool(0.5);
        if translation {
            let dir = random_unit_vector(rng);
            let offset = dir * (2.0 * self.config.thresholds.t1);
            for p in poses[k..].iter_mut() {
                // shift the camera center; t = -R(c + offset)
                let new_center = p.center() + offset;
                p.translation = -(p.rotation * new_center);
            }
            InjectedFault {
                frame_index: k as u64,
                kind: FlagKind::Translation,
            }
        } else {
            let axis = random_unit_vector(rng);
            let angle = 1.2 * self.config.thresholds.t2;
            let extra = UnitQuaternion::from_axis_angle(
                &nalgebra::Unit::new_normalize(axis),
                angle,
            );
            for p in poses[k..].iter_mut() {
                let center = p.center();
                p.rotation = crate::colmap::canonicalize_quaternion(extra * p.rotation);
                p.translation = -(p.rotation * center);
            }
            InjectedFault {
                frame_index: k as u64,
                kind: FlagKind::Rotation,
            }
        }
    }
}

fn random_unit_vector(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Copy of a scene with means jittered by uniform noise of half-width
/// `sigma` and colors by half of that; used as the recoverable perturbed
/// initialization of the reconstruction benchmarks.
pub fn perturb_scene(scene: &Scene, sigma: f64, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = scene.clone();
    for g in out.gaussians.iter_mut() {
        g.mean += Vector3::new(
            rng.gen_range(-sigma..sigma),
            rng.gen_range(-sigma..sigma),
            rng.gen_range(-sigma..sigma),
        );
        let half = sigma / 2.0;
        g.color += Vector3::new(
            rng.gen_range(-half..half),
            rng.gen_range(-half..half),
            rng.gen_range(-half..half),
        );
        g.color = g.color.map(|c| c.clamp(0.0, 1.0));
    }
    out
}

/// Root-mean-square difference between two depth grids over pixels valid
/// (> 0) in both.
pub fn depth_rmse(a: &Grid, b: &Grid) -> f64 {
    assert!(a.same_shape(b) && a.channels == 1);
    let mut ss = 0.0;
    let mut n = 0usize;
    for (x, y) in a.data.iter().zip(&b.data) {
        if *x > 0.0 && *y > 0.0 {
            ss += (x - y) * (x - y);
            n += 1;
        }
    }
    if n == 0 {
        return f64::INFINITY;
    }
    (ss / n as f64).sqrt()
}

/// Mean angle in radians between per-pixel normal directions, over pixels
/// where both fields are nonzero; each vector is normalized first.
pub fn normal_angular_error(a: &Grid, b: &Grid) -> f64 {
    assert!(a.same_shape(b) && a.channels == 3);
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..a.pixel_count() {
        let va = Vector3::new(a.data[i * 3], a.data[i * 3 + 1], a.data[i * 3 + 2]);
        let vb = Vector3::new(b.data[i * 3], b.data[i * 3 + 1], b.data[i * 3 + 2]);
        let (na, nb) = (va.norm(), vb.norm());
        if na < 1e-12 || nb < 1e-12 {
            continue;
        }
        let cos = (va.dot(&vb) / (na * nb)).clamp(-1.0, 1.0);
        sum += cos.acos();
        n += 1;
    }
    if n == 0 {
        return f64::INFINITY;
    }
    sum / n as f64
}
