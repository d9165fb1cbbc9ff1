//! 3D Gaussian scene representation and CPU rasterization.
//!
//! Scenes are lists of anisotropic Gaussians with view-independent color.
//! Rendering projects each Gaussian to a 2D splat (EWA linearization),
//! sorts globally by view depth, and alpha-composites color, depth, and
//! minimal-axis normals front to back, exactly per pixel.

mod backward;
mod ply;
mod project;
mod render;

pub use backward::{backward, GaussianGrad, SceneGrads, UpstreamGrads};
pub use ply::{load_ply, load_ply_file, save_ply, save_ply_file, PlyError};
pub use project::{gaussian_normal, project_gaussian, ProjectedGaussian};
pub use render::{composite_pixel, render, PixelOutput, RenderOptions, SplatSample};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::colmap::CameraIntrinsics;
use crate::grid::Grid;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// A single anisotropic Gaussian primitive.
///
/// Scales are stored as logs and opacity as a logit so optimization is
/// unconstrained; the rotation quaternion is stored raw (w, x, y, z) and
/// normalized on use, so gradients flow through the normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian3D {
    pub mean: Vector3<f64>,
    pub log_scales: Vector3<f64>,
    /// Raw orientation quaternion; kept near unit norm by the optimizer.
    pub rotation: Quaternion<f64>,
    pub opacity_logit: f64,
    /// View-independent RGB in [0, 1].
    pub color: Vector3<f64>,
}

impl Gaussian3D {
    pub fn scales(&self) -> Vector3<f64> {
        self.log_scales.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn unit_rotation(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_quaternion(self.rotation)
    }

    /// Index of the smallest scale axis; exact ties resolve to the lowest
    /// index so the normal choice is deterministic.
    pub fn min_scale_axis(&self) -> usize {
        let s = self.log_scales;
        let mut k = 0;
        if s[1] < s[0] {
            k = 1;
        }
        if s[2] < s[k] {
            k = 2;
        }
        k
    }
}

/// Number of scalar parameters per Gaussian: mean 3 + log-scales 3 +
/// quaternion 4 + opacity 1 + color 3.
pub const PARAMS_PER_GAUSSIAN: usize = 14;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scene {
    pub gaussians: Vec<Gaussian3D>,
}

impl Scene {
    pub fn new(gaussians: Vec<Gaussian3D>) -> Self {
        Scene { gaussians }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Flatten all parameters into one vector (gradcheck and the
    /// optimizer index into this layout).
    pub fn to_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * PARAMS_PER_GAUSSIAN);
        for g in &self.gaussians {
            out.extend_from_slice(&[g.mean.x, g.mean.y, g.mean.z]);
            out.extend_from_slice(&[g.log_scales.x, g.log_scales.y, g.log_scales.z]);
            out.extend_from_slice(&[g.rotation.w, g.rotation.i, g.rotation.j, g.rotation.k]);
            out.push(g.opacity_logit);
            out.extend_from_slice(&[g.color.x, g.color.y, g.color.z]);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.len() * PARAMS_PER_GAUSSIAN);
        for (g, p) in self.gaussians.iter_mut().zip(params.chunks(PARAMS_PER_GAUSSIAN)) {
            g.mean = Vector3::new(p[0], p[1], p[2]);
            g.log_scales = Vector3::new(p[3], p[4], p[5]);
            g.rotation = Quaternion::new(p[6], p[7], p[8], p[9]);
            g.opacity_logit = p[10];
            g.color = Vector3::new(p[11], p[12], p[13]);
        }
    }
}

/// Camera with world-to-camera rotation, world-space center, and pinhole
/// intrinsics. Camera frame: x right, y down, z forward.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    pub rotation: UnitQuaternion<f64>,
    pub center: Vector3<f64>,
    pub intrinsics: CameraIntrinsics,
    pub near: f64,
    pub far: f64,
}

impl CameraPose {
    /// World-to-camera translation, t = -R c.
    pub fn translation(&self) -> Vector3<f64> {
        -(self.rotation * self.center)
    }

    pub fn from_pose_record(
        record: &crate::colmap::PoseRecord,
        intrinsics: CameraIntrinsics,
        near: f64,
        far: f64,
    ) -> Self {
        CameraPose {
            rotation: record.rotation,
            center: record.center(),
            intrinsics,
            near,
            far,
        }
    }

    pub fn to_pose_record(&self, image_id: u64, frame_index: u64) -> crate::colmap::PoseRecord {
        crate::colmap::PoseRecord {
            image_id,
            rotation: crate::colmap::canonicalize_quaternion(self.rotation),
            translation: self.translation(),
            camera_id: self.intrinsics.camera_id,
            image_name: format!("frame_{:06}.png", frame_index),
            frame_index,
        }
    }
}

/// Output of rendering one view: color, view-space depth (Eq. 1 style
/// weighted sum), alpha-composited (non-unit) normals, and accumulated
/// alpha. Where alpha is zero the depth and normal stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub color: Grid,
    pub depth: Grid,
    pub normal: Grid,
    pub alpha: Grid,
}

impl RenderedFrame {
    pub fn new(width: usize, height: usize) -> Self {
        RenderedFrame {
            color: Grid::new(width, height, 3),
            depth: Grid::new(width, height, 1),
            normal: Grid::new(width, height, 3),
            alpha: Grid::new(width, height, 1),
        }
    }

    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }
}
