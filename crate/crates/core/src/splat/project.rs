//! Projection of 3D Gaussians to 2D screen-space splats.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Quaternion, Vector2, Vector3};

use super::{CameraPose, Gaussian3D};

/// Screen-space footprint of a Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedGaussian {
    /// Projected mean in pixel coordinates.
    pub mean2d: Vector2<f64>,
    /// 2x2 SPD screen-space covariance (low-pass regularized).
    pub cov2d: Matrix2<f64>,
    /// View-space depth d_i (z coordinate in the camera frame).
    pub depth: f64,
}

/// Rotation matrix of a raw quaternion after normalization. Returns the
/// matrix, the normalized components (w, x, y, z), and the raw norm.
pub(crate) fn quat_to_rotmat(q: &Quaternion<f64>) -> (Matrix3<f64>, [f64; 4], f64) {
    let n = (q.w * q.w + q.i * q.i + q.j * q.j + q.k * q.k).sqrt();
    let (w, x, y, z) = (q.w / n, q.i / n, q.j / n, q.k / n);
    let r = Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    );
    (r, [w, x, y, z], n)
}

/// dL/d(raw quaternion) given dL/dR, chained through normalization.
pub(crate) fn quat_grad_from_rotmat_grad(
    q_hat: [f64; 4],
    raw_norm: f64,
    dldr: &Matrix3<f64>,
) -> [f64; 4] {
    let [w, x, y, z] = q_hat;
    // Partial derivatives of R with respect to the normalized components.
    let dr_dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dr_dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dr_dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dr_dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    let g_hat = [
        dr_dw.component_mul(dldr).sum(),
        dr_dx.component_mul(dldr).sum(),
        dr_dy.component_mul(dldr).sum(),
        dr_dz.component_mul(dldr).sum(),
    ];
    // Through q_hat = q / |q|: dL/dq = (g - (g . q_hat) q_hat) / |q|.
    let dot = g_hat[0] * w + g_hat[1] * x + g_hat[2] * y + g_hat[3] * z;
    [
        (g_hat[0] - dot * w) / raw_norm,
        (g_hat[1] - dot * x) / raw_norm,
        (g_hat[2] - dot * y) / raw_norm,
        (g_hat[3] - dot * z) / raw_norm,
    ]
}

/// Jacobian of the pinhole projection at camera-space point p.
pub(crate) fn projection_jacobian(
    p: &Vector3<f64>,
    fx: f64,
    fy: f64,
) -> Matrix2x3<f64> {
    let z = p.z;
    Matrix2x3::new(
        fx / z,
        0.0,
        -fx * p.x / (z * z),
        0.0,
        fy / z,
        -fy * p.y / (z * z),
    )
}

/// Project a Gaussian into screen space (EWA splatting linearization).
///
/// The screen covariance is the upper-left 2x2 of J W Sigma W^T J^T plus
/// a low-pass diagonal term. Returns `None` (culled) when the view-space
/// depth falls outside (near, far).
pub fn project_gaussian(
    g: &Gaussian3D,
    cam: &CameraPose,
    cov_regularization: f64,
) -> Option<ProjectedGaussian> {
    let r_c = cam.rotation.to_rotation_matrix().into_inner();
    let p = r_c * (g.mean - cam.center);
    if !(p.z > cam.near && p.z < cam.far) {
        return None;
    }
    let intr = &cam.intrinsics;
    let mean2d = Vector2::new(
        intr.fx * p.x / p.z + intr.cx,
        intr.fy * p.y / p.z + intr.cy,
    );
    let (r_g, _, _) = quat_to_rotmat(&g.rotation);
    let s = g.scales();
    let sigma = r_g * Matrix3::from_diagonal(&s.component_mul(&s)) * r_g.transpose();
    let a = projection_jacobian(&p, intr.fx, intr.fy) * r_c;
    let mut cov2d = a * sigma * a.transpose();
    cov2d[(0, 0)] += cov_regularization;
    cov2d[(1, 1)] += cov_regularization;
    Some(ProjectedGaussian {
        mean2d,
        cov2d,
        depth: p.z,
    })
}

/// Camera-space unit normal of a Gaussian: the principal axis with the
/// smallest scale, sign-flipped to face the camera (z < 0).
pub fn gaussian_normal(g: &Gaussian3D, cam: &CameraPose) -> Vector3<f64> {
    let (r_g, _, _) = quat_to_rotmat(&g.rotation);
    let k = g.min_scale_axis();
    let n_world = r_g.column(k).into_owned();
    let n_cam = cam.rotation.to_rotation_matrix().into_inner() * n_world;
    if n_cam.z > 0.0 {
        -n_cam
    } else {
        n_cam
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colmap::{CameraIntrinsics, CameraModel};
    use approx::assert_relative_eq;
    use nalgebra::UnitQuaternion;

    fn test_cam() -> CameraPose {
        CameraPose {
            rotation: UnitQuaternion::identity(),
            center: Vector3::zeros(),
            intrinsics: CameraIntrinsics {
                camera_id: 1,
                model: CameraModel::Pinhole,
                width: 100,
                height: 100,
                fx: 100.0,
                fy: 100.0,
                cx: 50.0,
                cy: 50.0,
            },
            near: 0.01,
            far: 100.0,
        }
    }

    fn gaussian_at(mean: Vector3<f64>, log_scales: Vector3<f64>) -> Gaussian3D {
        Gaussian3D {
            mean,
            log_scales,
            rotation: Quaternion::new(1.0, 0.0, 0.0, 0.0),
            opacity_logit: 0.0,
            color: Vector3::new(0.5, 0.5, 0.5),
        }
    }

    #[test]
    fn on_axis_projection() {
        let g = gaussian_at(Vector3::new(0.0, 0.0, 5.0), Vector3::zeros());
        let p = project_gaussian(&g, &test_cam(), 0.3).unwrap();
        assert_relative_eq!(p.mean2d.x, 50.0, epsilon = 1e-12);
        assert_relative_eq!(p.mean2d.y, 50.0, epsilon = 1e-12);
        assert_relative_eq!(p.depth, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn isotropic_cov_matches_hand_linearization() {
        // On the optical axis, J = diag(f/z, f/z, .) so cov = (f sigma/z)^2 I.
        let sigma = 0.2f64;
        let z = 4.0;
        let g = gaussian_at(
            Vector3::new(0.0, 0.0, z),
            Vector3::repeat(sigma.ln()),
        );
        let p = project_gaussian(&g, &test_cam(), 0.3).unwrap();
        let expected = (100.0 * sigma / z).powi(2);
        assert_relative_eq!(p.cov2d[(0, 0)], expected + 0.3, epsilon = 1e-9);
        assert_relative_eq!(p.cov2d[(1, 1)], expected + 0.3, epsilon = 1e-9);
        assert_relative_eq!(p.cov2d[(0, 1)], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn behind_camera_is_culled() {
        let g = gaussian_at(Vector3::new(0.0, 0.0, -1.0), Vector3::zeros());
        assert!(project_gaussian(&g, &test_cam(), 0.3).is_none());
    }

    #[test]
    fn flat_gaussian_normal_is_minus_z() {
        let g = gaussian_at(
            Vector3::new(0.0, 0.0, 5.0),
            Vector3::new(0.0, 0.0, (0.1f64).ln()),
        );
        let n = gaussian_normal(&g, &test_cam());
        assert!(n.z < 0.0);
        assert_relative_eq!(n.norm(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(n.z.abs(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rotated_normal_matches_quaternion_oracle() {
        let q = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::FRAC_PI_2);
        let g = Gaussian3D {
            mean: Vector3::new(0.0, 0.0, 5.0),
            log_scales: Vector3::new(0.0, (0.1f64).ln(), 0.0),
            rotation: q.into_inner(),
            opacity_logit: 0.0,
            color: Vector3::zeros(),
        };
        let n = gaussian_normal(&g, &test_cam());
        // min axis is index 1 (the y axis rotated by q)
        let oracle = q * Vector3::y_axis().into_inner();
        let oracle = if oracle.z > 0.0 { -oracle } else { oracle };
        assert_relative_eq!((n - oracle).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn scale_tie_breaks_to_lowest_axis() {
        let g = gaussian_at(
            Vector3::new(0.0, 0.0, 5.0),
            Vector3::new((0.1f64).ln(), (0.1f64).ln(), 0.0),
        );
        assert_eq!(g.min_scale_axis(), 0);
        let n = gaussian_normal(&g, &test_cam());
        // axis 0 of identity orientation is x; flipped only if z > 0 (it is 0)
        assert_relative_eq!(n.x.abs(), 1.0, epsilon = 1e-12);
    }
}
