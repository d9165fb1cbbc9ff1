//! Reverse-mode gradients of rendered color/depth/normal/alpha with
//! respect to all Gaussian parameters.
//!
//! The chain runs through alpha compositing, the 2D Gaussian falloff,
//! the EWA covariance linearization, the pinhole projection, minimal-axis
//! normal selection, and the parameter activations (exp scales, sigmoid
//! opacity, quaternion normalization).

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::project::{projection_jacobian, quat_grad_from_rotmat_grad, quat_to_rotmat};
use super::render::{prepare_splats, RenderOptions};
use super::{CameraPose, Scene, PARAMS_PER_GAUSSIAN};
use crate::grid::Grid;

/// Per-gaussian parameter gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianGrad {
    pub mean: Vector3<f64>,
    pub log_scales: Vector3<f64>,
    /// Raw quaternion gradient (w, x, y, z).
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub color: Vector3<f64>,
}

impl GaussianGrad {
    fn zero() -> Self {
        GaussianGrad {
            mean: Vector3::zeros(),
            log_scales: Vector3::zeros(),
            rotation: [0.0; 4],
            opacity_logit: 0.0,
            color: Vector3::zeros(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneGrads {
    pub grads: Vec<GaussianGrad>,
}

impl SceneGrads {
    pub fn zeros(n: usize) -> Self {
        SceneGrads {
            grads: vec![GaussianGrad::zero(); n],
        }
    }

    /// Flatten to the `Scene::to_params` layout.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.grads.len() * PARAMS_PER_GAUSSIAN);
        for g in &self.grads {
            out.extend_from_slice(&[g.mean.x, g.mean.y, g.mean.z]);
            out.extend_from_slice(&[g.log_scales.x, g.log_scales.y, g.log_scales.z]);
            out.extend_from_slice(&g.rotation);
            out.push(g.opacity_logit);
            out.extend_from_slice(&[g.color.x, g.color.y, g.color.z]);
        }
        out
    }
}

/// Upstream per-pixel gradients of the loss with respect to the rendered
/// frame. `alpha` may be omitted when the loss never reads it.
pub struct UpstreamGrads<'a> {
    pub color: &'a Grid,
    pub depth: &'a Grid,
    pub normal: &'a Grid,
    pub alpha: Option<&'a Grid>,
}

/// Accumulated screen-space gradients for one gaussian.
#[derive(Debug, Clone, Copy)]
struct ScreenAcc {
    d_mean2d: Vector2<f64>,
    /// dL/d(conic) accumulated from Delta Delta^T terms.
    d_conic: Matrix2<f64>,
    d_depth: f64,
    d_opacity: f64,
    d_color: Vector3<f64>,
    d_normal: Vector3<f64>,
    touched: bool,
}

impl ScreenAcc {
    fn zero() -> Self {
        ScreenAcc {
            d_mean2d: Vector2::zeros(),
            d_conic: Matrix2::zeros(),
            d_depth: 0.0,
            d_opacity: 0.0,
            d_color: Vector3::zeros(),
            d_normal: Vector3::zeros(),
            touched: false,
        }
    }

    fn add(&mut self, o: &ScreenAcc) {
        self.d_mean2d += o.d_mean2d;
        self.d_conic += o.d_conic;
        self.d_depth += o.d_depth;
        self.d_opacity += o.d_opacity;
        self.d_color += o.d_color;
        self.d_normal += o.d_normal;
        self.touched |= o.touched;
    }
}

/// Backpropagate upstream frame gradients to scene parameter gradients.
///
/// Must be called with the same options as the forward render whose
/// outputs produced `upstream`. Row accumulators are reduced in row
/// order, so results are independent of the rayon worker count.
pub fn backward(
    scene: &Scene,
    cam: &CameraPose,
    opts: &RenderOptions,
    upstream: &UpstreamGrads,
) -> SceneGrads {
    let n = scene.len();
    let mut out = SceneGrads::zeros(n);
    if n == 0 {
        return out;
    }
    let width = cam.intrinsics.width as usize;
    let height = cam.intrinsics.height as usize;
    let prepared = prepare_splats(scene, cam, opts);

    // Phase 1: per-pixel compositing backward, accumulated per row.
    let row_accs: Vec<Vec<ScreenAcc>> = (0..height)
        .into_par_iter()
        .map(|y| {
            let mut acc = vec![ScreenAcc::zero(); n];
            let py = y as f64;
            // (prepared index, q, alpha) for covering splats, depth order
            let mut hits: Vec<(usize, f64, f64)> = Vec::new();
            for x in 0..width {
                let px = x as f64;
                hits.clear();
                for (pi, s) in prepared.iter().enumerate() {
                    if !s.covers(x, y) {
                        continue;
                    }
                    let q = s.mahalanobis_sq(px, py);
                    if q > s.q_max {
                        continue;
                    }
                    hits.push((pi, q, s.opacity * (-0.5 * q).exp()));
                }
                if hits.is_empty() {
                    continue;
                }
                let g_c = Vector3::new(
                    upstream.color.at(x, y, 0),
                    upstream.color.at(x, y, 1),
                    upstream.color.at(x, y, 2),
                );
                let g_d = upstream.depth.at(x, y, 0);
                let g_n = Vector3::new(
                    upstream.normal.at(x, y, 0),
                    upstream.normal.at(x, y, 1),
                    upstream.normal.at(x, y, 2),
                );
                let g_a = upstream.alpha.map_or(0.0, |a| a.at(x, y, 0));

                // forward transmittances, honoring the early-stop rule the
                // forward pass used
                let mut t = Vec::with_capacity(hits.len());
                let mut transmittance = 1.0;
                let mut live = hits.len();
                for (i, &(_, _, alpha)) in hits.iter().enumerate() {
                    t.push(transmittance);
                    transmittance *= 1.0 - alpha;
                    if let Some(stop) = opts.early_stop_transmittance {
                        if transmittance < stop {
                            live = i + 1;
                            break;
                        }
                    }
                }

                // reverse scan over the composited prefix
                let mut suffix = 0.0;
                for i in (0..live).rev() {
                    let (pi, q, alpha) = hits[i];
                    let s = &prepared[pi];
                    let w = alpha * t[i];
                    let phi = s.color.dot(&g_c) + s.depth * g_d + s.normal.dot(&g_n) + g_a;
                    let d_alpha = t[i] * phi - suffix / (1.0 - alpha);
                    suffix += w * phi;

                    let a = &mut acc[s.index];
                    a.touched = true;
                    a.d_color += w * g_c;
                    a.d_depth += w * g_d;
                    a.d_normal += w * g_n;
                    a.d_opacity += (-0.5 * q).exp() * d_alpha;
                    let delta = Vector2::new(px - s.mean2d.x, py - s.mean2d.y);
                    let md = s.conic * delta;
                    a.d_mean2d += (alpha * d_alpha) * md;
                    let dldq = -0.5 * alpha * d_alpha;
                    a.d_conic += dldq * (delta * delta.transpose());
                }
            }
            acc
        })
        .collect();

    let mut acc = vec![ScreenAcc::zero(); n];
    for row in &row_accs {
        for (a, r) in acc.iter_mut().zip(row) {
            a.add(r);
        }
    }

    // Phase 2: chain screen-space gradients to the 3D parameters.
    let conic_by_index: std::collections::HashMap<usize, Matrix2<f64>> =
        prepared.iter().map(|s| (s.index, s.conic)).collect();
    let r_c = cam.rotation.to_rotation_matrix().into_inner();
    let intr = cam.intrinsics.clone();
    let grads: Vec<GaussianGrad> = (0..n)
        .into_par_iter()
        .map(|j| {
            let a = &acc[j];
            if !a.touched {
                return GaussianGrad::zero();
            }
            let g = &scene.gaussians[j];
            let conic = conic_by_index[&j];
            let p = r_c * (g.mean - cam.center);
            let (r_g, q_hat, q_norm) = quat_to_rotmat(&g.rotation);
            let s = g.scales();
            let s2 = s.component_mul(&s);
            let sigma = r_g * Matrix3::from_diagonal(&s2) * r_g.transpose();
            let jac = projection_jacobian(&p, intr.fx, intr.fy);
            let a_mat = jac * r_c;

            // dL/dcov2d = -M (dL/dM) M  with M the conic (inverse cov)
            let g_cov = -(conic * a.d_conic * conic);
            let g_cov = 0.5 * (g_cov + g_cov.transpose());

            let g_sigma = a_mat.transpose() * g_cov * a_mat;
            let g_a_mat = 2.0 * g_cov * a_mat * sigma;
            let g_jac = g_a_mat * r_c.transpose();

            let (x, yy, z) = (p.x, p.y, p.z);
            let z2 = z * z;
            let z3 = z2 * z;
            let mut g_p = Vector3::zeros();
            // through the projection Jacobian entries
            g_p.x += g_jac[(0, 2)] * (-intr.fx / z2);
            g_p.y += g_jac[(1, 2)] * (-intr.fy / z2);
            g_p.z += g_jac[(0, 0)] * (-intr.fx / z2)
                + g_jac[(0, 2)] * (2.0 * intr.fx * x / z3)
                + g_jac[(1, 1)] * (-intr.fy / z2)
                + g_jac[(1, 2)] * (2.0 * intr.fy * yy / z3);
            // through the projected mean
            g_p.x += a.d_mean2d.x * intr.fx / z;
            g_p.y += a.d_mean2d.y * intr.fy / z;
            g_p.z += a.d_mean2d.x * (-intr.fx * x / z2) + a.d_mean2d.y * (-intr.fy * yy / z2);
            // through the view-space depth output
            g_p.z += a.d_depth;

            let mean = r_c.transpose() * g_p;

            // scales: d/d(log s_j) = 2 s_j^2 (r_j^T Gs r_j)
            let mut log_scales = Vector3::zeros();
            for k in 0..3 {
                let col = r_g.column(k);
                log_scales[k] = 2.0 * s2[k] * (col.transpose() * g_sigma * col)[(0, 0)];
            }

            // rotation: covariance path plus the normal path
            let mut g_r = 2.0 * g_sigma * r_g * Matrix3::from_diagonal(&s2);
            let axis = g.min_scale_axis();
            let n_cam_unsigned = r_c * r_g.column(axis).into_owned();
            let sign = if n_cam_unsigned.z > 0.0 { -1.0 } else { 1.0 };
            let g_n_world = sign * (r_c.transpose() * a.d_normal);
            for row in 0..3 {
                g_r[(row, axis)] += g_n_world[row];
            }
            let rotation = quat_grad_from_rotmat_grad(q_hat, q_norm, &g_r);

            let o = g.opacity();
            GaussianGrad {
                mean,
                log_scales,
                rotation,
                opacity_logit: a.d_opacity * o * (1.0 - o),
                color: a.d_color,
            }
        })
        .collect();
    out.grads = grads;
    out
}
