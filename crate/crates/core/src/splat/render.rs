//! Per-pixel exact alpha compositing over globally depth-sorted splats.

use nalgebra::{Matrix2, Vector2, Vector3};
use rayon::prelude::*;

use super::project::{gaussian_normal, project_gaussian};
use super::{CameraPose, RenderedFrame, Scene};

/// Rendering controls.
///
/// `cull_threshold` bounds the per-splat contribution a pixel may lose to
/// footprint culling; the cull radius adapts to each splat's opacity so
/// omitted alpha stays below the threshold. `None` evaluates every splat
/// at every pixel (used by oracle comparisons and gradient checking,
/// together with `early_stop_transmittance: None`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub early_stop_transmittance: Option<f64>,
    pub cull_threshold: Option<f64>,
    pub cov_regularization: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            early_stop_transmittance: Some(1e-4),
            cull_threshold: Some(1e-9),
            cov_regularization: 0.3,
        }
    }
}

impl RenderOptions {
    /// Exact evaluation: no culling, no early termination.
    pub fn exact() -> Self {
        RenderOptions {
            early_stop_transmittance: None,
            cull_threshold: None,
            cov_regularization: 0.3,
        }
    }
}

/// One splat's contribution inputs at a pixel, depth order ascending.
#[derive(Debug, Clone, Copy)]
pub struct SplatSample {
    pub alpha: f64,
    pub color: Vector3<f64>,
    pub depth: f64,
    pub normal: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelOutput {
    pub color: Vector3<f64>,
    pub depth: f64,
    pub normal: Vector3<f64>,
    pub alpha: f64,
}

/// Front-to-back compositing: w_i = alpha_i * prod_{j<i} (1 - alpha_j).
/// The input must be sorted ascending by depth.
pub fn composite_pixel(splats: &[SplatSample], early_stop: Option<f64>) -> PixelOutput {
    let mut color = Vector3::zeros();
    let mut depth = 0.0;
    let mut normal = Vector3::zeros();
    let mut alpha = 0.0;
    let mut transmittance = 1.0;
    for s in splats {
        let w = s.alpha * transmittance;
        color += w * s.color;
        depth += w * s.depth;
        normal += w * s.normal;
        alpha += w;
        transmittance *= 1.0 - s.alpha;
        if let Some(stop) = early_stop {
            if transmittance < stop {
                break;
            }
        }
    }
    PixelOutput {
        color,
        depth,
        normal,
        alpha,
    }
}

/// Splat prepared for rasterization, globally depth-sorted.
#[derive(Debug, Clone)]
pub(crate) struct PreparedSplat {
    pub index: usize,
    pub mean2d: Vector2<f64>,
    /// Inverse of the 2D covariance.
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub color: Vector3<f64>,
    pub opacity: f64,
    pub normal: Vector3<f64>,
    /// Mahalanobis-squared cull bound; infinity in exact mode.
    pub q_max: f64,
    /// Inclusive pixel bounds (x0, x1, y0, y1).
    pub bbox: (usize, usize, usize, usize),
}

impl PreparedSplat {
    #[inline]
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let (x0, x1, y0, y1) = self.bbox;
        x >= x0 && x <= x1 && y >= y0 && y <= y1
    }

    /// Gaussian falloff exponent at a pixel.
    #[inline]
    pub fn mahalanobis_sq(&self, px: f64, py: f64) -> f64 {
        let d = Vector2::new(px - self.mean2d.x, py - self.mean2d.y);
        (d.transpose() * self.conic * d)[(0, 0)]
    }
}

pub(crate) fn prepare_splats(
    scene: &Scene,
    cam: &CameraPose,
    opts: &RenderOptions,
) -> Vec<PreparedSplat> {
    let width = cam.intrinsics.width as usize;
    let height = cam.intrinsics.height as usize;
    let mut prepared: Vec<PreparedSplat> = Vec::with_capacity(scene.len());
    for (index, g) in scene.gaussians.iter().enumerate() {
        let Some(proj) = project_gaussian(g, cam, opts.cov_regularization) else {
            continue;
        };
        let opacity = g.opacity();
        let det = proj.cov2d[(0, 0)] * proj.cov2d[(1, 1)] - proj.cov2d[(0, 1)] * proj.cov2d[(1, 0)];
        if det <= 0.0 {
            continue; // numerically degenerate footprint
        }
        let conic = Matrix2::new(
            proj.cov2d[(1, 1)] / det,
            -proj.cov2d[(0, 1)] / det,
            -proj.cov2d[(1, 0)] / det,
            proj.cov2d[(0, 0)] / det,
        );
        let (q_max, bbox) = match opts.cull_threshold {
            None => (f64::INFINITY, (0, width - 1, 0, height - 1)),
            Some(thr) => {
                if opacity <= thr {
                    continue;
                }
                let q_max = 2.0 * (opacity / thr).ln();
                // largest eigenvalue of cov2d bounds the footprint radius
                let tr = proj.cov2d[(0, 0)] + proj.cov2d[(1, 1)];
                let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
                let lambda_max = tr / 2.0 + disc;
                let radius = (q_max * lambda_max).sqrt();
                let x0 = (proj.mean2d.x - radius).floor();
                let x1 = (proj.mean2d.x + radius).ceil();
                let y0 = (proj.mean2d.y - radius).floor();
                let y1 = (proj.mean2d.y + radius).ceil();
                if x1 < 0.0 || y1 < 0.0 || x0 > (width - 1) as f64 || y0 > (height - 1) as f64 {
                    continue; // outside the frustum guard band
                }
                let bbox = (
                    x0.max(0.0) as usize,
                    x1.min((width - 1) as f64) as usize,
                    y0.max(0.0) as usize,
                    y1.min((height - 1) as f64) as usize,
                );
                (q_max, bbox)
            }
        };
        prepared.push(PreparedSplat {
            index,
            mean2d: proj.mean2d,
            conic,
            depth: proj.depth,
            color: g.color,
            opacity,
            normal: gaussian_normal(g, cam),
            q_max,
            bbox,
        });
    }
    // Global front-to-back order; ties broken by original index (stable).
    prepared.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap());
    prepared
}

/// Render a scene from one camera. Deterministic for fixed inputs and
/// independent of the rayon worker count (rows are independent).
pub fn render(scene: &Scene, cam: &CameraPose, opts: &RenderOptions) -> RenderedFrame {
    let width = cam.intrinsics.width as usize;
    let height = cam.intrinsics.height as usize;
    let mut frame = RenderedFrame::new(width, height);
    if scene.is_empty() {
        return frame;
    }
    let prepared = prepare_splats(scene, cam, opts);

    struct Row {
        color: Vec<f64>,
        depth: Vec<f64>,
        normal: Vec<f64>,
        alpha: Vec<f64>,
    }

    let rows: Vec<Row> = (0..height)
        .into_par_iter()
        .map(|y| {
            let mut row = Row {
                color: vec![0.0; width * 3],
                depth: vec![0.0; width],
                normal: vec![0.0; width * 3],
                alpha: vec![0.0; width],
            };
            let py = y as f64;
            let mut samples: Vec<SplatSample> = Vec::new();
            for x in 0..width {
                let px = x as f64;
                samples.clear();
                for s in &prepared {
                    if !s.covers(x, y) {
                        continue;
                    }
                    let q = s.mahalanobis_sq(px, py);
                    if q > s.q_max {
                        continue;
                    }
                    let alpha = s.opacity * (-0.5 * q).exp();
                    samples.push(SplatSample {
                        alpha,
                        color: s.color,
                        depth: s.depth,
                        normal: s.normal,
                    });
                }
                let out = composite_pixel(&samples, opts.early_stop_transmittance);
                row.color[x * 3..x * 3 + 3].copy_from_slice(out.color.as_slice());
                row.depth[x] = out.depth;
                row.normal[x * 3..x * 3 + 3].copy_from_slice(out.normal.as_slice());
                row.alpha[x] = out.alpha;
            }
            row
        })
        .collect();

    for (y, row) in rows.into_iter().enumerate() {
        frame.color.data[y * width * 3..(y + 1) * width * 3].copy_from_slice(&row.color);
        frame.depth.data[y * width..(y + 1) * width].copy_from_slice(&row.depth);
        frame.normal.data[y * width * 3..(y + 1) * width * 3].copy_from_slice(&row.normal);
        frame.alpha.data[y * width..(y + 1) * width].copy_from_slice(&row.alpha);
    }
    frame
}
