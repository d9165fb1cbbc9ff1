//! Composite photometric + depth + normal loss over rendered frames,
//! with analytic gradients that chain into the splat backward pass.
//!
//! Total = photometric + lambda_d * depth + lambda_n * (normal_align +
//! lambda_s * normal_smooth). The photometric term mixes mean absolute
//! error with SSIM; the depth term is a robust log penalty against an
//! affine-aligned monocular prior; the normal terms are masked L1
//! alignment plus a mean-normalized forward-difference smoothness sum.

mod gradcheck;
mod ssim;

pub use gradcheck::{gradcheck, random_scene_gradcheck, GradcheckReport, GroupReport, PARAM_GROUPS};
pub use ssim::{ssim_with_grad, SsimResult};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Grid, Mask};
use crate::priors::{
    align_scale_shift_dir, apply_affine, DepthMap, DepthSource, FitDirection, NormalMap,
    PriorError,
};
use crate::splat::{backward, render, CameraPose, RenderedFrame, RenderOptions, Scene, SceneGrads, UpstreamGrads};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mask has no active pixels")]
    EmptyMask,
    #[error("loss became non-finite at iteration {0}")]
    NonFiniteLoss(usize),
    #[error(transparent)]
    Prior(#[from] PriorError),
}

/// Weights of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Depth term weight.
    pub lambda_d: f64,
    /// Normal (alignment + smoothness) weight.
    pub lambda_n: f64,
    /// Smoothness weight inside the normal term.
    pub lambda_s: f64,
    /// SSIM fraction of the photometric term.
    pub lambda_ssim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_d: 0.5,
            lambda_n: 0.1,
            lambda_s: 0.05,
            lambda_ssim: 0.2,
        }
    }
}

/// One training view: the target image plus optional monocular priors.
#[derive(Debug, Clone)]
pub struct FrameBundle {
    /// H x W x 3 target RGB in [0, 1].
    pub target: Grid,
    /// Raw (unaligned) monocular depth prior, if available.
    pub depth_prior: Option<DepthMap>,
    /// Camera-space unit-normal prior, if available.
    pub normal_prior: Option<NormalMap>,
}

impl FrameBundle {
    pub fn color_only(target: Grid) -> Self {
        FrameBundle {
            target,
            depth_prior: None,
            normal_prior: None,
        }
    }
}

/// Frozen supervision targets for the geometric terms.
///
/// The affine depth alignment is solved once here and then treated as a
/// constant during gradient evaluation, so analytic and finite-difference
/// gradients agree; the optimizer refreshes targets every epoch.
#[derive(Debug, Clone)]
pub struct GeometricTargets {
    /// Aligned depth target (in rendered/SfM scale) and its mask.
    pub depth: Option<(DepthMap, Mask)>,
    /// Normal target and its mask.
    pub normal: Option<(NormalMap, Mask)>,
}

impl GeometricTargets {
    pub fn empty() -> Self {
        GeometricTargets {
            depth: None,
            normal: None,
        }
    }
}

/// Build frozen targets from a rendered frame and the frame's priors.
///
/// Pixels participate only where the rendered alpha exceeds 0.5 and the
/// prior is valid. A depth prior whose alignment is unsolvable (too few
/// overlapping pixels or constant input) is dropped rather than failing
/// the whole step, since early optimization often has little coverage.
pub fn prepare_targets(
    frame: &RenderedFrame,
    bundle: &FrameBundle,
    direction: FitDirection,
) -> Result<GeometricTargets, LossError> {
    let (w, h) = (frame.width(), frame.height());
    let mut out = GeometricTargets::empty();

    if let Some(prior) = &bundle.depth_prior {
        if prior.width() != w || prior.height() != h {
            return Err(LossError::ShapeMismatch(format!(
                "depth prior {}x{} vs frame {}x{}",
                prior.width(),
                prior.height(),
                w,
                h
            )));
        }
        let mask_vec: Vec<bool> = (0..w * h)
            .map(|i| prior.values.data[i] > 0.0 && frame.alpha.data[i] > 0.5)
            .collect();
        let mask = Mask::from_vec(w, h, mask_vec);
        let rendered = DepthMap {
            values: frame.depth.clone(),
            source: DepthSource::Rendered,
        };
        match align_scale_shift_dir(prior, &rendered, &mask, direction) {
            Ok(fit) => {
                // express the prior in rendered scale regardless of which
                // side the regression treated as independent
                let forward = match direction {
                    FitDirection::PriorToRendered => fit,
                    FitDirection::RenderedToPrior => crate::priors::AffineFit {
                        a: 1.0 / fit.a,
                        b: -fit.b / fit.a,
                        inlier_count: fit.inlier_count,
                        residual_rms: fit.residual_rms,
                    },
                };
                if forward.a.is_finite() && forward.b.is_finite() {
                    let aligned = apply_affine(prior, &forward);
                    // clamping can invalidate pixels; refresh the mask
                    let mask_vec: Vec<bool> = (0..w * h)
                        .map(|i| aligned.values.data[i] > 0.0 && frame.alpha.data[i] > 0.5)
                        .collect();
                    let mask = Mask::from_vec(w, h, mask_vec);
                    if mask.count() > 0 {
                        out.depth = Some((aligned, mask));
                    }
                }
            }
            Err(PriorError::TooFewInliers(_)) | Err(PriorError::DegenerateRegression) => {}
            Err(e) => return Err(e.into()),
        }
    }

    if let Some(prior) = &bundle.normal_prior {
        if prior.values.width != w || prior.values.height != h {
            return Err(LossError::ShapeMismatch(format!(
                "normal prior {}x{} vs frame {}x{}",
                prior.values.width, prior.values.height, w, h
            )));
        }
        let mask_vec: Vec<bool> = (0..w * h)
            .map(|i| {
                let nonzero = (0..3).any(|c| prior.values.data[i * 3 + c] != 0.0);
                nonzero && frame.alpha.data[i] > 0.5
            })
            .collect();
        let mask = Mask::from_vec(w, h, mask_vec);
        if mask.count() > 0 {
            out.normal = Some((prior.clone(), mask));
        }
    }

    Ok(out)
}

/// Value and per-pixel gradient of one loss term.
pub struct TermResult {
    pub value: f64,
    pub grad: Grid,
}

/// (1 - lambda_ssim) * mean |r - t| + lambda_ssim * (1 - SSIM(r, t)) / 2,
/// averaged over every pixel and channel.
pub fn photometric_loss(rendered: &Grid, target: &Grid, lambda_ssim: f64) -> Result<TermResult, LossError> {
    if !rendered.same_shape(target) {
        return Err(LossError::ShapeMismatch(format!(
            "rendered {}x{}x{} vs target {}x{}x{}",
            rendered.width, rendered.height, rendered.channels,
            target.width, target.height, target.channels
        )));
    }
    let count = rendered.data.len() as f64;
    let mut l1 = 0.0;
    let mut grad = Grid::new(rendered.width, rendered.height, rendered.channels);
    for (i, (r, t)) in rendered.data.iter().zip(&target.data).enumerate() {
        let d = r - t;
        l1 += d.abs();
        grad.data[i] = (1.0 - lambda_ssim) * d.signum() / count;
    }
    l1 /= count;
    let mut value = (1.0 - lambda_ssim) * l1;
    if lambda_ssim > 0.0 {
        let s = ssim_with_grad(rendered, target);
        value += lambda_ssim * (1.0 - s.mean) / 2.0;
        for (g, ds) in grad.data.iter_mut().zip(&s.grad.data) {
            *g -= lambda_ssim * ds / 2.0;
        }
    }
    Ok(TermResult { value, grad })
}

/// Robust masked depth loss: mean over masked pixels of log(1 + |D - T|).
pub fn depth_loss(rendered_depth: &Grid, target: &DepthMap, mask: &Mask) -> Result<TermResult, LossError> {
    if rendered_depth.channels != 1
        || !rendered_depth.same_shape(&target.values)
        || mask.width != rendered_depth.width
        || mask.height != rendered_depth.height
    {
        return Err(LossError::ShapeMismatch(
            "depth/target/mask shapes differ".into(),
        ));
    }
    let m = mask.count();
    if m == 0 {
        return Err(LossError::EmptyMask);
    }
    let mf = m as f64;
    let mut value = 0.0;
    let mut grad = Grid::new(rendered_depth.width, rendered_depth.height, 1);
    for i in 0..rendered_depth.pixel_count() {
        if !mask.data[i] {
            continue;
        }
        let d = rendered_depth.data[i] - target.values.data[i];
        value += (1.0 + d.abs()).ln();
        grad.data[i] = d.signum() / ((1.0 + d.abs()) * mf);
    }
    Ok(TermResult {
        value: value / mf,
        grad,
    })
}

/// Masked L1 normal alignment plus per-pixel-normalized forward-difference
/// smoothness, evaluated on the raw (alpha-weighted, non-unit) composited
/// normals. The smoothness sum is divided by the pixel count so its
/// magnitude stays comparable to the other terms across image sizes.
pub struct NormalLossResult {
    pub align: f64,
    pub smooth: f64,
    /// d(align + lambda_s * smooth)/d(rendered normals).
    pub grad: Grid,
}

pub fn normal_loss(
    rendered_normal: &Grid,
    target: &NormalMap,
    mask: &Mask,
    lambda_s: f64,
) -> Result<NormalLossResult, LossError> {
    if rendered_normal.channels != 3
        || !rendered_normal.same_shape(&target.values)
        || mask.width != rendered_normal.width
        || mask.height != rendered_normal.height
    {
        return Err(LossError::ShapeMismatch(
            "normal/target/mask shapes differ".into(),
        ));
    }
    let m = mask.count();
    if m == 0 {
        return Err(LossError::EmptyMask);
    }
    let mf = m as f64;
    let (w, h) = (rendered_normal.width, rendered_normal.height);
    let mut align = 0.0;
    let mut grad = Grid::new(w, h, 3);
    for i in 0..w * h {
        if !mask.data[i] {
            continue;
        }
        for c in 0..3 {
            let d = rendered_normal.data[i * 3 + c] - target.values.data[i * 3 + c];
            align += d.abs();
            grad.data[i * 3 + c] = d.signum() / mf;
        }
    }
    align /= mf;

    // total-variation sum over forward differences, mean-normalized
    let pixels = (w * h) as f64;
    let mut smooth = 0.0;
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = rendered_normal.at(x, y, c);
                if x + 1 < w {
                    let d = rendered_normal.at(x + 1, y, c) - v;
                    smooth += d.abs();
                    let s = lambda_s * d.signum() / pixels;
                    let ib = rendered_normal.idx(x + 1, y, c);
                    let ia = rendered_normal.idx(x, y, c);
                    grad.data[ib] += s;
                    grad.data[ia] -= s;
                }
                if y + 1 < h {
                    let d = rendered_normal.at(x, y + 1, c) - v;
                    smooth += d.abs();
                    let s = lambda_s * d.signum() / pixels;
                    let ib = rendered_normal.idx(x, y + 1, c);
                    let ia = rendered_normal.idx(x, y, c);
                    grad.data[ib] += s;
                    grad.data[ia] -= s;
                }
            }
        }
    }
    smooth /= pixels;

    Ok(NormalLossResult {
        align,
        smooth,
        grad,
    })
}

/// Per-term values of one composite loss evaluation. The invariant
/// total == photometric + lambda_d * depth + lambda_n * (normal_align +
/// lambda_s * normal_smooth) holds exactly as computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub photometric: f64,
    pub depth: f64,
    pub normal_align: f64,
    pub normal_smooth: f64,
}

/// Composite loss value, per-term breakdown, and parameter gradients for
/// one view. Targets are treated as constants; pass `None` to derive them
/// from the current render (the value is then self-consistent but the
/// alignment is still detached from the gradient).
pub fn total_loss(
    scene: &Scene,
    cam: &CameraPose,
    bundle: &FrameBundle,
    weights: &LossWeights,
    opts: &RenderOptions,
    targets: Option<&GeometricTargets>,
) -> Result<(LossReport, SceneGrads), LossError> {
    let frame = render(scene, cam, opts);
    let owned;
    let targets = match targets {
        Some(t) => t,
        None => {
            owned = prepare_targets(&frame, bundle, FitDirection::default())?;
            &owned
        }
    };

    let photo = photometric_loss(&frame.color, &bundle.target, weights.lambda_ssim)?;
    let g_color = photo.grad;

    let mut depth_value = 0.0;
    let mut g_depth = Grid::new(frame.width(), frame.height(), 1);
    if let Some((target, mask)) = &targets.depth {
        let term = depth_loss(&frame.depth, target, mask)?;
        depth_value = term.value;
        g_depth = term.grad;
        for v in g_depth.data.iter_mut() {
            *v *= weights.lambda_d;
        }
    }

    let mut normal_align = 0.0;
    let mut normal_smooth = 0.0;
    let mut g_normal = Grid::new(frame.width(), frame.height(), 3);
    if let Some((target, mask)) = &targets.normal {
        let term = normal_loss(&frame.normal, target, mask, weights.lambda_s)?;
        normal_align = term.align;
        normal_smooth = term.smooth;
        g_normal = term.grad;
        for v in g_normal.data.iter_mut() {
            *v *= weights.lambda_n;
        }
    }

    let upstream = UpstreamGrads {
        color: &g_color,
        depth: &g_depth,
        normal: &g_normal,
        alpha: None,
    };
    let grads = backward(scene, cam, opts, &upstream);

    let total = photo.value
        + weights.lambda_d * depth_value
        + weights.lambda_n * (normal_align + weights.lambda_s * normal_smooth);
    Ok((
        LossReport {
            total,
            photometric: photo.value,
            depth: depth_value,
            normal_align,
            normal_smooth,
        },
        grads,
    ))
}
