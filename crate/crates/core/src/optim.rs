//! Adam optimization of Gaussian scenes under the composite loss.
//!
//! One view is visited per iteration, cycling deterministically through
//! the training views. Geometric supervision targets (masks and the
//! aligned depth prior) are refreshed once per epoch from the current
//! render, then held fixed, matching the detached-alignment convention of
//! the loss.

use serde::{Deserialize, Serialize};

use crate::losses::{
    prepare_targets, total_loss, FrameBundle, GeometricTargets, LossError, LossWeights,
};
use crate::priors::FitDirection;
use crate::splat::{render, CameraPose, RenderOptions, Scene, PARAMS_PER_GAUSSIAN};

/// Per-parameter-group Adam step sizes plus shared moment settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub iterations: usize,
    pub lr_mean: f64,
    pub lr_log_scales: f64,
    pub lr_rotation: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weights: LossWeights,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            iterations: 300,
            lr_mean: 0.002,
            lr_log_scales: 0.005,
            lr_rotation: 0.001,
            lr_opacity: 0.05,
            lr_color: 0.0025,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weights: LossWeights::default(),
        }
    }
}

impl OptimizerConfig {
    fn lr_for_offset(&self, offset: usize) -> f64 {
        match offset {
            0..=2 => self.lr_mean,
            3..=5 => self.lr_log_scales,
            6..=9 => self.lr_rotation,
            10 => self.lr_opacity,
            _ => self.lr_color,
        }
    }
}

/// One row of the loss trace, recorded every iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub total: f64,
    pub photometric: f64,
    pub depth: f64,
    pub normal_align: f64,
    pub normal_smooth: f64,
}

/// Serialize a trace to CSV (stable header and `{:.11e}` floats so
/// same-seed runs produce byte-identical files).
pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("iteration,total,photometric,depth,normal_align,normal_smooth\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.11e},{:.11e},{:.11e},{:.11e},{:.11e}\n",
            r.iteration, r.total, r.photometric, r.depth, r.normal_align, r.normal_smooth
        ));
    }
    out
}

/// Optimize `scene` against the given views in place. Returns the full
/// loss trace; aborts with `NonFiniteLoss` if any iteration's total loss
/// is not finite.
pub fn optimize(
    scene: &mut Scene,
    views: &[(CameraPose, FrameBundle)],
    config: &OptimizerConfig,
    render_opts: &RenderOptions,
    fit_direction: FitDirection,
) -> Result<Vec<TraceRow>, LossError> {
    assert!(!views.is_empty(), "optimize needs at least one view");
    let n_params = scene.len() * PARAMS_PER_GAUSSIAN;
    let mut m = vec![0.0; n_params];
    let mut v = vec![0.0; n_params];
    let mut trace = Vec::with_capacity(config.iterations);
    let mut targets: Vec<GeometricTargets> = Vec::new();
    let epoch_len = views.len();

    for it in 0..config.iterations {
        if it % epoch_len == 0 {
            // refresh frozen supervision targets from the current scene
            targets.clear();
            for (cam, bundle) in views {
                let frame = render(scene, cam, render_opts);
                targets.push(prepare_targets(&frame, bundle, fit_direction)?);
            }
        }
        let view_idx = it % epoch_len;
        let (cam, bundle) = &views[view_idx];
        let (report, grads) = total_loss(
            scene,
            cam,
            bundle,
            &config.weights,
            render_opts,
            Some(&targets[view_idx]),
        )?;
        if !report.total.is_finite() {
            return Err(LossError::NonFiniteLoss(it));
        }
        trace.push(TraceRow {
            iteration: it,
            total: report.total,
            photometric: report.photometric,
            depth: report.depth,
            normal_align: report.normal_align,
            normal_smooth: report.normal_smooth,
        });

        let g = grads.to_flat();
        let mut params = scene.to_params();
        let t = (it + 1) as f64;
        let bc1 = 1.0 - config.beta1.powf(t);
        let bc2 = 1.0 - config.beta2.powf(t);
        for i in 0..n_params {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let lr = config.lr_for_offset(i % PARAMS_PER_GAUSSIAN);
            params[i] -= lr * m_hat / (v_hat.sqrt() + config.epsilon);
        }
        // renormalize quaternions so they never drift far from the unit
        // sphere (gradients always flow through the normalization)
        for chunk in params.chunks_mut(PARAMS_PER_GAUSSIAN) {
            let q = &mut chunk[6..10];
            let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if norm > 0.0 {
                for c in q.iter_mut() {
                    *c /= norm;
                }
            }
        }
        scene.set_params(&params);
    }
    Ok(trace)
}
