//! Monocular depth/normal prior ingestion and closed-form scale/shift
//! alignment of monocular depth to rendered depth.
//!
//! Priors arrive through the WVDM container (magic `WVDM`, u32 LE width/
//! height/channels, then f32 LE row-major channel-interleaved data), the
//! adapter boundary to external depth/normal estimators. A deterministic
//! stub estimator keeps the pipeline runnable offline.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;
use rand::Rng;
use thiserror::Error;

use crate::grid::{Grid, Mask};

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes (expected WVDM)")]
    BadMagic,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("more than 1% of valid normal pixels are not unit length")]
    NonUnitNormals,
    #[error("depth regression is degenerate: x variance below 1e-12")]
    DegenerateRegression,
    #[error("too few inliers for the affine fit: {0}")]
    TooFewInliers(usize),
    #[error("non-finite values in map")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthSource {
    Prior,
    Rendered,
}

/// Per-pixel depth, nonnegative; 0 marks invalid/missing pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub values: Grid,
    pub source: DepthSource,
}

impl DepthMap {
    pub fn new(values: Grid, source: DepthSource) -> Result<Self, PriorError> {
        if values.channels != 1 {
            return Err(PriorError::DimensionMismatch(format!(
                "depth map must have 1 channel, got {}",
                values.channels
            )));
        }
        if !values.is_finite() {
            return Err(PriorError::NonFinite);
        }
        Ok(DepthMap { values, source })
    }

    pub fn width(&self) -> usize {
        self.values.width
    }

    pub fn height(&self) -> usize {
        self.values.height
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.values.at(x, y, 0) > 0.0
    }
}

/// Per-pixel camera-space unit normals; invalid pixels are zero vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    pub values: Grid,
}

impl NormalMap {
    /// Validates the unit-norm invariant: each valid (non-zero) pixel's
    /// norm within 1e-4 of 1. More than 1% of violating pixels rejects
    /// the whole map.
    pub fn new(values: Grid) -> Result<Self, PriorError> {
        if values.channels != 3 {
            return Err(PriorError::DimensionMismatch(format!(
                "normal map must have 3 channels, got {}",
                values.channels
            )));
        }
        if !values.is_finite() {
            return Err(PriorError::NonFinite);
        }
        let mut valid = 0usize;
        let mut bad = 0usize;
        for i in 0..values.pixel_count() {
            let n = Vector3::new(
                values.data[i * 3],
                values.data[i * 3 + 1],
                values.data[i * 3 + 2],
            );
            if n == Vector3::zeros() {
                continue;
            }
            valid += 1;
            if (n.norm() - 1.0).abs() > 1e-4 {
                bad += 1;
            }
        }
        if valid > 0 && bad * 100 > valid {
            return Err(PriorError::NonUnitNormals);
        }
        Ok(NormalMap { values })
    }
}

/// Which side of the regression is the independent variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FitDirection {
    /// Fit a*prior + b ~ rendered: the aligned prior inherits SfM scale.
    #[default]
    PriorToRendered,
    /// Fit a*rendered + b ~ prior (the literal regression of the depth
    /// alignment equation).
    RenderedToPrior,
}

/// Closed-form least-squares affine fit between two depth maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineFit {
    pub a: f64,
    pub b: f64,
    pub inlier_count: usize,
    pub residual_rms: f64,
}

/// Exact solution of the 2x2 normal equations for min_(a,b)
/// sum (a*x + b - y)^2 over masked pixels.
pub fn align_scale_shift_dir(
    d_prior: &DepthMap,
    d_render: &DepthMap,
    mask: &Mask,
    direction: FitDirection,
) -> Result<AffineFit, PriorError> {
    if !d_prior.values.same_shape(&d_render.values)
        || mask.width != d_prior.width()
        || mask.height != d_prior.height()
    {
        return Err(PriorError::DimensionMismatch(
            "prior/render/mask shapes differ".into(),
        ));
    }
    let (xs, ys): (&Grid, &Grid) = match direction {
        FitDirection::PriorToRendered => (&d_prior.values, &d_render.values),
        FitDirection::RenderedToPrior => (&d_render.values, &d_prior.values),
    };
    let mut n = 0usize;
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in 0..xs.pixel_count() {
        if !mask.data[i] {
            continue;
        }
        let x = xs.data[i];
        let y = ys.data[i];
        n += 1;
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    if n < 2 {
        return Err(PriorError::TooFewInliers(n));
    }
    let nf = n as f64;
    let var_x = sxx / nf - (sx / nf) * (sx / nf);
    if var_x < 1e-12 {
        return Err(PriorError::DegenerateRegression);
    }
    let cov_xy = sxy / nf - (sx / nf) * (sy / nf);
    let a = cov_xy / var_x;
    let b = sy / nf - a * sx / nf;
    let mut ss = 0.0;
    for i in 0..xs.pixel_count() {
        if !mask.data[i] {
            continue;
        }
        let r = a * xs.data[i] + b - ys.data[i];
        ss += r * r;
    }
    Ok(AffineFit {
        a,
        b,
        inlier_count: n,
        residual_rms: (ss / nf).sqrt(),
    })
}

/// Default-direction fit (prior toward rendered scale).
pub fn align_scale_shift(
    d_prior: &DepthMap,
    d_render: &DepthMap,
    mask: &Mask,
) -> Result<AffineFit, PriorError> {
    align_scale_shift_dir(d_prior, d_render, mask, FitDirection::default())
}

/// Mask of pixels valid in both maps: prior depth > 0 and rendered alpha
/// above 0.5 (background excluded from the fit).
pub fn alignment_mask(d_prior: &DepthMap, alpha: &Grid) -> Mask {
    let data = (0..d_prior.values.pixel_count())
        .map(|i| d_prior.values.data[i] > 0.0 && alpha.data[i] > 0.5)
        .collect();
    Mask::from_vec(d_prior.width(), d_prior.height(), data)
}

/// Apply a fit: value' = a*value + b on valid pixels; invalid pixels stay
/// zero and negative results clamp to zero (becoming invalid).
pub fn apply_affine(d: &DepthMap, fit: &AffineFit) -> DepthMap {
    let mut values = d.values.clone();
    for v in values.data.iter_mut() {
        if *v > 0.0 {
            *v = (fit.a * *v + fit.b).max(0.0);
        }
    }
    DepthMap {
        values,
        source: d.source,
    }
}

const WVDM_MAGIC: &[u8; 4] = b"WVDM";

/// Write a 1- or 3-channel map in the WVDM container (bit-exact f32).
pub fn store_map<W: Write>(grid: &Grid, mut w: W) -> Result<(), PriorError> {
    if grid.channels != 1 && grid.channels != 3 {
        return Err(PriorError::DimensionMismatch(format!(
            "WVDM supports 1 or 3 channels, got {}",
            grid.channels
        )));
    }
    w.write_all(WVDM_MAGIC)?;
    w.write_u32::<LittleEndian>(grid.width as u32)?;
    w.write_u32::<LittleEndian>(grid.height as u32)?;
    w.write_u32::<LittleEndian>(grid.channels as u32)?;
    for v in &grid.data {
        w.write_f32::<LittleEndian>(*v as f32)?;
    }
    Ok(())
}

pub fn load_map<R: Read>(mut r: R) -> Result<Grid, PriorError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != WVDM_MAGIC {
        return Err(PriorError::BadMagic);
    }
    let width = r.read_u32::<LittleEndian>()? as usize;
    let height = r.read_u32::<LittleEndian>()? as usize;
    let channels = r.read_u32::<LittleEndian>()? as usize;
    if channels != 1 && channels != 3 {
        return Err(PriorError::DimensionMismatch(format!(
            "WVDM supports 1 or 3 channels, got {}",
            channels
        )));
    }
    let count = width * height * channels;
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(r.read_f32::<LittleEndian>()? as f64);
    }
    Ok(Grid::from_vec(width, height, channels, data))
}

pub fn store_depth_file(d: &DepthMap, path: &Path) -> Result<(), PriorError> {
    let f = std::fs::File::create(path)?;
    store_map(&d.values, std::io::BufWriter::new(f))
}

pub fn load_depth_file(path: &Path, source: DepthSource) -> Result<DepthMap, PriorError> {
    let grid = load_map(std::fs::File::open(path)?)?;
    if grid.channels != 1 {
        return Err(PriorError::DimensionMismatch(
            "expected 1-channel depth file".into(),
        ));
    }
    DepthMap::new(grid, source)
}

pub fn store_normal_file(n: &NormalMap, path: &Path) -> Result<(), PriorError> {
    let f = std::fs::File::create(path)?;
    store_map(&n.values, std::io::BufWriter::new(f))
}

pub fn load_normal_file(path: &Path) -> Result<NormalMap, PriorError> {
    let grid = load_map(std::fs::File::open(path)?)?;
    if grid.channels != 3 {
        return Err(PriorError::DimensionMismatch(
            "expected 3-channel normal file".into(),
        ));
    }
    NormalMap::new(grid)
}

/// Affine distortion + noise applied by the stub estimator, so alignment
/// has a known answer to recover.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StubDistortion {
    pub scale: f64,
    pub shift: f64,
    pub noise_sigma: f64,
}

impl Default for StubDistortion {
    fn default() -> Self {
        StubDistortion {
            scale: 1.0,
            shift: 0.0,
            noise_sigma: 0.0,
        }
    }
}

/// Deterministic stand-in for a neural depth/normal estimator.
///
/// With ground-truth maps available, returns them under a configured
/// affine distortion plus optional Gaussian noise; without, returns a
/// smooth analytic ramp with constant normals.
pub fn stub_estimate<R: Rng>(
    width: usize,
    height: usize,
    oracle: Option<(&DepthMap, &NormalMap)>,
    distortion: &StubDistortion,
    rng: &mut R,
) -> (DepthMap, NormalMap) {
    match oracle {
        Some((gt_depth, gt_normal)) => {
            let mut values = gt_depth.values.clone();
            for v in values.data.iter_mut() {
                if *v > 0.0 {
                    let noise = if distortion.noise_sigma > 0.0 {
                        let (u1, u2): (f64, f64) = (rng.gen_range(f64::EPSILON..1.0), rng.gen());
                        distortion.noise_sigma
                            * (-2.0 * u1.ln()).sqrt()
                            * (2.0 * std::f64::consts::PI * u2).cos()
                    } else {
                        0.0
                    };
                    *v = (distortion.scale * *v + distortion.shift + noise).max(0.0);
                }
            }
            (
                DepthMap {
                    values,
                    source: DepthSource::Prior,
                },
                gt_normal.clone(),
            )
        }
        None => {
            let mut depth = Grid::new(width, height, 1);
            for y in 0..height {
                for x in 0..width {
                    // strictly increasing horizontal ramp
                    depth.set(x, y, 0, 1.0 + x as f64 / width.max(1) as f64);
                }
            }
            let mut normal = Grid::new(width, height, 3);
            for i in 0..normal.pixel_count() {
                normal.data[i * 3 + 2] = -1.0;
            }
            (
                DepthMap {
                    values: depth,
                    source: DepthSource::Prior,
                },
                NormalMap { values: normal },
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn depth_from(vals: Vec<f64>, w: usize, h: usize, source: DepthSource) -> DepthMap {
        DepthMap::new(Grid::from_vec(w, h, 1, vals), source).unwrap()
    }

    fn ramp_depth(w: usize, h: usize, source: DepthSource) -> DepthMap {
        let vals = (0..w * h).map(|i| 1.0 + i as f64 * 0.1).collect();
        depth_from(vals, w, h, source)
    }

    #[test]
    fn identity_fit() {
        let prior = ramp_depth(4, 4, DepthSource::Prior);
        let render = ramp_depth(4, 4, DepthSource::Rendered);
        let fit = align_scale_shift(&prior, &render, &Mask::all(4, 4)).unwrap();
        assert_relative_eq!(fit.a, 1.0, epsilon = 1e-12);
        assert_relative_eq!(fit.b, 0.0, epsilon = 1e-12);
        assert_relative_eq!(fit.residual_rms, 0.0, epsilon = 1e-12);
        assert_eq!(fit.inlier_count, 16);
    }

    #[test]
    fn exact_affine_recovered() {
        let prior = ramp_depth(4, 4, DepthSource::Prior);
        let render = depth_from(
            prior.values.data.iter().map(|v| 2.0 * v + 3.0).collect(),
            4,
            4,
            DepthSource::Rendered,
        );
        let fit = align_scale_shift(&prior, &render, &Mask::all(4, 4)).unwrap();
        assert_relative_eq!(fit.a, 2.0, epsilon = 1e-10);
        assert_relative_eq!(fit.b, 3.0, epsilon = 1e-10);
        assert_relative_eq!(fit.residual_rms, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn constant_prior_is_degenerate() {
        let prior = depth_from(vec![2.0; 16], 4, 4, DepthSource::Prior);
        let render = ramp_depth(4, 4, DepthSource::Rendered);
        assert!(matches!(
            align_scale_shift(&prior, &render, &Mask::all(4, 4)),
            Err(PriorError::DegenerateRegression)
        ));
    }

    #[test]
    fn reverse_direction_inverts_roles() {
        let prior = ramp_depth(4, 4, DepthSource::Prior);
        let render = depth_from(
            prior.values.data.iter().map(|v| 2.0 * v + 3.0).collect(),
            4,
            4,
            DepthSource::Rendered,
        );
        let fit =
            align_scale_shift_dir(&prior, &render, &Mask::all(4, 4), FitDirection::RenderedToPrior)
                .unwrap();
        assert_relative_eq!(fit.a, 0.5, epsilon = 1e-10);
        assert_relative_eq!(fit.b, -1.5, epsilon = 1e-10);
    }

    #[test]
    fn apply_affine_arithmetic_and_clamp() {
        let d = depth_from(vec![2.0, 1.0, 0.0, 4.0], 2, 2, DepthSource::Prior);
        let up = apply_affine(
            &d,
            &AffineFit {
                a: 2.0,
                b: 3.0,
                inlier_count: 4,
                residual_rms: 0.0,
            },
        );
        assert_eq!(up.values.data, vec![7.0, 5.0, 0.0, 11.0]);
        let down = apply_affine(
            &d,
            &AffineFit {
                a: -1.0,
                b: 0.0,
                inlier_count: 4,
                residual_rms: 0.0,
            },
        );
        assert_eq!(down.values.data[1], 0.0);
        assert!(!down.is_valid(1, 0));
    }

    #[test]
    fn masked_pixels_do_not_affect_fit() {
        let prior = ramp_depth(4, 4, DepthSource::Prior);
        let mut render = depth_from(
            prior.values.data.iter().map(|v| 2.0 * v + 3.0).collect(),
            4,
            4,
            DepthSource::Rendered,
        );
        let mut mask = Mask::all(4, 4);
        mask.data[5] = false;
        let fit_clean = align_scale_shift(&prior, &render, &mask).unwrap();
        render.values.data[5] = 999.0; // corrupt a masked-out pixel
        let fit_dirty = align_scale_shift(&prior, &render, &mask).unwrap();
        assert_eq!(fit_clean, fit_dirty);
    }

    #[test]
    fn wvdm_bad_magic() {
        let err = load_map(&b"NOPE\x01\x00\x00\x00"[..]).unwrap_err();
        assert!(matches!(err, PriorError::BadMagic));
    }

    #[test]
    fn non_unit_normals_rejected() {
        let mut g = Grid::new(4, 4, 3);
        for i in 0..16 {
            g.data[i * 3] = 2.0; // norm 2 everywhere
        }
        assert!(matches!(NormalMap::new(g), Err(PriorError::NonUnitNormals)));
    }

    #[test]
    fn stub_without_oracle_is_increasing_ramp() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (d, n) = stub_estimate(8, 4, None, &StubDistortion::default(), &mut rng);
        for y in 0..4 {
            for x in 1..8 {
                assert!(d.values.at(x, y, 0) > d.values.at(x - 1, y, 0));
            }
        }
        assert!(NormalMap::new(n.values).is_ok());
    }

    #[test]
    fn stub_distortion_is_recoverable() {
        let gt = ramp_depth(6, 6, DepthSource::Rendered);
        let gt_prior_view = DepthMap {
            values: gt.values.clone(),
            source: DepthSource::Prior,
        };
        let mut normals = Grid::new(6, 6, 3);
        for i in 0..36 {
            normals.data[i * 3 + 2] = -1.0;
        }
        let nm = NormalMap::new(normals).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let distortion = StubDistortion {
            scale: 0.5,
            shift: -0.2,
            noise_sigma: 0.0,
        };
        let (prior, _) = stub_estimate(6, 6, Some((&gt_prior_view, &nm)), &distortion, &mut rng);
        // aligning the distorted prior back to the ground truth recovers
        // the inverse affine map exactly
        let fit = align_scale_shift(&prior, &gt, &Mask::all(6, 6)).unwrap();
        assert_relative_eq!(fit.a, 2.0, epsilon = 1e-9);
        assert_relative_eq!(fit.b, 0.4, epsilon = 1e-9);
    }

    proptest! {
        #[test]
        fn prop_wvdm_round_trip(
            w in 1usize..8,
            h in 1usize..8,
            ch in prop::sample::select(vec![1usize, 3]),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            use rand::Rng as _;
            let data: Vec<f64> = (0..w * h * ch)
                .map(|_| rng.gen_range(-10.0f32..10.0) as f64)
                .collect();
            let grid = Grid::from_vec(w, h, ch, data);
            let mut buf = Vec::new();
            store_map(&grid, &mut buf).unwrap();
            let loaded = load_map(&buf[..]).unwrap();
            prop_assert_eq!(grid, loaded);
        }

        // affine equivariance: transform x-side by (p, q) => fit becomes
        // (a/p, b - a*q/p)
        #[test]
        fn prop_affine_equivariance(p in 0.2f64..5.0, q in -2.0f64..2.0) {
            let prior = ramp_depth(5, 5, DepthSource::Prior);
            let render = depth_from(
                prior.values.data.iter().map(|v| 1.7 * v - 0.3).collect(),
                5, 5, DepthSource::Rendered,
            );
            let base = align_scale_shift(&prior, &render, &Mask::all(5, 5)).unwrap();
            let transformed = depth_from(
                prior.values.data.iter().map(|v| p * v + q).collect(),
                5, 5, DepthSource::Prior,
            );
            let fit = align_scale_shift(&transformed, &render, &Mask::all(5, 5)).unwrap();
            prop_assert!((fit.a - base.a / p).abs() < 1e-8);
            prop_assert!((fit.b - (base.b - base.a * q / p)).abs() < 1e-8);
        }

        // optimality: perturbing (a, b) never decreases the objective
        #[test]
        fn prop_fit_optimality(noise_seed in 0u64..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
            use rand::Rng as _;
            let prior = ramp_depth(5, 5, DepthSource::Prior);
            let render = depth_from(
                prior.values.data.iter().map(|v| 1.3 * v + 0.5 + rng.gen_range(-0.1..0.1)).collect(),
                5, 5, DepthSource::Rendered,
            );
            let fit = align_scale_shift(&prior, &render, &Mask::all(5, 5)).unwrap();
            let objective = |a: f64, b: f64| -> f64 {
                prior.values.data.iter().zip(&render.values.data)
                    .map(|(x, y)| (a * x + b - y).powi(2)).sum()
            };
            let base = objective(fit.a, fit.b);
            let eps = 1e-4;
            for (da, db) in [(eps, 0.0), (-eps, 0.0), (0.0, eps), (0.0, -eps)] {
                prop_assert!(objective(fit.a + da, fit.b + db) >= base - 1e-12);
            }
        }
    }
}
