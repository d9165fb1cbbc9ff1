//! SSIM with an 11x11 Gaussian window (sigma 1.5), per channel, with
//! reflect padding, plus its analytic gradient with respect to the first
//! image.

use crate::grid::Grid;

const RADIUS: isize = 5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn kernel() -> [f64; 11] {
    let sigma = 1.5f64;
    let mut k = [0.0; 11];
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - RADIUS as f64;
        *v = (-d * d / (2.0 * sigma * sigma)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Reflect-101 mirroring: index -1 maps to 1, n maps to n-2.
#[inline]
fn mirror(i: isize, n: isize) -> usize {
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

/// Separable Gaussian filtering of one channel plane.
fn filter(src: &[f64], w: usize, h: usize, k: &[f64; 11]) -> Vec<f64> {
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kw) in k.iter().enumerate() {
                let sx = mirror(x as isize + ki as isize - RADIUS, w as isize);
                acc += kw * src[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kw) in k.iter().enumerate() {
                let sy = mirror(y as isize + ki as isize - RADIUS, h as isize);
                acc += kw * tmp[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Adjoint of `filter`: scatters gradients back through the mirrored
/// indices (differs from plain filtering at the borders).
fn filter_adjoint(grad_out: &[f64], w: usize, h: usize, k: &[f64; 11]) -> Vec<f64> {
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let g = grad_out[y * w + x];
            if g == 0.0 {
                continue;
            }
            for (ki, kw) in k.iter().enumerate() {
                let sy = mirror(y as isize + ki as isize - RADIUS, h as isize);
                tmp[sy * w + x] += kw * g;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let g = tmp[y * w + x];
            if g == 0.0 {
                continue;
            }
            for (ki, kw) in k.iter().enumerate() {
                let sx = mirror(x as isize + ki as isize - RADIUS, w as isize);
                out[y * w + sx] += kw * g;
            }
        }
    }
    out
}

pub struct SsimResult {
    /// Mean SSIM over all pixels and channels.
    pub mean: f64,
    /// d(mean SSIM)/dx, same shape as the inputs.
    pub grad: Grid,
}

/// Mean SSIM of x against y and its gradient with respect to x.
pub fn ssim_with_grad(x: &Grid, y: &Grid) -> SsimResult {
    assert!(x.same_shape(y), "ssim inputs must share a shape");
    let (w, h, ch) = (x.width, x.height, x.channels);
    let k = kernel();
    let npix = w * h;
    let count = (npix * ch) as f64;
    let mut mean = 0.0;
    let mut grad = Grid::new(w, h, ch);

    let mut xc = vec![0.0; npix];
    let mut yc = vec![0.0; npix];
    for c in 0..ch {
        for i in 0..npix {
            xc[i] = x.data[i * ch + c];
            yc[i] = y.data[i * ch + c];
        }
        let xx: Vec<f64> = xc.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xc.iter().zip(&yc).map(|(a, b)| a * b).collect();
        let yy: Vec<f64> = yc.iter().map(|v| v * v).collect();

        let mu_x = filter(&xc, w, h, &k);
        let mu_y = filter(&yc, w, h, &k);
        let m_xx = filter(&xx, w, h, &k);
        let m_xy = filter(&xy, w, h, &k);
        let m_yy = filter(&yy, w, h, &k);

        let mut d_mu_x = vec![0.0; npix];
        let mut d_m_xx = vec![0.0; npix];
        let mut d_m_xy = vec![0.0; npix];
        for i in 0..npix {
            let (ux, uy) = (mu_x[i], mu_y[i]);
            let var_x = m_xx[i] - ux * ux;
            let var_y = m_yy[i] - uy * uy;
            let cov = m_xy[i] - ux * uy;
            let a1 = 2.0 * ux * uy + C1;
            let a2 = 2.0 * cov + C2;
            let b1 = ux * ux + uy * uy + C1;
            let b2 = var_x + var_y + C2;
            let denom = b1 * b2;
            let s = a1 * a2 / denom;
            mean += s;

            // partials treating mu_x, m_xx, m_xy as the independents
            let ds_da1 = a2 / denom;
            let ds_da2 = a1 / denom;
            let ds_db1 = -s / b1;
            let ds_db2 = -s / b2;
            // a1 dep: 2 uy; a2 dep via cov: -uy; b1 dep: 2 ux; b2 dep via var_x: -2 ux
            d_mu_x[i] = ds_da1 * 2.0 * uy + ds_da2 * (-2.0 * uy) + ds_db1 * 2.0 * ux
                + ds_db2 * (-2.0 * ux);
            d_m_xx[i] = ds_db2;
            d_m_xy[i] = ds_da2 * 2.0;
        }

        let g_mu = filter_adjoint(&d_mu_x, w, h, &k);
        let g_xx = filter_adjoint(&d_m_xx, w, h, &k);
        let g_xy = filter_adjoint(&d_m_xy, w, h, &k);
        for i in 0..npix {
            let g = (g_mu[i] + 2.0 * xc[i] * g_xx[i] + yc[i] * g_xy[i]) / count;
            grad.data[i * ch + c] = g;
        }
    }
    SsimResult {
        mean: mean / count,
        grad,
    }
}
