//! Image loss: weighted L1 plus structural dissimilarity, with exact gradient.

use crate::error::{invalid, Error, Result};
use crate::real::Real;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// Floor on the target's dynamic range used for the SSIM constants.
pub const MIN_DATA_RANGE: f64 = 1e-3;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable "same" convolution with zero padding. The window is symmetric,
/// so this is also its own adjoint.
fn blur(img: &[f64], rows: usize, cols: usize, w: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; img.len()];
    for y in 0..rows {
        for x in 0..cols {
            let mut acc = 0.0;
            for (k, wk) in w.iter().enumerate() {
                let xx = x as isize + k as isize - r;
                if xx >= 0 && (xx as usize) < cols {
                    acc += wk * img[y * cols + xx as usize];
                }
            }
            tmp[y * cols + x] = acc;
        }
    }
    let mut out = vec![0.0; img.len()];
    for y in 0..rows {
        for x in 0..cols {
            let mut acc = 0.0;
            for (k, wk) in w.iter().enumerate() {
                let yy = y as isize + k as isize - r;
                if yy >= 0 && (yy as usize) < rows {
                    acc += wk * tmp[yy as usize * cols + x];
                }
            }
            out[y * cols + x] = acc;
        }
    }
    out
}

/// Dynamic range `max − min` of `target`, floored at [`MIN_DATA_RANGE`].
pub fn data_range(target: &[f64]) -> f64 {
    let (lo, hi) = target
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if target.is_empty() {
        return MIN_DATA_RANGE;
    }
    (hi - lo).max(MIN_DATA_RANGE)
}

fn check_dims(a: usize, b: usize, rows: usize, cols: usize) -> Result<()> {
    if a != rows * cols || b != rows * cols {
        return Err(Error::DimensionMismatch(format!(
            "images of {a} and {b} pixels for a {rows}x{cols} frame"
        )));
    }
    if rows == 0 || cols == 0 {
        return Err(invalid("empty image"));
    }
    Ok(())
}

/// Mean SSIM of `x` against reference `y`, and optionally `∂SSIM/∂x`.
pub fn ssim_with_grad(x: &[f64], y: &[f64], rows: usize, cols: usize, range: f64, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    check_dims(x.len(), y.len(), rows, cols)?;
    let w = gaussian_window();
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = blur(x, rows, cols, &w);
    let my = blur(y, rows, cols, &w);
    let exx = blur(&xx, rows, cols, &w);
    let eyy = blur(&yy, rows, cols, &w);
    let exy = blur(&xy, rows, cols, &w);
    let n = x.len();
    let mut total = 0.0;
    let (mut d_mu, mut d_exx, mut d_exy) = if want_grad {
        (vec![0.0; n], vec![0.0; n], vec![0.0; n])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for i in 0..n {
        let (ux, uy) = (mx[i], my[i]);
        let sxx = exx[i] - ux * ux;
        let syy = eyy[i] - uy * uy;
        let sxy = exy[i] - ux * uy;
        let a1 = 2.0 * ux * uy + c1;
        let a2 = 2.0 * sxy + c2;
        let b1 = ux * ux + uy * uy + c1;
        let b2 = sxx + syy + c2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if want_grad {
            let bb = b1 * b2;
            d_mu[i] = 2.0 * uy * a2 / bb - 2.0 * uy * a1 / bb - 2.0 * ux * s / b1 + 2.0 * ux * s / b2;
            d_exx[i] = -s / b2;
            d_exy[i] = 2.0 * a1 / bb;
        }
    }
    let grad = want_grad.then(|| {
        let g_mu = blur(&d_mu, rows, cols, &w);
        let g_xx = blur(&d_exx, rows, cols, &w);
        let g_xy = blur(&d_exy, rows, cols, &w);
        (0..n)
            .map(|i| (g_mu[i] + 2.0 * x[i] * g_xx[i] + y[i] * g_xy[i]) / n as f64)
            .collect()
    });
    Ok((total / n as f64, grad))
}

pub fn ssim(x: &[f64], y: &[f64], rows: usize, cols: usize, range: f64) -> Result<f64> {
    Ok(ssim_with_grad(x, y, rows, cols, range, false)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub l1: f64,
    /// `(1 − SSIM)/2`.
    pub dssim: f64,
}

/// `(1 − λ)·L1 + λ·(1 − SSIM)/2` and its gradient with respect to `pred`.
pub fn compute_loss<T: Real>(pred: &[T], target: &[T], rows: usize, cols: usize, lambda_ssim: f64) -> Result<(LossValue, Vec<T>)> {
    check_dims(pred.len(), target.len(), rows, cols)?;
    if !(0.0..=1.0).contains(&lambda_ssim) {
        return Err(invalid(format!("lambda_ssim {lambda_ssim} outside [0, 1]")));
    }
    let x: Vec<f64> = pred.iter().map(|v| v.to_f64()).collect();
    let y: Vec<f64> = target.iter().map(|v| v.to_f64()).collect();
    let n = x.len() as f64;
    let l1 = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let mut grad: Vec<f64> = x
        .iter()
        .zip(&y)
        .map(|(a, b)| {
            let d = a - b;
            let s = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            (1.0 - lambda_ssim) * s / n
        })
        .collect();
    let dssim = if lambda_ssim > 0.0 {
        let (s, g) = ssim_with_grad(&x, &y, rows, cols, data_range(&y), true)?;
        for (o, gs) in grad.iter_mut().zip(g.unwrap_or_default()) {
            *o -= 0.5 * lambda_ssim * gs;
        }
        (1.0 - s) / 2.0
    } else {
        let s = ssim(&x, &y, rows, cols, data_range(&y))?;
        (1.0 - s) / 2.0
    };
    let loss = (1.0 - lambda_ssim) * l1 + lambda_ssim * dssim;
    Ok((LossValue { loss, l1, dssim }, grad.into_iter().map(T::lit).collect()))
}
