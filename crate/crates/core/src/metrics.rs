//! Reference image-quality metrics and windowed statistics.
//!
//! All windows are square, odd-sized and replicate the border: every pixel
//! gets a full `window × window` neighbourhood.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

pub const DEFAULT_PEAK: f64 = 1.0;
pub const DEFAULT_SSIM_WINDOW: usize = 7;

const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Peak signal-to-noise ratio in decibels. Identical inputs yield the
/// [`Psnr::Infinite`] sentinel rather than a floating-point infinity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn is_infinite(&self) -> bool {
        matches!(self, Psnr::Infinite)
    }

    /// Finite value, or `None` for the sentinel.
    pub fn finite(&self) -> Option<f64> {
        match *self {
            Psnr::Finite(v) => Some(v),
            Psnr::Infinite => None,
        }
    }

    /// Lossy conversion for plotting and aggregation (`Infinite` → `f64::INFINITY`).
    pub fn to_f64(&self) -> f64 {
        self.finite().unwrap_or(f64::INFINITY)
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Finite(v) => write!(f, "{v:?}"),
            Psnr::Infinite => f.write_str("inf"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub psnr: Psnr,
    pub ssim: f64,
    pub rmse: f64,
}

impl MetricReport {
    /// PSNR, SSIM (default window) and RMSE at once.
    pub fn compute(reference: &Tensor2D, candidate: &Tensor2D, peak: f64) -> Result<Self> {
        let window = DEFAULT_SSIM_WINDOW.min(odd_floor(reference.height().min(reference.width())));
        Ok(Self {
            psnr: psnr(reference, candidate, peak)?,
            ssim: ssim(reference, candidate, peak, window)?,
            rmse: rmse(reference, candidate)?,
        })
    }
}

fn odd_floor(n: usize) -> usize {
    if n.is_multiple_of(2) {
        n.saturating_sub(1).max(1)
    } else {
        n
    }
}

fn check_peak(peak: f64) -> Result<()> {
    if !(peak.is_finite() && peak > 0.0) {
        return Err(Error::param(format!("peak must be positive and finite, got {peak}")));
    }
    Ok(())
}

pub(crate) fn check_window(window: usize, shape: (usize, usize)) -> Result<()> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::param(format!("window must be odd and positive, got {window}")));
    }
    if window > shape.0.min(shape.1) {
        return Err(Error::param(format!(
            "window {window} exceeds image size {}x{}",
            shape.0, shape.1
        )));
    }
    Ok(())
}

pub fn mse(reference: &Tensor2D, candidate: &Tensor2D) -> Result<f64> {
    reference.ensure_same_shape(candidate)?;
    let sum: f64 = reference
        .data()
        .iter()
        .zip(candidate.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / reference.len() as f64)
}

pub fn psnr(reference: &Tensor2D, candidate: &Tensor2D, peak: f64) -> Result<Psnr> {
    check_peak(peak)?;
    let mse = mse(reference, candidate)?;
    if mse == 0.0 {
        return Ok(Psnr::Infinite);
    }
    Ok(Psnr::Finite(10.0 * (peak * peak / mse).log10()))
}

pub fn rmse(reference: &Tensor2D, candidate: &Tensor2D) -> Result<f64> {
    Ok(mse(reference, candidate)?.sqrt())
}

/// Mean over a replicated-border square window, separably.
pub(crate) fn box_mean(x: &Tensor2D, window: usize) -> Vec<f64> {
    let (h, w) = x.shape();
    let r = (window / 2) as isize;
    let mut horizontal = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for b in -r..=r {
                acc += x.get_clamped(i as isize, j as isize + b);
            }
            horizontal[i * w + j] = acc;
        }
    }
    let norm = (window * window) as f64;
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for a in -r..=r {
                let ii = (i as isize + a).clamp(0, h as isize - 1) as usize;
                acc += horizontal[ii * w + j];
            }
            out[i * w + j] = acc / norm;
        }
    }
    out
}

/// Per-pixel windowed mean and population variance.
pub fn local_stats(x: &Tensor2D, window: usize) -> Result<(Tensor2D, Tensor2D)> {
    check_window(window, x.shape())?;
    let mean = box_mean(x, window);
    let sq = box_mean(&x.map(|v| v * v)?, window);
    let var = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| (s - m * m).max(0.0))
        .collect();
    let (h, w) = x.shape();
    Ok((Tensor2D::new(h, w, mean)?, Tensor2D::new(h, w, var)?))
}

/// Local SSIM at every pixel (uniform window, replicated border).
///
/// Variances and the covariance go through the same code path so that
/// `ssim_map(x, x)` is exactly one everywhere.
pub fn ssim_map(a: &Tensor2D, b: &Tensor2D, peak: f64, window: usize) -> Result<Tensor2D> {
    a.ensure_same_shape(b)?;
    check_peak(peak)?;
    check_window(window, a.shape())?;
    let c1 = (K1 * peak).powi(2);
    let c2 = (K2 * peak).powi(2);

    let mu_a = box_mean(a, window);
    let mu_b = box_mean(b, window);
    let aa = box_mean(&a.mul(a)?, window);
    let bb = box_mean(&b.mul(b)?, window);
    let ab = box_mean(&a.mul(b)?, window);

    let data = (0..a.len())
        .map(|k| {
            let (ma, mb) = (mu_a[k], mu_b[k]);
            let var_a = aa[k] - ma * ma;
            let var_b = bb[k] - mb * mb;
            let cov = ab[k] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2))
        })
        .collect();
    Tensor2D::new(a.height(), a.width(), data)
}

/// Mean structural similarity over all (border-replicated) windows.
pub fn ssim(reference: &Tensor2D, candidate: &Tensor2D, peak: f64, window: usize) -> Result<f64> {
    Ok(ssim_map(reference, candidate, peak, window)?.mean())
}
