//! Ground-truth-referenced risk proxies: how much error lives where the
//! measurements cannot see it, and how well edges are preserved.

use crate::error::Result;
use crate::metrics::{ssim, DEFAULT_PEAK, DEFAULT_SSIM_WINDOW};
use crate::ops::ForwardOperator;
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskReport {
    pub hallucination_risk: f64,
    pub structure_score: f64,
}

impl RiskReport {
    pub fn compute(x_hat: &Tensor2D, x_gt: &Tensor2D, op: &ForwardOperator) -> Result<Self> {
        Ok(Self {
            hallucination_risk: hallucination_risk(x_hat, x_gt, op)?,
            structure_score: structure_score(x_hat, x_gt)?,
        })
    }
}

/// `min(1, ‖N(x̂ − x)‖ / ‖x‖)` with `N` the null-space projector of `op`.
/// Only mask operators qualify.
pub fn hallucination_risk(x_hat: &Tensor2D, x_gt: &Tensor2D, op: &ForwardOperator) -> Result<f64> {
    let diff = x_hat.sub(x_gt)?;
    let unseen = op.null_project(&diff)?.norm();
    let reference = x_gt.norm();
    if reference == 0.0 {
        return Ok(if unseen == 0.0 { 0.0 } else { 1.0 });
    }
    Ok((unseen / reference).min(1.0))
}

/// Central-difference gradient magnitude with replicated borders.
pub fn gradient_magnitude(x: &Tensor2D) -> Result<Tensor2D> {
    let (h, w) = x.shape();
    Tensor2D::from_fn(h, w, |i, j| {
        let (i, j) = (i as isize, j as isize);
        let gx = (x.get_clamped(i, j + 1) - x.get_clamped(i, j - 1)) / 2.0;
        let gy = (x.get_clamped(i + 1, j) - x.get_clamped(i - 1, j)) / 2.0;
        gx.hypot(gy)
    })
}

/// SSIM of the gradient-magnitude maps.
pub fn structure_score(x_hat: &Tensor2D, x_gt: &Tensor2D) -> Result<f64> {
    x_hat.ensure_same_shape(x_gt)?;
    let window = DEFAULT_SSIM_WINDOW.min(largest_odd(x_gt.height().min(x_gt.width())));
    ssim(&gradient_magnitude(x_gt)?, &gradient_magnitude(x_hat)?, DEFAULT_PEAK, window)
}

fn largest_odd(n: usize) -> usize {
    if n % 2 == 1 {
        n
    } else {
        n.saturating_sub(1).max(1)
    }
}
