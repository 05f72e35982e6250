use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    SheppLogan,
    Gradient,
    Checkerboard,
    Disks,
}

impl PhantomKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PhantomKind::SheppLogan => "shepp-logan",
            PhantomKind::Gradient => "gradient",
            PhantomKind::Checkerboard => "checkerboard",
            PhantomKind::Disks => "disks",
        }
    }
}

impl fmt::Display for PhantomKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shepp-logan" => Ok(PhantomKind::SheppLogan),
            "gradient" => Ok(PhantomKind::Gradient),
            "checkerboard" => Ok(PhantomKind::Checkerboard),
            "disks" => Ok(PhantomKind::Disks),
            other => Err(Error::param(format!("unknown phantom {other:?}"))),
        }
    }
}

/// Ten-ellipse head phantom with the high-contrast ("modified") intensities:
/// `(intensity, semi-axis a, semi-axis b, x0, y0, rotation in degrees)`.
const SHEPP_LOGAN: [[f64; 6]; 10] = [
    [1.0, 0.69, 0.92, 0.0, 0.0, 0.0],
    [-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0],
    [-0.2, 0.11, 0.31, 0.22, 0.0, -18.0],
    [-0.2, 0.16, 0.41, -0.22, 0.0, 18.0],
    [0.1, 0.21, 0.25, 0.0, 0.35, 0.0],
    [0.1, 0.046, 0.046, 0.0, 0.1, 0.0],
    [0.1, 0.046, 0.046, 0.0, -0.1, 0.0],
    [0.1, 0.046, 0.023, -0.08, -0.605, 0.0],
    [0.1, 0.023, 0.023, 0.0, -0.606, 0.0],
    [0.1, 0.023, 0.046, 0.06, -0.605, 0.0],
];

pub const MIN_PHANTOM_SIZE: usize = 16;

/// Deterministic square test image with values in `[0, 1]`.
pub fn make_phantom(kind: PhantomKind, size: usize) -> Result<Tensor2D> {
    if size < MIN_PHANTOM_SIZE {
        return Err(Error::param(format!("phantom size must be >= {MIN_PHANTOM_SIZE}, got {size}")));
    }
    match kind {
        PhantomKind::SheppLogan => shepp_logan(size),
        PhantomKind::Gradient => Tensor2D::from_fn(size, size, |_, j| j as f64 / (size - 1) as f64),
        PhantomKind::Checkerboard => {
            // largest tile ≤ size/8 that tiles evenly, so even sizes split exactly in half
            let tile = (1..=size / 8).rev().find(|t| size.is_multiple_of(2 * t)).unwrap_or(1);
            Tensor2D::from_fn(size, size, |i, j| ((i / tile + j / tile) % 2) as f64)
        }
        PhantomKind::Disks => disks(size),
    }
}

/// Pixel-center coordinate on `[-1, 1]` (x to the right, y upward).
fn axis(k: usize, n: usize) -> f64 {
    let half = (n - 1) as f64 / 2.0;
    (k as f64 - half) / half
}

fn shepp_logan(size: usize) -> Result<Tensor2D> {
    let raw = Tensor2D::from_fn(size, size, |i, j| {
        let x = axis(j, size);
        let y = -axis(i, size);
        SHEPP_LOGAN
            .iter()
            .filter(|e| {
                let (a, b, x0, y0) = (e[1], e[2], e[3], e[4]);
                let phi = e[5].to_radians();
                let (dx, dy) = (x - x0, y - y0);
                let u = dx * phi.cos() + dy * phi.sin();
                let v = -dx * phi.sin() + dy * phi.cos();
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            })
            .map(|e| e[0])
            .sum::<f64>()
    })?;
    let (lo, hi) = (raw.min(), raw.max());
    raw.map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
}

fn disks(size: usize) -> Result<Tensor2D> {
    // (cx, cy, radius, intensity) on the [-1, 1] grid
    const DISKS: [(f64, f64, f64, f64); 5] = [
        (0.0, 0.0, 0.8, 0.3),
        (-0.35, 0.3, 0.2, 0.9),
        (0.4, 0.25, 0.15, 0.6),
        (0.0, -0.4, 0.25, 1.0),
        (0.45, -0.35, 0.08, 0.0),
    ];
    Tensor2D::from_fn(size, size, |i, j| {
        let (x, y) = (axis(j, size), -axis(i, size));
        DISKS
            .iter().rfind(|(cx, cy, r, _)| (x - cx).powi(2) + (y - cy).powi(2) <= r * r)
            .map_or(0.0, |d| d.3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_definition() {
        let g = make_phantom(PhantomKind::Gradient, 16).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                assert_eq!(g.get(i, j), j as f64 / 15.0);
            }
        }
    }

    #[test]
    fn checkerboard_half_ones_for_even_sizes() {
        for size in [16, 18, 32, 40, 64] {
            let c = make_phantom(PhantomKind::Checkerboard, size).unwrap();
            let n = c.data().iter().filter(|&&v| v == 1.0).count();
            assert_eq!(n * 2, size * size, "size {size}");
        }
    }

    #[test]
    fn all_phantoms_in_unit_range() {
        for kind in [PhantomKind::SheppLogan, PhantomKind::Gradient, PhantomKind::Checkerboard, PhantomKind::Disks] {
            let p = make_phantom(kind, 32).unwrap();
            assert!(p.min() >= 0.0 && p.max() <= 1.0, "{kind}");
            assert!(p.dynamic_range() > 0.5, "{kind}");
        }
    }

    #[test]
    fn rejects_small_and_unknown() {
        assert!(make_phantom(PhantomKind::Disks, 15).is_err());
        assert!("ellipse".parse::<PhantomKind>().is_err());
    }
}
