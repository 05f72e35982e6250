//! Unitary 2-D DFT (`1/√N` per transform), so the inverse is the adjoint.
//!
//! Spectra are exposed in *centered* layout: row `h/2`, column `w/2` holds
//! the DC coefficient.

use std::fmt;
use std::sync::Arc;

use rustfft::{Fft, FftPlanner};

use crate::tensor::{Complex64, ComplexTensor2D, Tensor2D};

#[derive(Clone)]
pub struct Dft2 {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Dft2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Dft2({}x{})", self.height, self.width)
    }
}

impl Dft2 {
    pub fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            height,
            width,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn transform(&self, data: &mut [Complex64], row: &dyn Fft<f64>, col: &dyn Fft<f64>) {
        let (h, w) = (self.height, self.width);
        for r in data.chunks_exact_mut(w) {
            row.process(r);
        }
        let mut column = vec![Complex64::new(0.0, 0.0); h];
        for j in 0..w {
            for i in 0..h {
                column[i] = data[i * w + j];
            }
            col.process(&mut column);
            for i in 0..h {
                data[i * w + j] = column[i];
            }
        }
        let scale = 1.0 / ((h * w) as f64).sqrt();
        for v in data.iter_mut() {
            *v *= scale;
        }
    }

    /// Forward unitary DFT, natural (DC-first) layout.
    pub fn forward_natural(&self, data: &mut [Complex64]) {
        self.transform(data, self.row_fwd.as_ref(), self.col_fwd.as_ref());
    }

    /// Inverse unitary DFT, natural layout.
    pub fn inverse_natural(&self, data: &mut [Complex64]) {
        self.transform(data, self.row_inv.as_ref(), self.col_inv.as_ref());
    }

    /// Spectrum of a real image in centered layout.
    pub fn forward(&self, x: &Tensor2D) -> ComplexTensor2D {
        let mut buf: Vec<Complex64> = x.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward_natural(&mut buf);
        let centered = to_centered(&buf, self.height, self.width);
        ComplexTensor2D::new(self.height, self.width, centered).expect("finite spectrum")
    }

    /// Inverse transform of a centered spectrum, keeping the full complex result.
    pub fn inverse(&self, spectrum: &ComplexTensor2D) -> ComplexTensor2D {
        let mut buf = from_centered(spectrum.data(), self.height, self.width);
        self.inverse_natural(&mut buf);
        ComplexTensor2D::new(self.height, self.width, buf).expect("finite image")
    }
}

/// Centered row/column index of natural frequency index `k` along an axis of length `n`.
#[inline]
pub fn centered_index(k: usize, n: usize) -> usize {
    (k + n / 2) % n
}

fn to_centered(natural: &[Complex64], h: usize, w: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for ki in 0..h {
        let ci = centered_index(ki, h);
        for kj in 0..w {
            out[ci * w + centered_index(kj, w)] = natural[ki * w + kj];
        }
    }
    out
}

fn from_centered(centered: &[Complex64], h: usize, w: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for ki in 0..h {
        let ci = centered_index(ki, h);
        for kj in 0..w {
            out[ki * w + kj] = centered[ci * w + centered_index(kj, w)];
        }
    }
    out
}

/// Centered position holding the conjugate-mirror frequency of `(i, j)`.
#[inline]
pub fn mirror_position(i: usize, j: usize, h: usize, w: usize) -> (usize, usize) {
    ((2 * (h / 2) + h - i) % h, (2 * (w / 2) + w - j) % w)
}
