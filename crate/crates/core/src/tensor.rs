//! Dense row-major 2-D grids of `f64` (images, latents, and per-pixel maps)
//! plus their complex counterpart for frequency-domain measurements.

use std::fmt;

pub use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};

/// Real-valued 2-D grid. Every entry is finite; constructors reject NaN/Inf.
#[derive(Clone, PartialEq)]
pub struct Tensor2D {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor2D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor2D({}x{})", self.height, self.width)
    }
}

fn check_dims(height: usize, width: usize, len: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::Validation(format!(
            "tensor dimensions must be positive, got {height}x{width}"
        )));
    }
    if height.checked_mul(width) != Some(len) {
        return Err(Error::Validation(format!(
            "data length {len} does not match {height}x{width}"
        )));
    }
    Ok(())
}

impl Tensor2D {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, data.len())?;
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite entry at ({}, {})",
                pos / width,
                pos % width
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height.saturating_mul(width)])
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::filled(height, width, 0.0)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(height.saturating_mul(width));
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Self::new(height, width, data)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.width + j]
    }

    /// Value at `(i, j)` with indices clamped into the grid (edge replication).
    #[inline]
    pub fn get_clamped(&self, i: isize, j: isize) -> f64 {
        let i = i.clamp(0, self.height as isize - 1) as usize;
        let j = j.clamp(0, self.width as isize - 1) as usize;
        self.data[i * self.width + j]
    }

    /// Returns a copy with one entry replaced.
    pub fn with_value(&self, i: usize, j: usize, value: f64) -> Result<Self> {
        if i >= self.height || j >= self.width {
            return Err(Error::param(format!("index ({i}, {j}) out of bounds")));
        }
        let mut data = self.data.clone();
        data[i * self.width + j] = value;
        Self::new(self.height, self.width, data)
    }

    pub fn ensure_same_shape(&self, other: &Tensor2D) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension {
                expected: self.shape(),
                got: other.shape(),
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.height, self.width, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor2D, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_same_shape(other)?;
        Self::new(
            self.height,
            self.width,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn add(&self, other: &Tensor2D) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor2D) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor2D) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Result<Self> {
        self.map(|v| v * factor)
    }

    pub fn add_scalar(&self, offset: f64) -> Result<Self> {
        self.map(|v| v + offset)
    }

    /// `self + factor * other`
    pub fn axpy(&self, factor: f64, other: &Tensor2D) -> Result<Self> {
        self.zip_map(other, |a, b| a + factor * b)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.clamp(lo, hi)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.width {
            for i in 0..self.height {
                data.push(self.get(i, j));
            }
        }
        Self {
            height: self.width,
            width: self.height,
            data,
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn dynamic_range(&self) -> f64 {
        self.max() - self.min()
    }

    pub fn dot(&self, other: &Tensor2D) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Euclidean (Frobenius) norm.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Complex-valued 2-D grid used for frequency-domain measurements.
#[derive(Clone, PartialEq)]
pub struct ComplexTensor2D {
    height: usize,
    width: usize,
    data: Vec<Complex64>,
}

impl fmt::Debug for ComplexTensor2D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ComplexTensor2D({}x{})", self.height, self.width)
    }
}

impl ComplexTensor2D {
    pub fn new(height: usize, width: usize, data: Vec<Complex64>) -> Result<Self> {
        check_dims(height, width, data.len())?;
        if data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::Validation("non-finite complex entry".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(
            height,
            width,
            vec![Complex64::new(0.0, 0.0); height.saturating_mul(width)],
        )
    }

    /// Assemble from separate real and imaginary planes.
    pub fn from_parts(re: &Tensor2D, im: &Tensor2D) -> Result<Self> {
        re.ensure_same_shape(im)?;
        Self::new(
            re.height(),
            re.width(),
            re.data()
                .iter()
                .zip(im.data())
                .map(|(&r, &i)| Complex64::new(r, i))
                .collect(),
        )
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.data[i * self.width + j]
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    pub fn real(&self) -> Tensor2D {
        Tensor2D {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|c| c.re).collect(),
        }
    }

    pub fn imag(&self) -> Tensor2D {
        Tensor2D {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|c| c.im).collect(),
        }
    }

    pub fn ensure_same_shape(&self, other: &ComplexTensor2D) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension {
                expected: self.shape(),
                got: other.shape(),
            });
        }
        Ok(())
    }

    pub fn sub(&self, other: &ComplexTensor2D) -> Result<Self> {
        self.ensure_same_shape(other)?;
        Self::new(
            self.height,
            self.width,
            self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        )
    }

    pub fn add(&self, other: &ComplexTensor2D) -> Result<Self> {
        self.ensure_same_shape(other)?;
        Self::new(
            self.height,
            self.width,
            self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        )
    }

    /// Real inner product `Re Σ conj(a)·b`, the one under which adjoints are exact.
    pub fn dot_real(&self, other: &ComplexTensor2D) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_non_finite_and_bad_lengths() {
        assert!(Tensor2D::new(2, 2, vec![0.0, 1.0, f64::NAN, 0.0]).is_err());
        assert!(Tensor2D::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Tensor2D::new(0, 2, vec![]).is_err());
        assert!(Tensor2D::new(1, 1, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn overflow_is_caught_by_invariant() {
        let t = Tensor2D::filled(2, 2, 1e308).unwrap();
        assert!(t.scale(10.0).is_err());
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let a = Tensor2D::zeros(2, 3).unwrap();
        let b = Tensor2D::zeros(3, 2).unwrap();
        assert!(matches!(a.add(&b), Err(Error::Dimension { .. })));
        assert_eq!(a.transpose().shape(), b.shape());
    }

    #[test]
    fn clamped_access_replicates_edges() {
        let t = Tensor2D::from_fn(3, 3, |i, j| (i * 3 + j) as f64).unwrap();
        assert_eq!(t.get_clamped(-1, -1), 0.0);
        assert_eq!(t.get_clamped(5, 1), 7.0);
        assert_eq!(t.get_clamped(1, 9), 5.0);
    }

    proptest! {
        #[test]
        fn add_then_sub_is_exact_for_integers(
            a in proptest::collection::vec(-1000i32..1000, 12),
            b in proptest::collection::vec(-1000i32..1000, 12),
        ) {
            let a = Tensor2D::new(3, 4, a.into_iter().map(f64::from).collect()).unwrap();
            let b = Tensor2D::new(3, 4, b.into_iter().map(f64::from).collect()).unwrap();
            let back = a.add(&b).unwrap().sub(&b).unwrap();
            prop_assert_eq!(back.data(), a.data());
        }
    }
}
