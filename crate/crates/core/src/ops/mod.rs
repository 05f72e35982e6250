//! Linear degradation operators with exact adjoints and null-space
//! projectors, plus the synthetic data (phantoms, sampling masks) used to
//! exercise them.
//!
//! Every operator has spectral norm at most one: masks are diagonal 0/1
//! maps, the DFT is unitary, and blur kernels sum to one. The fidelity
//! branch's step-size bound relies on this.
//!
//! `apply` is strictly linear and deterministic. Noise enters only through
//! [`ForwardOperator::degrade`], seeded from the operator.

mod dft;
mod mask;
mod phantom;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use dft::{centered_index, mirror_position, Dft2};
pub use mask::{make_sampling_mask, symmetrize_spectrum_mask, MaskKind};
pub use phantom::{make_phantom, PhantomKind};

use crate::error::{Error, Result};
use crate::tensor::{Complex64, ComplexTensor2D, Tensor2D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperatorKind {
    #[serde(alias = "identity")]
    IdentityPlusNoise,
    PixelMask,
    FrequencyMask,
    Blur,
}

impl OperatorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OperatorKind::IdentityPlusNoise => "identity-plus-noise",
            OperatorKind::PixelMask => "pixel-mask",
            OperatorKind::FrequencyMask => "frequency-mask",
            OperatorKind::Blur => "blur",
        }
    }

    /// Whether the null space is known exactly (needed for hallucination risk).
    pub fn has_exact_null_space(&self) -> bool {
        matches!(self, OperatorKind::PixelMask | OperatorKind::FrequencyMask)
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OperatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "identity-plus-noise" => Ok(OperatorKind::IdentityPlusNoise),
            "pixel-mask" => Ok(OperatorKind::PixelMask),
            "frequency-mask" => Ok(OperatorKind::FrequencyMask),
            "blur" => Ok(OperatorKind::Blur),
            other => Err(Error::param(format!("unknown operator kind {other:?}"))),
        }
    }
}

/// Output of a forward operator: real for image-domain operators, complex
/// (centered spectrum) for the frequency mask.
#[derive(Debug, Clone, PartialEq)]
pub enum Measurement {
    Real(Tensor2D),
    Complex(ComplexTensor2D),
}

impl Measurement {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            Measurement::Real(t) => t.shape(),
            Measurement::Complex(c) => c.shape(),
        }
    }

    pub fn norm(&self) -> f64 {
        match self {
            Measurement::Real(t) => t.norm(),
            Measurement::Complex(c) => c.norm(),
        }
    }

    pub fn sub(&self, other: &Measurement) -> Result<Measurement> {
        match (self, other) {
            (Measurement::Real(a), Measurement::Real(b)) => Ok(Measurement::Real(a.sub(b)?)),
            (Measurement::Complex(a), Measurement::Complex(b)) => Ok(Measurement::Complex(a.sub(b)?)),
            _ => Err(Error::Validation("mixing real and complex measurements".into())),
        }
    }

    /// Real inner product.
    pub fn dot(&self, other: &Measurement) -> Result<f64> {
        match (self, other) {
            (Measurement::Real(a), Measurement::Real(b)) => a.dot(b),
            (Measurement::Complex(a), Measurement::Complex(b)) => a.dot_real(b),
            _ => Err(Error::Validation("mixing real and complex measurements".into())),
        }
    }

    pub fn as_real(&self) -> Option<&Tensor2D> {
        match self {
            Measurement::Real(t) => Some(t),
            Measurement::Complex(_) => None,
        }
    }

    pub fn as_complex(&self) -> Option<&ComplexTensor2D> {
        match self {
            Measurement::Complex(c) => Some(c),
            Measurement::Real(_) => None,
        }
    }
}

/// A linear degradation `A`. Immutable after construction.
#[derive(Clone)]
pub struct ForwardOperator {
    kind: OperatorKind,
    shape: (usize, usize),
    mask: Option<Tensor2D>,
    kernel: Option<Tensor2D>,
    noise_sigma: f64,
    seed: u64,
    dft: Option<Arc<Dft2>>,
}

impl fmt::Debug for ForwardOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ForwardOperator")
            .field("kind", &self.kind)
            .field("shape", &self.shape)
            .field("noise_sigma", &self.noise_sigma)
            .field("seed", &self.seed)
            .finish_non_exhaustive()
    }
}

impl PartialEq for ForwardOperator {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.shape == other.shape
            && self.mask == other.mask
            && self.kernel == other.kernel
            && self.noise_sigma.to_bits() == other.noise_sigma.to_bits()
            && self.seed == other.seed
    }
}

fn check_sigma(noise_sigma: f64) -> Result<()> {
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(Error::param(format!("noise_sigma must be >= 0, got {noise_sigma}")));
    }
    Ok(())
}

fn check_binary(mask: &Tensor2D) -> Result<()> {
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Validation("mask entries must be 0 or 1".into()));
    }
    Ok(())
}

impl ForwardOperator {
    pub fn identity(height: usize, width: usize, noise_sigma: f64, seed: u64) -> Result<Self> {
        check_sigma(noise_sigma)?;
        Tensor2D::zeros(height, width)?;
        Ok(Self {
            kind: OperatorKind::IdentityPlusNoise,
            shape: (height, width),
            mask: None,
            kernel: None,
            noise_sigma,
            seed,
            dft: None,
        })
    }

    pub fn pixel_mask(mask: Tensor2D, noise_sigma: f64, seed: u64) -> Result<Self> {
        check_sigma(noise_sigma)?;
        check_binary(&mask)?;
        Ok(Self {
            kind: OperatorKind::PixelMask,
            shape: mask.shape(),
            mask: Some(mask),
            kernel: None,
            noise_sigma,
            seed,
            dft: None,
        })
    }

    /// Frequency-domain sampling. `mask` is in centered layout and must be
    /// conjugate-symmetric so that the unmeasured set is closed under the
    /// real-part projection (see [`symmetrize_spectrum_mask`]).
    pub fn frequency_mask(mask: Tensor2D, noise_sigma: f64, seed: u64) -> Result<Self> {
        check_sigma(noise_sigma)?;
        check_binary(&mask)?;
        let (h, w) = mask.shape();
        for i in 0..h {
            for j in 0..w {
                let (mi, mj) = mirror_position(i, j, h, w);
                if mask.get(i, j) != mask.get(mi, mj) {
                    return Err(Error::Validation(format!(
                        "frequency mask is not conjugate-symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self {
            kind: OperatorKind::FrequencyMask,
            shape: (h, w),
            mask: Some(mask),
            kernel: None,
            noise_sigma,
            seed,
            dft: Some(Arc::new(Dft2::new(h, w))),
        })
    }

    /// Zero-padded "same" convolution with an odd-sized kernel summing to one.
    pub fn blur(height: usize, width: usize, kernel: Tensor2D, noise_sigma: f64, seed: u64) -> Result<Self> {
        check_sigma(noise_sigma)?;
        Tensor2D::zeros(height, width)?;
        let (kh, kw) = kernel.shape();
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Validation(format!("blur kernel must have odd dimensions, got {kh}x{kw}")));
        }
        if (kernel.sum() - 1.0).abs() > 1e-12 {
            return Err(Error::Validation(format!("blur kernel must sum to 1, sums to {}", kernel.sum())));
        }
        Ok(Self {
            kind: OperatorKind::Blur,
            shape: (height, width),
            mask: None,
            kernel: Some(kernel),
            noise_sigma,
            seed,
            dft: None,
        })
    }

    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub fn mask(&self) -> Option<&Tensor2D> {
        self.mask.as_ref()
    }

    pub fn kernel(&self) -> Option<&Tensor2D> {
        self.kernel.as_ref()
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn check_domain(&self, x: &Tensor2D) -> Result<()> {
        if x.shape() != self.shape {
            return Err(Error::Dimension {
                expected: self.shape,
                got: x.shape(),
            });
        }
        Ok(())
    }

    fn check_codomain(&self, m: &Measurement) -> Result<()> {
        let ok_kind = matches!(
            (self.kind, m),
            (OperatorKind::FrequencyMask, Measurement::Complex(_))
                | (
                    OperatorKind::IdentityPlusNoise | OperatorKind::PixelMask | OperatorKind::Blur,
                    Measurement::Real(_)
                )
        );
        if !ok_kind {
            return Err(Error::Validation(format!(
                "measurement type does not match {} operator",
                self.kind
            )));
        }
        if m.shape() != self.shape {
            return Err(Error::Dimension {
                expected: self.shape,
                got: m.shape(),
            });
        }
        Ok(())
    }

    fn dft(&self) -> &Dft2 {
        self.dft.as_deref().expect("frequency operator carries a DFT plan")
    }

    fn mask_ref(&self) -> &Tensor2D {
        self.mask.as_ref().expect("mask operator carries a mask")
    }

    fn mask_spectrum(&self, spectrum: &ComplexTensor2D, keep_measured: bool) -> Result<ComplexTensor2D> {
        let mask = self.mask_ref();
        let data = spectrum
            .data()
            .iter()
            .zip(mask.data())
            .map(|(&c, &m)| {
                let weight = if keep_measured { m } else { 1.0 - m };
                c * weight
            })
            .collect();
        ComplexTensor2D::new(self.shape.0, self.shape.1, data)
    }

    fn convolve(&self, x: &Tensor2D, flipped: bool) -> Result<Tensor2D> {
        let k = self.kernel.as_ref().expect("blur operator carries a kernel");
        let (h, w) = self.shape;
        let (kh, kw) = k.shape();
        let (rh, rw) = ((kh / 2) as isize, (kw / 2) as isize);
        Tensor2D::from_fn(h, w, |i, j| {
            let mut acc = 0.0;
            for a in 0..kh {
                for b in 0..kw {
                    let (si, sj) = if flipped {
                        (i as isize - rh + a as isize, j as isize - rw + b as isize)
                    } else {
                        (i as isize + rh - a as isize, j as isize + rw - b as isize)
                    };
                    if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < w {
                        acc += k.get(a, b) * x.get(si as usize, sj as usize);
                    }
                }
            }
            acc
        })
    }

    /// Noise-free forward map `A x`.
    pub fn apply(&self, x: &Tensor2D) -> Result<Measurement> {
        self.check_domain(x)?;
        Ok(match self.kind {
            OperatorKind::IdentityPlusNoise => Measurement::Real(x.clone()),
            OperatorKind::PixelMask => Measurement::Real(x.mul(self.mask_ref())?),
            OperatorKind::FrequencyMask => {
                let spectrum = self.dft().forward(x);
                Measurement::Complex(self.mask_spectrum(&spectrum, true)?)
            }
            OperatorKind::Blur => Measurement::Real(self.convolve(x, false)?),
        })
    }

    /// Exact adjoint `Aᵀ m` under the real inner product. For the frequency
    /// mask this is `Re(Fᴴ M m)`.
    pub fn adjoint(&self, m: &Measurement) -> Result<Tensor2D> {
        self.check_codomain(m)?;
        match (self.kind, m) {
            (OperatorKind::IdentityPlusNoise, Measurement::Real(t)) => Ok(t.clone()),
            (OperatorKind::PixelMask, Measurement::Real(t)) => t.mul(self.mask_ref()),
            (OperatorKind::FrequencyMask, Measurement::Complex(c)) => {
                let masked = self.mask_spectrum(c, true)?;
                Ok(self.dft().inverse(&masked).real())
            }
            (OperatorKind::Blur, Measurement::Real(t)) => self.convolve(t, true),
            _ => unreachable!("codomain checked above"),
        }
    }

    /// Component of `x` invisible to the operator. Only mask operators have
    /// an exactly known null space.
    pub fn null_project(&self, x: &Tensor2D) -> Result<Tensor2D> {
        self.check_domain(x)?;
        match self.kind {
            OperatorKind::PixelMask => x.zip_map(self.mask_ref(), |v, m| (1.0 - m) * v),
            OperatorKind::FrequencyMask => {
                let spectrum = self.dft().forward(x);
                let unmeasured = self.mask_spectrum(&spectrum, false)?;
                Ok(self.dft().inverse(&unmeasured).real())
            }
            kind => Err(Error::Capability(format!("{kind} operator has no exact null-space projector"))),
        }
    }

    /// `‖A x − y‖₂`
    pub fn residual(&self, x: &Tensor2D, measured: &Measurement) -> Result<f64> {
        Ok(self.apply(x)?.sub(measured)?.norm())
    }

    /// Simulate an acquisition: `A x` plus seeded Gaussian noise on the
    /// measured entries (circular complex noise for spectra, split evenly
    /// between real and imaginary parts).
    pub fn degrade(&self, x: &Tensor2D) -> Result<Observation> {
        let clean = self.apply(x)?;
        let measured = if self.noise_sigma == 0.0 {
            clean
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            // stream 0 belongs to mask generation under the same seed
            rng.set_stream(1);
            let sigma = self.noise_sigma;
            let mut gauss = move || -> f64 { StandardNormal.sample(&mut rng) };
            let weight = |k: usize| self.mask.as_ref().map_or(1.0, |m| m.data()[k]);
            match clean {
                Measurement::Real(t) => {
                    let data = t
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, &v)| v + weight(k) * sigma * gauss())
                        .collect();
                    Measurement::Real(Tensor2D::new(t.height(), t.width(), data)?)
                }
                Measurement::Complex(c) => {
                    let s = sigma / std::f64::consts::SQRT_2;
                    let data = c
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, &v)| {
                            let (re, im) = (gauss(), gauss());
                            v + Complex64::new(re, im) * (s * weight(k))
                        })
                        .collect();
                    Measurement::Complex(ComplexTensor2D::new(c.height(), c.width(), data)?)
                }
            }
        };
        Observation::new(measured, self.clone(), Some(x.clone()))
    }
}

/// Measured data `y` together with the operator that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub measured: Measurement,
    pub operator: ForwardOperator,
    pub ground_truth: Option<Tensor2D>,
}

impl Observation {
    pub fn new(measured: Measurement, operator: ForwardOperator, ground_truth: Option<Tensor2D>) -> Result<Self> {
        operator.check_codomain(&measured)?;
        if let Some(gt) = &ground_truth {
            operator.check_domain(gt)?;
        }
        Ok(Self {
            measured,
            operator,
            ground_truth,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.operator.shape()
    }

    /// `Aᵀ y`, the zero-filled reconstruction.
    pub fn backprojection(&self) -> Result<Tensor2D> {
        self.operator.adjoint(&self.measured)
    }

    pub fn residual(&self, x: &Tensor2D) -> Result<f64> {
        self.operator.residual(x, &self.measured)
    }
}

/// Box kernel of odd side `size`.
pub fn box_kernel(size: usize) -> Result<Tensor2D> {
    if size.is_multiple_of(2) {
        return Err(Error::param(format!("kernel size must be odd, got {size}")));
    }
    Tensor2D::filled(size, size, 1.0 / (size * size) as f64)
}

/// Normalized isotropic Gaussian kernel of odd side `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Tensor2D> {
    if size.is_multiple_of(2) || sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::param(format!("gaussian kernel needs odd size and sigma > 0, got {size}, {sigma}")));
    }
    let r = (size / 2) as f64;
    let raw = Tensor2D::from_fn(size, size, |i, j| {
        let (di, dj) = (i as f64 - r, j as f64 - r);
        (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp()
    })?;
    raw.scale(1.0 / raw.sum())
}

/// Serializable description of an operator, instantiated per image size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorSpec {
    pub kind: OperatorKind,
    #[serde(default)]
    pub mask: Option<MaskSpec>,
    #[serde(default)]
    pub blur: Option<BlurSpec>,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub kind: MaskKind,
    pub keep_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlurSpec {
    pub size: usize,
    /// Gaussian width; a box kernel when absent.
    #[serde(default)]
    pub sigma: Option<f64>,
}

impl OperatorSpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    /// Build the operator for an `height × width` image. Frequency masks are
    /// symmetrized so the operator invariants hold.
    pub fn build(&self, height: usize, width: usize) -> Result<ForwardOperator> {
        let mask = || -> Result<Tensor2D> {
            let m = self
                .mask
                .ok_or_else(|| Error::param(format!("{} operator needs a mask spec", self.kind)))?;
            if height != width {
                return Err(Error::param("sampling masks require square images"));
            }
            make_sampling_mask(m.kind, m.keep_fraction, height, self.seed)
        };
        match self.kind {
            OperatorKind::IdentityPlusNoise => ForwardOperator::identity(height, width, self.noise_sigma, self.seed),
            OperatorKind::PixelMask => ForwardOperator::pixel_mask(mask()?, self.noise_sigma, self.seed),
            OperatorKind::FrequencyMask => {
                ForwardOperator::frequency_mask(symmetrize_spectrum_mask(&mask()?)?, self.noise_sigma, self.seed)
            }
            OperatorKind::Blur => {
                let b = self.blur.unwrap_or(BlurSpec { size: 3, sigma: None });
                let kernel = match b.sigma {
                    Some(s) => gaussian_kernel(b.size, s)?,
                    None => box_kernel(b.size)?,
                };
                ForwardOperator::blur(height, width, kernel, self.noise_sigma, self.seed)
            }
        }
    }
}
