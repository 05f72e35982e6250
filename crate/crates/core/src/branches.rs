//! The two latent updates: a data-consistency (fidelity) step and a
//! training-free prior step.
//!
//! Latents live in image space; encoding is the identity.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::Observation;
use crate::tensor::Tensor2D;

/// Dual step of the projection iteration (1/8 is the proven bound, 1/4 the
/// usual practical value).
const CHAMBOLLE_TAU: f64 = 0.25;
const NLM_PATCH: usize = 5;
const NLM_SEARCH: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityConfig {
    pub eta: f64,
    pub inner_iters: usize,
}

impl Default for FidelityConfig {
    fn default() -> Self {
        Self { eta: 0.25, inner_iters: 1 }
    }
}

impl FidelityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::config("fidelity.eta", format!("must lie in (0, 1], got {}", self.eta)));
        }
        if self.inner_iters == 0 {
            return Err(Error::config("fidelity.inner_iters", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorKind {
    TvChambolle,
    NlmLite,
}

impl PriorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PriorKind::TvChambolle => "tv-chambolle",
            PriorKind::NlmLite => "nlm-lite",
        }
    }
}

impl fmt::Display for PriorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PriorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tv-chambolle" => Ok(PriorKind::TvChambolle),
            "nlm-lite" => Ok(PriorKind::NlmLite),
            other => Err(Error::param(format!("unknown prior kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub kind: PriorKind,
    pub strength: f64,
    pub inner_iters: usize,
    pub noise_inject: f64,
    pub seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            kind: PriorKind::TvChambolle,
            strength: 0.08,
            inner_iters: 20,
            noise_inject: 0.0,
            seed: 0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.strength >= 0.0 && self.strength.is_finite()) {
            return Err(Error::config("prior.strength", format!("must be >= 0, got {}", self.strength)));
        }
        if !(self.noise_inject >= 0.0 && self.noise_inject.is_finite()) {
            return Err(Error::config(
                "prior.noise_inject",
                format!("must be >= 0, got {}", self.noise_inject),
            ));
        }
        if self.inner_iters == 0 {
            return Err(Error::config("prior.inner_iters", "must be positive"));
        }
        Ok(())
    }
}

/// Both branch latents and the fused latent after step `step`.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchState {
    pub z_f: Tensor2D,
    pub z_p: Tensor2D,
    pub z_star: Tensor2D,
    pub step: usize,
}

/// `inner_iters` gradient steps on `½‖A z − y‖²`.
pub fn fidelity_step(z: &Tensor2D, obs: &Observation, cfg: &FidelityConfig) -> Result<Tensor2D> {
    cfg.validate()?;
    let op = &obs.operator;
    let mut out = z.clone();
    for _ in 0..cfg.inner_iters {
        let r = op.apply(&out)?.sub(&obs.measured)?;
        let grad = op.adjoint(&r)?;
        out = out.axpy(-cfg.eta, &grad)?;
    }
    Ok(out)
}

/// One prior refinement of `z`; `step` selects the perturbation stream so
/// that every engine step draws fresh but reproducible noise.
pub fn prior_step(z: &Tensor2D, cfg: &PriorConfig, step: usize) -> Result<Tensor2D> {
    cfg.validate()?;
    let smoothed = if cfg.strength == 0.0 {
        z.clone()
    } else {
        match cfg.kind {
            PriorKind::TvChambolle => tv_chambolle(z, cfg.strength, cfg.inner_iters)?,
            PriorKind::NlmLite => nlm_lite(z, cfg.strength)?,
        }
    };
    if cfg.noise_inject == 0.0 {
        return Ok(smoothed);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(step as u64);
    let (h, w) = smoothed.shape();
    let data = smoothed
        .into_data()
        .into_iter()
        .map(|v| {
            let n: f64 = StandardNormal.sample(&mut rng);
            v + cfg.noise_inject * n
        })
        .collect();
    Tensor2D::new(h, w, data)
}

/// Encode the observation into both branches at step 0.
pub fn init_latents(obs: &Observation, prior: &PriorConfig) -> Result<BranchState> {
    let z_f = obs.backprojection()?;
    let z_p = prior_step(&z_f, prior, 0)?;
    Ok(BranchState {
        z_star: z_f.clone(),
        z_f,
        z_p,
        step: 0,
    })
}

/// Forward differences with a zero difference across the last row/column.
fn gradient(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let k = i * w + j;
            if i + 1 < h {
                gy[k] = x[k + w] - x[k];
            }
            if j + 1 < w {
                gx[k] = x[k + 1] - x[k];
            }
        }
    }
    (gx, gy)
}

/// Negative adjoint of [`gradient`].
fn divergence(px: &[f64], py: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut d = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let k = i * w + j;
            let mut v = 0.0;
            if j + 1 < w {
                v += px[k];
            }
            if j > 0 {
                v -= px[k - 1];
            }
            if i + 1 < h {
                v += py[k];
            }
            if i > 0 {
                v -= py[k - w];
            }
            d[k] = v;
        }
    }
    d
}

/// Isotropic discrete total variation.
pub fn total_variation(x: &Tensor2D) -> f64 {
    let (h, w) = x.shape();
    let (gx, gy) = gradient(x.data(), h, w);
    gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).sum()
}

/// Proximal map of `weight · TV` by dual projection.
pub fn tv_chambolle(f: &Tensor2D, weight: f64, iters: usize) -> Result<Tensor2D> {
    let (h, w) = f.shape();
    let n = h * w;
    let mut px = vec![0.0; n];
    let mut py = vec![0.0; n];
    let fw: Vec<f64> = f.data().iter().map(|v| v / weight).collect();
    for _ in 0..iters {
        let div = divergence(&px, &py, h, w);
        let g: Vec<f64> = div.iter().zip(&fw).map(|(d, v)| d - v).collect();
        let (gx, gy) = gradient(&g, h, w);
        for k in 0..n {
            let norm = 1.0 + CHAMBOLLE_TAU * gx[k].hypot(gy[k]);
            px[k] = (px[k] + CHAMBOLLE_TAU * gx[k]) / norm;
            py[k] = (py[k] + CHAMBOLLE_TAU * gy[k]) / norm;
        }
    }
    let div = divergence(&px, &py, h, w);
    let data = f.data().iter().zip(&div).map(|(v, d)| v - weight * d).collect();
    Tensor2D::new(h, w, data)
}

/// Non-local patch means: 5×5 patches compared inside an 11×11 search
/// window, weights `exp(−d²/h²)` with `d²` the mean squared patch distance.
/// Windows are clamped at the border.
pub fn nlm_lite(x: &Tensor2D, bandwidth: f64) -> Result<Tensor2D> {
    let (h, w) = x.shape();
    let pr = (NLM_PATCH / 2) as isize;
    let sr = (NLM_SEARCH / 2) as isize;
    let h2 = bandwidth * bandwidth;
    let patch_area = (NLM_PATCH * NLM_PATCH) as f64;
    let rows: Vec<Vec<f64>> = (0..h as isize)
        .into_par_iter()
        .map(|i| {
            (0..w as isize)
                .map(|j| {
                    let mut num = 0.0;
                    let mut den = 0.0;
                    for si in -sr..=sr {
                        for sj in -sr..=sr {
                            let (ci, cj) = (i + si, j + sj);
                            if ci < 0 || cj < 0 || ci >= h as isize || cj >= w as isize {
                                continue;
                            }
                            let mut d2 = 0.0;
                            for a in -pr..=pr {
                                for b in -pr..=pr {
                                    let diff = x.get_clamped(i + a, j + b) - x.get_clamped(ci + a, cj + b);
                                    d2 += diff * diff;
                                }
                            }
                            let wgt = (-(d2 / patch_area) / h2).exp();
                            num += wgt * x.get(ci as usize, cj as usize);
                            den += wgt;
                        }
                    }
                    num / den
                })
                .collect()
        })
        .collect();
    Tensor2D::new(h, w, rows.concat())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{make_sampling_mask, ForwardOperator, MaskKind, Measurement};
    use crate::ops::{make_phantom, OperatorKind, PhantomKind};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn random(h: usize, w: usize, seed: u64) -> Tensor2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor2D::from_fn(h, w, |_, _| rng.random::<f64>()).unwrap()
    }

    fn noiseless(op: ForwardOperator, x: &Tensor2D) -> Observation {
        op.degrade(x).unwrap()
    }

    #[test]
    fn fidelity_fixed_point_is_bitwise() {
        let x = random(8, 8, 1);
        let mask = make_sampling_mask(MaskKind::RandomUniform, 0.5, 8, 2).unwrap();
        let obs = noiseless(ForwardOperator::pixel_mask(mask, 0.0, 0).unwrap(), &x);
        let out = fidelity_step(&x, &obs, &FidelityConfig { eta: 0.7, inner_iters: 5 }).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn identity_full_step_lands_on_observation() {
        let x = random(8, 8, 3);
        let obs = ForwardOperator::identity(8, 8, 0.1, 4).unwrap().degrade(&x).unwrap();
        let z = random(8, 8, 5);
        let out = fidelity_step(&z, &obs, &FidelityConfig { eta: 1.0, inner_iters: 1 }).unwrap();
        // z − (z − y) equals y up to one rounding per entry
        for (a, b) in out.data().iter().zip(obs.measured.as_real().unwrap().data()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-15);
        }
    }

    #[test]
    fn pixel_mask_matches_least_squares_solution() {
        // Observed pixels converge to y, unobserved ones keep the start value.
        let mask = Tensor2D::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let op = ForwardOperator::pixel_mask(mask, 0.0, 0).unwrap();
        let y = Measurement::Real(Tensor2D::new(2, 2, vec![0.3, 0.0, 0.0, -1.2]).unwrap());
        let obs = Observation::new(y, op, None).unwrap();
        let z0 = Tensor2D::new(2, 2, vec![5.0, 2.0, -3.0, 1.0]).unwrap();
        let out = fidelity_step(&z0, &obs, &FidelityConfig { eta: 0.5, inner_iters: 50 }).unwrap();
        let want = [0.3, 2.0, -3.0, -1.2];
        for (a, b) in out.data().iter().zip(want) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn fidelity_never_increases_residual_for_every_kind() {
        for op in crate::ops::tests::all_kinds(12) {
            let obs = op.degrade(&random(12, 12, 6)).unwrap();
            let mut z = random(12, 12, 7);
            let mut prev = obs.residual(&z).unwrap();
            for _ in 0..10 {
                z = fidelity_step(&z, &obs, &FidelityConfig { eta: 1.0, inner_iters: 1 }).unwrap();
                let r = obs.residual(&z).unwrap();
                assert!(r <= prev * (1.0 + 1e-12) + 1e-12, "{}: {r} > {prev}", op.kind());
                prev = r;
            }
        }
    }

    #[test]
    fn fidelity_rejects_large_step() {
        let x = random(4, 4, 1);
        let obs = ForwardOperator::identity(4, 4, 0.0, 0).unwrap().degrade(&x).unwrap();
        let err = fidelity_step(&x, &obs, &FidelityConfig { eta: 1.5, inner_iters: 1 }).unwrap_err();
        assert_eq!(err.config_key(), Some("fidelity.eta"));
    }

    #[test]
    fn fidelity_commutes_with_transpose_for_symmetric_operators() {
        let x = random(8, 8, 11);
        let z = random(8, 8, 12);
        let m = make_sampling_mask(MaskKind::RandomUniform, 0.5, 8, 3).unwrap();
        let sym = m.zip_map(&m.transpose(), f64::max).unwrap();
        let cfg = FidelityConfig { eta: 0.8, inner_iters: 3 };
        for op in [
            ForwardOperator::identity(8, 8, 0.0, 0).unwrap(),
            ForwardOperator::pixel_mask(sym, 0.0, 0).unwrap(),
        ] {
            let obs = op.degrade(&x).unwrap();
            let obs_t = op_transposed(&op).degrade(&x.transpose()).unwrap();
            let a = fidelity_step(&z, &obs, &cfg).unwrap().transpose();
            let b = fidelity_step(&z.transpose(), &obs_t, &cfg).unwrap();
            assert_eq!(a, b);
        }
    }

    fn op_transposed(op: &ForwardOperator) -> ForwardOperator {
        match op.kind() {
            OperatorKind::PixelMask => ForwardOperator::pixel_mask(op.mask().unwrap().transpose(), 0.0, 0).unwrap(),
            _ => op.clone(),
        }
    }

    #[test]
    fn prior_fixes_constants() {
        let c = Tensor2D::filled(16, 16, 0.37).unwrap();
        for kind in [PriorKind::TvChambolle, PriorKind::NlmLite] {
            for strength in [0.05, 0.5, 3.0] {
                let cfg = PriorConfig { kind, strength, ..PriorConfig::default() };
                let out = prior_step(&c, &cfg, 4).unwrap();
                for v in out.data() {
                    assert_abs_diff_eq!(*v, 0.37, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_strength_is_identity() {
        let x = random(16, 16, 9);
        for kind in [PriorKind::TvChambolle, PriorKind::NlmLite] {
            let cfg = PriorConfig { kind, strength: 0.0, ..PriorConfig::default() };
            assert_eq!(prior_step(&x, &cfg, 0).unwrap(), x);
        }
    }

    #[test]
    fn tv_reduces_total_variation_of_step_edge() {
        let edge = Tensor2D::from_fn(16, 16, |_, j| if j < 8 { 0.0 } else { 1.0 }).unwrap();
        let cfg = PriorConfig { strength: 0.1, inner_iters: 30, ..PriorConfig::default() };
        let out = prior_step(&edge, &cfg, 0).unwrap();
        // a clean edge: TV = 16 rows × unit jump
        assert_eq!(total_variation(&edge), 16.0);
        assert!(total_variation(&out) < 16.0, "{}", total_variation(&out));
    }

    #[test]
    fn divergence_is_negative_adjoint_of_gradient() {
        let (h, w) = (5, 7);
        let x = random(h, w, 1);
        let px = random(h, w, 2);
        let py = random(h, w, 3);
        let (gx, gy) = gradient(x.data(), h, w);
        let lhs: f64 = gx.iter().zip(px.data()).map(|(a, b)| a * b).sum::<f64>()
            + gy.iter().zip(py.data()).map(|(a, b)| a * b).sum::<f64>();
        let div = divergence(px.data(), py.data(), h, w);
        let rhs: f64 = -x.data().iter().zip(&div).map(|(a, b)| a * b).sum::<f64>();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
    }

    #[test]
    fn tv_prox_matches_brute_force_minimizer_in_1d_like_case() {
        // Two flat columns 0 and 1: minimizing n/2·(a² + (b − 1)²) + w·n·(b − a)
        // gives a = w, b = 1 − w.
        let n = 6;
        let f = Tensor2D::from_fn(n, 2, |_, j| j as f64).unwrap();
        let w = 0.3;
        let out = tv_chambolle(&f, w, 500).unwrap();
        for i in 0..n {
            assert_abs_diff_eq!(out.get(i, 0), w, epsilon = 1e-6);
            assert_abs_diff_eq!(out.get(i, 1), 1.0 - w, epsilon = 1e-6);
        }
    }

    #[test]
    fn injected_noise_is_reproducible_per_step() {
        let x = random(16, 16, 2);
        let cfg = PriorConfig { noise_inject: 0.05, seed: 17, ..PriorConfig::default() };
        let a = prior_step(&x, &cfg, 3).unwrap();
        assert_eq!(a, prior_step(&x, &cfg, 3).unwrap());
        assert_ne!(a, prior_step(&x, &cfg, 4).unwrap());
        let other_seed = PriorConfig { seed: 18, ..cfg };
        assert_ne!(a, prior_step(&x, &other_seed, 3).unwrap());
    }

    #[test]
    fn nlm_smooths_noise_on_flat_regions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noisy = Tensor2D::from_fn(20, 20, |_, _| 0.5 + 0.05 * rng.random::<f64>()).unwrap();
        let cfg = PriorConfig { kind: PriorKind::NlmLite, strength: 0.1, ..PriorConfig::default() };
        let out = prior_step(&noisy, &cfg, 0).unwrap();
        let spread = |t: &Tensor2D| t.max() - t.min();
        assert!(spread(&out) < spread(&noisy) / 2.0);
    }

    #[test]
    fn init_latents_identity_noiseless_is_exact() {
        let x = make_phantom(PhantomKind::SheppLogan, 32).unwrap();
        let obs = ForwardOperator::identity(32, 32, 0.0, 0).unwrap().degrade(&x).unwrap();
        let s = init_latents(&obs, &PriorConfig::default()).unwrap();
        assert_eq!(s.z_f, x);
        assert_eq!(s.z_star, x);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn init_latents_pixel_mask_zero_fills() {
        let x = random(16, 16, 1).add_scalar(0.5).unwrap();
        let mask = make_sampling_mask(MaskKind::RandomUniform, 0.4, 16, 5).unwrap();
        let obs = ForwardOperator::pixel_mask(mask.clone(), 0.05, 1).unwrap().degrade(&x).unwrap();
        let s = init_latents(&obs, &PriorConfig::default()).unwrap();
        for (v, m) in s.z_f.data().iter().zip(mask.data()) {
            if *m == 0.0 {
                assert_eq!(*v, 0.0);
            }
        }
        assert_eq!(s.z_p, prior_step(&s.z_f, &PriorConfig::default(), 0).unwrap());
    }

    #[test]
    fn init_latents_full_frequency_mask_recovers_noisy_image() {
        let x = random(16, 16, 4);
        let op = ForwardOperator::frequency_mask(Tensor2D::filled(16, 16, 1.0).unwrap(), 0.05, 9).unwrap();
        let obs = op.degrade(&x).unwrap();
        let s = init_latents(&obs, &PriorConfig::default()).unwrap();
        // The image-domain noise realization is Re(Fᴴ n); reconstruct it independently.
        let clean = op.apply(&x).unwrap();
        let noise = obs.measured.sub(&clean).unwrap();
        let noise_img = op.adjoint(&noise).unwrap();
        for ((z, xv), n) in s.z_f.data().iter().zip(x.data()).zip(noise_img.data()) {
            assert_abs_diff_eq!(*z, xv + n, epsilon = 1e-10);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn tv_never_increases_total_variation(seed in 0u64..10_000, strength in 0.01f64..1.0, iters in 1usize..40) {
            let x = random(12, 12, seed);
            let cfg = PriorConfig { strength, inner_iters: iters, ..PriorConfig::default() };
            let out = prior_step(&x, &cfg, 0).unwrap();
            prop_assert!(total_variation(&out) <= total_variation(&x) + 1e-9);
        }

        #[test]
        fn fidelity_monotone_on_random_instances(seed in 0u64..10_000, eta in 0.05f64..=1.0) {
            for op in crate::ops::tests::all_kinds(8) {
                let obs = op.degrade(&random(8, 8, seed)).unwrap();
                let z = random(8, 8, seed + 1);
                let out = fidelity_step(&z, &obs, &FidelityConfig { eta, inner_iters: 2 }).unwrap();
                prop_assert!(obs.residual(&out).unwrap() <= obs.residual(&z).unwrap() * (1.0 + 1e-12) + 1e-12);
            }
        }

        #[test]
        fn steps_are_deterministic(seed in 0u64..10_000, step in 0usize..100) {
            let x = random(10, 10, seed);
            let cfg = PriorConfig { noise_inject: 0.01, seed, ..PriorConfig::default() };
            prop_assert_eq!(prior_step(&x, &cfg, step).unwrap(), prior_step(&x, &cfg, step).unwrap());
        }
    }
}
