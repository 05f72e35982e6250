//! Risk-aware fusion control: reliability `r`, uncertainty `u`, the fusion
//! map `α = σ(β₁r − β₂u + β₃λ)` and the convex fusion of both latents.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::branches::BranchState;
use crate::error::{Error, Result};
use crate::metrics::{ssim_map, DEFAULT_PEAK};
use crate::tensor::Tensor2D;

/// Floor for the dynamic range used to normalize uncertainty.
pub const UNCERTAINTY_SCALE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaMode {
    Scalar,
    Spatial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UncertaintyMode {
    CrossStep,
    Ensemble,
}

impl AlphaMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AlphaMode::Scalar => "scalar",
            AlphaMode::Spatial => "spatial",
        }
    }
}

impl UncertaintyMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            UncertaintyMode::CrossStep => "cross-step",
            UncertaintyMode::Ensemble => "ensemble",
        }
    }
}

impl fmt::Display for AlphaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for UncertaintyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AlphaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scalar" => Ok(AlphaMode::Scalar),
            "spatial" => Ok(AlphaMode::Spatial),
            other => Err(Error::param(format!("unknown alpha mode {other:?}"))),
        }
    }
}

impl FromStr for UncertaintyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross-step" => Ok(UncertaintyMode::CrossStep),
            "ensemble" => Ok(UncertaintyMode::Ensemble),
            other => Err(Error::param(format!("unknown uncertainty mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Non-positive values make larger `λ` favour the prior branch.
    pub beta3: f64,
    pub alpha_mode: AlphaMode,
    pub window: usize,
    pub uncertainty_mode: UncertaintyMode,
    pub ensemble_size: usize,
    pub u_init: f64,
    /// Bypass the sigmoid and use this constant fusion weight. Used by the
    /// ablation arms, which need the exact endpoints 0 and 1.
    pub alpha_fixed: Option<f64>,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            beta1: 4.0,
            beta2: 4.0,
            beta3: -4.0,
            alpha_mode: AlphaMode::Spatial,
            window: 7,
            uncertainty_mode: UncertaintyMode::CrossStep,
            ensemble_size: 4,
            u_init: 1.0,
            alpha_fixed: None,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("controller.lambda", format!("must lie in [0, 1], got {}", self.lambda)));
        }
        for (key, v) in [("controller.beta1", self.beta1), ("controller.beta2", self.beta2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("must be >= 0, got {v}")));
            }
        }
        if !self.beta3.is_finite() {
            return Err(Error::config("controller.beta3", "must be finite"));
        }
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::config(
                "controller.window",
                format!("must be odd and positive, got {}", self.window),
            ));
        }
        if self.ensemble_size == 0 {
            return Err(Error::config("controller.ensemble_size", "must be positive"));
        }
        if self.uncertainty_mode == UncertaintyMode::Ensemble && self.ensemble_size < 2 {
            return Err(Error::config("controller.ensemble_size", "ensemble mode needs at least 2 members"));
        }
        if !(0.0..=1.0).contains(&self.u_init) {
            return Err(Error::config("controller.u_init", format!("must lie in [0, 1], got {}", self.u_init)));
        }
        if let Some(a) = self.alpha_fixed {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::config("controller.alpha_fixed", format!("must lie in [0, 1], got {a}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskMaps {
    pub reliability: Tensor2D,
    pub uncertainty: Tensor2D,
    pub alpha: Tensor2D,
}

/// Local structural agreement of the two branches, mapped from `[−1, 1]`
/// to `[0, 1]`.
pub fn estimate_reliability(z_f: &Tensor2D, z_p: &Tensor2D, window: usize) -> Result<Tensor2D> {
    let s = ssim_map(z_f, z_p, DEFAULT_PEAK, window)?;
    s.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

/// Per-pixel uncertainty in `[0, 1]`; `u_init` everywhere at step 0.
///
/// Cross-step mode compares the current fused latent with `prev_fused`
/// (required after step 0); ensemble mode takes the sample standard
/// deviation of `ensemble`. Both are normalized by the dynamic range of the
/// current fused latent.
pub fn estimate_uncertainty(
    state: &BranchState,
    prev_fused: Option<&Tensor2D>,
    ensemble: Option<&[Tensor2D]>,
    cfg: &ControllerConfig,
) -> Result<Tensor2D> {
    let z = &state.z_star;
    let scale = z.dynamic_range().max(UNCERTAINTY_SCALE_FLOOR);
    if state.step == 0 {
        return Tensor2D::filled(z.height(), z.width(), cfg.u_init);
    }
    match cfg.uncertainty_mode {
        UncertaintyMode::CrossStep => {
            let prev = prev_fused
                .ok_or_else(|| Error::State(format!("cross-step uncertainty at step {} needs the previous fused latent", state.step)))?;
            z.zip_map(prev, |a, b| ((a - b).abs() / scale).clamp(0.0, 1.0))
        }
        UncertaintyMode::Ensemble => {
            let members = ensemble.unwrap_or(&[]);
            if members.len() < 2 {
                return Err(Error::State(format!(
                    "ensemble uncertainty needs at least 2 members, got {}",
                    members.len()
                )));
            }
            let std = sample_std(members)?;
            std.map(|s| (s / scale).clamp(0.0, 1.0))
        }
    }
}

/// Per-pixel sample standard deviation (`K − 1` denominator).
pub fn sample_std(members: &[Tensor2D]) -> Result<Tensor2D> {
    let first = members
        .first()
        .ok_or_else(|| Error::param("standard deviation of an empty ensemble"))?;
    if members.len() < 2 {
        return Err(Error::param("sample standard deviation needs at least 2 members"));
    }
    for m in members {
        first.ensure_same_shape(m)?;
    }
    let k = members.len() as f64;
    Tensor2D::from_fn(first.height(), first.width(), |i, j| {
        // shifted by the first member so identical members give exactly 0
        let x0 = first.get(i, j);
        let mean = members.iter().map(|m| m.get(i, j) - x0).sum::<f64>() / k;
        let ss: f64 = members.iter().map(|m| (m.get(i, j) - x0 - mean).powi(2)).sum();
        (ss / (k - 1.0)).sqrt()
    })
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `α = σ(β₁r − β₂u + β₃λ)`; scalar mode averages `r` and `u` first.
pub fn compute_alpha(r: &Tensor2D, u: &Tensor2D, cfg: &ControllerConfig) -> Result<Tensor2D> {
    r.ensure_same_shape(u)?;
    if let Some(a) = cfg.alpha_fixed {
        return Tensor2D::filled(r.height(), r.width(), a);
    }
    let bias = cfg.beta3 * cfg.lambda;
    match cfg.alpha_mode {
        AlphaMode::Spatial => r.zip_map(u, |rv, uv| sigmoid(cfg.beta1 * rv - cfg.beta2 * uv + bias)),
        AlphaMode::Scalar => {
            let a = sigmoid(cfg.beta1 * r.mean() - cfg.beta2 * u.mean() + bias);
            Tensor2D::filled(r.height(), r.width(), a)
        }
    }
}

/// `z* = α ⊙ z_f + (1 − α) ⊙ z_p`.
pub fn fuse(z_f: &Tensor2D, z_p: &Tensor2D, alpha: &Tensor2D) -> Result<Tensor2D> {
    z_f.ensure_same_shape(z_p)?;
    z_f.ensure_same_shape(alpha)?;
    if let Some(a) = alpha.data().iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::Validation(format!("fusion weight {a} outside [0, 1]")));
    }
    let data = z_f
        .data()
        .iter()
        .zip(z_p.data())
        .zip(alpha.data())
        .map(|((&f, &p), &a)| {
            // endpoints and equal branches must come out bitwise
            if a == 1.0 || f == p {
                f
            } else if a == 0.0 {
                p
            } else {
                (a * f + (1.0 - a) * p).clamp(f.min(p), f.max(p))
            }
        })
        .collect();
    Tensor2D::new(z_f.height(), z_f.width(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, seed: u64) -> Tensor2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor2D::from_fn(h, w, |_, _| rng.random::<f64>()).unwrap()
    }

    fn state(z: Tensor2D, step: usize) -> BranchState {
        BranchState {
            z_f: z.clone(),
            z_p: z.clone(),
            z_star: z,
            step,
        }
    }

    fn filled(v: f64) -> Tensor2D {
        Tensor2D::filled(8, 8, v).unwrap()
    }

    #[test]
    fn reliability_of_identical_branches_is_one() {
        let z = random(12, 12, 1);
        let r = estimate_reliability(&z, &z, 7).unwrap();
        assert!(r.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn reliability_of_inverted_checkerboard_is_low() {
        // Intensity inversion of a 0/1 checkerboard: frozen from a numpy loop.
        let zf = Tensor2D::from_fn(16, 16, |i, j| ((i + j + 1) % 2) as f64).unwrap();
        let zp = zf.map(|v| 1.0 - v).unwrap();
        let r = estimate_reliability(&zf, &zp, 7).unwrap();
        for i in 3..13 {
            for j in 3..13 {
                assert_abs_diff_eq!(r.get(i, j), 0.0022122532679215157, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn reliability_of_shifted_zero_mean_checkerboard_straddles_half() {
        // ±0.5 pattern against 1 − pattern: an odd window never balances the
        // two colours, so the sign of the luminance term follows the centre
        // pixel and r sits just below 0.5 on average.
        let zf = Tensor2D::from_fn(16, 16, |i, j| if (i + j) % 2 == 0 { 0.5 } else { -0.5 }).unwrap();
        let zp = zf.map(|v| 1.0 - v).unwrap();
        let r = estimate_reliability(&zf, &zp, 7).unwrap();
        let mut sum = 0.0;
        for i in 3..13 {
            for j in 3..13 {
                let v = r.get(i, j);
                sum += v;
                if zf.get(i, j) > 0.0 {
                    assert!(v < 0.5, "r({i},{j}) = {v}");
                }
                assert!((0.489..0.511).contains(&v));
            }
        }
        let mean = sum / 100.0;
        assert_abs_diff_eq!(mean, 0.49984647813757777, epsilon = 1e-10);
    }

    #[test]
    fn reliability_of_two_constants_is_luminance_term() {
        let (a, c) = (0.3, 0.2);
        let r = estimate_reliability(&filled(a), &filled(a + c), 3).unwrap();
        let c1 = 0.01f64.powi(2);
        let b = a + c;
        // the contrast-structure factor is C₂/C₂ = 1
        let s = (2.0 * a * b + c1) / (a * a + b * b + c1);
        assert_abs_diff_eq!(r.get(4, 4), (s + 1.0) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn uncertainty_rules() {
        let cfg = ControllerConfig::default();
        let z = random(8, 8, 2);
        let u0 = estimate_uncertainty(&state(z.clone(), 0), None, None, &cfg).unwrap();
        assert!(u0.data().iter().all(|&v| v == cfg.u_init));
        let u = estimate_uncertainty(&state(z.clone(), 3), Some(&z), None, &cfg).unwrap();
        assert!(u.data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            estimate_uncertainty(&state(z, 3), None, None, &cfg),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn cross_step_uncertainty_is_scaled_change() {
        let cfg = ControllerConfig::default();
        let prev = Tensor2D::from_fn(4, 4, |i, j| (i * 4 + j) as f64 / 15.0 * 2.0).unwrap();
        let cur = prev.with_value(1, 1, prev.get(1, 1) + 0.5).unwrap();
        let u = estimate_uncertainty(&state(cur.clone(), 1), Some(&prev), None, &cfg).unwrap();
        assert_abs_diff_eq!(u.get(1, 1), 0.5 / cur.dynamic_range(), epsilon = 1e-15);
        assert_eq!(u.get(0, 0), 0.0);
    }

    #[test]
    fn ensemble_uncertainty_uses_sample_std() {
        let cfg = ControllerConfig {
            uncertainty_mode: UncertaintyMode::Ensemble,
            ..ControllerConfig::default()
        };
        let a = Tensor2D::from_fn(4, 4, |i, j| if (i, j) == (3, 3) { 1.0 } else { 0.0 }).unwrap();
        let b = a.with_value(2, 2, 0.2).unwrap();
        let u = estimate_uncertainty(&state(a.clone(), 5), None, Some(&[a.clone(), b]), &cfg).unwrap();
        assert_abs_diff_eq!(u.get(2, 2), 0.1 * 2f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(u.get(2, 2), 0.1414213562373095, epsilon = 1e-12);
        assert_eq!(u.get(0, 0), 0.0);
        assert!(matches!(
            estimate_uncertainty(&state(a.clone(), 5), None, Some(&[a]), &cfg),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn alpha_reference_values() {
        let base = ControllerConfig { lambda: 0.0, ..ControllerConfig::default() };
        let a = compute_alpha(&filled(0.0), &filled(0.0), &base).unwrap();
        assert!(a.data().iter().all(|&v| v == 0.5));

        let cfg = ControllerConfig { beta1: 2.0, lambda: 0.0, ..ControllerConfig::default() };
        let a = compute_alpha(&filled(1.0), &filled(0.0), &cfg).unwrap();
        assert_abs_diff_eq!(a.get(0, 0), 0.8807970779778823, epsilon = 1e-12);

        let cfg = ControllerConfig { lambda: 1.0, beta3: -4.0, ..ControllerConfig::default() };
        let a = compute_alpha(&filled(0.0), &filled(0.0), &cfg).unwrap();
        assert_abs_diff_eq!(a.get(0, 0), 0.01798620996209156, epsilon = 1e-12);
    }

    #[test]
    fn scalar_mode_gives_constant_map_from_means() {
        let r = random(8, 8, 3);
        let u = random(8, 8, 4);
        let cfg = ControllerConfig { alpha_mode: AlphaMode::Scalar, ..ControllerConfig::default() };
        let a = compute_alpha(&r, &u, &cfg).unwrap();
        let want = sigmoid(4.0 * r.mean() - 4.0 * u.mean() - 2.0);
        assert!(a.data().iter().all(|&v| v == want));
    }

    #[test]
    fn fixed_alpha_overrides_sigmoid() {
        let cfg = ControllerConfig { alpha_fixed: Some(0.0), ..ControllerConfig::default() };
        let a = compute_alpha(&random(4, 4, 1), &random(4, 4, 2), &cfg).unwrap();
        assert!(a.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fuse_endpoints_and_midpoint() {
        let zf = random(6, 6, 5);
        let zp = random(6, 6, 6);
        let ones = Tensor2D::filled(6, 6, 1.0).unwrap();
        assert_eq!(fuse(&zf, &zp, &ones).unwrap(), zf);
        assert_eq!(fuse(&zf, &zp, &zf.zeros_like()).unwrap(), zp);
        let mid = fuse(
            &Tensor2D::zeros(6, 6).unwrap(),
            &Tensor2D::filled(6, 6, 2.0).unwrap(),
            &Tensor2D::filled(6, 6, 0.5).unwrap(),
        )
        .unwrap();
        assert!(mid.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn fuse_rejects_out_of_range_weights() {
        let z = random(4, 4, 1);
        let bad = Tensor2D::filled(4, 4, 1.2).unwrap();
        assert!(matches!(fuse(&z, &z, &bad), Err(Error::Validation(_))));
    }

    #[test]
    fn validation_names_keys() {
        let bad = ControllerConfig { lambda: 1.5, ..ControllerConfig::default() };
        assert_eq!(bad.validate().unwrap_err().config_key(), Some("controller.lambda"));
        let bad = ControllerConfig { window: 4, ..ControllerConfig::default() };
        assert_eq!(bad.validate().unwrap_err().config_key(), Some("controller.window"));
        let bad = ControllerConfig { beta2: -1.0, ..ControllerConfig::default() };
        assert_eq!(bad.validate().unwrap_err().config_key(), Some("controller.beta2"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn alpha_strictly_inside_unit_interval(seed in 0u64..10_000, lambda in 0.0f64..=1.0) {
            let cfg = ControllerConfig { lambda, ..ControllerConfig::default() };
            let a = compute_alpha(&random(6, 6, seed), &random(6, 6, seed + 1), &cfg).unwrap();
            prop_assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }

        #[test]
        fn alpha_strictly_decreasing_in_lambda(seed in 0u64..10_000, l1 in 0.0f64..1.0, dl in 0.01f64..1.0, beta3 in -8.0f64..-0.1) {
            let l2 = (l1 + dl).min(1.0);
            prop_assume!(l2 > l1);
            let (r, u) = (random(6, 6, seed), random(6, 6, seed + 7));
            let lo = compute_alpha(&r, &u, &ControllerConfig { lambda: l1, beta3, ..ControllerConfig::default() }).unwrap();
            let hi = compute_alpha(&r, &u, &ControllerConfig { lambda: l2, beta3, ..ControllerConfig::default() }).unwrap();
            for (a, b) in lo.data().iter().zip(hi.data()) {
                prop_assert!(a > b);
            }
        }

        #[test]
        fn alpha_monotone_in_r_and_u(seed in 0u64..10_000, dr in 0.0f64..0.5) {
            let cfg = ControllerConfig::default();
            let (r, u) = (random(6, 6, seed), random(6, 6, seed + 3));
            let base = compute_alpha(&r, &u, &cfg).unwrap();
            let more_r = compute_alpha(&r.add_scalar(dr).unwrap(), &u, &cfg).unwrap();
            let more_u = compute_alpha(&r, &u.add_scalar(dr).unwrap(), &cfg).unwrap();
            for k in 0..base.len() {
                prop_assert!(more_r.data()[k] >= base.data()[k]);
                prop_assert!(more_u.data()[k] <= base.data()[k]);
            }
        }

        #[test]
        fn fuse_is_convex(seed in 0u64..10_000) {
            let (zf, zp, a) = (random(6, 6, seed), random(6, 6, seed + 1), random(6, 6, seed + 2));
            let z = fuse(&zf.scale(3.0).unwrap(), &zp, &a).unwrap();
            for k in 0..z.len() {
                let (f, p) = (zf.data()[k] * 3.0, zp.data()[k]);
                prop_assert!(z.data()[k] >= f.min(p) && z.data()[k] <= f.max(p));
            }
            prop_assert_eq!(fuse(&zp, &zp, &a).unwrap(), zp);
        }

        #[test]
        fn reliability_symmetric(seed in 0u64..10_000) {
            let (a, b) = (random(9, 9, seed), random(9, 9, seed + 1));
            prop_assert_eq!(estimate_reliability(&a, &b, 5).unwrap(), estimate_reliability(&b, &a, 5).unwrap());
        }
    }
}
