//! Run configuration and its line-oriented `key = value` text form.
//!
//! ```text
//! # comments and blank lines are ignored
//! steps = 60
//! mode_preset = balanced
//! controller.beta3 = -4.0
//! prior.kind = tv-chambolle
//! ```
//!
//! Every key in [`CONFIG_KEYS`] is optional; unknown keys are errors.

use std::fmt;
use std::str::FromStr;

use crate::branches::{FidelityConfig, PriorConfig, PriorKind};
use crate::controller::{AlphaMode, ControllerConfig, UncertaintyMode};
use crate::error::{Error, Result};

pub const DEFAULT_STEPS: usize = 60;

/// Images up to this side length are recorded at every step by default.
const DENSE_RECORD_MAX_SIDE: usize = 64;
const SPARSE_RECORD_EVERY: usize = 5;

/// Every accepted config key, in serialization order.
pub const CONFIG_KEYS: &[&str] = &[
    "steps",
    "seed",
    "mode_preset",
    "record_every",
    "controller.lambda",
    "controller.beta1",
    "controller.beta2",
    "controller.beta3",
    "controller.alpha_mode",
    "controller.window",
    "controller.uncertainty_mode",
    "controller.ensemble_size",
    "controller.u_init",
    "controller.alpha_fixed",
    "fidelity.eta",
    "fidelity.inner_iters",
    "prior.kind",
    "prior.strength",
    "prior.inner_iters",
    "prior.noise_inject",
    "prior.seed",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    Conservative,
    Balanced,
    Enhancement,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Conservative, Preset::Balanced, Preset::Enhancement];

    pub fn lambda(&self) -> f64 {
        match self {
            Preset::Conservative => 0.0,
            Preset::Balanced => 0.5,
            Preset::Enhancement => 1.0,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Preset::Conservative => "conservative",
            Preset::Balanced => "balanced",
            Preset::Enhancement => "enhancement",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conservative" => Ok(Preset::Conservative),
            "balanced" => Ok(Preset::Balanced),
            "enhancement" => Ok(Preset::Enhancement),
            other => Err(Error::param(format!("unknown preset {other:?}"))),
        }
    }
}

/// The `λ` a named preset stands for.
pub fn apply_preset(name: &str) -> Result<f64> {
    Ok(name.parse::<Preset>()?.lambda())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub steps: usize,
    pub controller: ControllerConfig,
    pub fidelity: FidelityConfig,
    pub prior: PriorConfig,
    pub mode_preset: Option<Preset>,
    /// `None` picks a cadence from the image size.
    pub record_every: Option<usize>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            controller: ControllerConfig::default(),
            fidelity: FidelityConfig::default(),
            prior: PriorConfig::default(),
            mode_preset: None,
            record_every: None,
            seed: 0,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::config(key, format!("cannot parse {value:?}")))
}

fn parse_enum<T: FromStr<Err = Error>>(key: &str, value: &str) -> Result<T> {
    value.parse::<T>().map_err(|e| Error::config(key, e.to_string()))
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    let v: f64 = parse_value(key, value)?;
    if !v.is_finite() {
        return Err(Error::config(key, format!("must be finite, got {value}")));
    }
    Ok(v)
}

fn parse_optional<T>(value: &str, parse: impl FnOnce(&str) -> Result<T>) -> Result<Option<T>> {
    match value {
        "none" => Ok(None),
        v => parse(v).map(Some),
    }
}

impl RunConfig {
    pub fn with_preset(mut self, preset: Preset) -> Self {
        self.mode_preset = Some(preset);
        self.controller.lambda = preset.lambda();
        self
    }

    /// Set one dotted key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let c = &mut self.controller;
        match key {
            "steps" => self.steps = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "mode_preset" => self.mode_preset = parse_optional(value, |v| parse_enum(key, v))?,
            "record_every" => {
                self.record_every = match value {
                    "auto" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "controller.lambda" => c.lambda = parse_f64(key, value)?,
            "controller.beta1" => c.beta1 = parse_f64(key, value)?,
            "controller.beta2" => c.beta2 = parse_f64(key, value)?,
            "controller.beta3" => c.beta3 = parse_f64(key, value)?,
            "controller.alpha_mode" => c.alpha_mode = parse_enum::<AlphaMode>(key, value)?,
            "controller.window" => c.window = parse_value(key, value)?,
            "controller.uncertainty_mode" => c.uncertainty_mode = parse_enum::<UncertaintyMode>(key, value)?,
            "controller.ensemble_size" => c.ensemble_size = parse_value(key, value)?,
            "controller.u_init" => c.u_init = parse_f64(key, value)?,
            "controller.alpha_fixed" => c.alpha_fixed = parse_optional(value, |v| parse_f64(key, v))?,
            "fidelity.eta" => self.fidelity.eta = parse_f64(key, value)?,
            "fidelity.inner_iters" => self.fidelity.inner_iters = parse_value(key, value)?,
            "prior.kind" => self.prior.kind = parse_enum::<PriorKind>(key, value)?,
            "prior.strength" => self.prior.strength = parse_f64(key, value)?,
            "prior.inner_iters" => self.prior.inner_iters = parse_value(key, value)?,
            "prior.noise_inject" => self.prior.noise_inject = parse_f64(key, value)?,
            "prior.seed" => self.prior.seed = parse_value(key, value)?,
            other => return Err(Error::config(other, "unknown config key")),
        }
        Ok(())
    }

    /// Text form of one key, inverse of [`RunConfig::set`]. Floats use the
    /// shortest representation that parses back to the same bits.
    pub fn get(&self, key: &str) -> Result<String> {
        let c = &self.controller;
        Ok(match key {
            "steps" => self.steps.to_string(),
            "seed" => self.seed.to_string(),
            "mode_preset" => self.mode_preset.map_or("none".into(), |p| p.to_string()),
            "record_every" => self.record_every.map_or("auto".into(), |n| n.to_string()),
            "controller.lambda" => format!("{:?}", c.lambda),
            "controller.beta1" => format!("{:?}", c.beta1),
            "controller.beta2" => format!("{:?}", c.beta2),
            "controller.beta3" => format!("{:?}", c.beta3),
            "controller.alpha_mode" => c.alpha_mode.to_string(),
            "controller.window" => c.window.to_string(),
            "controller.uncertainty_mode" => c.uncertainty_mode.to_string(),
            "controller.ensemble_size" => c.ensemble_size.to_string(),
            "controller.u_init" => format!("{:?}", c.u_init),
            "controller.alpha_fixed" => c.alpha_fixed.map_or("none".into(), |a| format!("{a:?}")),
            "fidelity.eta" => format!("{:?}", self.fidelity.eta),
            "fidelity.inner_iters" => self.fidelity.inner_iters.to_string(),
            "prior.kind" => self.prior.kind.to_string(),
            "prior.strength" => format!("{:?}", self.prior.strength),
            "prior.inner_iters" => self.prior.inner_iters.to_string(),
            "prior.noise_inject" => format!("{:?}", self.prior.noise_inject),
            "prior.seed" => self.prior.seed.to_string(),
            other => return Err(Error::config(other, "unknown config key")),
        })
    }

    /// Parse the text form on top of the defaults. Repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(line, format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::config(key, "duplicate key"));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps", "must be positive"));
        }
        if self.record_every == Some(0) {
            return Err(Error::config("record_every", "must be positive"));
        }
        self.controller.validate()?;
        self.fidelity.validate()?;
        self.prior.validate()
    }

    /// Validated copy with the preset's `λ` and a concrete recording cadence.
    pub fn resolved(&self, shape: (usize, usize)) -> Result<Self> {
        self.validate()?;
        let mut out = self.clone();
        if let Some(p) = self.mode_preset {
            out.controller.lambda = p.lambda();
        }
        if out.record_every.is_none() {
            let side = shape.0.max(shape.1);
            out.record_every = Some(if side <= DENSE_RECORD_MAX_SIDE { 1 } else { SPARSE_RECORD_EVERY });
        }
        Ok(out)
    }

    pub fn record_every_or_default(&self) -> usize {
        self.record_every.unwrap_or(1)
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}
