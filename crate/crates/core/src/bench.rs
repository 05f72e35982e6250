//! Ablation tables and λ sweeps over synthetic degradation cases.
//!
//! Column order of the CSV outputs:
//!
//! ```text
//! ablation.csv  case,arm,seeds,psnr_mean,psnr_std,ssim_mean,ssim_std,
//!               structure_mean,structure_std,risk_mean,risk_std,
//!               residual_mean,residual_std
//! sweep.csv     case,lambda,mean_alpha,psnr,residual,risk
//! ```
//!
//! Standard deviations are sample (`n − 1`) deviations over seeds. Risk is
//! `na` for operators without an exact null space. Per-run directories go
//! under `runs/{case}/{arm}/seed-{s}` (sweeps: `sweep/{case}/lambda-{i}/seed-{s}`)
//! and carry everything but the per-step tensors.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::engine::{self, Preset, RunConfig, RunRecord};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::metrics::DEFAULT_PEAK;
use crate::ops::{make_phantom, MaskKind, MaskSpec, Observation, OperatorKind, OperatorSpec, PhantomKind};
use crate::risk::{hallucination_risk, structure_score};

pub const ABLATION_HEADER: &str = "case,arm,seeds,psnr_mean,psnr_std,ssim_mean,ssim_std,\
structure_mean,structure_std,risk_mean,risk_std,residual_mean,residual_std";
pub const SWEEP_HEADER: &str = "case,lambda,mean_alpha,psnr,residual,risk";

pub const DEFAULT_SUITE_SIZE: usize = 64;
pub const DEFAULT_SUITE_SEEDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchCase {
    pub name: String,
    pub phantom: PhantomSpec,
    /// Its seed is replaced by each case seed.
    pub operator: OperatorSpec,
    pub seeds: Vec<u64>,
}

impl BenchCase {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::param(format!("case {:?} has no seeds", self.name)));
        }
        if self.name.is_empty() || self.name.contains([',', '/', '\\']) || self.name.chars().any(char::is_whitespace) {
            return Err(Error::param(format!("bad case name {:?}", self.name)));
        }
        Ok(())
    }

    /// Ground truth degraded with operator and noise seeded by `seed`.
    pub fn observation(&self, seed: u64) -> Result<Observation> {
        let gt = make_phantom(self.phantom.kind, self.phantom.size)?;
        let op = self.operator.with_seed(seed).build(self.phantom.size, self.phantom.size)?;
        op.degrade(&gt)
    }

    fn describe(&self) -> String {
        let op = &self.operator;
        let mut out = format!(
            "case {}: phantom {} {}x{}, operator {}",
            self.name, self.phantom.kind, self.phantom.size, self.phantom.size, op.kind
        );
        if let Some(m) = &op.mask {
            let _ = write!(out, " {} keep {}", m.kind, m.keep_fraction);
        }
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = write!(out, ", noise sigma {}, seeds {}", op.noise_sigma, seeds.join(" "));
        out
    }
}

pub fn validate_suite(cases: &[BenchCase]) -> Result<()> {
    let mut names = HashSet::new();
    for c in cases {
        c.validate()?;
        if !names.insert(c.name.as_str()) {
            return Err(Error::param(format!("duplicate case name {:?}", c.name)));
        }
    }
    Ok(())
}

/// The four 64×64 Shepp-Logan cases with seeds `0..5`.
pub fn default_suite() -> Vec<BenchCase> {
    suite_with_seed(0)
}

/// The default cases with seeds `seed..seed + 5`.
pub fn suite_with_seed(seed: u64) -> Vec<BenchCase> {
    let seeds: Vec<u64> = (0..DEFAULT_SUITE_SEEDS as u64).map(|k| seed.wrapping_add(k)).collect();
    let phantom = PhantomSpec { kind: PhantomKind::SheppLogan, size: DEFAULT_SUITE_SIZE };
    let case = |name: &str, kind, mask: Option<(MaskKind, f64)>, sigma| BenchCase {
        name: name.into(),
        phantom,
        operator: OperatorSpec {
            kind,
            mask: mask.map(|(kind, keep_fraction)| MaskSpec { kind, keep_fraction }),
            blur: None,
            noise_sigma: sigma,
            seed: 0,
        },
        seeds: seeds.clone(),
    };
    vec![
        case("noise", OperatorKind::IdentityPlusNoise, None, 0.1),
        case("pixel-half", OperatorKind::PixelMask, Some((MaskKind::RandomUniform, 0.5)), 0.02),
        case("freq-4x", OperatorKind::FrequencyMask, Some((MaskKind::CenterWeightedLines, 0.25)), 0.01),
        case("freq-8x", OperatorKind::FrequencyMask, Some((MaskKind::CenterWeightedLines, 0.125)), 0.01),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    Conservative,
    Balanced,
    Enhancement,
    NoController,
    NoFidelity,
    NoPrior,
}

impl Arm {
    pub const ALL: [Arm; 6] = [
        Arm::Conservative,
        Arm::Balanced,
        Arm::Enhancement,
        Arm::NoController,
        Arm::NoFidelity,
        Arm::NoPrior,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Arm::Conservative => "conservative",
            Arm::Balanced => "balanced",
            Arm::Enhancement => "enhancement",
            Arm::NoController => "no-controller",
            Arm::NoFidelity => "no-fidelity",
            Arm::NoPrior => "no-prior",
        }
    }

    /// The arm as a pure config change of `base`.
    pub fn config(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.controller.alpha_fixed = None;
        match self {
            Arm::Conservative => cfg.with_preset(Preset::Conservative),
            Arm::Balanced => cfg.with_preset(Preset::Balanced),
            Arm::Enhancement => cfg.with_preset(Preset::Enhancement),
            Arm::NoController => {
                cfg.controller.beta1 = 0.0;
                cfg.controller.beta2 = 0.0;
                cfg.controller.alpha_fixed = Some(0.5);
                cfg
            }
            Arm::NoFidelity => {
                cfg.controller.alpha_fixed = Some(0.0);
                cfg
            }
            Arm::NoPrior => {
                cfg.controller.alpha_fixed = Some(1.0);
                cfg
            }
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::param(format!("unknown arm {s:?}")))
    }
}

/// Final-image scores of one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub psnr: f64,
    pub ssim: f64,
    pub structure: f64,
    /// Only for operators with an exact null space.
    pub risk: Option<f64>,
    pub residual: f64,
    pub mean_alpha: f64,
}

impl SeedResult {
    pub fn from_record(seed: u64, obs: &Observation, record: &RunRecord) -> Result<Self> {
        let gt = obs
            .ground_truth
            .as_ref()
            .ok_or_else(|| Error::param("benchmark observations need a ground truth"))?;
        let m = match &record.final_metrics {
            Some(m) => *m,
            None => crate::metrics::MetricReport::compute(gt, &record.final_image, DEFAULT_PEAK)?,
        };
        let risk = if obs.operator.kind().has_exact_null_space() {
            Some(hallucination_risk(&record.final_image, gt, &obs.operator)?)
        } else {
            None
        };
        Ok(Self {
            seed,
            psnr: m.psnr.to_f64(),
            ssim: m.ssim,
            structure: structure_score(&record.final_image, gt)?,
            risk,
            residual: record.final_residual,
            mean_alpha: record.mean_alpha(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and sample standard deviation; `std` is 0 for a single value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub arm: Arm,
    pub psnr: Stat,
    pub ssim: Stat,
    pub structure: Stat,
    pub risk: Option<Stat>,
    pub residual: Stat,
    pub per_seed: Vec<SeedResult>,
}

impl AblationRow {
    pub fn aggregate(arm: Arm, per_seed: Vec<SeedResult>) -> Self {
        let col = |f: fn(&SeedResult) -> f64| Stat::of(&per_seed.iter().map(f).collect::<Vec<_>>());
        let risks: Option<Vec<f64>> = per_seed.iter().map(|s| s.risk).collect();
        Self {
            arm,
            psnr: col(|s| s.psnr),
            ssim: col(|s| s.ssim),
            structure: col(|s| s.structure),
            risk: risks.map(|r| Stat::of(&r)),
            residual: col(|s| s.residual),
            per_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub case: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, arm: Arm) -> &AblationRow {
        self.rows.iter().find(|r| r.arm == arm).expect("every arm has a row")
    }

    /// Data rows without the header.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let risk = match r.risk {
                Some(s) => format!("{:?},{:?}", s.mean, s.std),
                None => "na,na".into(),
            };
            let _ = writeln!(
                out,
                "{},{},{},{:?},{:?},{:?},{:?},{:?},{:?},{risk},{:?},{:?}",
                self.case,
                r.arm,
                r.per_seed.len(),
                r.psnr.mean,
                r.psnr.std,
                r.ssim.mean,
                r.ssim.std,
                r.structure.mean,
                r.structure.std,
                r.residual.mean,
                r.residual.std,
            );
        }
        out
    }
}

pub fn ablation_csv(tables: &[AblationTable]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for t in tables {
        out.push_str(&t.csv_rows());
    }
    out
}

fn run_one(case: &BenchCase, cfg: &RunConfig, seed: u64, dir: Option<&Path>) -> Result<SeedResult> {
    let obs = case.observation(seed)?;
    let cfg = RunConfig { seed, ..cfg.clone() };
    let record = engine::run(&obs, &cfg, None)?;
    if let Some(dir) = dir {
        record.write_summary_dir(dir)?;
    }
    SeedResult::from_record(seed, &obs, &record)
}

/// Every arm on every seed of `case`. Runs go in parallel on the current
/// rayon pool; any failed run fails the table.
pub fn run_ablation(case: &BenchCase, base: &RunConfig, out: Option<&Path>) -> Result<AblationTable> {
    case.validate()?;
    base.validate()?;
    let jobs: Vec<(Arm, u64)> = Arm::ALL
        .iter()
        .flat_map(|&arm| case.seeds.iter().map(move |&s| (arm, s)))
        .collect();
    let results: Vec<SeedResult> = jobs
        .par_iter()
        .map(|&(arm, seed)| {
            let dir = out.map(|o| o.join("runs").join(&case.name).join(arm.as_str()).join(format!("seed-{seed}")));
            run_one(case, &arm.config(base), seed, dir.as_deref())
        })
        .collect::<Result<_>>()?;
    let per_arm = results.chunks(case.seeds.len());
    let rows = Arm::ALL
        .iter()
        .zip(per_arm)
        .map(|(&arm, chunk)| AblationRow::aggregate(arm, chunk.to_vec()))
        .collect();
    Ok(AblationTable { case: case.name.clone(), rows })
}

/// Ablation over a whole suite. With `out`, also writes `ablation.csv`,
/// `suite.meta` and the run directories.
pub fn run_suite(cases: &[BenchCase], base: &RunConfig, out: Option<&Path>) -> Result<Vec<AblationTable>> {
    validate_suite(cases)?;
    let tables: Vec<AblationTable> = cases
        .par_iter()
        .map(|c| run_ablation(c, base, out))
        .collect::<Result<_>>()?;
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        write_atomic(out.join("ablation.csv"), ablation_csv(&tables).as_bytes())?;
        write_atomic(out.join("suite.meta"), suite_meta(cases, base).as_bytes())?;
    }
    Ok(tables)
}

/// Provenance of a suite's data and config.
pub fn suite_meta(cases: &[BenchCase], base: &RunConfig) -> String {
    let mut out = String::from("# data: synthetic phantoms, no clinical images\n");
    for c in cases {
        let _ = writeln!(out, "# {}", c.describe());
    }
    out.push_str("# base config:\n");
    out.push_str(&base.to_text());
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub mean_alpha: f64,
    pub psnr: f64,
    pub residual: f64,
    pub risk: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub case: String,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let risk = r.risk.map_or_else(|| "na".to_string(), |v| format!("{v:?}"));
            let _ = writeln!(
                out,
                "{},{:?},{:?},{:?},{:?},{risk}",
                self.case, r.lambda, r.mean_alpha, r.psnr, r.residual
            );
        }
        out
    }
}

pub fn sweep_csv(tables: &[SweepTable]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for t in tables {
        out.push_str(&t.csv_rows());
    }
    out
}

/// `λ_i = i / (points − 1)`.
pub fn sweep_lambdas(points: usize) -> Result<Vec<f64>> {
    if points < 3 {
        return Err(Error::param(format!("a sweep needs at least 3 points, got {points}")));
    }
    let last = (points - 1) as f64;
    Ok((0..points).map(|i| i as f64 / last).collect())
}

/// Seed-averaged scores at evenly spaced `λ ∈ [0, 1]`, with the controller
/// active.
pub fn lambda_sweep(case: &BenchCase, base: &RunConfig, points: usize, out: Option<&Path>) -> Result<SweepTable> {
    case.validate()?;
    base.validate()?;
    let lambdas = sweep_lambdas(points)?;
    let jobs: Vec<(usize, u64)> = (0..points)
        .flat_map(|i| case.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results: Vec<SeedResult> = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let mut cfg = base.clone();
            cfg.mode_preset = None;
            cfg.controller.alpha_fixed = None;
            cfg.controller.lambda = lambdas[i];
            let dir = out.map(|o| o.join("sweep").join(&case.name).join(format!("lambda-{i}")).join(format!("seed-{seed}")));
            run_one(case, &cfg, seed, dir.as_deref())
        })
        .collect::<Result<_>>()?;
    let rows = lambdas
        .iter()
        .zip(results.chunks(case.seeds.len()))
        .map(|(&lambda, chunk)| {
            let mean = |f: fn(&SeedResult) -> f64| Stat::of(&chunk.iter().map(f).collect::<Vec<_>>()).mean;
            let risks: Option<Vec<f64>> = chunk.iter().map(|s| s.risk).collect();
            SweepRow {
                lambda,
                mean_alpha: mean(|s| s.mean_alpha),
                psnr: mean(|s| s.psnr),
                residual: mean(|s| s.residual),
                risk: risks.map(|r| Stat::of(&r).mean),
            }
        })
        .collect();
    Ok(SweepTable { case: case.name.clone(), rows })
}

/// Sweep every case; with `out`, writes `sweep.csv` and `suite.meta`.
pub fn run_sweeps(cases: &[BenchCase], base: &RunConfig, points: usize, out: Option<&Path>) -> Result<Vec<SweepTable>> {
    validate_suite(cases)?;
    let tables: Vec<SweepTable> = cases
        .par_iter()
        .map(|c| lambda_sweep(c, base, points, out))
        .collect::<Result<_>>()?;
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        write_atomic(out.join("sweep.csv"), sweep_csv(&tables).as_bytes())?;
        write_atomic(out.join("suite.meta"), suite_meta(cases, base).as_bytes())?;
    }
    Ok(tables)
}
