//! Run traces, steering traces and the on-disk run directory.
//!
//! ```text
//! run/
//!   config.echo          resolved config, text form
//!   input.ct2            backprojection of the observation
//!   metrics.csv          step,psnr,ssim,rmse,residual
//!   steering.trace       applied steering commands
//!   steps/{t}/zstar.ct2  plus alpha.ct2, r.ct2, u.ct2 for t ≥ 1
//!   final.ct2, final.pgm decoded output
//!   ensemble_std.ct2     only for ensemble runs
//! ```
//!
//! Nothing time-dependent is written, so identical runs produce identical
//! directories.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use crate::branches::BranchState;
use crate::controller::RiskMaps;
use crate::error::{Error, Result};
use crate::io::{encode_ct2, encode_pgm, write_atomic};
use crate::metrics::{MetricReport, Psnr};
use crate::tensor::Tensor2D;

use super::config::RunConfig;

pub const METRICS_HEADER: &str = "step,psnr,ssim,rmse,residual";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteeringCommand {
    pub new_lambda: f64,
    pub effective_from_step: usize,
}

/// Everything needed to replay a steered run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SteeringTrace {
    pub commands: Vec<SteeringCommand>,
    /// Step at which the run was stopped early, if it was.
    pub finalized_at: Option<usize>,
}

impl SteeringTrace {
    pub fn is_empty(&self) -> bool {
        self.commands.is_empty() && self.finalized_at.is_none()
    }

    /// One command per line: `lambda <value> from <step>`, then an optional
    /// `finalize <step>`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.commands {
            let _ = writeln!(out, "lambda {:?} from {}", c.new_lambda, c.effective_from_step);
        }
        if let Some(t) = self.finalized_at {
            let _ = writeln!(out, "finalize {t}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut trace = SteeringTrace::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let bad = || Error::Format(format!("bad steering line {line:?}"));
            let words: Vec<&str> = line.split_whitespace().collect();
            match words.as_slice() {
                ["lambda", v, "from", t] => trace.commands.push(SteeringCommand {
                    new_lambda: v.parse().map_err(|_| bad())?,
                    effective_from_step: t.parse().map_err(|_| bad())?,
                }),
                ["finalize", t] => trace.finalized_at = Some(t.parse().map_err(|_| bad())?),
                _ => return Err(bad()),
            }
        }
        Ok(trace)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Branches that entered the fusion at this step, and its result.
    pub state: BranchState,
    /// Absent at step 0, before any fusion.
    pub maps: Option<RiskMaps>,
    pub lambda: f64,
    /// Decoded `z*` against the ground truth, when known.
    pub metrics: Option<MetricReport>,
    /// `‖A x̂ − y‖` of the decoded `z*`.
    pub residual: f64,
}

impl StepRecord {
    pub fn mean_alpha(&self) -> Option<f64> {
        self.maps.as_ref().map(|m| m.alpha.mean())
    }

    pub fn csv_row(&self) -> String {
        let (psnr, ssim, rmse) = match &self.metrics {
            Some(m) => (psnr_text(m.psnr), format!("{:?}", m.ssim), format!("{:?}", m.rmse)),
            None => (String::new(), String::new(), String::new()),
        };
        format!("{},{psnr},{ssim},{rmse},{:?}", self.step, self.residual)
    }
}

pub fn psnr_text(p: Psnr) -> String {
    match p {
        Psnr::Finite(v) => format!("{v:?}"),
        Psnr::Infinite => "inf".into(),
    }
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    /// Resolved config (preset applied, concrete cadence).
    pub config: RunConfig,
    pub input: Tensor2D,
    pub steps: Vec<StepRecord>,
    /// Decoded output `x̂`, clamped to `[0, 1]`.
    pub final_image: Tensor2D,
    pub final_metrics: Option<MetricReport>,
    pub final_residual: f64,
    pub steering: SteeringTrace,
    pub ensemble_std: Option<Tensor2D>,
    pub elapsed: Duration,
}

/// Equality ignores wall time.
impl PartialEq for RunRecord {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.input == other.input
            && self.steps == other.steps
            && self.final_image == other.final_image
            && self.final_metrics == other.final_metrics
            && self.final_residual.to_bits() == other.final_residual.to_bits()
            && self.steering == other.steering
            && self.ensemble_std == other.ensemble_std
    }
}

impl RunRecord {
    pub fn last_step(&self) -> usize {
        self.steps.last().map_or(0, |s| s.step)
    }

    pub fn step(&self, t: usize) -> Option<&StepRecord> {
        self.steps.iter().find(|s| s.step == t)
    }

    /// Mean of the per-step mean `α` over all recorded steps after step 0.
    pub fn mean_alpha(&self) -> f64 {
        let vals: Vec<f64> = self.steps.iter().filter_map(StepRecord::mean_alpha).collect();
        if vals.is_empty() {
            return f64::NAN;
        }
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = format!("{METRICS_HEADER}\n");
        for s in &self.steps {
            out.push_str(&s.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let mut w = RunDirWriter::create(dir, &self.config, &self.input)?;
        for s in &self.steps {
            w.write_step(s)?;
        }
        w.write_final(self)
    }

    /// Like [`write_dir`](Self::write_dir) without the per-step tensors.
    /// `metrics.csv` still has every recorded step.
    pub fn write_summary_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let w = RunDirWriter::create(dir, &self.config, &self.input)?;
        write_atomic(w.root.join("metrics.csv"), self.metrics_csv().as_bytes())?;
        w.write_final(self)
    }
}

/// Incremental writer so that a live run's directory fills up step by step.
#[derive(Debug)]
pub struct RunDirWriter {
    root: PathBuf,
    csv: String,
}

impl RunDirWriter {
    pub fn create(dir: impl AsRef<Path>, config: &RunConfig, input: &Tensor2D) -> Result<Self> {
        let root = dir.as_ref().to_path_buf();
        fs::create_dir_all(root.join("steps"))?;
        write_atomic(root.join("config.echo"), config.to_text().as_bytes())?;
        write_atomic(root.join("input.ct2"), &encode_ct2(input))?;
        let csv = format!("{METRICS_HEADER}\n");
        write_atomic(root.join("metrics.csv"), csv.as_bytes())?;
        Ok(Self { root, csv })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write_step(&mut self, s: &StepRecord) -> Result<()> {
        let dir = step_dir(&self.root, s.step);
        fs::create_dir_all(&dir)?;
        write_atomic(dir.join("zstar.ct2"), &encode_ct2(&s.state.z_star))?;
        if let Some(m) = &s.maps {
            write_atomic(dir.join("alpha.ct2"), &encode_ct2(&m.alpha))?;
            write_atomic(dir.join("r.ct2"), &encode_ct2(&m.reliability))?;
            write_atomic(dir.join("u.ct2"), &encode_ct2(&m.uncertainty))?;
        }
        self.csv.push_str(&s.csv_row());
        self.csv.push('\n');
        write_atomic(self.root.join("metrics.csv"), self.csv.as_bytes())
    }

    pub fn write_steering(&self, trace: &SteeringTrace) -> Result<()> {
        write_atomic(self.root.join("steering.trace"), trace.to_text().as_bytes())
    }

    pub fn write_final(&self, record: &RunRecord) -> Result<()> {
        self.write_steering(&record.steering)?;
        if let Some(std) = &record.ensemble_std {
            write_atomic(self.root.join("ensemble_std.ct2"), &encode_ct2(std))?;
        }
        write_atomic(self.root.join("final.pgm"), &encode_pgm(&record.final_image))?;
        // final.ct2 last: its presence marks a complete directory
        write_atomic(self.root.join("final.ct2"), &encode_ct2(&record.final_image))
    }
}

pub fn step_dir(root: &Path, step: usize) -> PathBuf {
    root.join("steps").join(step.to_string())
}
