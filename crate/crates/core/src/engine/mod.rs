//! The restoration loop.
//!
//! Each step `t = 1..=T`:
//! 1. for `t ≥ 2`, re-anchor both branches on the previous fused latent
//!    (`z_f ← fidelity_step(z*)`, `z_p ← prior_step(z*)`);
//! 2. estimate reliability and uncertainty, compute `α`;
//! 3. fuse.
//!
//! The output is the last fused latent clamped to `[0, 1]`. Steering
//! commands are applied only at step boundaries, so a run is a pure function
//! of its observation, config and steering trace.

mod config;
mod record;

use std::collections::VecDeque;
use std::time::Instant;

use log::warn;
use rayon::prelude::*;

pub use config::{apply_preset, Preset, RunConfig, CONFIG_KEYS, DEFAULT_STEPS};
pub use record::{
    psnr_text, step_dir, RunDirWriter, RunRecord, SteeringCommand, SteeringTrace, StepRecord, METRICS_HEADER,
};

use crate::branches::{fidelity_step, init_latents, prior_step, BranchState, PriorConfig};
use crate::controller::{
    compute_alpha, estimate_reliability, estimate_uncertainty, fuse, sample_std, RiskMaps, UncertaintyMode,
};
use crate::error::{Error, Result};
use crate::metrics::{MetricReport, DEFAULT_PEAK};
use crate::ops::Observation;
use crate::tensor::Tensor2D;

/// Decode a fused latent into an image.
pub fn decode(z: &Tensor2D) -> Tensor2D {
    z.clamp(0.0, 1.0)
}

#[derive(Debug, Clone)]
struct Member {
    state: BranchState,
    prev_fused: Option<Tensor2D>,
    prior: PriorConfig,
}

impl Member {
    fn new(obs: &Observation, prior: PriorConfig) -> Result<Self> {
        Ok(Self {
            state: init_latents(obs, &prior)?,
            prev_fused: None,
            prior,
        })
    }

    /// Branch updates from the previous fused latent. The two updates are
    /// independent and run concurrently.
    fn reanchor(&mut self, obs: &Observation, cfg: &RunConfig, t: usize) -> Result<()> {
        let z = &self.state.z_star;
        let (zf, zp) = rayon::join(
            || fidelity_step(z, obs, &cfg.fidelity),
            || prior_step(z, &self.prior, t),
        );
        self.state.z_f = zf?;
        self.state.z_p = zp?;
        Ok(())
    }

    fn fuse_step(&mut self, u: Tensor2D, cfg: &RunConfig, lambda: f64, t: usize) -> Result<RiskMaps> {
        let controller = crate::controller::ControllerConfig { lambda, ..cfg.controller };
        let r = estimate_reliability(&self.state.z_f, &self.state.z_p, controller.window)?;
        let alpha = compute_alpha(&r, &u, &controller)?;
        let z_star = fuse(&self.state.z_f, &self.state.z_p, &alpha)?;
        self.prev_fused = Some(std::mem::replace(&mut self.state.z_star, z_star));
        self.state.step = t;
        Ok(RiskMaps {
            reliability: r,
            uncertainty: u,
            alpha,
        })
    }
}

/// Prior settings for ensemble member `k`: each member draws from its own
/// perturbation stream, keyed by the run seed.
fn member_prior(cfg: &RunConfig, k: usize) -> PriorConfig {
    PriorConfig {
        seed: cfg.prior.seed.wrapping_add(cfg.seed).wrapping_add(k as u64),
        ..cfg.prior
    }
}

/// A run that can be advanced one step at a time and steered between steps.
#[derive(Debug)]
pub struct Session {
    obs: Observation,
    cfg: RunConfig,
    members: Vec<Member>,
    lambda: f64,
    pending: VecDeque<SteeringCommand>,
    trace: SteeringTrace,
    input: Tensor2D,
    steps: Vec<StepRecord>,
    last: StepRecord,
    started: Instant,
}

impl Session {
    /// Start a run. Ensemble uncertainty runs `controller.ensemble_size`
    /// members in lockstep; otherwise there is a single member.
    pub fn new(obs: Observation, cfg: &RunConfig) -> Result<Self> {
        let k = match cfg.controller.uncertainty_mode {
            UncertaintyMode::Ensemble => cfg.controller.ensemble_size,
            UncertaintyMode::CrossStep => 1,
        };
        Self::with_members(obs, cfg, k)
    }

    fn with_members(obs: Observation, cfg: &RunConfig, k: usize) -> Result<Self> {
        let cfg = cfg.resolved(obs.shape())?;
        if cfg.controller.beta3 > 0.0 && cfg.controller.alpha_fixed.is_none() {
            warn!(
                "controller.beta3 = {} > 0: larger lambda now favours the fidelity branch",
                cfg.controller.beta3
            );
        }
        let started = Instant::now();
        let members = (0..k)
            .into_par_iter()
            .map(|i| Member::new(&obs, member_prior(&cfg, i)))
            .collect::<Result<Vec<_>>>()?;
        let input = members[0].state.z_f.clone();
        let mut session = Self {
            lambda: cfg.controller.lambda,
            last: StepRecord {
                step: 0,
                state: members[0].state.clone(),
                maps: None,
                lambda: cfg.controller.lambda,
                metrics: None,
                residual: 0.0,
            },
            obs,
            cfg,
            members,
            pending: VecDeque::new(),
            trace: SteeringTrace::default(),
            input,
            steps: Vec::new(),
            started,
        };
        session.last = session.make_record(0, None)?;
        session.steps.push(session.last.clone());
        Ok(session)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn observation(&self) -> &Observation {
        &self.obs
    }

    pub fn input(&self) -> &Tensor2D {
        &self.input
    }

    pub fn current_step(&self) -> usize {
        self.members[0].state.step
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn is_done(&self) -> bool {
        self.current_step() >= self.cfg.steps
    }

    /// Most recent step, recorded or not.
    pub fn latest(&self) -> &StepRecord {
        &self.last
    }

    pub fn recorded(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn trace(&self) -> &SteeringTrace {
        &self.trace
    }

    /// Queue a `λ` change. It takes effect at the start of
    /// `effective_from_step`, which must lie in the future.
    pub fn steer(&mut self, cmd: SteeringCommand) -> Result<()> {
        if !(0.0..=1.0).contains(&cmd.new_lambda) {
            return Err(Error::config(
                "controller.lambda",
                format!("must lie in [0, 1], got {}", cmd.new_lambda),
            ));
        }
        if cmd.effective_from_step <= self.current_step() {
            return Err(Error::State(format!(
                "steering effective at step {} but step {} already ran",
                cmd.effective_from_step,
                self.current_step()
            )));
        }
        let pos = self
            .pending
            .iter()
            .position(|c| c.effective_from_step > cmd.effective_from_step)
            .unwrap_or(self.pending.len());
        self.pending.insert(pos, cmd);
        Ok(())
    }

    fn make_record(&self, t: usize, maps: Option<RiskMaps>) -> Result<StepRecord> {
        let state = self.members[0].state.clone();
        let decoded = decode(&state.z_star);
        let metrics = match &self.obs.ground_truth {
            Some(gt) => Some(MetricReport::compute(gt, &decoded, DEFAULT_PEAK)?),
            None => None,
        };
        Ok(StepRecord {
            step: t,
            residual: self.obs.residual(&decoded)?,
            state,
            maps,
            lambda: self.lambda,
            metrics,
        })
    }

    fn should_record(&self, t: usize) -> bool {
        t.is_multiple_of(self.cfg.record_every_or_default()) || t == self.cfg.steps
    }

    /// Run one step and return its record, or an error once all steps ran.
    pub fn step(&mut self) -> Result<&StepRecord> {
        if self.is_done() {
            return Err(Error::State(format!("all {} steps already ran", self.cfg.steps)));
        }
        let t = self.current_step() + 1;
        while let Some(cmd) = self.pending.front().copied() {
            if cmd.effective_from_step > t {
                break;
            }
            self.pending.pop_front();
            self.lambda = cmd.new_lambda;
            self.trace.commands.push(cmd);
        }

        if t >= 2 {
            let (obs, cfg) = (&self.obs, &self.cfg);
            self.members
                .par_iter_mut()
                .map(|m| m.reanchor(obs, cfg, t))
                .collect::<Result<Vec<_>>>()?;
        }

        let ensemble_u = match self.cfg.controller.uncertainty_mode {
            UncertaintyMode::Ensemble if t >= 2 => {
                let fused: Vec<Tensor2D> = self.members.iter().map(|m| m.state.z_star.clone()).collect();
                let state = &self.members[0].state;
                Some(estimate_uncertainty(state, None, Some(&fused), &self.cfg.controller)?)
            }
            _ => None,
        };
        let (cfg, lambda) = (&self.cfg, self.lambda);
        let mut maps = self
            .members
            .par_iter_mut()
            .map(|m| {
                let u = match &ensemble_u {
                    Some(u) => u.clone(),
                    None if cfg.controller.uncertainty_mode == UncertaintyMode::Ensemble => {
                        estimate_uncertainty(&m.state, None, None, &cfg.controller)?
                    }
                    None => estimate_uncertainty(&m.state, m.prev_fused.as_ref(), None, &cfg.controller)?,
                };
                m.fuse_step(u, cfg, lambda, t)
            })
            .collect::<Result<Vec<_>>>()?;

        self.last = self.make_record(t, Some(maps.swap_remove(0)))?;
        if self.should_record(t) {
            self.steps.push(self.last.clone());
        }
        Ok(&self.last)
    }

    /// Stop after the current step and decode. A run stopped before its
    /// configured step count records where it stopped in the trace.
    pub fn finish(mut self) -> Result<RunRecord> {
        let t = self.current_step();
        if t < self.cfg.steps {
            self.trace.finalized_at = Some(t);
            if self.steps.last().map(|s| s.step) != Some(t) {
                self.steps.push(self.last.clone());
            }
        }
        let ensemble_std = if self.members.len() >= 2 {
            let outs: Vec<Tensor2D> = self.members.iter().map(|m| decode(&m.state.z_star)).collect();
            Some(sample_std(&outs)?)
        } else {
            None
        };
        let final_image = decode(&self.last.state.z_star);
        Ok(RunRecord {
            final_metrics: self.last.metrics,
            final_residual: self.last.residual,
            final_image,
            config: self.cfg,
            input: self.input,
            steps: self.steps,
            steering: self.trace,
            ensemble_std,
            elapsed: self.started.elapsed(),
        })
    }
}

/// Run to completion, replaying `steering` if given.
pub fn run(obs: &Observation, cfg: &RunConfig, steering: Option<&SteeringTrace>) -> Result<RunRecord> {
    let mut session = Session::new(obs.clone(), cfg)?;
    drive(&mut session, steering)?;
    session.finish()
}

fn drive(session: &mut Session, steering: Option<&SteeringTrace>) -> Result<()> {
    let stop = steering.and_then(|s| s.finalized_at);
    if let Some(trace) = steering {
        for cmd in &trace.commands {
            session.steer(*cmd)?;
        }
    }
    while !session.is_done() && stop.is_none_or(|k| session.current_step() < k) {
        session.step()?;
    }
    Ok(())
}

/// `k` runs whose prior perturbations use streams `0..k`; the first is the
/// primary record. The returned map is the per-pixel sample standard
/// deviation of the decoded outputs, also stored in the record.
///
/// In ensemble uncertainty mode the members run in lockstep and share the
/// uncertainty map; otherwise they are independent runs.
pub fn run_ensemble(obs: &Observation, cfg: &RunConfig, k: usize) -> Result<(RunRecord, Tensor2D)> {
    if k < 2 {
        return Err(Error::param(format!("ensemble needs at least 2 members, got {k}")));
    }
    if cfg.prior.noise_inject == 0.0 {
        warn!("ensemble with prior.noise_inject = 0: all members are identical");
    }
    let mut record = match cfg.controller.uncertainty_mode {
        UncertaintyMode::Ensemble => {
            let mut cfg = cfg.clone();
            cfg.controller.ensemble_size = k;
            let mut session = Session::with_members(obs.clone(), &cfg, k)?;
            drive(&mut session, None)?;
            session.finish()?
        }
        UncertaintyMode::CrossStep => {
            let records = (0..k)
                .into_par_iter()
                .map(|i| {
                    let member = RunConfig {
                        prior: member_prior(cfg, i),
                        seed: 0,
                        ..cfg.clone()
                    };
                    run(obs, &member, None)
                })
                .collect::<Result<Vec<_>>>()?;
            let finals: Vec<Tensor2D> = records.iter().map(|r| r.final_image.clone()).collect();
            let std = sample_std(&finals)?;
            let mut primary = records.into_iter().next().expect("k >= 2");
            primary.config = cfg.resolved(obs.shape())?;
            primary.ensemble_std = Some(std);
            primary
        }
    };
    let std = record
        .ensemble_std
        .clone()
        .ok_or_else(|| Error::State("ensemble run produced no spread map".into()))?;
    record.ensemble_std = Some(std.clone());
    Ok((record, std))
}

#[cfg(test)]
mod tests;
