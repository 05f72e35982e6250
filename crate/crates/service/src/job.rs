//! One job: a worker thread owning the engine session, and the progress
//! snapshot that request handlers read.

use std::path::PathBuf;
use std::sync::mpsc::{self, Receiver, Sender, TryRecvError};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread;
use std::time::Duration;

use dlsteer_core::engine::{psnr_text, RunConfig, RunDirWriter, Session, SteeringCommand, SteeringTrace, StepRecord};
use dlsteer_core::metrics::MetricReport;
use dlsteer_core::ops::Observation;
use serde::Serialize;
use serde_json::{json, Value};
use tokio::sync::oneshot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Pending,
    Running,
    Paused,
    Done,
    Failed,
}

impl JobState {
    pub fn is_active(&self) -> bool {
        !matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSummary {
    pub step: usize,
    pub metrics: Option<MetricReport>,
    pub residual: f64,
    pub mean_alpha: Option<f64>,
}

impl StepSummary {
    fn of(s: &StepRecord) -> Self {
        Self { step: s.step, metrics: s.metrics, residual: s.residual, mean_alpha: s.mean_alpha() }
    }

    fn to_json(self) -> Value {
        // infinite PSNR has no JSON number, so it goes out as "inf"
        let psnr = self.metrics.map(|m| match m.psnr.finite() {
            Some(v) => json!(v),
            None => json!(psnr_text(m.psnr)),
        });
        json!({
            "step": self.step,
            "psnr": psnr,
            "ssim": self.metrics.map(|m| m.ssim),
            "rmse": self.metrics.map(|m| m.rmse),
            "residual": self.residual,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Progress {
    pub state: JobState,
    pub current_step: usize,
    pub lambda: f64,
    pub latest: Option<StepSummary>,
    /// Steps whose frames are on disk.
    pub recorded: Vec<usize>,
    /// Commands already applied, plus the early-stop step if any.
    pub trace: SteeringTrace,
    pub pending: Vec<SteeringCommand>,
    pub error: Option<String>,
}

pub(crate) enum Control {
    Steer(f64, oneshot::Sender<usize>),
    Pause(oneshot::Sender<()>),
    Resume(oneshot::Sender<()>),
    Finalize(oneshot::Sender<()>),
}

#[derive(Debug)]
pub struct Job {
    pub id: String,
    pub dir: PathBuf,
    pub steps: usize,
    progress: Mutex<Progress>,
    control: Mutex<Sender<Control>>,
}

impl Job {
    pub fn progress(&self) -> Progress {
        self.lock().clone()
    }

    fn lock(&self) -> MutexGuard<'_, Progress> {
        self.progress.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub(crate) fn send(&self, msg: Control) -> bool {
        self.control.lock().unwrap_or_else(|p| p.into_inner()).send(msg).is_ok()
    }

    /// Status document served by `GET /api/jobs/{id}`.
    pub fn status_json(&self) -> Value {
        let p = self.progress();
        let cmd = |c: &SteeringCommand| json!({"new_lambda": c.new_lambda, "effective_from_step": c.effective_from_step});
        json!({
            "id": self.id,
            "state": p.state,
            "current_step": p.current_step,
            "steps": self.steps,
            "lambda": p.lambda,
            "latest": p.latest.map(StepSummary::to_json),
            "mean_alpha": p.latest.and_then(|s| s.mean_alpha),
            "recorded_steps": p.recorded,
            "steering": p.trace.commands.iter().map(cmd).collect::<Vec<_>>(),
            "pending_steering": p.pending.iter().map(cmd).collect::<Vec<_>>(),
            "finalized_at": p.trace.finalized_at,
            "error": p.error,
        })
    }
}

/// A job whose run directory exists but whose worker has not started.
pub struct Prepared {
    job: Arc<Job>,
    session: Session,
    writer: RunDirWriter,
    rx: Receiver<Control>,
    pacing: Duration,
}

/// Create the session and the run directory with step 0.
pub fn prepare(id: String, dir: PathBuf, obs: Observation, cfg: &RunConfig, pacing: Duration) -> dlsteer_core::Result<Prepared> {
    let session = Session::new(obs, cfg)?;
    let mut writer = RunDirWriter::create(&dir, session.config(), session.input())?;
    let first = &session.recorded()[0];
    writer.write_step(first)?;
    let (tx, rx) = mpsc::channel();
    let job = Arc::new(Job {
        id,
        dir,
        steps: session.config().steps,
        progress: Mutex::new(Progress {
            state: JobState::Pending,
            current_step: 0,
            lambda: session.lambda(),
            latest: Some(StepSummary::of(first)),
            recorded: vec![0],
            trace: SteeringTrace::default(),
            pending: Vec::new(),
            error: None,
        }),
        control: Mutex::new(tx),
    });
    Ok(Prepared { job, session, writer, rx, pacing })
}

impl Prepared {
    pub fn job(&self) -> &Arc<Job> {
        &self.job
    }

    /// Run the job on its own thread.
    pub fn start(self) -> std::io::Result<Arc<Job>> {
        let Prepared { job, session, writer, rx, pacing } = self;
        let worker_job = Arc::clone(&job);
        thread::Builder::new().name(format!("job-{}", job.id)).spawn(move || {
            let job = worker_job;
            if let Err(e) = work(&job, session, writer, rx, pacing) {
                log::error!("job {} failed: {e}", job.id);
                let mut p = job.lock();
                p.state = JobState::Failed;
                p.error = Some(e.to_string());
            }
        })?;
        Ok(job)
    }
}

struct Flags {
    paused: bool,
    finalize: bool,
}

fn handle(msg: Control, session: &mut Session, flags: &mut Flags, job: &Job) -> dlsteer_core::Result<()> {
    match msg {
        Control::Steer(lambda, reply) => {
            if session.is_done() || flags.finalize {
                // dropping the reply tells the caller the run is over
                return Ok(());
            }
            let cmd = SteeringCommand { new_lambda: lambda, effective_from_step: session.current_step() + 1 };
            session.steer(cmd)?;
            job.lock().pending.push(cmd);
            let _ = reply.send(cmd.effective_from_step);
        }
        Control::Pause(reply) => {
            flags.paused = true;
            job.lock().state = JobState::Paused;
            let _ = reply.send(());
        }
        Control::Resume(reply) => {
            flags.paused = false;
            job.lock().state = JobState::Running;
            let _ = reply.send(());
        }
        Control::Finalize(reply) => {
            flags.finalize = true;
            let _ = reply.send(());
        }
    }
    Ok(())
}

fn work(
    job: &Job,
    mut session: Session,
    mut writer: RunDirWriter,
    rx: Receiver<Control>,
    pacing: Duration,
) -> dlsteer_core::Result<()> {
    job.lock().state = JobState::Running;
    let mut flags = Flags { paused: false, finalize: false };
    let mut written = 0;
    loop {
        loop {
            let msg = if flags.paused && !flags.finalize {
                match rx.recv() {
                    Ok(m) => m,
                    // nobody can resume us any more
                    Err(_) => {
                        flags.finalize = true;
                        break;
                    }
                }
            } else {
                match rx.try_recv() {
                    Ok(m) => m,
                    Err(TryRecvError::Empty | TryRecvError::Disconnected) => break,
                }
            };
            handle(msg, &mut session, &mut flags, job)?;
        }
        if flags.finalize || session.is_done() {
            break;
        }
        let t = session.step()?.step;
        if session.recorded().last().map(|s| s.step) == Some(t) {
            writer.write_step(session.latest())?;
            written = t;
        }
        {
            let mut p = job.lock();
            p.current_step = t;
            p.lambda = session.lambda();
            p.latest = Some(StepSummary::of(session.latest()));
            if written == t {
                p.recorded.push(t);
            }
            p.trace = session.trace().clone();
            p.pending.retain(|c| c.effective_from_step > t);
        }
        if !pacing.is_zero() {
            thread::sleep(pacing);
        }
    }
    // refuse further control before the final files appear
    drop(rx);
    let record = session.finish()?;
    if let Some(last) = record.steps.last().filter(|s| s.step != written) {
        writer.write_step(last)?;
    }
    writer.write_final(&record)?;
    let mut p = job.lock();
    if p.recorded.last() != Some(&record.last_step()) {
        p.recorded.push(record.last_step());
    }
    p.trace = record.steering.clone();
    p.pending.clear();
    p.state = JobState::Done;
    Ok(())
}
