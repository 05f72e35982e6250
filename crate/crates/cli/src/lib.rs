//! `dlsteer` command line: phantoms, degradation, restoration, metrics,
//! benchmarks and the steering service.
//!
//! Every run-config key is also a flag (`--controller.lambda 0.3`), applied
//! after `--config`. Exit codes: 0 success, 1 invalid input, 2 runtime
//! failure. Outputs are assembled in a temporary sibling and renamed into
//! place, so a failed command leaves nothing behind.

pub mod obsdir;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgMatches, Command};
use dlsteer_core::bench::{self, BenchCase};
use dlsteer_core::engine::{self, psnr_text, RunConfig, SteeringTrace, CONFIG_KEYS};
use dlsteer_core::io::{encode_ct2, encode_pgm, read_tensor, write_atomic};
use dlsteer_core::metrics::{self, MetricReport, DEFAULT_PEAK};
use dlsteer_core::ops::{make_phantom, BlurSpec, MaskSpec, OperatorSpec};
use dlsteer_core::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlagSpec {
    pub name: &'static str,
    pub value: &'static str,
    pub required: bool,
    pub help: &'static str,
}

const fn flag(name: &'static str, value: &'static str, required: bool, help: &'static str) -> FlagSpec {
    FlagSpec { name, value, required, help }
}

pub const SUBCOMMANDS: [&str; 7] = ["phantom", "degrade", "restore", "metrics", "bench", "sweep", "serve"];

const PHANTOM_FLAGS: &[FlagSpec] = &[
    flag("name", "NAME", true, "shepp-logan, gradient, checkerboard or disks"),
    flag("size", "N", true, "side length in pixels"),
    flag("out", "FILE", true, "output .ct2 or .pgm"),
];

const DEGRADE_FLAGS: &[FlagSpec] = &[
    flag("in", "FILE", true, "clean image (.ct2 or .pgm)"),
    flag("operator", "KIND", true, "identity-plus-noise, pixel-mask, frequency-mask or blur"),
    flag("mask", "KIND", false, "random-uniform, center-weighted-lines or box"),
    flag("keep", "FRACTION", false, "mask keep fraction in (0, 1]"),
    flag("noise", "SIGMA", false, "measurement noise std [default: 0]"),
    flag("blur-size", "N", false, "odd blur kernel side [default: 3]"),
    flag("blur-sigma", "SIGMA", false, "Gaussian blur width; box kernel when absent"),
    flag("seed", "N", false, "mask and noise seed [default: 0]"),
    flag("out", "DIR", true, "observation directory"),
];

const RESTORE_FLAGS: &[FlagSpec] = &[
    flag("in", "DIR", true, "observation directory from `degrade`"),
    flag("config", "FILE", false, "run-config file"),
    flag("mode", "PRESET", false, "conservative, balanced or enhancement"),
    flag("seed", "N", false, "run seed"),
    flag("steering", "FILE", false, "steering trace to replay"),
    flag("out", "DIR", true, "run directory"),
];

const METRICS_FLAGS: &[FlagSpec] = &[
    flag("ref", "FILE", true, "reference image"),
    flag("cand", "FILE", true, "candidate image"),
    flag("format", "FORMAT", false, "plain or csv [default: plain]"),
    flag("peak", "VALUE", false, "PSNR/SSIM dynamic range [default: 1]"),
    flag("window", "N", false, "odd SSIM window [default: 7, capped by image size]"),
];

const BENCH_FLAGS: &[FlagSpec] = &[
    flag("suite", "NAME", false, "case suite [default: default]"),
    flag("out", "DIR", true, "output directory"),
    flag("seed", "N", false, "suite seed; cases use seeds N..N+5 [default: 0]"),
    flag("jobs", "N", false, "maximum concurrent runs"),
    flag("config", "FILE", false, "base run-config file"),
];

const SWEEP_FLAGS: &[FlagSpec] = &[
    flag("suite", "NAME", false, "case suite [default: default]"),
    flag("case", "NAME", false, "only this case"),
    flag("points", "N", false, "λ grid points, at least 3 [default: 11]"),
    flag("out", "DIR", true, "output directory"),
    flag("seed", "N", false, "suite seed [default: 0]"),
    flag("jobs", "N", false, "maximum concurrent runs"),
    flag("config", "FILE", false, "base run-config file"),
];

const SERVE_FLAGS: &[FlagSpec] = &[
    flag("port", "N", false, "listen port [default: 8080]"),
    flag("host", "ADDR", false, "listen address [default: 127.0.0.1]"),
    flag("data", "DIR", true, "job run directories"),
    flag("jobs-max", "N", false, "cap on active jobs [default: 4]"),
    flag("static", "DIR", false, "UI bundle to serve"),
    flag("min-step-millis", "MS", false, "default pause after each step [default: 0]"),
];

/// Config keys that have a dedicated flag instead.
const NOT_CONFIG_FLAGS: [&str; 2] = ["seed", "mode_preset"];

fn takes_config_keys(sub: &str) -> bool {
    matches!(sub, "restore" | "bench" | "sweep")
}

fn config_flags() -> impl Iterator<Item = FlagSpec> {
    CONFIG_KEYS
        .iter()
        .filter(|k| !NOT_CONFIG_FLAGS.contains(k))
        .map(|&k| flag(k, "VALUE", false, "run-config override"))
}

/// Every flag a subcommand accepts, in help order.
pub fn flag_table(sub: &str) -> Vec<FlagSpec> {
    let own: &[FlagSpec] = match sub {
        "phantom" => PHANTOM_FLAGS,
        "degrade" => DEGRADE_FLAGS,
        "restore" => RESTORE_FLAGS,
        "metrics" => METRICS_FLAGS,
        "bench" => BENCH_FLAGS,
        "sweep" => SWEEP_FLAGS,
        "serve" => SERVE_FLAGS,
        _ => &[],
    };
    let mut out = own.to_vec();
    if takes_config_keys(sub) {
        out.extend(config_flags());
    }
    out
}

fn about(sub: &str) -> &'static str {
    match sub {
        "phantom" => "Write a synthetic test image",
        "degrade" => "Apply a forward operator and noise to an image",
        "restore" => "Run the steerable restoration on an observation",
        "metrics" => "Compare two images (PSNR, SSIM, RMSE)",
        "bench" => "Run the six-arm ablation over a case suite",
        "sweep" => "Sweep λ over [0, 1] on a case suite",
        "serve" => "Start the HTTP steering service",
        _ => "",
    }
}

pub fn command() -> Command {
    let mut cmd = Command::new("dlsteer")
        .about("Steerable dual-branch restoration for linear inverse problems")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for sub in SUBCOMMANDS {
        let mut c = Command::new(sub).about(about(sub));
        for f in flag_table(sub) {
            c = c.arg(
                Arg::new(f.name)
                    .long(f.name)
                    .value_name(f.value)
                    .required(f.required)
                    .num_args(1)
                    .help(f.help),
            );
        }
        cmd = cmd.subcommand(c);
    }
    cmd
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or input; exit 1.
    Invalid(String),
    /// Anything that failed while running; exit 2.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Invalid(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) | Error::State(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn get<'a>(m: &'a ArgMatches, name: &str) -> Option<&'a str> {
    m.get_one::<String>(name).map(String::as_str)
}

fn need<'a>(m: &'a ArgMatches, name: &str) -> CliResult<&'a str> {
    get(m, name).ok_or_else(|| CliError::Invalid(format!("--{name} is required")))
}

fn parse<T: std::str::FromStr>(m: &ArgMatches, name: &str) -> CliResult<Option<T>> {
    get(m, name)
        .map(|v| v.parse::<T>().map_err(|_| CliError::Invalid(format!("--{name}: cannot parse {v:?}"))))
        .transpose()
}

/// Run the CLI; returns the process exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = write!(err, "{text}");
                    1
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    let (sub, m) = matches.subcommand().expect("subcommand required");
    let result = match sub {
        "phantom" => cmd_phantom(m, out),
        "degrade" => cmd_degrade(m, out),
        "restore" => cmd_restore(m, out),
        "metrics" => cmd_metrics(m, out),
        "bench" => cmd_bench(m, out),
        "sweep" => cmd_sweep(m, out),
        "serve" => cmd_serve(m, out),
        _ => unreachable!("clap rejects unknown subcommands"),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn tensor_bytes(path: &Path, t: &dlsteer_core::Tensor2D) -> Vec<u8> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => encode_pgm(t),
        _ => encode_ct2(t),
    }
}

/// Build a directory next to `out` and rename it into place on success.
fn with_output_dir<T>(out: &Path, fill: impl FnOnce(&Path) -> CliResult<T>) -> CliResult<T> {
    if out.exists() && fs::read_dir(out).map(|mut d| d.next().is_some()).unwrap_or(true) {
        return Err(CliError::Invalid(format!("{} exists and is not empty", out.display())));
    }
    let name = out
        .file_name()
        .ok_or_else(|| CliError::Invalid(format!("bad output path {}", out.display())))?
        .to_string_lossy();
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    match fill(&tmp) {
        Ok(v) => {
            if out.exists() {
                fs::remove_dir(out)?;
            }
            fs::rename(&tmp, out)?;
            Ok(v)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&tmp);
            Err(e)
        }
    }
}

/// `--config` file, then per-key flag overrides.
fn run_config(m: &ArgMatches) -> CliResult<RunConfig> {
    let mut cfg = match get(m, "config") {
        Some(path) => RunConfig::parse(&fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    for f in config_flags() {
        if let Some(v) = get(m, f.name) {
            cfg.set(f.name, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_phantom(m: &ArgMatches, out: &mut dyn Write) -> CliResult {
    let kind = need(m, "name")?.parse()?;
    let size: usize = parse(m, "size")?.expect("required");
    let path = PathBuf::from(need(m, "out")?);
    let t = make_phantom(kind, size)?;
    write_atomic(&path, &tensor_bytes(&path, &t))?;
    writeln!(out, "wrote {} ({size}x{size} {kind})", path.display())?;
    Ok(())
}

fn cmd_degrade(m: &ArgMatches, out: &mut dyn Write) -> CliResult {
    let image = read_tensor(need(m, "in")?)?;
    let mask = match (get(m, "mask"), parse::<f64>(m, "keep")?) {
        (Some(kind), keep) => Some(MaskSpec { kind: kind.parse()?, keep_fraction: keep.unwrap_or(0.5) }),
        (None, Some(_)) => return Err(CliError::Invalid("--keep needs --mask".into())),
        (None, None) => None,
    };
    let blur = match (parse::<usize>(m, "blur-size")?, parse::<f64>(m, "blur-sigma")?) {
        (None, None) => None,
        (size, sigma) => Some(BlurSpec { size: size.unwrap_or(3), sigma }),
    };
    let spec = OperatorSpec {
        kind: serde_json::from_value(serde_json::Value::String(need(m, "operator")?.into()))
            .map_err(|_| CliError::Invalid(format!("unknown operator {:?}", need(m, "operator").unwrap_or(""))))?,
        mask,
        blur,
        noise_sigma: parse(m, "noise")?.unwrap_or(0.0),
        seed: parse(m, "seed")?.unwrap_or(0),
    };
    let (h, w) = image.shape();
    let obs = spec.build(h, w)?.degrade(&image)?;
    let dir = PathBuf::from(need(m, "out")?);
    with_output_dir(&dir, |tmp| Ok(obsdir::write_observation(tmp, &obs, &spec)?))?;
    writeln!(out, "wrote {} ({})", dir.display(), spec.kind)?;
    Ok(())
}

fn cmd_restore(m: &ArgMatches, out: &mut dyn Write) -> CliResult {
    let obs = obsdir::read_observation(Path::new(need(m, "in")?))?;
    let mut cfg = run_config(m)?;
    if let Some(mode) = get(m, "mode") {
        if get(m, "controller.lambda").is_some() {
            return Err(CliError::Invalid("--mode fixes λ; drop --controller.lambda or --mode".into()));
        }
        cfg.set("mode_preset", mode)?;
    }
    if let Some(seed) = get(m, "seed") {
        cfg.set("seed", seed)?;
    }
    let trace = match get(m, "steering") {
        Some(path) => Some(SteeringTrace::parse(&fs::read_to_string(path)?)?),
        None => None,
    };
    let dir = PathBuf::from(need(m, "out")?);
    let record = with_output_dir(&dir, |tmp| {
        let record = engine::run(&obs, &cfg, trace.as_ref())?;
        record.write_dir(tmp)?;
        Ok(record)
    })?;
    write!(out, "wrote {}: steps={} residual={:?}", dir.display(), record.last_step(), record.final_residual)?;
    if let Some(mr) = record.final_metrics {
        write!(out, " psnr={} ssim={:?}", psnr_text(mr.psnr), mr.ssim)?;
    }
    writeln!(out)?;
    Ok(())
}

fn cmd_metrics(m: &ArgMatches, out: &mut dyn Write) -> CliResult {
    let reference = read_tensor(need(m, "ref")?)?;
    let candidate = read_tensor(need(m, "cand")?)?;
    let peak = parse(m, "peak")?.unwrap_or(DEFAULT_PEAK);
    let r = match parse::<usize>(m, "window")? {
        None => MetricReport::compute(&reference, &candidate, peak)?,
        Some(window) => MetricReport {
            psnr: metrics::psnr(&reference, &candidate, peak)?,
            ssim: metrics::ssim(&reference, &candidate, peak, window)?,
            rmse: metrics::rmse(&reference, &candidate)?,
        },
    };
    match get(m, "format").unwrap_or("plain") {
        "plain" => writeln!(out, "psnr={} ssim={:?} rmse={:?}", psnr_text(r.psnr), r.ssim, r.rmse)?,
        "csv" => writeln!(out, "psnr,ssim,rmse\n{},{:?},{:?}", psnr_text(r.psnr), r.ssim, r.rmse)?,
        other => return Err(CliError::Invalid(format!("--format must be plain or csv, got {other:?}"))),
    }
    Ok(())
}

fn suite(m: &ArgMatches) -> CliResult<Vec<BenchCase>> {
    match get(m, "suite").unwrap_or("default") {
        "default" => Ok(bench::suite_with_seed(parse(m, "seed")?.unwrap_or(0))),
        other => Err(CliError::Invalid(format!("unknown suite {other:?}"))),
    }
}

fn pool(m: &ArgMatches) -> CliResult<rayon::ThreadPool> {
    let jobs: usize = parse(m, "jobs")?.unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))
}

fn cmd_bench(m: &ArgMatches, out: &mut dyn Write) -> CliResult {
    let cases = suite(m)?;
    let base = run_config(m)?;
    let pool = pool(m)?;
    let dir = PathBuf::from(need(m, "out")?);
    let tables = with_output_dir(&dir, |tmp| Ok(pool.install(|| bench::run_suite(&cases, &base, Some(tmp)))?))?;
    writeln!(out, "{:<12} {:<14} {:>8} {:>7} {:>7} {:>9}", "case", "arm", "psnr", "ssim", "risk", "residual")?;
    for t in &tables {
        for r in &t.rows {
            let risk = r.risk.map_or("na".to_string(), |s| format!("{:.4}", s.mean));
            writeln!(
                out,
                "{:<12} {:<14} {:>8.3} {:>7.4} {:>7} {:>9.4}",
                t.case, r.arm, r.psnr.mean, r.ssim.mean, risk, r.residual.mean
            )?;
        }
    }
    writeln!(out, "wrote {}", dir.join("ablation.csv").display())?;
    Ok(())
}

fn cmd_sweep(m: &ArgMatches, out: &mut dyn Write) -> CliResult {
    let mut cases = suite(m)?;
    if let Some(name) = get(m, "case") {
        cases.retain(|c| c.name == name);
        if cases.is_empty() {
            return Err(CliError::Invalid(format!("no case named {name:?}")));
        }
    }
    let points = parse(m, "points")?.unwrap_or(11);
    bench::sweep_lambdas(points)?;
    let base = run_config(m)?;
    let pool = pool(m)?;
    let dir = PathBuf::from(need(m, "out")?);
    let tables =
        with_output_dir(&dir, |tmp| Ok(pool.install(|| bench::run_sweeps(&cases, &base, points, Some(tmp)))?))?;
    write!(out, "{}", bench::sweep_csv(&tables))?;
    Ok(())
}

fn cmd_serve(m: &ArgMatches, out: &mut dyn Write) -> CliResult {
    let port: u16 = parse(m, "port")?.unwrap_or(8080);
    let host = get(m, "host").unwrap_or("127.0.0.1");
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|_| CliError::Invalid(format!("bad listen address {host}:{port}")))?;
    let mut cfg = dlsteer_service::ServiceConfig::new(need(m, "data")?);
    if let Some(n) = parse(m, "jobs-max")? {
        cfg.jobs_max = n;
    }
    if let Some(n) = parse(m, "min-step-millis")? {
        cfg.min_step_millis = n;
    }
    cfg.static_dir = get(m, "static").map(PathBuf::from);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        writeln!(out, "listening on http://{}", listener.local_addr()?)?;
        out.flush()?;
        dlsteer_service::serve(listener, cfg).await
    })?;
    Ok(())
}
