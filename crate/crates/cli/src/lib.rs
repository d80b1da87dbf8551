//! Command implementations for the `emshape` binary.
//!
//! Everything written to stdout or to `--out`/`--report` files depends only on
//! the flags, the seed and the thread count. Wall-clock timing goes to stderr.

pub mod checks;
pub mod synth;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use emshape::io::{read_volume, write_volume};
use emshape::lsd::{
    compute_lsd_fast_with_stats, compute_lsd_oracle, normalize_lsd, LsdParams, Weighting,
};
use emshape::metrics::evaluate;
use emshape::{LabelVolume, VoxelSpacing};
use serde::Serialize;
use thiserror::Error;

use checks::{run_fact_checks, run_ssm_checks, CheckReport, FactCheckSpec, SsmCheckSpec};
use synth::{generate, instance_count, SynthKind, SynthSpec};

/// Fast and oracle descriptors may differ by at most this much in `--engine both`.
pub const ENGINE_AGREEMENT_TOL: f32 = 1e-4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("check failed: {0}")]
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Check(_) => 4,
        }
    }
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "emshape",
    about = "Shape descriptors, instance metrics and kernel checks for EM label volumes"
)]
pub struct Cli {
    /// Worker threads for the compute engines (default: all cores).
    #[arg(long, global = true, env = "EMSHAPE_THREADS", value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: Option<u16>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic label volume.
    Synth(SynthArgs),
    /// Compute local shape descriptors for a label volume.
    Lsd(LsdArgs),
    /// Score a predicted segmentation against ground truth.
    Eval(EvalArgs),
    /// Verify the selective-scan kernels on random instances.
    SsmCheck(SsmCheckArgs),
    /// Verify factorized weight increments on random instances.
    FactCheck(FactCheckArgs),
    /// Print the version.
    Version,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value_t = SynthKind::Spheres)]
    pub kind: SynthKind,
    /// Volume shape as D,H,W.
    #[arg(long, value_parser = parse_triple::<usize>, default_value = "48,48,48")]
    pub shape: [usize; 3],
    /// Voxel edge lengths in nm as Z,Y,X.
    #[arg(long, value_parser = parse_triple::<f64>, default_value = "1,1,1")]
    pub spacing: [f64; 3],
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    /// Smallest radius in nm (checker: cell edge in voxels).
    #[arg(long, default_value_t = 3.0)]
    pub size_min: f64,
    #[arg(long, default_value_t = 8.0)]
    pub size_max: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_triple<T: std::str::FromStr>(s: &str) -> Result<[T; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [a, b, c] = parts[..] else {
        return Err(format!("expected three comma-separated values, got {s:?}"));
    };
    let one = |v: &str| v.parse::<T>().map_err(|_| format!("cannot parse {v:?}"));
    Ok([one(a)?, one(b)?, one(c)?])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Ball,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EngineArg {
    Fast,
    Oracle,
    Both,
}

#[derive(Debug, Args)]
pub struct LsdArgs {
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Neighbourhood radius in nm.
    #[arg(long)]
    pub sigma: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Ball)]
    pub mode: ModeArg,
    /// Map every channel into [0, 1].
    #[arg(long)]
    pub normalize: bool,
    #[arg(long, value_enum, default_value_t = EngineArg::Fast)]
    pub engine: EngineArg,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Also write a one-row CSV summary.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SsmCheckArgs {
    #[arg(long, default_value_t = 257)]
    pub len: usize,
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    #[arg(long, default_value_t = 16)]
    pub state: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FactCheckArgs {
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub rank: usize,
    /// Number of weight sites sharing the factors.
    #[arg(long, default_value_t = 4)]
    pub sites: usize,
    #[arg(long, default_value_t = 2)]
    pub tucker_rank: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

/// Prints `json` and mirrors it to `report` when given.
fn emit(json: &str, report: Option<&Path>) -> Result<(), CliError> {
    print!("{json}");
    if let Some(p) = report {
        std::fs::write(p, json).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

fn read_labels(path: &Path) -> Result<LabelVolume, CliError> {
    read_volume::<u64>(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Runs `cli` inside a pool of the requested size.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n as usize);
    }
    let pool = pool.build().map_err(|e| CliError::Usage(e.to_string()))?;
    pool.install(|| dispatch(cli.command))
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Lsd(a) => cmd_lsd(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::SsmCheck(a) => cmd_ssm_check(&a),
        Command::FactCheck(a) => cmd_fact_check(&a),
        Command::Version => {
            println!("emshape {}", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct SynthSummary {
    kind: &'static str,
    shape: [usize; 3],
    seed: u64,
    instances: usize,
    foreground_voxels: usize,
}

pub fn cmd_synth(a: &SynthArgs) -> Result<(), CliError> {
    let spacing = VoxelSpacing::new(a.spacing[0], a.spacing[1], a.spacing[2])
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let spec = SynthSpec {
        kind: a.kind,
        shape: a.shape,
        spacing,
        count: a.count,
        size_min: a.size_min,
        size_max: a.size_max,
        seed: a.seed,
    };
    let labels = generate(&spec).map_err(|e| match e {
        synth::SynthError::Spec(m) => CliError::Usage(m),
        other => data_err(other),
    })?;
    write_volume(&labels, &a.out).map_err(data_err)?;
    let summary = SynthSummary {
        kind: match a.kind {
            SynthKind::Spheres => "spheres",
            SynthKind::Tubes => "tubes",
            SynthKind::Checker => "checker",
        },
        shape: spec.shape,
        seed: a.seed,
        instances: instance_count(&labels),
        foreground_voxels: labels.data().iter().filter(|&&v| v != 0).count(),
    };
    emit(&to_json(&summary), None)
}

#[derive(Serialize)]
struct LsdReport {
    shape: [usize; 3],
    spacing_nm: [f64; 3],
    sigma_nm: f64,
    mode: &'static str,
    normalize: bool,
    engine: &'static str,
    segments: Option<usize>,
    tasks: Option<usize>,
    stencil_offsets: Option<usize>,
    stencil_rows: Option<usize>,
    max_abs_diff: Option<f32>,
    tolerance: Option<f32>,
}

pub fn cmd_lsd(a: &LsdArgs) -> Result<(), CliError> {
    let labels = read_labels(&a.labels)?;
    let weighting = match a.mode {
        ModeArg::Ball => Weighting::Ball,
        ModeArg::Gaussian => Weighting::Gaussian,
    };
    let params = LsdParams::new(a.sigma)
        .with_weighting(weighting)
        .with_normalize(a.normalize);
    params
        .validate(labels.spacing())
        .map_err(|e| CliError::Usage(e.to_string()))?;

    let mut report = LsdReport {
        shape: labels.shape(),
        spacing_nm: labels.spacing().as_array(),
        sigma_nm: a.sigma,
        mode: match a.mode {
            ModeArg::Ball => "ball",
            ModeArg::Gaussian => "gaussian",
        },
        normalize: a.normalize,
        engine: match a.engine {
            EngineArg::Fast => "fast",
            EngineArg::Oracle => "oracle",
            EngineArg::Both => "both",
        },
        segments: None,
        tasks: None,
        stencil_offsets: None,
        stencil_rows: None,
        max_abs_diff: None,
        tolerance: None,
    };
    let mut timings = serde_json::Map::new();

    let fast = if a.engine != EngineArg::Oracle {
        let t = Instant::now();
        let (lsd, stats) = compute_lsd_fast_with_stats(&labels, &params).map_err(data_err)?;
        timings.insert("fast_ms".into(), (t.elapsed().as_secs_f64() * 1e3).into());
        report.segments = Some(stats.segments);
        report.tasks = Some(stats.tasks);
        report.stencil_offsets = Some(stats.stencil_offsets);
        report.stencil_rows = Some(stats.stencil_rows);
        Some(lsd)
    } else {
        None
    };
    let oracle = if a.engine != EngineArg::Fast {
        let t = Instant::now();
        let lsd = compute_lsd_oracle(&labels, &params).map_err(data_err)?;
        timings.insert("oracle_ms".into(), (t.elapsed().as_secs_f64() * 1e3).into());
        Some(lsd)
    } else {
        None
    };
    if let (Some(f), Some(o)) = (&fast, &oracle) {
        report.max_abs_diff = Some(f.max_abs_diff(o));
        report.tolerance = Some(ENGINE_AGREEMENT_TOL);
    }

    let raw = fast.or(oracle).expect("at least one engine ran");
    let out = if a.normalize {
        normalize_lsd(&raw, &params).map_err(data_err)?
    } else {
        raw
    };
    out.write(&a.out).map_err(data_err)?;
    eprintln!("{}", serde_json::Value::Object(timings));
    emit(&to_json(&report), a.report.as_deref())?;

    match report.max_abs_diff {
        Some(d) if d.is_nan() || d > ENGINE_AGREEMENT_TOL => Err(CliError::Check(format!(
            "fast and oracle descriptors differ by {d} (tolerance {ENGINE_AGREEMENT_TOL})"
        ))),
        _ => Ok(()),
    }
}

pub fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let pred = read_labels(&a.pred)?;
    let gt = read_labels(&a.gt)?;
    let report = evaluate(&pred, &gt).map_err(data_err)?;
    emit(&report.to_json(), a.report.as_deref())?;
    if let Some(p) = &a.csv {
        let csv = format!("{}\n{}\n", report.csv_header(), report.csv_row());
        std::fs::write(p, csv).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

fn finish_checks(report: CheckReport, path: Option<&Path>) -> Result<(), CliError> {
    emit(&to_json(&report), path)?;
    match report.failed {
        Some(name) => Err(CliError::Check(name.to_string())),
        None => Ok(()),
    }
}

fn positive(what: &str, v: usize) -> Result<(), CliError> {
    if v == 0 {
        Err(CliError::Usage(format!("{what} must be positive")))
    } else {
        Ok(())
    }
}

fn tolerance(v: f64) -> Result<(), CliError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "tolerance {v} must be finite and non-negative"
        )))
    }
}

pub fn cmd_ssm_check(a: &SsmCheckArgs) -> Result<(), CliError> {
    positive("--len", a.len)?;
    positive("--channels", a.channels)?;
    positive("--state", a.state)?;
    tolerance(a.tol)?;
    let report = run_ssm_checks(&SsmCheckSpec {
        len: a.len,
        channels: a.channels,
        state: a.state,
        seed: a.seed,
        tol: a.tol,
    });
    finish_checks(report, a.report.as_deref())
}

pub fn cmd_fact_check(a: &FactCheckArgs) -> Result<(), CliError> {
    positive("--dim", a.dim)?;
    positive("--rank", a.rank)?;
    positive("--sites", a.sites)?;
    positive("--tucker-rank", a.tucker_rank)?;
    tolerance(a.tol)?;
    let report = run_fact_checks(&FactCheckSpec {
        dim: a.dim,
        rank: a.rank,
        sites: a.sites,
        tucker_rank: a.tucker_rank,
        seed: a.seed,
        tol: a.tol,
    });
    finish_checks(report, a.report.as_deref())
}
