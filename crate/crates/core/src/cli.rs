//! Command-line front end: `generate`, `run` and `sweep`.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tempfile::NamedTempFile;

use crate::engine::{
    load_trace, run_on_workload, run_sweep, Execution, ExperimentReport, SeedPlan, SweepRow,
    SweepVariant, Workload,
};
use crate::error::{file_error, Error};
use crate::traces::{generate_round_robin, generate_zipf, RoundRobinConfig, Trace, ZipfConfig};
use config::{echo_config, ConfigFile};

pub const SERIES_FILE: &str = "series.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const ECHO_FILE: &str = "config_echo.toml";

#[derive(Debug, Parser)]
#[command(
    name = "nfpl",
    version,
    about = "Online caching with noisy request estimates"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic trace, one 1-based file id per line.
    Generate(GenerateArgs),
    /// Run the policies of a config file and write series/summary CSVs.
    Run(RunArgs),
    /// Sweep NFPL sampling rates and cache sizes.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TraceKindArg {
    RoundRobin,
    Zipf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(value_enum)]
    pub kind: TraceKindArg,
    #[arg(long)]
    pub files: usize,
    #[arg(long)]
    pub requests: usize,
    /// Zipf exponent.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExecArgs {
    /// Run on the calling thread only.
    #[arg(long)]
    pub sequential: bool,
}

impl ExecArgs {
    fn execution(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    /// Output directory (created if missing).
    #[arg(short, long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub exec: ExecArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', value_enum)]
    pub variants: Option<Vec<VariantArg>>,
    #[arg(long, value_delimiter = ',', value_parser = parse_rate)]
    pub rates: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub caches: Option<Vec<usize>>,
    #[command(flatten)]
    pub exec: ExecArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Fix,
    Var,
}

impl From<VariantArg> for SweepVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Fix => SweepVariant::Fix,
            VariantArg::Var => SweepVariant::Var,
        }
    }
}

fn parse_rate(s: &str) -> Result<f64, String> {
    let r: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if r > 0.0 && r <= 1.0 {
        Ok(r)
    } else {
        Err(format!("rate {r} outside (0, 1]"))
    }
}

/// Failure classes with their exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration (exit 2).
    Usage(Error),
    /// Anything that went wrong while running (exit 1).
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(e) | CliError::Runtime(e) => e.fmt(f),
        }
    }
}

fn usage(e: Error) -> CliError {
    CliError::Usage(e)
}

fn runtime(e: Error) -> CliError {
    CliError::Runtime(e)
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run_command(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run_command(command: Command) -> Result<(), CliError> {
    match command {
        Command::Generate(args) => cmd_generate(&args),
        Command::Run(args) => cmd_run(&args),
        Command::Sweep(args) => cmd_sweep(&args),
    }
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<(), CliError> {
    let trace = match args.kind {
        TraceKindArg::RoundRobin => generate_round_robin(&RoundRobinConfig {
            files: args.files,
            requests: args.requests,
        }),
        TraceKindArg::Zipf => generate_zipf(&ZipfConfig {
            files: args.files,
            alpha: args.alpha,
            requests: args.requests,
            seed: args.seed,
        }),
    }
    .map_err(usage)?;
    let dir = parent_dir(&args.output);
    let mut tmp = NamedTempFile::new_in(dir).map_err(|e| runtime(e.into()))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        trace.write_to(&mut w).map_err(|e| runtime(e.into()))?;
        w.flush().map_err(|e| runtime(e.into()))?;
    }
    tmp.persist(&args.output)
        .map_err(|e| runtime(e.error.into()))?;
    Ok(())
}

fn parent_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

/// Loads the config, its trace and workload. An unreadable or invalid config
/// is a usage error, failing to read the trace a runtime one.
fn prepare(path: &Path) -> Result<(ConfigFile, Workload), CliError> {
    let file = ConfigFile::load(path).map_err(usage)?;
    let cfg = file.experiment_config().map_err(usage)?;
    let trace: Trace = load_trace(&cfg).map_err(|e| match e {
        Error::Io(_) | Error::File { .. } => runtime(e),
        other => usage(other),
    })?;
    let workload = Workload::new(trace, cfg.cache, cfg.batch).map_err(usage)?;
    if let Some(h) = file.experiment.horizon {
        if h != workload.catalog.horizon {
            return Err(usage(Error::Config {
                key: "experiment.horizon".into(),
                message: format!(
                    "trace yields {} slots, config expects {h}",
                    workload.catalog.horizon
                ),
            }));
        }
    }
    Ok((file, workload))
}

pub fn cmd_run(args: &RunArgs) -> Result<(), CliError> {
    let (file, workload) = prepare(&args.config)?;
    let cfg = file.experiment_config().map_err(usage)?;
    for p in &cfg.policies {
        p.spec.validate(&workload.catalog).map_err(|e| {
            usage(Error::Config {
                key: format!("policies.{}", p.label),
                message: e.to_string(),
            })
        })?;
    }
    let report = run_on_workload(
        &workload,
        &cfg.policies,
        cfg.runs,
        &SeedPlan::new(cfg.base_seed),
        args.exec.execution(),
    )
    .map_err(runtime)?;

    let resolved: Vec<_> = cfg
        .policies
        .iter()
        .cloned()
        .zip(report.policies.iter().map(|p| p.eta))
        .collect();
    let echo = echo_config(
        &file,
        workload.catalog.files,
        workload.catalog.horizon,
        &resolved,
    )
    .map_err(runtime)?;
    write_outputs(
        &args.out,
        &[
            (SERIES_FILE, series_csv(&report)),
            (SUMMARY_FILE, summary_csv(&report)),
            (ECHO_FILE, echo),
        ],
    )
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let (file, workload) = prepare(&args.config)?;
    let sweep = file
        .sweep_config(
            args.variants
                .as_ref()
                .map(|v| v.iter().copied().map(SweepVariant::from).collect()),
            args.rates.clone(),
            args.caches.clone(),
        )
        .map_err(usage)?;
    for &c in &sweep.caches {
        workload.with_cache(c).map_err(|e| {
            usage(Error::Config {
                key: "sweep.caches".into(),
                message: e.to_string(),
            })
        })?;
    }
    let rows = run_sweep(
        &workload,
        &sweep,
        file.experiment.runs,
        &SeedPlan::new(file.experiment.seed),
        args.exec.execution(),
    )
    .map_err(runtime)?;
    write_outputs(&args.out, &[(SWEEP_FILE, sweep_csv(&rows))])
}

/// Stages every file in `dir` and renames them into place only once all
/// writes succeeded; staged files are removed on any failure.
fn write_outputs(dir: &Path, files: &[(&str, String)]) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| runtime(file_error(dir)(e)))?;
    let mut staged = Vec::with_capacity(files.len());
    for (name, body) in files {
        let mut tmp = NamedTempFile::new_in(dir).map_err(|e| runtime(e.into()))?;
        tmp.write_all(body.as_bytes())
            .and_then(|_| tmp.as_file().sync_all())
            .map_err(|e| runtime(e.into()))?;
        staged.push((tmp, dir.join(name)));
    }
    let mut done: Vec<PathBuf> = Vec::new();
    for (tmp, dest) in staged {
        if let Err(e) = tmp.persist(&dest) {
            for p in &done {
                let _ = fs::remove_file(p);
            }
            return Err(runtime(e.error.into()));
        }
        done.push(dest);
    }
    Ok(())
}

pub fn series_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("t,policy,mean,d1,d9\n");
    for p in &report.policies {
        for t in 0..p.band.len() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                t + 1,
                p.label,
                p.band.mean[t],
                p.band.d1[t],
                p.band.d9[t]
            );
        }
    }
    out
}

pub fn summary_csv(report: &ExperimentReport) -> String {
    let mut out =
        String::from("policy,final_mean,final_d1,final_d9,cum_cost,opt_cost,regret,bound\n");
    for p in &report.policies {
        let (mean, d1, d9) = p.final_ratio();
        let bound = p.bound.map(|b| b.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{mean},{d1},{d9},{},{},{},{bound}",
            p.label, p.mean_cumulative_cost, report.opt_cost, p.mean_regret
        );
    }
    out
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("variant,rate,cache,eta,final_mean,final_d1,final_d9\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.variant.name(),
            r.rate,
            r.cache,
            r.eta,
            r.mean,
            r.d1,
            r.d9
        );
    }
    out
}
