//! Command line front end.
//!
//! Experiment subcommands resolve a spec (TOML config plus overrides, or
//! built-in defaults), run it, and write either the raw replication rows as
//! CSV or the full result document as JSON. `simulate` runs one instance,
//! `diagnose` replays window diagnostics over a saved dense trace. All
//! output is deterministic given the same config and seed; failures exit
//! nonzero with a one-line JSON error on stderr.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use bufq::engine::{
    check_decrease_bounds, drift_estimate, DecreaseViolation, DriftResult, WindowReport,
};
use bufq::experiments::export::{to_csv_string, to_json_string, write_csv, write_json};
use bufq::experiments::{
    buffer_compare, dynamics_study, load_spec, oracle_report, random_ensemble, symmetric_sweep,
    CompareResult, ExperimentError, ExperimentKind, ExperimentSpec,
};
use bufq::{run, BufferMode, Policy, RunOptions, SystemConfig, Trace, WindowSettings};

#[derive(Parser)]
#[command(
    name = "bufq",
    version,
    about = "Simulator and analysis toolkit for queues learning to route packets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one instance and write per-checkpoint summaries.
    Simulate(SimulateArgs),
    /// Symmetric-load sweep: queue buildup as the load ratio rises.
    Sweep(ExperimentArgs),
    /// Random-instance ensemble: buildup quantiles per load ratio.
    Ensemble(ExperimentArgs),
    /// The same instances with and without buffers.
    CompareBuffers(ExperimentArgs),
    /// Learning dynamics measured against certified equilibria.
    Dynamics(DynamicsArgs),
    /// Analytic reference values with a Monte Carlo cross-check.
    Oracle(ExperimentArgs),
    /// Window diagnostics and drift for a saved dense trace.
    Diagnose(DiagnoseArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    UnitBuffer,
    NoBuffer,
}

impl From<ModeArg> for BufferMode {
    fn from(mode: ModeArg) -> BufferMode {
        match mode {
            ModeArg::UnitBuffer => BufferMode::UnitBuffer,
            ModeArg::NoBuffer => BufferMode::NoBuffer,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Exp3,
    Exp3p,
    Uniform,
    Fixed,
}

#[derive(Args)]
struct ExperimentArgs {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Full-scale horizons and replication counts instead of desk scale.
    #[arg(long, conflicts_with = "config")]
    full_scale: bool,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Horizon override (steps per run).
    #[arg(long)]
    horizon: Option<u64>,
    /// Replication count override.
    #[arg(long)]
    reps: Option<u64>,
    /// Output file; stdout when omitted.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// csv: raw replication rows; json: the full result document.
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Aggregated summary rows as CSV.
    #[arg(long, value_name = "PATH")]
    summary_out: Option<PathBuf>,
}

#[derive(Args)]
struct DynamicsArgs {
    #[command(flatten)]
    common: ExperimentArgs,
    /// First replication's strategy trajectories as CSV.
    #[arg(long, value_name = "PATH")]
    trajectory_out: Option<PathBuf>,
    /// Per-profile equilibrium certification rows as CSV.
    #[arg(long, value_name = "PATH")]
    equilibria_out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Arrival rates, comma separated, one per queue.
    #[arg(long, value_delimiter = ',', required = true)]
    lambda: Vec<f64>,
    /// Service rates, comma separated, one per server.
    #[arg(long, value_delimiter = ',', required = true)]
    mu: Vec<f64>,
    #[arg(long, value_enum, default_value_t = ModeArg::UnitBuffer)]
    mode: ModeArg,
    #[arg(long, default_value_t = 10_000)]
    horizon: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = PolicyArg::Exp3)]
    policy: PolicyArg,
    /// Exploration rate; defaults to 1/sqrt(horizon).
    #[arg(long)]
    gamma: Option<f64>,
    /// High-probability confidence parameter (exp3p only).
    #[arg(long)]
    confidence: Option<f64>,
    /// Fixed strategies as '|'-separated rows: "0.7,0.3|0.4,0.6". One row is
    /// shared by every queue.
    #[arg(long, value_name = "ROWS")]
    fixed_probs: Option<String>,
    /// Number of checkpoint rows to keep.
    #[arg(long, default_value_t = 1000)]
    checkpoints: u64,
    /// Enable window diagnostics with default length and tolerance.
    #[arg(long)]
    windows: bool,
    /// Window length; implies --windows.
    #[arg(long)]
    window_length: Option<u64>,
    /// Window tolerance; implies --windows.
    #[arg(long)]
    delta: Option<f64>,
    /// Initial per-queue backlog, comma separated.
    #[arg(long, value_delimiter = ',')]
    backlog: Option<Vec<u64>>,
    /// Write the complete trace, per-step records included, as JSON.
    #[arg(long, value_name = "PATH")]
    dense_out: Option<PathBuf>,
    /// Output file; stdout when omitted.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// csv: checkpoint rows; json: the trace without per-step records.
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Dense trace JSON written by `simulate --dense-out`.
    #[arg(long, value_name = "PATH")]
    trace: PathBuf,
    /// Window length; defaults to the trace's settings, then ceil(sqrt(T)).
    #[arg(long)]
    window_length: Option<u64>,
    /// Window tolerance; same defaulting as --window-length.
    #[arg(long)]
    delta: Option<f64>,
    /// Check every sub-interval in condition 1 (quadratic cost).
    #[arg(long)]
    quadratic: bool,
    /// Potential threshold for the drift estimate; defaults to the window
    /// length.
    #[arg(long)]
    threshold: Option<f64>,
    /// Output file; stdout when omitted.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// csv: one row per window; json: windows, drift, and violations.
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

struct CliError {
    kind: &'static str,
    message: String,
}

impl CliError {
    fn new(kind: &'static str, message: impl Display) -> Self {
        CliError { kind, message: message.to_string() }
    }

    fn to_json(&self) -> String {
        serde_json::json!({ "error": self.kind, "message": self.message }).to_string()
    }
}

impl From<ExperimentError> for CliError {
    fn from(err: ExperimentError) -> Self {
        CliError::new("experiment", err)
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::new("io", err)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(err: serde_json::Error) -> Self {
        CliError::new("json", err)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            if matches!(err.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = err.print();
                return ExitCode::SUCCESS;
            }
            eprintln!(
                "{}",
                serde_json::json!({ "error": "usage", "message": err.to_string() })
            );
            return ExitCode::from(2);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.to_json());
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(args) => simulate(&args),
        Command::Sweep(args) => sweep(&args),
        Command::Ensemble(args) => ensemble(&args),
        Command::CompareBuffers(args) => compare_buffers(&args),
        Command::Dynamics(args) => dynamics(&args),
        Command::Oracle(args) => oracle(&args),
        Command::Diagnose(args) => diagnose(&args),
    }
}

/// Writes to the file when given, stdout otherwise.
fn emit(out: Option<&Path>, content: &str) -> Result<(), CliError> {
    match out {
        Some(path) => fs::write(path, content).map_err(CliError::from),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn resolve_spec(kind: ExperimentKind, args: &ExperimentArgs) -> Result<ExperimentSpec, CliError> {
    let mut spec = match &args.config {
        Some(path) => load_spec(path)?,
        None if args.full_scale => ExperimentSpec::full_scale(kind),
        None => ExperimentSpec::desk(kind),
    };
    if spec.kind != kind {
        return Err(CliError::new(
            "config",
            format!("config is for {:?}, which this subcommand does not run", spec.kind),
        ));
    }
    if let Some(seed) = args.seed {
        spec.master_seed = seed;
    }
    if let Some(horizon) = args.horizon {
        spec.horizon = horizon;
    }
    if let Some(reps) = args.reps {
        spec.replications = reps;
    }
    spec.validate()?;
    Ok(spec)
}

fn sweep(args: &ExperimentArgs) -> Result<(), CliError> {
    let spec = resolve_spec(ExperimentKind::SymmetricSweep, args)?;
    let result = symmetric_sweep(&spec)?;
    if let Some(path) = &args.summary_out {
        write_csv(&result.summary, path)?;
    }
    match args.format {
        Format::Csv => emit(args.out.as_deref(), &to_csv_string(&result.rows)?),
        Format::Json => emit(args.out.as_deref(), &to_json_string(&result)?),
    }
}

fn ensemble(args: &ExperimentArgs) -> Result<(), CliError> {
    let spec = resolve_spec(ExperimentKind::RandomEnsemble, args)?;
    let result = random_ensemble(&spec)?;
    if let Some(path) = &args.summary_out {
        write_csv(&result.summary, path)?;
    }
    match args.format {
        Format::Csv => emit(args.out.as_deref(), &to_csv_string(&result.rows)?),
        Format::Json => emit(args.out.as_deref(), &to_json_string(&result)?),
    }
}

fn compare_buffers(args: &ExperimentArgs) -> Result<(), CliError> {
    let spec = resolve_spec(ExperimentKind::BufferCompare, args)?;
    let result = buffer_compare(&spec)?;
    let (rows_csv, summary_csv) = match &result {
        CompareResult::Exceedance { rows, summary, .. } => {
            (to_csv_string(rows)?, to_csv_string(summary)?)
        }
        CompareResult::Clearing { rows, summary, .. } => {
            (to_csv_string(rows)?, to_csv_string(summary)?)
        }
    };
    if let Some(path) = &args.summary_out {
        fs::write(path, summary_csv)?;
    }
    match args.format {
        Format::Csv => emit(args.out.as_deref(), &rows_csv),
        Format::Json => emit(args.out.as_deref(), &to_json_string(&result)?),
    }
}

fn dynamics(args: &DynamicsArgs) -> Result<(), CliError> {
    let spec = resolve_spec(ExperimentKind::Dynamics, &args.common)?;
    let result = dynamics_study(&spec)?;
    if let Some(path) = &args.common.summary_out {
        write_csv(&result.summary, path)?;
    }
    if let Some(path) = &args.trajectory_out {
        write_csv(&result.trajectory_rows, path)?;
    }
    if let Some(path) = &args.equilibria_out {
        write_csv(&result.equilibrium_rows, path)?;
    }
    match args.common.format {
        Format::Csv => emit(args.common.out.as_deref(), &to_csv_string(&result.tv_rows)?),
        Format::Json => emit(args.common.out.as_deref(), &to_json_string(&result)?),
    }
}

fn oracle(args: &ExperimentArgs) -> Result<(), CliError> {
    if args.summary_out.is_some() {
        return Err(CliError::new("usage", "oracle has no summary output; its row is the summary"));
    }
    let spec = resolve_spec(ExperimentKind::Oracle, args)?;
    let report = oracle_report(&spec)?;
    match args.format {
        Format::Csv => emit(args.out.as_deref(), &to_csv_string(&[report.row()])?),
        Format::Json => emit(args.out.as_deref(), &to_json_string(&report)?),
    }
}

/// One checkpoint per CSV row; vector-valued columns are ';'-separated, and
/// per-queue strategy rows are further separated by '|'.
#[derive(Serialize)]
struct CheckpointRow {
    t: u64,
    total_queue: u64,
    /// Time average of the end-of-step total queue length so far.
    mean_total_queue: f64,
    queue_lengths: String,
    cumulative_arrivals: String,
    cumulative_served: String,
    occupied_steps: String,
    policies: String,
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

fn join_rows(rows: &[Vec<f64>]) -> String {
    rows.iter().map(|row| join(row)).collect::<Vec<_>>().join("|")
}

fn checkpoint_rows(trace: &Trace) -> Vec<CheckpointRow> {
    trace
        .checkpoints
        .iter()
        .map(|c| CheckpointRow {
            t: c.t,
            total_queue: c.queue_lengths.iter().sum(),
            mean_total_queue: c.cum_queue_steps as f64 / c.t.max(1) as f64,
            queue_lengths: join(&c.queue_lengths),
            cumulative_arrivals: join(&c.cumulative_arrivals),
            cumulative_served: join(&c.cumulative_served),
            occupied_steps: join(&c.occupied_steps),
            policies: join_rows(&c.policy_distributions),
        })
        .collect()
}

fn parse_fixed_rows(raw: &str, queues: usize, servers: usize) -> Result<Vec<Vec<f64>>, CliError> {
    let rows: Result<Vec<Vec<f64>>, CliError> = raw
        .split('|')
        .map(|row| {
            row.split(',')
                .map(|x| {
                    x.trim()
                        .parse::<f64>()
                        .map_err(|e| CliError::new("policy", format!("bad probability {x:?}: {e}")))
                })
                .collect()
        })
        .collect();
    let mut rows = rows?;
    if rows.len() == 1 && queues > 1 {
        rows = vec![rows[0].clone(); queues];
    }
    if rows.len() != queues {
        return Err(CliError::new(
            "policy",
            format!("{} strategy rows for {queues} queues", rows.len()),
        ));
    }
    if let Some(row) = rows.iter().find(|row| row.len() != servers) {
        return Err(CliError::new(
            "policy",
            format!("strategy row {row:?} does not cover {servers} servers"),
        ));
    }
    Ok(rows)
}

fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let config = SystemConfig::new(
        args.lambda.clone(),
        args.mu.clone(),
        args.mode.into(),
        args.horizon,
        args.seed,
    )
    .map_err(|e| CliError::new("model", e))?;
    let n = config.queues();
    let m = config.servers();
    let gamma = args
        .gamma
        .unwrap_or_else(|| (1.0 / (args.horizon.max(1) as f64).sqrt()).min(1.0));

    let make_policy = |queue: usize| -> Result<Policy, CliError> {
        let built = match args.policy {
            PolicyArg::Exp3 => Policy::exp3(m, gamma),
            PolicyArg::Exp3p => {
                Policy::exp3p(m, gamma, args.confidence.unwrap_or(0.05), args.horizon)
            }
            PolicyArg::Uniform => Policy::uniform(m),
            PolicyArg::Fixed => {
                let raw = args.fixed_probs.as_deref().ok_or_else(|| {
                    CliError::new("policy", "--policy fixed requires --fixed-probs")
                })?;
                let rows = parse_fixed_rows(raw, n, m)?;
                Policy::fixed_mix(rows[queue].clone())
            }
        };
        built.map_err(|e| CliError::new("policy", e))
    };
    let policies: Vec<Policy> = (0..n).map(make_policy).collect::<Result<_, _>>()?;

    let window = if args.windows || args.window_length.is_some() || args.delta.is_some() {
        let mut settings = WindowSettings::defaults_for(&config);
        if let Some(length) = args.window_length {
            settings.length = length;
        }
        if let Some(delta) = args.delta {
            settings.delta = delta;
        }
        Some(settings)
    } else {
        None
    };

    let options = RunOptions {
        checkpoint_stride: (args.horizon / args.checkpoints.max(1)).max(1),
        window,
        initial_backlog: args.backlog.clone(),
        record_dense: args.dense_out.is_some(),
    };
    let trace = run(&config, policies, &options).map_err(|e| CliError::new("engine", e))?;

    if let Some(path) = &args.dense_out {
        write_json(&trace, path)?;
    }
    match args.format {
        Format::Csv => emit(args.out.as_deref(), &to_csv_string(&checkpoint_rows(&trace))?),
        Format::Json => {
            // Per-step records only go to --dense-out; the document on
            // stdout stays at checkpoint granularity.
            let mut slim = trace;
            slim.dense = None;
            emit(args.out.as_deref(), &to_json_string(&slim)?)
        }
    }
}

/// One window per CSV row, vector diagnostics reduced to their extremes.
#[derive(Serialize)]
struct WindowRow {
    start: u64,
    length: u64,
    delta: f64,
    good: bool,
    cond1: bool,
    cond2: bool,
    cond3: bool,
    max_arrival_excess: f64,
    min_occupied_fraction: f64,
    served_total: u64,
    max_window_regret: f64,
    total_queue_start: u64,
    total_queue_end: u64,
    buffered_start: u64,
    buffered_end: u64,
    phi_start: f64,
    phi_end: f64,
    system_decrease: f64,
    violations: usize,
}

fn window_row(report: &WindowReport, violations: usize) -> WindowRow {
    let fold_max = |xs: &[f64]| xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    WindowRow {
        start: report.start,
        length: report.length,
        delta: report.delta,
        good: report.is_good(),
        cond1: report.cond1_holds,
        cond2: report.cond2_holds,
        cond3: report.cond3_holds,
        max_arrival_excess: fold_max(&report.arrival_excess),
        min_occupied_fraction: report
            .occupied_fraction
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min),
        served_total: report.served_count.iter().sum(),
        max_window_regret: fold_max(&report.window_regret),
        total_queue_start: report.queue_lengths_start.iter().sum(),
        total_queue_end: report.queue_lengths_end.iter().sum(),
        buffered_start: report.buffered_start,
        buffered_end: report.buffered_end,
        phi_start: report.phi_start,
        phi_end: report.phi_end,
        system_decrease: report.system_decrease(),
        violations,
    }
}

#[derive(Serialize)]
struct DiagnoseDocument {
    settings: WindowSettings,
    threshold: f64,
    window_count: usize,
    good_count: usize,
    drift: DriftResult,
    violations: Vec<DecreaseViolation>,
    windows: Vec<WindowReport>,
}

fn diagnose(args: &DiagnoseArgs) -> Result<(), CliError> {
    let raw = fs::read_to_string(&args.trace)?;
    let trace: Trace = serde_json::from_str(&raw)
        .map_err(|e| CliError::new("trace", format!("not a trace file: {e}")))?;
    let records = trace.dense.as_ref().ok_or_else(|| {
        CliError::new("trace", "trace has no per-step records; rerun simulate with --dense-out")
    })?;
    let config = &trace.config;
    let n = config.queues();

    let mut settings = trace
        .window_settings
        .clone()
        .unwrap_or_else(|| WindowSettings::defaults_for(config));
    if let Some(length) = args.window_length {
        settings.length = length;
    }
    if let Some(delta) = args.delta {
        settings.delta = delta;
    }
    settings.quadratic_condition1 = args.quadratic;
    if settings.length == 0 {
        return Err(CliError::new("usage", "window length must be at least 1"));
    }

    // Queue lengths before the first step: whatever arrived by time 0,
    // which is the cumulative arrival count minus the in-run arrivals.
    let mut backlog = vec![0u64; n];
    for (i, slot) in backlog.iter_mut().enumerate() {
        let in_run: u64 = records.iter().filter(|r| r.outcome.arrivals[i]).count() as u64;
        *slot = trace.final_state.queues[i].cumulative_arrivals - in_run;
    }

    let window = settings.length as usize;
    let mut reports = Vec::new();
    let mut violations = Vec::new();
    let mut per_window_violations = Vec::new();
    let mut start = 0usize;
    while start + window <= records.len() {
        let lengths_start = if start == 0 {
            backlog.clone()
        } else {
            records[start - 1].queue_lengths.clone()
        };
        let buffered_start = records[start]
            .outcome
            .buffer_pre_occupied
            .iter()
            .filter(|&&b| b)
            .count() as u64;
        let report = bufq::engine::window_report(
            config,
            &settings,
            start as u64,
            &lengths_start,
            buffered_start,
            &records[start..start + window],
        );
        let found = check_decrease_bounds(config, &report);
        per_window_violations.push(found.len());
        violations.extend(found);
        reports.push(report);
        start += window;
    }

    let threshold = args.threshold.unwrap_or(settings.length as f64);
    let scratch = Trace { window_reports: reports.clone(), ..trace.clone() };
    let drift = drift_estimate(&[scratch], settings.length, settings.delta, threshold);

    match args.format {
        Format::Csv => {
            let rows: Vec<WindowRow> = reports
                .iter()
                .zip(&per_window_violations)
                .map(|(report, &count)| window_row(report, count))
                .collect();
            emit(args.out.as_deref(), &to_csv_string(&rows)?)
        }
        Format::Json => {
            let good_count = reports.iter().filter(|r| r.is_good()).count();
            let document = DiagnoseDocument {
                settings,
                threshold,
                window_count: reports.len(),
                good_count,
                drift,
                violations,
                windows: reports,
            };
            emit(args.out.as_deref(), &to_json_string(&document)?)
        }
    }
}
