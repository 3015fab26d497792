//! Subcommands of the `stalepipe` binary and their exit codes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use stalepipe_core::graph::{EventStream, TimeOrder};
use stalepipe_core::pipeline::{
    solve_min_staleness_with, speedup_estimate, C1Orientation, Dependency, PipelineError, Resource, StageProfile, StalenessPlan,
};
use stalepipe_core::sim::{simulate, utilization, verify_no_stall, Trace, TraceRecord};
use stalepipe_core::trainer::{train_with_state, IterationMetrics, RunReport};
use stalepipe_core::{fixtures, MemoryStore};

use crate::config::{self, fixture_profile, load_dataset, ConfigError, DatasetSource, LoadError, PlanSource, ProfileSource, RunConfig};
use crate::exec::{execute, GatePolicy, SleepWorkload};
use crate::formats::{self, FormatError, ModelCheckpoint, ProfileFile};
use crate::profiling::{self, ProfileError, DEFAULT_WARMUP};
use crate::workload::{train_pipelined, PipelineOptions};

// ---------------------------------------------------------------------------
// Errors and exit codes

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    Usage = 2,
    Data = 3,
    Infeasible = 4,
    Runtime = 5,
}

impl Exit {
    pub fn name(self) -> &'static str {
        match self {
            Exit::Ok => "ok",
            Exit::Usage => "usage",
            Exit::Data => "data",
            Exit::Infeasible => "infeasible",
            Exit::Runtime => "runtime",
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub exit: Exit,
    pub message: String,
}

impl CliError {
    pub fn new(exit: Exit, message: impl Into<String>) -> Self {
        CliError { exit, message: message.into() }
    }

    /// One line for stderr: `error[<code>:<kind>] <message>`.
    pub fn line(&self) -> String {
        format!("error[{}:{}] {}", self.exit as u8, self.exit.name(), self.message)
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        let exit = if e.is_missing_file() { Exit::Usage } else { Exit::Data };
        CliError::new(exit, e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::new(Exit::Usage, e.to_string())
    }
}

impl From<LoadError> for CliError {
    fn from(e: LoadError) -> Self {
        match e {
            LoadError::Config(e) => e.into(),
            LoadError::Format(e) => e.into(),
            LoadError::Graph(e) => CliError::new(Exit::Data, e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let exit = match e {
            PipelineError::Infeasible { .. } => Exit::Infeasible,
            PipelineError::InvalidProfile(_) | PipelineError::InvalidPlan { .. } | PipelineError::PlanLength { .. } => Exit::Data,
            PipelineError::NoIterations => Exit::Usage,
        };
        CliError::new(exit, e.to_string())
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::new(Exit::Runtime, e.to_string())
}

impl From<ProfileError> for CliError {
    fn from(e: ProfileError) -> Self {
        match e {
            ProfileError::WarmupTooLong { .. } => CliError::new(Exit::Usage, e.to_string()),
            ProfileError::Pipeline(p) => p.into(),
            other => runtime(other),
        }
    }
}

type CliResult = Result<(), CliError>;

// ---------------------------------------------------------------------------
// Arguments

#[derive(Debug, Parser)]
#[command(name = "stalepipe", version, about = "Staleness-aware pipelined training of memory-based temporal GNNs")]
pub struct Cli {
    /// Output directory (overrides STALEPIPE_OUT_DIR and config files).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate an event CSV (or generate a synthetic graph) and write a dataset bundle.
    Ingest(IngestArgs),
    /// Measure or look up per-stage times and write a profile.
    Profile(ProfileArgs),
    /// Solve the minimal staleness bound for a profile.
    Solve(SolveArgs),
    /// Simulate the pipeline (or run it with sleeping stages) and write a trace.
    Simulate(SimulateArgs),
    /// Train on a dataset and write metrics, checkpoints and a run summary.
    Run(RunArgs),
    /// Aggregate finished runs into one report.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Event CSV with header src,dst,ts,label,f0..
    #[arg(required_unless_present = "fixture", conflicts_with = "fixture")]
    pub csv: Option<PathBuf>,
    /// Generate a synthetic graph instead: toy or wiki.
    #[arg(long)]
    pub fixture: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dataset name recorded in the manifest.
    #[arg(long)]
    pub name: Option<String>,
    /// Stable-sort events by time instead of rejecting out-of-order rows.
    #[arg(long)]
    pub sort: bool,
}

#[derive(Debug, Args)]
#[group(id = "source", required = true, multiple = false)]
pub struct ProfileSourceArgs {
    /// Bundled breakdown, e.g. tgn/reddit.
    #[arg(long, group = "source")]
    pub fixture: Option<String>,
    /// Sleep workload with these five stage times in ms.
    #[arg(long, group = "source", value_delimiter = ',', num_args = 5)]
    pub sleep: Option<Vec<f64>>,
    /// Measure training stages on a dataset (fixture name or path).
    #[arg(long, group = "source")]
    pub train: Option<String>,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub source: ProfileSourceArgs,
    /// Run config supplying training settings for --train.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 60)]
    pub iterations: usize,
    #[arg(long, default_value_t = DEFAULT_WARMUP)]
    pub warmup: usize,
    /// Output file; defaults to profile.json in the output directory.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[group(id = "profile_in", multiple = false)]
pub struct ProfileInput {
    /// Profile JSON file.
    #[arg(long, group = "profile_in")]
    pub profile: Option<PathBuf>,
    /// Bundled breakdown, e.g. tgn/reddit.
    #[arg(long, group = "profile_in")]
    pub fixture: Option<String>,
}

impl ProfileInput {
    fn load(&self) -> Result<StageProfile, CliError> {
        match (&self.profile, &self.fixture) {
            (Some(p), _) => Ok(formats::read_profile(p)?),
            (None, Some(name)) => Ok(fixture_profile(name)?),
            (None, None) => Err(CliError::new(Exit::Usage, "give --profile or --fixture")),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Orientation {
    Gate,
    Printed,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub input: ProfileInput,
    /// Solve every bundled breakdown and print a table.
    #[arg(long, conflicts_with_all = ["profile", "fixture"])]
    pub all: bool,
    #[arg(long, default_value_t = 200)]
    pub iterations: usize,
    /// Exclusive cap on the bound.
    #[arg(long, default_value_t = 5)]
    pub k_max: usize,
    #[arg(long, value_enum, default_value_t = Orientation::Gate)]
    pub orientation: Orientation,
    /// Output file; defaults to plan.json in the output directory.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[group(id = "gate", multiple = false)]
pub struct GateArgs {
    /// Plan JSON file.
    #[arg(long, group = "gate")]
    pub plan: Option<PathBuf>,
    /// Constant bound k >= 1.
    #[arg(long, group = "gate")]
    pub k: Option<usize>,
    /// No gate at all.
    #[arg(long, group = "gate")]
    pub unbounded: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub input: ProfileInput,
    #[command(flatten)]
    pub gate: GateArgs,
    /// Defaults to the plan length, or 200.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Run sleeping stages on threads instead of simulating.
    #[arg(long)]
    pub live: bool,
    /// Multiplier on sleep times when live.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    /// Iterations in flight when live.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Slack for the live stall check, in ms.
    #[arg(long, default_value_t = 2.0)]
    pub eps_ms: f64,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run config JSON; defaults to a synchronous toy run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset fixture name or path, overriding the config.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Constant bound k >= 1, overriding the config's plan.
    #[arg(long, conflicts_with = "k_max")]
    pub k: Option<usize>,
    /// Solve the bound below this cap, overriding the config's plan.
    #[arg(long)]
    pub k_max: Option<usize>,
    /// Run stages on the live executor.
    #[arg(long)]
    pub live: bool,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Turn on mitigation with this lambda.
    #[arg(long)]
    pub mitigation: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
}

pub fn dispatch(cli: Cli) -> CliResult {
    let out = cli.out.as_deref();
    match cli.command {
        Command::Ingest(a) => ingest(&a, out),
        Command::Profile(a) => profile(&a, out),
        Command::Solve(a) => solve(&a, out),
        Command::Simulate(a) => simulate_cmd(&a, out),
        Command::Run(a) => run(&a, out),
        Command::Report(a) => report(&a, out),
    }
}

// ---------------------------------------------------------------------------
// ingest

fn ingest(a: &IngestArgs, out: Option<&Path>) -> CliResult {
    let dir = config::resolve_output_dir(out, None);
    let (stream, default_name) = match (&a.csv, &a.fixture) {
        (Some(csv), _) => {
            let order = if a.sort { TimeOrder::StableSort } else { TimeOrder::Strict };
            let name = csv.file_stem().map_or("events".into(), |s| s.to_string_lossy().into_owned());
            (formats::read_events_csv(csv, order, None)?, name)
        }
        (None, Some(f)) => (load_dataset(&DatasetSource::Fixture(f.clone()), a.seed)?, f.to_ascii_lowercase()),
        (None, None) => return Err(CliError::new(Exit::Usage, "give an event CSV or --fixture")),
    };
    let manifest = formats::write_bundle(&dir, a.name.as_deref().unwrap_or(&default_name), &stream)?;
    formats::print_bytes(format!("{}\n", serde_json::to_string_pretty(&manifest).expect("manifest serializes")).as_bytes());
    Ok(())
}

// ---------------------------------------------------------------------------
// profile

fn dataset_from_arg(s: &str) -> DatasetSource {
    let p = PathBuf::from(s);
    if p.exists() || s.contains('/') || s.ends_with(".csv") {
        DatasetSource::Path(p)
    } else {
        DatasetSource::Fixture(s.into())
    }
}

fn read_run_config(path: &Path) -> Result<RunConfig, CliError> {
    let cfg: RunConfig = formats::read_json(path)?;
    cfg.validate().map_err(|e| CliError::new(Exit::Usage, format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

fn profile(a: &ProfileArgs, out: Option<&Path>) -> CliResult {
    let src = &a.source;
    let p = if let Some(name) = &src.fixture {
        fixture_profile(name)?
    } else if let Some(t) = &src.sleep {
        let truth = StageProfile::new([t[0], t[1], t[2], t[3], t[4]])?;
        profiling::profile_sleep(&truth, a.iterations, a.warmup)?
    } else if let Some(ds) = &src.train {
        let cfg = match &a.config {
            Some(path) => read_run_config(path)?,
            None => RunConfig::toy(),
        };
        if a.warmup >= a.iterations {
            return Err(ProfileError::WarmupTooLong { warmup: a.warmup, iterations: a.iterations }.into());
        }
        let stream = load_dataset(&dataset_from_arg(ds), cfg.seed)?;
        profiling::profile_training(&stream, &cfg.train_config(0), a.iterations, a.warmup)?
    } else {
        return Err(CliError::new(Exit::Usage, "give --fixture, --sleep or --train"));
    };
    let path = a.output.clone().unwrap_or_else(|| config::resolve_output_dir(out, None).join("profile.json"));
    formats::write_profile(&path, &p)?;
    formats::print_bytes(format!("{}\n", serde_json::to_string_pretty(&ProfileFile::from_profile(&p)).expect("profile serializes")).as_bytes());
    Ok(())
}

// ---------------------------------------------------------------------------
// solve

fn orientation(o: Orientation) -> C1Orientation {
    match o {
        Orientation::Gate => C1Orientation::Gate,
        Orientation::Printed => C1Orientation::Printed,
    }
}

fn solve(a: &SolveArgs, out: Option<&Path>) -> CliResult {
    let dir = config::resolve_output_dir(out, None);
    if a.all {
        let mut text = String::from("profile           k  speedup\n");
        let mut infeasible = Vec::new();
        for b in fixtures::all_breakdowns() {
            let p = b.profile();
            match solve_min_staleness_with(&p, a.iterations, a.k_max, orientation(a.orientation)) {
                Ok(plan) => {
                    let name = b.name().replace('/', "_");
                    formats::write_json(&dir.join(format!("plan_{name}.json")), &plan)?;
                    let _ = writeln!(text, "{:<16} {:>2}  {:.2}", b.name(), plan.steady_k().unwrap_or(0), speedup_estimate(&p));
                }
                Err(e) => {
                    let _ = writeln!(text, "{:<16}  -  {:.2}  {e}", b.name(), speedup_estimate(&p));
                    infeasible.push(b.name());
                }
            }
        }
        formats::print_bytes(text.as_bytes());
        if !infeasible.is_empty() {
            return Err(CliError::new(Exit::Infeasible, format!("no feasible bound below {} for {}", a.k_max, infeasible.join(", "))));
        }
        return Ok(());
    }
    let p = a.input.load()?;
    let plan = solve_min_staleness_with(&p, a.iterations, a.k_max, orientation(a.orientation))?;
    let path = a.output.clone().unwrap_or_else(|| dir.join("plan.json"));
    formats::write_json(&path, &plan)?;
    formats::print_bytes(format!("k = {} (warmup {}, k_max {})\n", plan.steady_k().unwrap_or(0), plan.warmup, plan.k_max).as_bytes());
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub iterations: usize,
    pub mode: String,
    pub makespan_ms: f64,
    pub utilization: BTreeMap<String, f64>,
    pub stall_free: bool,
    pub stall_count: usize,
    pub first_stall: Option<usize>,
    pub gate_wait_ms: f64,
    /// Serial time over makespan; live runs measure the serial time too.
    pub speedup: f64,
    pub speedup_bound: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_in_flight: Option<usize>,
}

fn sim_metrics(trace: &Trace, mode: &str, warmup: usize, eps: f64, serial_ms: f64, bound: f64) -> SimMetrics {
    let stalls = verify_no_stall(trace, warmup, eps);
    let util = utilization(trace);
    let makespan = trace.makespan();
    SimMetrics {
        iterations: trace.iterations(),
        mode: mode.into(),
        makespan_ms: makespan,
        utilization: Resource::ALL.iter().map(|r| (r.name().to_string(), util[r.index()])).collect(),
        stall_free: stalls.stall_free,
        stall_count: stalls.stall_count,
        first_stall: stalls.first_stall,
        gate_wait_ms: trace.records.iter().map(|r| r.gate_wait_ms).sum(),
        speedup: serial_ms / makespan,
        speedup_bound: bound,
        max_in_flight: None,
    }
}

fn simulate_cmd(a: &SimulateArgs, out: Option<&Path>) -> CliResult {
    let p = a.input.load()?;
    let plan = match (&a.gate.plan, a.gate.k) {
        (Some(path), _) => Some(formats::read_plan(path)?),
        (None, Some(0)) => return Err(CliError::new(Exit::Usage, "k must be at least 1")),
        (None, Some(k)) => Some(StalenessPlan::constant(k, a.iterations.unwrap_or(200), k + 1)),
        (None, None) => None,
    };
    let n = a.iterations.or(plan.as_ref().map(|p| p.iterations())).unwrap_or(200);
    let (dep, gate, warmup, mode) = match &plan {
        Some(plan) => (Dependency::Bounded(plan), GatePolicy::Plan(plan.clone()), plan.warmup, format!("k={}", plan.steady_k().unwrap_or(0))),
        None if a.gate.unbounded => (Dependency::Unbounded, GatePolicy::Unbounded, 0, "unbounded".into()),
        None => (Dependency::Synchronous, GatePolicy::Synchronous, 0, "synchronous".into()),
    };
    let dir = config::resolve_output_dir(out, None);
    let bound = speedup_estimate(&p);
    let (trace, metrics) = if a.live {
        if a.scale.is_nan() || a.scale <= 0.0 {
            return Err(CliError::new(Exit::Usage, "scale must be positive"));
        }
        let work = SleepWorkload { profile: p, scale: a.scale };
        let workers = a.workers.unwrap_or(plan.as_ref().map_or(2, |p| p.k_max + 1));
        let serial = execute(&work, &GatePolicy::Synchronous, n, 1).map_err(runtime)?;
        let live = execute(&work, &gate, n, workers).map_err(runtime)?;
        let mut m = sim_metrics(&live.trace, &format!("live {mode}"), warmup, a.eps_ms, serial.wall_ms, bound);
        m.makespan_ms = live.wall_ms;
        m.speedup = serial.wall_ms / live.wall_ms;
        m.max_in_flight = Some(live.max_in_flight);
        (live.trace, m)
    } else {
        let trace = simulate(&p, dep, n).map_err(|e| match e {
            stalepipe_core::sim::SimError::Pipeline(p) => CliError::from(p),
            other => runtime(other),
        })?;
        let m = sim_metrics(&trace, &mode, warmup, 0.0, p.total() * n as f64, bound);
        (trace, m)
    };
    formats::write_trace_csv(&dir.join("trace.csv"), &trace)?;
    formats::write_json(&dir.join("metrics.json"), &metrics)?;
    formats::print_bytes(
        format!(
            "{}: makespan {:.1} ms, speedup {:.3} (bound {:.3}), stalls {}\n",
            metrics.mode, metrics.makespan_ms, metrics.speedup, metrics.speedup_bound, metrics.stall_count
        )
        .as_bytes(),
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// run

pub const RUN_FILE: &str = "run.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const STALENESS_FILE: &str = "staleness.csv";
pub const MODEL_FILE: &str = "model.json";
pub const STORE_FILE: &str = "store.json";
pub const TRACE_FILE: &str = "trace.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    /// Scheduler bound: reads see commits through `i - bound`.
    pub bound: usize,
    /// Iterations a read may miss; `bound - 1`.
    pub lag: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_max: Option<usize>,
    /// Profile the bound was solved for, unless it was measured.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub profile: Option<ProfileFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResults {
    pub iterations: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub val_ap: f64,
    pub mean_stale_err: f64,
    pub mean_stale_err_mitigated: f64,
    pub mitigated_reads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WallClock {
    pub total_ms: f64,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub epoch_ms: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub measured_profile: Option<ProfileFile>,
}

/// Contents of `run.json`. Everything except `wall_clock` is reproducible
/// from `config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub config_hash: String,
    pub plan: PlanSummary,
    pub results: RunResults,
    pub wall_clock: WallClock,
}

impl RunSummary {
    /// `run.json` without the wall-clock section.
    pub fn reproducible_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("summary serializes");
        v.as_object_mut().expect("object").remove("wall_clock");
        v
    }
}

fn apply_run_flags(a: &RunArgs, cfg: &mut RunConfig) {
    if let Some(d) = &a.dataset {
        cfg.dataset = dataset_from_arg(d);
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(k) = a.k {
        cfg.plan = PlanSource::Fixed { k };
    }
    if let Some(k_max) = a.k_max {
        cfg.plan = PlanSource::Solved { k_max };
    }
    if a.live {
        cfg.live = true;
    }
    if a.workers.is_some() {
        cfg.workers = a.workers;
    }
    if let Some(lambda) = a.mitigation {
        cfg.train.mitigation = Some(stalepipe_core::trainer::MitigationSettings { lambda, ..Default::default() });
    }
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub report: RunReport,
    pub store: MemoryStore,
    pub trace: Option<Trace>,
}

/// Resolves the plan, trains and collects results without touching disk.
pub fn execute_run(cfg: &RunConfig) -> Result<RunOutput, CliError> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let stream = load_dataset(&cfg.dataset, cfg.seed)?;
    let per_epoch = iterations_per_epoch(&stream, cfg)?;
    let (bound, plan, summary_profile, measured) = resolve_plan(cfg, &stream, per_epoch)?;
    let tc = cfg.train_config(bound - 1);
    let (report, store, trace, epoch_ms) = if cfg.live {
        let opts = PipelineOptions { plan: plan.clone(), workers: cfg.workers, record_params: false };
        let r = train_pipelined(&stream, &tc, &opts).map_err(runtime)?;
        let mut records = Vec::new();
        for (e, live) in r.epochs.iter().enumerate() {
            records.extend(live.trace.records.iter().map(|rec| TraceRecord { iteration: e * per_epoch + rec.iteration, ..*rec }));
        }
        let epoch_ms = r.epochs.iter().map(|l| l.wall_ms).collect();
        (r.report, r.store, Some(Trace { records }), epoch_ms)
    } else {
        let (report, state) = train_with_state(&stream, &tc, |_| {}).map_err(runtime)?;
        (report, state.store, None, Vec::new())
    };
    let (err, err_m) = report.mean_stale_err();
    let results = RunResults {
        iterations: report.iterations.len(),
        first_loss: report.iterations.first().map_or(0.0, |m| m.loss),
        final_loss: report.iterations.last().map_or(0.0, |m| m.loss),
        val_ap: report.val_ap,
        mean_stale_err: err,
        mean_stale_err_mitigated: err_m,
        mitigated_reads: report.iterations.iter().map(|m| m.mitigated).sum(),
    };
    let summary = RunSummary {
        config: cfg.clone(),
        config_hash: formats::config_hash(cfg),
        plan: PlanSummary {
            bound,
            lag: bound - 1,
            k_max: plan.as_ref().map(|p| p.k_max),
            profile: summary_profile.as_ref().map(ProfileFile::from_profile),
        },
        results,
        wall_clock: WallClock {
            total_ms: start.elapsed().as_secs_f64() * 1e3,
            epoch_ms,
            measured_profile: measured.as_ref().map(ProfileFile::from_profile),
        },
    };
    Ok(RunOutput { summary, report, store, trace })
}

fn iterations_per_epoch(stream: &EventStream, cfg: &RunConfig) -> Result<usize, CliError> {
    let (train, _, _) = stream.chronological_split(cfg.train.split).map_err(|e| CliError::new(Exit::Data, e.to_string()))?;
    Ok(train.len().div_ceil(cfg.train.batch_size))
}

type ResolvedPlan = (usize, Option<StalenessPlan>, Option<StageProfile>, Option<StageProfile>);

fn resolve_plan(cfg: &RunConfig, stream: &EventStream, per_epoch: usize) -> Result<ResolvedPlan, CliError> {
    match cfg.plan {
        PlanSource::Synchronous => Ok((1, None, None, None)),
        PlanSource::Fixed { k } => Ok((k, None, None, None)),
        PlanSource::Solved { k_max } => {
            let (profile, measured) = match &cfg.profile {
                ProfileSource::Fixture { name } => (fixture_profile(name)?, false),
                ProfileSource::File { path } => (formats::read_profile(path)?, false),
                ProfileSource::Measured { iterations, warmup } => {
                    (profiling::profile_training(stream, &cfg.train_config(0), *iterations, *warmup)?, true)
                }
            };
            let plan = stalepipe_core::pipeline::solve_min_staleness(&profile, per_epoch, k_max)?;
            let bound = plan.k.iter().copied().max().unwrap_or(1);
            let (kept, measured) = if measured { (None, Some(profile)) } else { (Some(profile), None) };
            Ok((bound, Some(plan), kept, measured))
        }
    }
}

/// Writes every run artifact into `dir`.
pub fn write_run(dir: &Path, out: &mut RunOutput) -> CliResult {
    let m: &[IterationMetrics] = &out.report.iterations;
    formats::write_file(&dir.join(METRICS_FILE), &formats::metrics_csv_bytes(m))?;
    formats::write_file(&dir.join(STALENESS_FILE), &formats::staleness_csv_bytes(m))?;
    formats::write_json(&dir.join(MODEL_FILE), &ModelCheckpoint::new(&out.report.params, out.summary.config_hash.clone()))?;
    formats::write_json(&dir.join(STORE_FILE), &out.store.checkpoint())?;
    if let Some(t) = &out.trace {
        formats::write_trace_csv(&dir.join(TRACE_FILE), t)?;
    }
    formats::write_json(&dir.join(RUN_FILE), &out.summary)?;
    Ok(())
}

fn run(a: &RunArgs, out: Option<&Path>) -> CliResult {
    let mut cfg = match &a.config {
        Some(p) => formats::read_json(p)?,
        None => RunConfig::toy(),
    };
    apply_run_flags(a, &mut cfg);
    let dir = cfg.resolve_output_dir(out);
    let mut output = execute_run(&cfg)?;
    write_run(&dir, &mut output)?;
    let r = &output.summary.results;
    formats::print_bytes(
        format!(
            "bound {} (lag {}): {} iterations, loss {:.4} -> {:.4}, val AP {:.4}, stale err {:.4} (mitigated {:.4})\n",
            output.summary.plan.bound,
            output.summary.plan.lag,
            r.iterations,
            r.first_loss,
            r.final_loss,
            r.val_ap,
            r.mean_stale_err,
            r.mean_stale_err_mitigated
        )
        .as_bytes(),
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRun {
    pub dir: PathBuf,
    pub bound: usize,
    pub lag: usize,
    pub mitigation: bool,
    pub val_ap: f64,
    pub final_loss: f64,
    pub mean_stale_err: f64,
    pub mean_stale_err_mitigated: f64,
    pub staleness_all_zero: bool,
    /// `[iter, err_frobenius, err_mitigated]` rows.
    pub staleness: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub profile: String,
    pub bound: f64,
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub runs: Vec<ReportRun>,
    pub speedup: Vec<SpeedupRow>,
}

pub fn build_report(dirs: &[PathBuf]) -> Result<Report, CliError> {
    let mut runs = Vec::new();
    for dir in dirs {
        let summary: RunSummary = formats::read_json(&dir.join(RUN_FILE))?;
        let rows = formats::read_staleness_csv(&dir.join(STALENESS_FILE))?;
        runs.push(ReportRun {
            dir: dir.clone(),
            bound: summary.plan.bound,
            lag: summary.plan.lag,
            mitigation: summary.config.train.mitigation.is_some(),
            val_ap: summary.results.val_ap,
            final_loss: summary.results.final_loss,
            mean_stale_err: summary.results.mean_stale_err,
            mean_stale_err_mitigated: summary.results.mean_stale_err_mitigated,
            staleness_all_zero: rows.iter().all(|r| r.err_frobenius == 0.0 && r.err_mitigated == 0.0),
            staleness: rows.iter().map(|r| [r.iter as f64, r.err_frobenius, r.err_mitigated]).collect(),
        });
    }
    let speedup = fixtures::all_breakdowns()
        .map(|b| {
            let p = b.profile();
            let k = stalepipe_core::pipeline::solve_min_staleness(&p, 200, 5).ok().and_then(|plan| plan.steady_k());
            SpeedupRow { profile: b.name(), bound: speedup_estimate(&p), k }
        })
        .collect();
    Ok(Report { runs, speedup })
}

pub fn report_text(r: &Report) -> String {
    let mut s = String::from("run                                bound  lag  mitig  val_ap  stale_err  mitigated  all_zero\n");
    for run in &r.runs {
        let _ = writeln!(
            s,
            "{:<34} {:>5} {:>4}  {:<5}  {:.4}  {:>9.4}  {:>9.4}  {}",
            run.dir.display(),
            run.bound,
            run.lag,
            if run.mitigation { "on" } else { "off" },
            run.val_ap,
            run.mean_stale_err,
            run.mean_stale_err_mitigated,
            run.staleness_all_zero
        );
    }
    s.push_str("\nprofile           k  speedup bound\n");
    for row in &r.speedup {
        let k = row.k.map_or("-".to_string(), |k| k.to_string());
        let _ = writeln!(s, "{:<16} {:>2}  {:.3}", row.profile, k, row.bound);
    }
    s
}

fn report(a: &ReportArgs, out: Option<&Path>) -> CliResult {
    let r = build_report(&a.runs)?;
    let dir = config::resolve_output_dir(out, None);
    let text = report_text(&r);
    formats::write_json(&dir.join("report.json"), &r)?;
    formats::write_file(&dir.join("report.txt"), text.as_bytes())?;
    formats::print_bytes(text.as_bytes());
    Ok(())
}
