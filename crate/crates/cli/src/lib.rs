//! Subcommands of the `gtring` binary.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use gtring::accuracy::{verify_with, AccuracyError, VerifySummary};
use gtring::config::MemoryShape;
use gtring::memory_model::{bytes_for_entries, MemoryError, MemoryPlan};
use gtring::perf_model::{
    predict_elapsed, ring_shape, run_sweep, sweep_config, PerfError, SweepOutcome, SweepWorld,
};
use gtring::ring_engine::{run_rank, Faults};
use gtring::transport::{TcpEndpoint, TcpRendezvous, TransportError};
use gtring::{
    run_experiment_with, ConfigError, EngineError, ExperimentConfig, ExperimentReport, RunOptions,
    TransportKind,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;
pub const EXIT_DEADLOCK: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Accuracy(#[from] AccuracyError),
    #[error(transparent)]
    Perf(#[from] PerfError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("cannot write {path}: {reason}")]
    Output { path: PathBuf, reason: String },
    #[error("worker process: {0}")]
    Worker(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => EXIT_CONFIG,
            CliError::Engine(e) | CliError::Accuracy(AccuracyError::Engine(e)) => engine_code(e),
            CliError::Perf(PerfError::Engine(e)) => engine_code(e),
            CliError::Perf(PerfError::Config(_)) => EXIT_CONFIG,
            _ => EXIT_FAILURE,
        }
    }
}

fn engine_code(e: &EngineError) -> i32 {
    match e {
        EngineError::Config(_) => EXIT_CONFIG,
        EngineError::Deadlock { .. } => EXIT_DEADLOCK,
        _ => EXIT_FAILURE,
    }
}

#[derive(Debug, Parser)]
#[command(name = "gtring", version, about = "Pipeline-ring accumulation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Run one experiment and write report.json, counters.csv and memory.csv.
    Run(RunArgs),
    /// Compare distributed runs against the serial oracle over several seeds.
    Verify(VerifyArgs),
    /// Time a sub-ring sweep on the simulated network; writes sweep.csv and fit.json.
    Sweep(SweepArgs),
    /// Closed-form memory plan for the configured shape.
    Memreport(Common),
    /// Model-predicted elapsed time per sub-ring size; writes predict.csv.
    Predict(SweepArgs),
    #[command(hide = true)]
    Worker(WorkerArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// inprocess, sim or tcp.
    #[arg(long)]
    pub transport: Option<TransportKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Deliberate defects for negative controls.
#[derive(Debug, Clone, Default, Args)]
pub struct FaultArgs {
    /// Add one to entry K1,K2,K3 of the reduced tensor.
    #[arg(long, hide = true, value_parser = parse_triple)]
    pub corrupt_entry: Option<[usize; 3]>,
    /// Run one ring step fewer than required.
    #[arg(long, hide = true)]
    pub skip_ring_step: bool,
    /// RANK,LANE sends on a tag nobody receives.
    #[arg(long, hide = true, value_parser = parse_pair)]
    pub mistag_lane: Option<(usize, usize)>,
}

impl FaultArgs {
    fn faults(&self) -> Faults {
        Faults {
            skip_ring_step: self.skip_ring_step,
            corrupt_entry: self.corrupt_entry,
            mistag_lane: self.mistag_lane,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: Common,
    /// With the tcp transport, run every other rank as a separate process.
    #[arg(long)]
    pub processes: bool,
    #[command(flatten)]
    pub faults: FaultArgs,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    #[command(flatten)]
    pub faults: FaultArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    /// Comma-separated sub-ring sizes.
    #[arg(long, value_delimiter = ',')]
    pub subrings: Vec<usize>,
    /// Give every point a single sub-ring (world size = S) instead of the
    /// configured world size.
    #[arg(long)]
    pub world_per_point: bool,
}

#[derive(Debug, Clone, Args)]
pub struct WorkerArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub rank: usize,
    #[arg(long)]
    pub root: SocketAddr,
    #[command(flatten)]
    pub faults: FaultArgs,
}

fn parse_triple(s: &str) -> Result<[usize; 3], String> {
    let v = parse_list(s)?;
    v.try_into().map_err(|_| format!("expected K1,K2,K3, got {s:?}"))
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    match parse_list(s)?.as_slice() {
        &[a, b] => Ok((a, b)),
        _ => Err(format!("expected RANK,LANE, got {s:?}")),
    }
}

fn parse_list(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|e| format!("{p:?}: {e}")))
        .collect()
}

/// Load the configuration and apply command-line overrides.
pub fn load_config(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(t) = common.transport {
        cfg.transport = t;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| output_error(&dir, e))?;
    Ok(dir)
}

fn output_error(path: &Path, e: impl ToString) -> CliError {
    CliError::Output {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| output_error(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| output_error(path, e))?;
    write_text(path, &(text + "\n"))
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| output_error(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| output_error(path, e))?;
    }
    w.flush().map_err(|e| output_error(path, e))
}

#[derive(Serialize)]
struct CounterRow<'a> {
    scope: &'a str,
    rank: Option<usize>,
    lane: Option<usize>,
    envelopes_sent: u64,
    envelopes_received: u64,
    bytes_sent: u64,
    bytes_received: u64,
    accumulations_applied: u64,
    wait_s: f64,
    accumulate_s: f64,
    total_s: f64,
}

impl<'a> CounterRow<'a> {
    fn new(
        scope: &'a str,
        rank: Option<usize>,
        lane: Option<usize>,
        c: &gtring::instrument::CounterSet,
    ) -> Self {
        Self {
            scope,
            rank,
            lane,
            envelopes_sent: c.envelopes_sent,
            envelopes_received: c.envelopes_received,
            bytes_sent: c.bytes_sent,
            bytes_received: c.bytes_received,
            accumulations_applied: c.accumulations_applied,
            wait_s: c.wait_s,
            accumulate_s: c.accumulate_s,
            total_s: c.total_s,
        }
    }
}

/// Write report.json, counters.csv and memory.csv into `dir`.
pub fn write_report(dir: &Path, report: &ExperimentReport) -> Result<(), CliError> {
    write_text(&dir.join("report.json"), &(report.to_json() + "\n"))?;
    let mut rows = vec![CounterRow::new("global", None, None, &report.totals)];
    for r in &report.ranks {
        rows.push(CounterRow::new("rank", Some(r.world_rank), None, &r.counters));
        for (lane, c) in r.lanes.iter().enumerate() {
            rows.push(CounterRow::new("lane", Some(r.world_rank), Some(lane), c));
        }
    }
    write_csv(&dir.join("counters.csv"), rows)?;
    write_csv(
        &dir.join("memory.csv"),
        report.memory.ranks.iter().flat_map(|r| r.series.iter()),
    )
}

pub fn cmd_run(args: &RunArgs) -> Result<ExperimentReport, CliError> {
    let cfg = load_config(&args.common)?;
    let options = RunOptions {
        faults: args.faults.faults(),
        ..RunOptions::default()
    };
    let report = if args.processes {
        if cfg.transport != TransportKind::Tcp {
            return Err(CliError::Usage("--processes needs --transport tcp".into()));
        }
        run_processes(&cfg, args, &options)?
    } else {
        run_experiment_with(&cfg, &options)?
    };
    write_report(&out_dir(&cfg)?, &report)?;
    Ok(report)
}

/// Rank 0 in this process, every other rank in a spawned worker.
fn run_processes(
    cfg: &ExperimentConfig,
    args: &RunArgs,
    options: &RunOptions,
) -> Result<ExperimentReport, CliError> {
    let rendezvous = TcpRendezvous::bind(cfg.rendezvous.as_str()).map_err(EngineError::from)?;
    let root = rendezvous.local_addr().map_err(EngineError::from)?;
    let exe = std::env::current_exe().map_err(|e| CliError::Worker(e.to_string()))?;
    let mut children: Vec<Child> = Vec::new();
    for rank in 1..cfg.world_size {
        let mut cmd = Command::new(&exe);
        cmd.arg("worker")
            .arg("--config")
            .arg(&args.common.config)
            .args(["--transport", "tcp"])
            .args(["--seed", &cfg.seed.to_string()])
            .args(["--rank", &rank.to_string()])
            .args(["--root", &root.to_string()]);
        if args.faults.skip_ring_step {
            cmd.arg("--skip-ring-step");
        }
        if let Some((r, l)) = args.faults.mistag_lane {
            cmd.args(["--mistag-lane", &format!("{r},{l}")]);
        }
        match cmd.spawn() {
            Ok(child) => children.push(child),
            Err(e) => {
                reap(children);
                return Err(CliError::Worker(e.to_string()));
            }
        }
    }
    let result = TcpEndpoint::root(rendezvous, cfg.world_size)
        .map_err(EngineError::from)
        .and_then(|ep| run_rank(cfg, options, ep));
    let statuses = reap(children);
    let report = result?.ok_or_else(|| CliError::Worker("rank 0 produced no report".into()))?;
    if let Some(bad) = statuses.iter().find(|s| !s.success()) {
        return Err(CliError::Worker(format!("a worker exited with {bad}")));
    }
    Ok(report)
}

fn reap(children: Vec<Child>) -> Vec<std::process::ExitStatus> {
    children
        .into_iter()
        .filter_map(|mut c| c.wait().ok())
        .collect()
}

pub fn cmd_worker(args: &WorkerArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.common)?;
    let options = RunOptions {
        faults: args.faults.faults(),
        ..RunOptions::default()
    };
    let ep: Arc<TcpEndpoint> = TcpEndpoint::join(args.root, args.rank, cfg.world_size)
        .map_err(|e: TransportError| EngineError::from(e))?;
    run_rank(&cfg, &options, ep)?;
    Ok(())
}

pub fn cmd_verify(args: &VerifyArgs) -> Result<VerifySummary, CliError> {
    if args.runs == 0 {
        return Err(CliError::Usage("--runs must be at least 1".into()));
    }
    let cfg = load_config(&args.common)?;
    let options = RunOptions {
        faults: args.faults.faults(),
        ..RunOptions::default()
    };
    let summary = verify_with(&cfg, args.runs, &options)?;
    write_json(&out_dir(&cfg)?.join("verify.json"), &summary)?;
    Ok(summary)
}

fn sweep_sizes(args: &SweepArgs) -> Result<(ExperimentConfig, SweepWorld), CliError> {
    if args.subrings.is_empty() {
        return Err(CliError::Usage("--subrings needs at least one size".into()));
    }
    let cfg = load_config(&args.common)?;
    let world = if args.world_per_point {
        SweepWorld::SingleSubring
    } else {
        SweepWorld::Configured
    };
    Ok((cfg, world))
}

#[derive(Serialize)]
struct SweepRow {
    #[serde(rename = "S")]
    s: usize,
    n_meas: u64,
    msg_bytes: u64,
    elapsed_s: f64,
    #[serde(rename = "eff_bw_Bps")]
    eff_bw_bps: f64,
    predicted_s: f64,
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<SweepOutcome, CliError> {
    let (cfg, world) = sweep_sizes(args)?;
    let outcome = run_sweep(&cfg, &args.subrings, world)?;
    let dir = out_dir(&cfg)?;
    write_csv(
        &dir.join("sweep.csv"),
        outcome.points.iter().map(|p| SweepRow {
            s: p.subring_size,
            n_meas: p.n_meas,
            msg_bytes: p.msg_bytes,
            elapsed_s: p.elapsed_s,
            eff_bw_bps: p.eff_bw_bps,
            predicted_s: p.predicted_s,
        }),
    )?;
    write_json(
        &dir.join("fit.json"),
        &serde_json::json!({ "fit": outcome.fit, "rejected": outcome.rejected }),
    )?;
    Ok(outcome)
}

#[derive(Debug, Clone, Serialize)]
pub struct PredictRow {
    #[serde(rename = "S")]
    pub s: usize,
    pub n_meas: u64,
    pub msg_bytes: u64,
    pub predicted_s: f64,
}

/// Sub-ring sizes that failed validation, with the reason.
pub type RejectedSizes = Vec<(usize, String)>;

/// Predictions for every valid size, plus `(size, reason)` for the rest.
pub fn cmd_predict(args: &SweepArgs) -> Result<(Vec<PredictRow>, RejectedSizes), CliError> {
    let (cfg, world) = sweep_sizes(args)?;
    let mut rows = Vec::new();
    let mut rejected = Vec::new();
    for &s in &args.subrings {
        match sweep_config(&cfg, s, world) {
            Ok(point) => {
                let shape = ring_shape(&point)?;
                rows.push(PredictRow {
                    s,
                    n_meas: shape.n_meas,
                    msg_bytes: shape.msg_bytes,
                    predicted_s: predict_elapsed(&shape, &point.link)?,
                });
            }
            Err(e) => rejected.push((s, e.to_string())),
        }
    }
    write_csv(&out_dir(&cfg)?.join("predict.csv"), rows.iter())?;
    Ok((rows, rejected))
}

/// The plan for `memory_shape` when given, else for the configured space;
/// `p` is the sub-ring size.
pub fn memory_plan(cfg: &ExperimentConfig) -> Result<MemoryPlan, CliError> {
    let p = cfg.subring_size as u64;
    let lanes = cfg.lanes as u64;
    Ok(match cfg.memory_shape {
        Some(MemoryShape {
            gt_entries,
            gsigma_matrix_bytes,
        }) => MemoryPlan::new(
            bytes_for_entries(gt_entries, gtring::index_tensor::ENTRY_BYTES as u64),
            p,
            gsigma_matrix_bytes,
            lanes,
        )?,
        None => MemoryPlan::for_space(cfg.space()?, cfg.subring_size, lanes)?,
    })
}

pub fn cmd_memreport(args: &Common) -> Result<MemoryPlan, CliError> {
    let cfg = load_config(args)?;
    let plan = memory_plan(&cfg)?;
    write_json(&out_dir(&cfg)?.join("memory_plan.json"), &plan)?;
    Ok(plan)
}

fn gb(bytes: u64) -> String {
    format!("{:.2} GB", bytes as f64 / 1e9)
}

/// Run the parsed command, print a short summary, and return the exit code.
pub fn execute(cli: Cli) -> i32 {
    let result = match &cli.command {
        Cmd::Run(a) => cmd_run(a).map(|r| {
            println!(
                "ran {} ranks ({} per sub-ring, {} lanes, {} measurements): {} accumulations, {:.6} s ring time ({:?} clock)",
                r.config.world_size,
                r.config.subring_size,
                r.config.lanes,
                r.config.measurements,
                r.totals.accumulations_applied,
                r.elapsed_s,
                r.clock,
            );
            EXIT_OK
        }),
        Cmd::Verify(a) => cmd_verify(a).map(|s| {
            println!("runs: {}", s.runs.len());
            println!("L1 real: {}", s.l1_real);
            println!("L1 imag: {}", s.l1_imag);
            println!("L2 real: {}", s.l2_real);
            println!("L2 imag: {}", s.l2_imag);
            if s.pass {
                println!("PASS");
                EXIT_OK
            } else {
                println!("FAIL");
                EXIT_VERIFY
            }
        }),
        Cmd::Sweep(a) => cmd_sweep(a).map(|o| {
            for r in &o.rejected {
                eprintln!("rejected S={}: {}", r.subring_size, r.reason);
            }
            for p in &o.points {
                println!(
                    "S={:<4} elapsed {:.6} s  predicted {:.6} s  eff_bw {:.3e} B/s",
                    p.subring_size, p.elapsed_s, p.predicted_s, p.eff_bw_bps
                );
            }
            match o.fit {
                Some(f) => println!(
                    "fit: elapsed = {:.6e} * S + {:.6e}, r^2 = {:.4}",
                    f.slope, f.intercept, f.r_squared
                ),
                None => println!("fit: needs two distinct sizes"),
            }
            EXIT_OK
        }),
        Cmd::Predict(a) => cmd_predict(a).map(|(rows, rejected)| {
            for (s, reason) in rejected {
                eprintln!("rejected S={s}: {reason}");
            }
            for r in rows {
                println!("S={:<4} predicted {:.6} s", r.s, r.predicted_s);
            }
            EXIT_OK
        }),
        Cmd::Memreport(a) => cmd_memreport(a).map(|p| {
            println!("G_t total:              {}", gb(p.gt_bytes_total));
            println!("G_t slice (p={}):        {}", p.ranks_per_subring, gb(p.gt_bytes_per_rank));
            println!("G_sigma original:       {}", gb(p.original.gsigma_bytes));
            println!("G_sigma distributed:    {}", gb(p.distributed.gsigma_bytes));
            println!("G_sigma 2-buffer count: {}", gb(p.distributed_alternate.gsigma_bytes));
            println!("total original:         {}", gb(p.original.total_bytes));
            println!("total distributed:      {}", gb(p.distributed.total_bytes));
            println!("break-even lanes:       {:.2}", p.break_even_lanes);
            EXIT_OK
        }),
        Cmd::Worker(a) => cmd_worker(a).map(|()| EXIT_OK),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        e.exit_code()
    })
}
