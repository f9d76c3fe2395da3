use std::fmt;
use std::future::Future;
use std::pin::Pin;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering};
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    run_measurement, EngineError, LaneState, MeasurementContext, RingTopology, MAX_LANES,
};
use crate::config::{ConfigError, ExperimentConfig, TransportKind};
use crate::index_tensor::{make_partition, CombinedIndexSpace, GtSlice, ENTRY_BYTES};
use crate::instrument::{CounterSet, Instruments, OriginRecord};
use crate::memory_model::{Category, MemoryPlan, MemoryTracker, RankMemory};
use crate::transport::{
    block_on, ClockKind, Communicator, Endpoint, FabricStats, InProcFabric, LinkRecord, SimFabric,
    Tag, TcpEndpoint, TcpRendezvous, TransportError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbePoint {
    MeasurementStart,
    /// Just before the first ring step is posted.
    RingStart,
    /// Just after the last ring step's buffer swap.
    RingEnd,
    MeasurementEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeEvent {
    pub world_rank: usize,
    pub lane: usize,
    pub measurement: u64,
    pub point: ProbePoint,
}

/// Called synchronously on the lane's own execution context.
pub type ProbeHook = Arc<dyn Fn(ProbeEvent) + Send + Sync>;

/// Deliberate defects for negative-control tests.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Faults {
    /// Run `S - 2` ring steps per measurement instead of `S - 1`.
    pub skip_ring_step: bool,
    /// Add one to this `(k1, k2, k3)` entry of the reduced tensor.
    pub corrupt_entry: Option<[usize; 3]>,
    /// `(world_rank, lane)` that sends on a tag nobody receives, so its ring
    /// stalls.
    pub mistag_lane: Option<(usize, usize)>,
}

#[derive(Clone, Default)]
pub struct RunOptions {
    pub faults: Faults,
    pub hook: Option<ProbeHook>,
    /// Record the origin of every applied payload (in-process and simulated
    /// transports; under multi-process TCP only the local ranks are seen).
    pub trace_origins: bool,
    /// Send header-only envelopes and skip generation and accumulation;
    /// only timing and counts are meaningful.
    pub traffic_only: bool,
    /// Keep the simulated network's per-message log in the report.
    pub sim_log: bool,
}

impl fmt::Debug for RunOptions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RunOptions")
            .field("faults", &self.faults)
            .field("hook", &self.hook.is_some())
            .field("trace_origins", &self.trace_origins)
            .field("traffic_only", &self.traffic_only)
            .field("sim_log", &self.sim_log)
            .finish()
    }
}

/// A lane (or a rank outside its lanes) that stopped making progress.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StalledLane {
    pub rank: usize,
    pub lane: Option<usize>,
    pub phase: String,
    pub measurement: Option<u64>,
    pub step: Option<u64>,
}

impl StalledLane {
    pub(crate) fn list(stalled: &[StalledLane]) -> String {
        if stalled.is_empty() {
            return "none identified".into();
        }
        stalled
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(", ")
    }
}

impl fmt::Display for StalledLane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "rank {}", self.rank)?;
        if let Some(lane) = self.lane {
            write!(f, " lane {lane}")?;
        }
        write!(f, " in {}", self.phase)?;
        if let (Some(m), Some(s)) = (self.measurement, self.step) {
            write!(f, " at measurement {m} step {s}")?;
        }
        Ok(())
    }
}

const PHASE_SETUP: u8 = 0;
const PHASE_LANES: u8 = 1;
const PHASE_FINISH: u8 = 2;
const PHASE_DONE: u8 = 3;

fn phase_name(p: u8) -> &'static str {
    match p {
        PHASE_SETUP => "setup",
        PHASE_LANES => "ring",
        PHASE_FINISH => "final reduction",
        _ => "done",
    }
}

#[derive(Default)]
pub(crate) struct LaneProgress {
    measurement: AtomicU64,
    step: AtomicU64,
    done: AtomicBool,
}

impl LaneProgress {
    pub(crate) fn at(&self, measurement: u64, step: u64) {
        self.measurement.store(measurement, Ordering::Relaxed);
        self.step.store(step, Ordering::Relaxed);
    }
}

struct Progress {
    lanes: usize,
    ranks: Vec<AtomicU8>,
    cells: Vec<LaneProgress>,
}

impl Progress {
    fn new(ranks: usize, lanes: usize) -> Self {
        Self {
            lanes,
            ranks: (0..ranks).map(|_| AtomicU8::new(PHASE_SETUP)).collect(),
            cells: (0..ranks * lanes).map(|_| LaneProgress::default()).collect(),
        }
    }

    fn lane(&self, rank: usize, lane: usize) -> &LaneProgress {
        &self.cells[rank * self.lanes + lane]
    }

    fn enter(&self, rank: usize, phase: u8) {
        self.ranks[rank].store(phase, Ordering::Relaxed);
    }

    /// Ranks given by `local` that have not finished.
    fn stalled(&self, local: impl Iterator<Item = usize>) -> Vec<StalledLane> {
        let mut out = Vec::new();
        for rank in local {
            let phase = self.ranks[rank].load(Ordering::Relaxed);
            match phase {
                PHASE_DONE => {}
                PHASE_LANES => {
                    for lane in 0..self.lanes {
                        let p = self.lane(rank, lane);
                        if !p.done.load(Ordering::Relaxed) {
                            out.push(StalledLane {
                                rank,
                                lane: Some(lane),
                                phase: phase_name(phase).into(),
                                measurement: Some(p.measurement.load(Ordering::Relaxed)),
                                step: Some(p.step.load(Ordering::Relaxed)),
                            });
                        }
                    }
                }
                _ => out.push(StalledLane {
                    rank,
                    lane: None,
                    phase: phase_name(phase).into(),
                    measurement: None,
                    step: None,
                }),
            }
        }
        out
    }
}

/// State shared by every rank program in this process.
struct Job<'a> {
    config: &'a ExperimentConfig,
    options: &'a RunOptions,
    space: CombinedIndexSpace,
    instruments: Instruments,
    tracker: MemoryTracker,
    progress: Progress,
}

impl<'a> Job<'a> {
    fn new(config: &'a ExperimentConfig, options: &'a RunOptions) -> Result<Self, EngineError> {
        config.validate()?;
        let space = config.space()?;
        let world = config.world_size;
        let mut instruments = Instruments::new(world, config.lanes, config.instrument);
        if options.trace_origins {
            let expected = world as u64
                * config.lanes as u64
                * config.measurements
                * config.subring_size as u64;
            instruments = instruments.with_origin_trace(expected as usize);
        }
        Ok(Self {
            config,
            options,
            space,
            instruments,
            tracker: MemoryTracker::new(world),
            progress: Progress::new(world, config.lanes),
        })
    }

    fn steps(&self) -> usize {
        let s = self.config.subring_size - 1;
        if self.options.faults.skip_ring_step {
            s.saturating_sub(1)
        } else {
            s
        }
    }
}

struct RankState<E: Endpoint> {
    world: Communicator<E>,
    subring: Communicator<E>,
    position: Communicator<E>,
    topology: RingTopology,
    slice: Mutex<GtSlice>,
    slice_bytes: u64,
    ring_start: f64,
}

/// Per-rank record sent to world rank 0 at the end of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RankRecord {
    world_rank: usize,
    lanes: Vec<CounterSet>,
    memory: RankMemory,
    ring_elapsed_s: f64,
    slice_range: [usize; 2],
}

fn encode_record(record: &RankRecord, slice: Option<&GtSlice>) -> Vec<u8> {
    let json = serde_json::to_vec(record).expect("rank record serializes");
    let mut out = Vec::with_capacity(8 + json.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    if let Some(slice) = slice {
        out.extend_from_slice(&slice.encode());
    }
    out
}

fn decode_record(bytes: &[u8]) -> Result<(RankRecord, Option<GtSlice>), EngineError> {
    let bad = |m: String| TransportError::Protocol(format!("rank record: {m}"));
    if bytes.len() < 8 {
        return Err(bad("truncated".into()).into());
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let json = bytes.get(8..8 + len).ok_or_else(|| bad("truncated".into()))?;
    let record: RankRecord = serde_json::from_slice(json).map_err(|e| bad(e.to_string()))?;
    let rest = &bytes[8 + len..];
    let slice = if rest.is_empty() {
        None
    } else {
        Some(GtSlice::decode(rest)?)
    };
    Ok((record, slice))
}

async fn setup_rank<E: Endpoint>(
    world: Communicator<E>,
    job: &Job<'_>,
) -> Result<(RankState<E>, Vec<LaneState>), EngineError> {
    let cfg = job.config;
    let r = world.rank();
    let s = cfg.subring_size;
    let topology = RingTopology::new(cfg.world_size, s, r, cfg.lanes, cfg.direction)?;
    let subring = super::build_subrings(&world, s).await?;
    for lane in 0..cfg.lanes {
        let ring = topology.lane_ring(lane);
        subring.endpoint().prepare_channel(
            subring.context(),
            subring.world_rank_of(ring.recv_from)?,
            ring.recv_tag,
            2,
        );
    }
    // The world split doubles as a barrier: no lane sends until every peer
    // has prepared its receive channels.
    let position = world.split((r % s) as u32, r as u32).await?;

    let range = make_partition(job.space.len(), s)?.range(subring.rank());
    let slice = GtSlice::zeros(job.space, range)?;
    let slice_bytes = (slice.entry_count() * ENTRY_BYTES) as u64;
    job.tracker.alloc(r, Category::GtSlice, slice_bytes, world.now());

    let mut lanes = Vec::with_capacity(cfg.lanes);
    for lane in 0..cfg.lanes {
        let state = if job.options.traffic_only {
            LaneState::traffic(lane, job.space)
        } else {
            LaneState::new(lane, job.space)
        };
        job.tracker
            .alloc(r, Category::LaneBuffer, state.matrix_bytes(), world.now());
        lanes.push(state);
    }
    let ring_start = world.now();
    Ok((
        RankState {
            world,
            subring,
            position,
            topology,
            slice: Mutex::new(slice),
            slice_bytes,
            ring_start,
        },
        lanes,
    ))
}

async fn run_lane<E: Endpoint>(
    state: &RankState<E>,
    mut lane: LaneState,
    job: &Job<'_>,
) -> Result<(), EngineError> {
    let r = state.topology.world_rank;
    let progress = job.progress.lane(r, lane.lane());
    let mut ctx = MeasurementContext::new(
        &state.topology,
        &state.subring,
        &state.slice,
        job.config.seed,
        job.config.value_mode,
        job.instruments.probe(r, lane.lane()),
    );
    ctx.steps = job.steps();
    ctx.hook = job.options.hook.as_ref();
    ctx.progress = Some(progress);
    if job.options.faults.mistag_lane == Some((r, lane.lane())) {
        ctx.send_tag_offset = MAX_LANES as Tag;
    }
    for _ in 0..job.config.measurements {
        run_measurement(&ctx, &mut lane).await?;
    }
    progress.done.store(true, Ordering::Relaxed);
    job.tracker
        .free(r, Category::LaneBuffer, lane.matrix_bytes(), state.world.now());
    Ok(())
}

/// Reduce across sub-rings and ship this rank's record to world rank 0,
/// which returns every record and the final slices.
async fn finish_rank<E: Endpoint>(
    state: RankState<E>,
    job: &Job<'_>,
) -> Result<Option<Vec<(RankRecord, Option<GtSlice>)>>, EngineError> {
    let r = state.topology.world_rank;
    let ring_elapsed_s = state.world.now() - state.ring_start;
    job.progress.enter(r, PHASE_FINISH);
    let slice = state.slice.into_inner().unwrap_or_else(|e| e.into_inner());
    let reduced = state.position.reduce_sum(&slice, 0).await?;
    let range = slice.range();
    drop(slice);
    job.tracker
        .free(r, Category::GtSlice, state.slice_bytes, state.world.now());

    let record = RankRecord {
        world_rank: r,
        lanes: job.instruments.rank_lanes(r),
        memory: job.tracker.summary(r),
        ring_elapsed_s,
        slice_range: [range.start, range.end],
    };
    let gathered = state
        .world
        .gather(encode_record(&record, reduced.as_ref()), 0)
        .await?;
    job.progress.enter(r, PHASE_DONE);
    match gathered {
        None => Ok(None),
        Some(parts) => parts
            .iter()
            .map(|b| decode_record(b))
            .collect::<Result<Vec<_>, _>>()
            .map(Some),
    }
}

type Gathered = Vec<(RankRecord, Option<GtSlice>)>;

/// Rank program for transports with one OS thread per execution context:
/// lanes get their own threads and block on their futures.
fn rank_threaded<E: Endpoint>(endpoint: Arc<E>, job: &Job<'_>) -> Result<Option<Gathered>, EngineError> {
    let timeout = Some(Duration::from_secs_f64(job.config.deadlock_timeout_s));
    let stall = |e: crate::transport::Stalled| TransportError::Stalled(e.0);
    let world = Communicator::world(endpoint);
    let r = world.rank();
    let (state, lanes) = block_on(setup_rank(world, job), timeout).map_err(stall)??;
    job.progress.enter(r, PHASE_LANES);
    let state_ref = &state;
    let results: Vec<Result<(), EngineError>> = thread::scope(|s| {
        let handles: Vec<_> = lanes
            .into_iter()
            .map(|lane| {
                thread::Builder::new()
                    .name(format!("rank{r}-lane{}", lane.lane()))
                    .spawn_scoped(s, move || {
                        block_on(run_lane(state_ref, lane, job), timeout)
                            .map_err(|e| EngineError::from(stall(e)))?
                    })
                    .expect("spawn lane thread")
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join().unwrap_or_else(|_| {
                    Err(EngineError::Rank {
                        rank: r,
                        reason: "lane thread panicked".into(),
                    })
                })
            })
            .collect()
    });
    for res in results {
        res?;
    }
    block_on(finish_rank(state, job), timeout).map_err(stall)?
}

/// Rank program for the simulated transport: lanes are joined futures on
/// the rank's task.
type LaneFuture<'a> = Pin<Box<dyn Future<Output = Result<(), EngineError>> + 'a>>;

async fn rank_async<E: Endpoint>(endpoint: Arc<E>, job: &Job<'_>) -> Result<Option<Gathered>, EngineError> {
    let world = Communicator::world(endpoint);
    let r = world.rank();
    let (state, lanes) = setup_rank(world, job).await?;
    job.progress.enter(r, PHASE_LANES);
    let futures: Vec<LaneFuture<'_>> = lanes
        .into_iter()
        .map(|lane| Box::pin(run_lane(&state, lane, job)) as Pin<Box<dyn Future<Output = _>>>)
        .collect();
    for res in JoinAll::new(futures).await {
        res?;
    }
    finish_rank(state, job).await
}

/// Polls children in index order every time it is polled.
struct JoinAll<'a, T> {
    futures: Vec<Option<Pin<Box<dyn Future<Output = T> + 'a>>>>,
    results: Vec<Option<T>>,
}

impl<'a, T> JoinAll<'a, T> {
    fn new(futures: Vec<Pin<Box<dyn Future<Output = T> + 'a>>>) -> Self {
        let results = futures.iter().map(|_| None).collect();
        Self {
            futures: futures.into_iter().map(Some).collect(),
            results,
        }
    }
}

impl<T> Unpin for JoinAll<'_, T> {}

impl<T> Future for JoinAll<'_, T> {
    type Output = Vec<T>;

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Vec<T>> {
        let this = self.get_mut();
        let mut pending = false;
        for (slot, result) in this.futures.iter_mut().zip(this.results.iter_mut()) {
            if let Some(fut) = slot {
                match fut.as_mut().poll(cx) {
                    Poll::Ready(v) => {
                        *result = Some(v);
                        *slot = None;
                    }
                    Poll::Pending => pending = true,
                }
            }
        }
        if pending {
            return Poll::Pending;
        }
        Poll::Ready(this.results.iter_mut().map(|r| r.take().expect("joined")).collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankSummary {
    pub world_rank: usize,
    pub subring: usize,
    pub subring_rank: usize,
    pub slice_range: [usize; 2],
    pub ring_elapsed_s: f64,
    pub counters: CounterSet,
    pub lanes: Vec<CounterSet>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemorySection {
    pub plan: MemoryPlan,
    pub ranks: Vec<RankMemory>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub clock: ClockKind,
    /// Longest ring phase over all ranks, on `clock`.
    pub elapsed_s: f64,
    /// Payloads applied to every entry of the reduced tensor.
    pub meas_count: u64,
    pub totals: CounterSet,
    pub ranks: Vec<RankSummary>,
    pub memory: MemorySection,
    /// Envelope totals of the fabric, when it is visible from this process.
    pub fabric: Option<FabricStats>,
    #[serde(skip)]
    pub tensor: GtSlice,
    #[serde(skip)]
    pub origin_trace: Vec<OriginRecord>,
    #[serde(skip)]
    pub sim_log: Vec<LinkRecord>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn assemble(
    job: &Job<'_>,
    gathered: Gathered,
    clock: ClockKind,
    fabric: Option<FabricStats>,
) -> Result<ExperimentReport, EngineError> {
    let cfg = job.config;
    let s = cfg.subring_size;
    let mut finals = Vec::new();
    let mut ranks = Vec::with_capacity(gathered.len());
    let mut memory = Vec::with_capacity(gathered.len());
    let mut totals = CounterSet::default();
    for (record, slice) in gathered {
        finals.extend(slice);
        let mut counters = CounterSet::default();
        for lane in &record.lanes {
            counters += lane;
        }
        totals += &counters;
        ranks.push(RankSummary {
            world_rank: record.world_rank,
            subring: record.world_rank / s,
            subring_rank: record.world_rank % s,
            slice_range: record.slice_range,
            ring_elapsed_s: record.ring_elapsed_s,
            counters,
            lanes: record.lanes,
        });
        memory.push(record.memory);
    }
    let mut tensor = GtSlice::assemble(job.space, &finals)?;
    if let Some([k1, k2, k3]) = job.options.faults.corrupt_entry {
        let entry = tensor.get_mut(k1, k2, k3).ok_or_else(|| ConfigError::Invalid {
            field: "corrupt_entry".into(),
            reason: format!("({k1}, {k2}, {k3}) is outside the tensor"),
        })?;
        entry.re += 1.0;
    }
    let elapsed_s = ranks.iter().map(|r| r.ring_elapsed_s).fold(0.0, f64::max);
    Ok(ExperimentReport {
        config: cfg.clone(),
        clock,
        elapsed_s,
        meas_count: tensor.meas_count(),
        totals,
        ranks,
        memory: MemorySection {
            plan: MemoryPlan::for_space(job.space, s, cfg.lanes as u64)?,
            ranks: memory,
        },
        fabric,
        tensor,
        origin_trace: job.instruments.origin_trace(),
        sim_log: Vec::new(),
    })
}

/// Collapse per-rank failures into one error: a real failure wins over the
/// stalls it caused elsewhere; pure stalls become a deadlock report.
fn first_failure(
    job: &Job<'_>,
    errors: Vec<EngineError>,
    local: impl Iterator<Item = usize>,
) -> EngineError {
    let mut stall = None;
    for e in errors {
        match e {
            EngineError::Transport(TransportError::Stalled(d)) => stall = Some(d),
            other => return other,
        }
    }
    let d = stall.unwrap_or_default();
    EngineError::Deadlock {
        detail: format!("no progress for {:.1} s", d.as_secs_f64()),
        stalled: job.progress.stalled(local),
    }
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, EngineError> {
    run_experiment_with(config, &RunOptions::default())
}

/// Launch every rank of `config` in this process and return the report.
pub fn run_experiment_with(
    config: &ExperimentConfig,
    options: &RunOptions,
) -> Result<ExperimentReport, EngineError> {
    let job = Job::new(config, options)?;
    match config.transport {
        TransportKind::Inprocess => {
            let fabric = InProcFabric::new(config.world_size);
            let endpoints = fabric.endpoints();
            let gathered = run_threads(&job, endpoints)?;
            assemble(&job, gathered, ClockKind::Monotonic, Some(fabric.stats()))
        }
        TransportKind::Tcp => {
            let rendezvous = TcpRendezvous::bind(config.rendezvous.as_str())?;
            let root = rendezvous.local_addr()?;
            let world = config.world_size;
            let endpoints: Vec<Arc<TcpEndpoint>> = thread::scope(|s| {
                let joins: Vec<_> = (1..world)
                    .map(|r| s.spawn(move || TcpEndpoint::join(root, r, world)))
                    .collect();
                let mut eps = vec![TcpEndpoint::root(rendezvous, world)];
                eps.extend(joins.into_iter().map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(TransportError::Protocol("connect panicked".into())))
                }));
                eps.into_iter().collect::<Result<Vec<_>, _>>()
            })?;
            let gathered = run_threads(&job, endpoints)?;
            assemble(&job, gathered, ClockKind::Monotonic, None)
        }
        TransportKind::Sim => {
            let fabric = SimFabric::new(config.world_size, config.link.clone()).map_err(|e| {
                ConfigError::Invalid {
                    field: format!("link.{}", e.field),
                    reason: e.reason,
                }
            })?;
            fabric.set_logging(options.sim_log);
            let tasks: Vec<Pin<Box<dyn Future<Output = _> + '_>>> = fabric
                .endpoints()
                .into_iter()
                .map(|ep| Box::pin(rank_async(ep, &job)) as Pin<Box<dyn Future<Output = _>>>)
                .collect();
            let results = fabric.run(tasks).map_err(|d| EngineError::Deadlock {
                detail: format!("simulated time {} s with no pending events", d.time_s),
                stalled: job.progress.stalled(d.stalled_tasks.into_iter()),
            })?;
            let mut gathered = None;
            let mut errors = Vec::new();
            for res in results {
                match res {
                    Ok(Some(g)) => gathered = Some(g),
                    Ok(None) => {}
                    Err(e) => errors.push(e),
                }
            }
            if !errors.is_empty() {
                return Err(first_failure(&job, errors, 0..config.world_size));
            }
            let gathered = gathered.ok_or_else(|| EngineError::Rank {
                rank: 0,
                reason: "no result gathered".into(),
            })?;
            let mut report = assemble(&job, gathered, ClockKind::Virtual, Some(fabric.stats()))?;
            report.sim_log = fabric.log();
            Ok(report)
        }
    }
}

fn run_threads<E: Endpoint>(job: &Job<'_>, endpoints: Vec<Arc<E>>) -> Result<Gathered, EngineError> {
    let ranks: Vec<usize> = endpoints.iter().map(|e| e.rank()).collect();
    let results: Vec<Result<Option<Gathered>, EngineError>> = thread::scope(|s| {
        let handles: Vec<_> = endpoints
            .into_iter()
            .map(|ep| {
                let r = ep.rank();
                thread::Builder::new()
                    .name(format!("rank{r}"))
                    .spawn_scoped(s, move || rank_threaded(ep, job))
                    .expect("spawn rank thread")
            })
            .collect();
        handles
            .into_iter()
            .zip(&ranks)
            .map(|(h, &r)| {
                h.join().unwrap_or_else(|_| {
                    Err(EngineError::Rank {
                        rank: r,
                        reason: "rank thread panicked".into(),
                    })
                })
            })
            .collect()
    });
    let mut gathered = None;
    let mut errors = Vec::new();
    for res in results {
        match res {
            Ok(Some(g)) => gathered = Some(g),
            Ok(None) => {}
            Err(e) => errors.push(e),
        }
    }
    if !errors.is_empty() {
        return Err(first_failure(job, errors, ranks.into_iter()));
    }
    gathered.ok_or_else(|| EngineError::Rank {
        rank: 0,
        reason: "no result gathered".into(),
    })
}

/// Run one rank of a multi-process job on an already connected endpoint.
/// World rank 0 returns the report; other ranks return `None`.
pub fn run_rank<E: Endpoint>(
    config: &ExperimentConfig,
    options: &RunOptions,
    endpoint: Arc<E>,
) -> Result<Option<ExperimentReport>, EngineError> {
    let job = Job::new(config, options)?;
    let r = endpoint.rank();
    let clock = endpoint.clock_kind();
    match rank_threaded(endpoint, &job) {
        Ok(Some(gathered)) => assemble(&job, gathered, clock, None).map(Some),
        Ok(None) => Ok(None),
        Err(e) => Err(first_failure(&job, vec![e], std::iter::once(r))),
    }
}
