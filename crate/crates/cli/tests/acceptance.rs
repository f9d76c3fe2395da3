//! Acceptance criteria 1-10, one PASS/FAIL line each. Runs without the
//! libtest harness so the counting allocator sees a quiet process.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::collections::BTreeMap;
use std::fs;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use gtring::accuracy::{oracle_for, verify, Stat};
use gtring::config::MemoryShape;
use gtring::index_tensor::{make_partition, ValueMode, ENTRY_BYTES};
use gtring::perf_model::{gsigma_wire_bytes, run_sweep, SweepWorld};
use gtring::ring_engine::{DirectionPolicy, Faults, ProbeEvent, ProbePoint};
use gtring::{run_experiment, run_experiment_with, ExperimentConfig, RunOptions, TransportKind};
use gtring_cli::{cmd_verify, memory_plan, Common, FaultArgs, VerifyArgs};

struct Counting;

thread_local! {
    static ALLOCS: Cell<u64> = const { Cell::new(0) };
    static MARK: Cell<u64> = const { Cell::new(0) };
}

/// Allocation size to watch; zero disables.
static WATCH_SIZE: AtomicUsize = AtomicUsize::new(0);
static WATCH_HITS: AtomicU64 = AtomicU64::new(0);

fn note(size: usize) {
    let _ = ALLOCS.try_with(|c| c.set(c.get() + 1));
    let watch = WATCH_SIZE.load(Ordering::Relaxed);
    if watch != 0 && size == watch {
        WATCH_HITS.fetch_add(1, Ordering::Relaxed);
    }
}

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        note(layout.size());
        unsafe { System.alloc(layout) }
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        note(layout.size());
        unsafe { System.alloc_zeroed(layout) }
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        note(new_size);
        unsafe { System.realloc(ptr, layout, new_size) }
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) }
    }
}

#[global_allocator]
static GLOBAL: Counting = Counting;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn integer(n: usize, world: usize, s: usize, lanes: usize, m: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(n, world, s, lanes, m);
    cfg.value_mode = ValueMode::Integer;
    cfg.seed = 2024;
    cfg
}

fn divisors(n: usize) -> impl Iterator<Item = usize> {
    (1..=n).filter(move |d| n.is_multiple_of(*d))
}

fn criterion1_grid() -> Vec<ExperimentConfig> {
    let mut out = Vec::new();
    for n in [4, 6, 8] {
        for world in [2, 4, 6] {
            for s in divisors(world) {
                for k in [1, 2, 3] {
                    for m in [1, 5] {
                        out.push(integer(n, world, s, k, m));
                    }
                }
            }
        }
    }
    out
}

/// Per-rank counts against (S-1)Mk sends/receives and SMk accumulations.
fn message_laws_hold(cfg: &ExperimentConfig, report: &gtring::ExperimentReport) -> bool {
    let s = cfg.subring_size as u64;
    let mk = cfg.measurements * cfg.lanes as u64;
    report.ranks.iter().all(|r| {
        r.counters.envelopes_sent == (s - 1) * mk
            && r.counters.envelopes_received == (s - 1) * mk
            && r.counters.accumulations_applied == s * mk
    })
}

fn criteria_1_and_3() -> (Outcome, Outcome) {
    let start = Instant::now();
    let (mut equal, mut lawful, mut valid) = (0, 0, 0);
    let mut rejected = BTreeMap::new();
    let mut failures = Vec::new();
    for cfg in criterion1_grid() {
        if let Err(e) = cfg.validate() {
            *rejected.entry(e.to_string()).or_insert(0) += 1;
            continue;
        }
        valid += 1;
        let label = format!(
            "N={} world={} S={} k={} M={}",
            cfg.n_k, cfg.world_size, cfg.subring_size, cfg.lanes, cfg.measurements
        );
        match run_experiment(&cfg) {
            Ok(report) => {
                if report.tensor == oracle_for(&cfg).expect("oracle") {
                    equal += 1;
                } else {
                    failures.push(format!("{label}: tensor differs"));
                }
                if message_laws_hold(&cfg, &report) {
                    lawful += 1;
                } else {
                    failures.push(format!("{label}: counts off"));
                }
            }
            Err(e) => failures.push(format!("{label}: {e}")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let skipped: usize = rejected.values().sum();
    let reasons = rejected.keys().cloned().collect::<Vec<_>>().join("; ");
    let c1 = outcome(
        equal == valid && secs < 30.0,
        format!(
            "{equal}/{valid} valid combinations bitwise equal to the oracle in {secs:.1} s; \
             {skipped} rejected by configuration ({reasons}){}",
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join(", ")) }
        ),
    );
    let c3 = outcome(
        lawful == valid,
        format!("{lawful}/{valid} configurations satisfy sends = receives = (S-1)Mk and accumulations = SMk on every rank"),
    );
    (c1, c3)
}

fn criterion2() -> Outcome {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::new(6, 6, 3, 7, 100);
    cfg.seed = 1;
    let summary = match verify(&cfg, 5) {
        Ok(s) => s,
        Err(e) => return outcome(false, e.to_string()),
    };
    let secs = start.elapsed().as_secs_f64();
    let fmt = |name: &str, s: &Stat| format!("{name} {s}");
    outcome(
        summary.pass && secs < 60.0,
        format!(
            "5 seeds: {}, {}, {}, {} (threshold 5e-7) in {secs:.1} s",
            fmt("L1 re", &summary.l1_real),
            fmt("L1 im", &summary.l1_imag),
            fmt("L2 re", &summary.l2_real),
            fmt("L2 im", &summary.l2_imag),
        ),
    )
}

fn criterion4() -> Outcome {
    let mut cfg = ExperimentConfig::new(6, 6, 3, 7, 1);
    cfg.memory_shape = Some(MemoryShape {
        gt_entries: 212_336_640,
        gsigma_matrix_bytes: 170_000_000,
    });
    let plan = match memory_plan(&cfg) {
        Ok(p) => p,
        Err(e) => return outcome(false, e.to_string()),
    };
    let checks = [
        ("total", plan.gt_bytes_total, 3.40e9),
        ("slice p=3", plan.gt_bytes_per_rank, 1.13e9),
        ("original G_sigma k=7", plan.original.gsigma_bytes, 2.38e9),
        ("distributed G_sigma k=7", plan.distributed.gsigma_bytes, 7.14e9),
    ];
    let mut pass = true;
    let parts: Vec<String> = checks
        .iter()
        .map(|&(name, got, published)| {
            let rel = (got as f64 - published).abs() / published;
            pass &= rel < 0.01;
            format!("{name} {:.3} GB vs {:.2} GB ({:.2}%)", got as f64 / 1e9, published / 1e9, rel * 100.0)
        })
        .collect();
    outcome(pass, parts.join(", "))
}

fn criterion5() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for n in [6, 7] {
        let plane = (n * n * ENTRY_BYTES) as u64;
        let total = n as u64 * plane;
        for p in [1, 2, 3, 6] {
            let report = match run_experiment(&integer(n, p, p, 2, 1)) {
                Ok(r) => r,
                Err(e) => return outcome(false, e.to_string()),
            };
            let plan = make_partition(n, p).expect("partition");
            let share = total as f64 / p as f64;
            for mem in &report.memory.ranks {
                let peak = mem.gt_slice_peak_bytes;
                let expected = plan.range(mem.rank % p).len() as u64 * plane;
                // Balanced split: every share is within one axis plane of total/p.
                pass &= peak == expected && (peak as f64 - share).abs() < plane as f64;
            }
            let max = report.memory.ranks.iter().map(|m| m.gt_slice_peak_bytes).max().unwrap_or(0);
            parts.push(format!("N={n} p={p}: max {max} B vs total/p {share:.0} B"));
        }
    }
    outcome(pass, parts.join("; "))
}

fn criteria_6_and_7() -> (Outcome, Outcome) {
    let mut base = ExperimentConfig::new(60, 60, 6, 1, 1400);
    base.link.ranks_per_node = 6;
    base.link.charged_message_bytes = Some(1_700_000);
    // Observed 6 GB/s of a 12.5 GB/s port.
    base.link.nic_utilization = 6.0 / 12.5;
    let start = Instant::now();
    let sweep = match run_sweep(&base, &[6, 12, 24, 36, 60], SweepWorld::SingleSubring) {
        Ok(s) => s,
        Err(e) => {
            let o = || outcome(false, e.to_string());
            return (o(), o());
        }
    };
    let wall = start.elapsed().as_secs_f64();
    let virt = sweep.points.iter().map(|p| p.elapsed_s).fold(0.0, f64::max);
    let r2 = sweep.fit.map(|f| f.r_squared).unwrap_or(0.0);
    let target = base.link.nic_bandwidth_bps * base.link.nic_utilization;
    let bw60 = sweep
        .points
        .iter()
        .find(|p| p.subring_size == 60)
        .map(|p| p.eff_bw_bps)
        .unwrap_or(0.0);
    let bw_rel = (bw60 - target).abs() / target;
    let c6 = outcome(
        sweep.points.len() == 5 && r2 >= 0.99 && bw_rel < 0.10 && virt < 120.0,
        format!(
            "r^2 = {r2:.4}; effective bandwidth at S=60 {:.3} GB/s vs {:.3} GB/s ({:.2}%); \
             longest point {virt:.2} s virtual ({wall:.1} s wall)",
            bw60 / 1e9,
            target / 1e9,
            bw_rel * 100.0
        ),
    );
    let worst = sweep
        .points
        .iter()
        .map(|p| (p.predicted_s - p.elapsed_s).abs() / p.elapsed_s)
        .fold(0.0, f64::max);
    let c7 = outcome(
        sweep.points.len() == 5 && worst < 0.05,
        format!(
            "largest prediction error {:.4}% over S = {:?}",
            worst * 100.0,
            sweep.points.iter().map(|p| p.subring_size).collect::<Vec<_>>()
        ),
    );
    (c6, c7)
}

static RING_ALLOCS: AtomicU64 = AtomicU64::new(0);
static RING_WINDOWS: AtomicU64 = AtomicU64::new(0);

fn ring_window_hook(ev: ProbeEvent) {
    match ev.point {
        ProbePoint::RingStart => MARK.with(|m| m.set(ALLOCS.with(Cell::get))),
        ProbePoint::RingEnd => {
            let delta = ALLOCS.with(Cell::get) - MARK.with(Cell::get);
            RING_ALLOCS.fetch_add(delta, Ordering::Relaxed);
            RING_WINDOWS.fetch_add(1, Ordering::Relaxed);
        }
        _ => {}
    }
}

fn criterion8() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (world, s, k, m) in [(6, 3, 2, 5), (4, 4, 3, 4)] {
        let cfg = integer(6, world, s, k, m);
        let options = RunOptions {
            hook: Some(Arc::new(ring_window_hook)),
            ..RunOptions::default()
        };
        let wire = gsigma_wire_bytes(cfg.space().expect("space")) as usize;
        RING_ALLOCS.store(0, Ordering::Relaxed);
        RING_WINDOWS.store(0, Ordering::Relaxed);
        WATCH_HITS.store(0, Ordering::Relaxed);
        WATCH_SIZE.store(wire, Ordering::Relaxed);
        let res = run_experiment_with(&cfg, &options);
        WATCH_SIZE.store(0, Ordering::Relaxed);
        if let Err(e) = res {
            return outcome(false, e.to_string());
        }
        let hits = WATCH_HITS.load(Ordering::Relaxed);
        let lanes = (world * k) as u64;
        let windows = RING_WINDOWS.load(Ordering::Relaxed);
        let allocs = RING_ALLOCS.load(Ordering::Relaxed);
        pass &= hits == 3 * lanes && windows == lanes * m && allocs == 0;
        parts.push(format!(
            "world={world} S={s} k={k} M={m}: {hits} payload-sized allocations for {lanes} lanes, \
             {allocs} allocations inside {windows} ring windows"
        ));
    }
    outcome(pass, parts.join("; "))
}

fn criterion9() -> Outcome {
    let mut tensors = Vec::new();
    let mut mismatched = 0;
    let mut records = 0;
    for direction in [DirectionPolicy::Forward, DirectionPolicy::Alternate] {
        let mut cfg = integer(6, 6, 3, 3, 4);
        cfg.direction = direction;
        let options = RunOptions {
            trace_origins: true,
            ..RunOptions::default()
        };
        let report = match run_experiment_with(&cfg, &options) {
            Ok(r) => r,
            Err(e) => return outcome(false, e.to_string()),
        };
        records += report.origin_trace.len();
        mismatched += report
            .origin_trace
            .iter()
            .filter(|r| r.origin.lane as usize != r.consumer_lane)
            .count();
        tensors.push(report.tensor);
    }
    let identical = tensors[0] == tensors[1];
    outcome(
        mismatched == 0 && records > 0 && identical,
        format!(
            "{records} traced accumulations over both policies, {mismatched} crossed lanes; \
             reduced tensors {}",
            if identical { "bitwise identical" } else { "differ" }
        ),
    )
}

fn criterion10() -> Outcome {
    let dir = tempfile::TempDir::new().expect("temp dir");
    let cfg = integer(6, 6, 3, 2, 2);
    let path = dir.path().join("config.json");
    fs::write(&path, cfg.to_json()).expect("write config");
    let args = |faults: FaultArgs| VerifyArgs {
        common: Common {
            config: path.clone(),
            transport: None,
            seed: None,
            out: Some(dir.path().to_path_buf()),
        },
        runs: 1,
        faults,
    };
    let clean = cmd_verify(&args(FaultArgs::default())).map(|s| s.pass);
    let corrupted = cmd_verify(&args(FaultArgs {
        corrupt_entry: Some([1, 2, 3]),
        ..FaultArgs::default()
    }))
    .map(|s| s.pass);

    let options = RunOptions {
        faults: Faults {
            skip_ring_step: true,
            ..Faults::default()
        },
        ..RunOptions::default()
    };
    let skipped = run_experiment_with(&cfg, &options);
    let (laws, equal) = match &skipped {
        Ok(r) => (message_laws_hold(&cfg, r), r.tensor == oracle_for(&cfg).expect("oracle")),
        Err(_) => (true, true),
    };
    let pass = matches!(clean, Ok(true)) && matches!(corrupted, Ok(false)) && !laws && !equal;
    outcome(
        pass,
        format!(
            "clean verify pass={:?}, corrupted verify pass={:?}; with S-2 ring steps the message laws {} and the oracle comparison {}",
            clean.map_err(|e| e.to_string()),
            corrupted.map_err(|e| e.to_string()),
            if laws { "still hold" } else { "are violated" },
            if equal { "still matches" } else { "fails" }
        ),
    )
}

fn main() {
    // Also run under the simulated transport to keep the grid honest there.
    let mut sim_ok = true;
    for mut cfg in criterion1_grid().into_iter().filter(|c| c.validate().is_ok()).step_by(7) {
        cfg.transport = TransportKind::Sim;
        sim_ok &= run_experiment(&cfg).map(|r| r.tensor == oracle_for(&cfg).unwrap()).unwrap_or(false);
    }

    let (c1, c3) = criteria_1_and_3();
    let c1 = Outcome {
        pass: c1.pass && sim_ok,
        detail: format!("{}; simulated-transport sample {}", c1.detail, if sim_ok { "equal" } else { "differs" }),
    };
    let (c6, c7) = criteria_6_and_7();
    let results = [
        (1, "oracle equivalence", c1),
        (2, "accuracy gate", criterion2()),
        (3, "exactly-once and message laws", c3),
        (4, "memory model reproduction", criterion4()),
        (5, "memory reduction law", criterion5()),
        (6, "linear scaling", c6),
        (7, "prediction cross-validation", c7),
        (8, "allocation discipline", criterion8()),
        (9, "lane isolation and direction invariance", criterion9()),
        (10, "negative controls", criterion10()),
    ];
    let mut failed = 0;
    for (n, name, o) in &results {
        println!("criterion {n:>2} {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
