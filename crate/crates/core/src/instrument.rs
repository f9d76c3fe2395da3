//! Per-(rank, lane) counters and timers for the ring engine.
//!
//! Counters are relaxed atomics, so snapshots taken mid-run may lag by one
//! in-flight operation; a snapshot after all lanes have joined is exact. A
//! disabled [`Instruments`] skips every update.

use std::ops::AddAssign;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::index_tensor::Origin;

/// Point-in-time copy of one scope's counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CounterSet {
    pub envelopes_sent: u64,
    pub envelopes_received: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub accumulations_applied: u64,
    pub wait_s: f64,
    pub accumulate_s: f64,
    pub total_s: f64,
}

impl AddAssign<&CounterSet> for CounterSet {
    fn add_assign(&mut self, o: &CounterSet) {
        self.envelopes_sent += o.envelopes_sent;
        self.envelopes_received += o.envelopes_received;
        self.bytes_sent += o.bytes_sent;
        self.bytes_received += o.bytes_received;
        self.accumulations_applied += o.accumulations_applied;
        self.wait_s += o.wait_s;
        self.accumulate_s += o.accumulate_s;
        self.total_s += o.total_s;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Global,
    Rank(usize),
    Lane { rank: usize, lane: usize },
}

/// One accumulation seen by a consumer: which payload, applied where.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OriginRecord {
    pub consumer_rank: usize,
    pub consumer_lane: usize,
    pub origin: Origin,
}

#[derive(Default)]
struct Cell {
    envelopes_sent: AtomicU64,
    envelopes_received: AtomicU64,
    bytes_sent: AtomicU64,
    bytes_received: AtomicU64,
    accumulations_applied: AtomicU64,
    wait_s: AtomicF64,
    accumulate_s: AtomicF64,
    total_s: AtomicF64,
}

impl Cell {
    fn snapshot(&self) -> CounterSet {
        CounterSet {
            envelopes_sent: self.envelopes_sent.load(Ordering::Relaxed),
            envelopes_received: self.envelopes_received.load(Ordering::Relaxed),
            bytes_sent: self.bytes_sent.load(Ordering::Relaxed),
            bytes_received: self.bytes_received.load(Ordering::Relaxed),
            accumulations_applied: self.accumulations_applied.load(Ordering::Relaxed),
            wait_s: self.wait_s.load(),
            accumulate_s: self.accumulate_s.load(),
            total_s: self.total_s.load(),
        }
    }
}

#[derive(Default)]
struct AtomicF64(AtomicU64);

impl AtomicF64 {
    fn load(&self) -> f64 {
        f64::from_bits(self.0.load(Ordering::Relaxed))
    }

    fn add(&self, v: f64) {
        let _ = self
            .0
            .fetch_update(Ordering::Relaxed, Ordering::Relaxed, |bits| {
                Some((f64::from_bits(bits) + v).to_bits())
            });
    }
}

/// Counters for `ranks x lanes` execution contexts.
pub struct Instruments {
    enabled: bool,
    ranks: usize,
    lanes: usize,
    cells: Vec<Cell>,
    trace: Option<Mutex<Vec<OriginRecord>>>,
}

impl Instruments {
    pub fn new(ranks: usize, lanes: usize, enabled: bool) -> Self {
        Self {
            enabled,
            ranks,
            lanes,
            cells: (0..ranks * lanes).map(|_| Cell::default()).collect(),
            trace: None,
        }
    }

    /// Also record the origin of every accumulated payload. `capacity` is
    /// reserved up front so recording does not allocate mid-run.
    pub fn with_origin_trace(mut self, capacity: usize) -> Self {
        self.trace = Some(Mutex::new(Vec::with_capacity(capacity)));
        self
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn ranks(&self) -> usize {
        self.ranks
    }

    pub fn lanes(&self) -> usize {
        self.lanes
    }

    pub fn probe(&self, rank: usize, lane: usize) -> LaneProbe<'_> {
        assert!(rank < self.ranks && lane < self.lanes, "lane out of range");
        LaneProbe {
            cell: self.enabled.then(|| &self.cells[rank * self.lanes + lane]),
            trace: self.trace.as_ref().filter(|_| self.enabled),
            rank,
            lane,
        }
    }

    pub fn snapshot(&self, scope: Scope) -> CounterSet {
        let mut out = CounterSet::default();
        let cells: Box<dyn Iterator<Item = &Cell>> = match scope {
            Scope::Global => Box::new(self.cells.iter()),
            Scope::Rank(r) => Box::new(self.cells[r * self.lanes..(r + 1) * self.lanes].iter()),
            Scope::Lane { rank, lane } => Box::new(std::iter::once(&self.cells[rank * self.lanes + lane])),
        };
        for c in cells {
            out += &c.snapshot();
        }
        out
    }

    /// Per-lane snapshots of one rank, in lane order.
    pub fn rank_lanes(&self, rank: usize) -> Vec<CounterSet> {
        (0..self.lanes)
            .map(|lane| self.snapshot(Scope::Lane { rank, lane }))
            .collect()
    }

    pub fn origin_trace(&self) -> Vec<OriginRecord> {
        self.trace
            .as_ref()
            .map(|t| t.lock().unwrap_or_else(|e| e.into_inner()).clone())
            .unwrap_or_default()
    }
}

/// Update handle for one (rank, lane). Every method is a no-op when the
/// owning [`Instruments`] is disabled.
#[derive(Clone, Copy)]
pub struct LaneProbe<'a> {
    cell: Option<&'a Cell>,
    trace: Option<&'a Mutex<Vec<OriginRecord>>>,
    rank: usize,
    lane: usize,
}

impl LaneProbe<'_> {
    pub fn sent(&self, bytes: usize) {
        if let Some(c) = self.cell {
            c.envelopes_sent.fetch_add(1, Ordering::Relaxed);
            c.bytes_sent.fetch_add(bytes as u64, Ordering::Relaxed);
        }
    }

    pub fn received(&self, bytes: usize) {
        if let Some(c) = self.cell {
            c.envelopes_received.fetch_add(1, Ordering::Relaxed);
            c.bytes_received.fetch_add(bytes as u64, Ordering::Relaxed);
        }
    }

    pub fn accumulated(&self, origin: &Origin, seconds: f64) {
        if let Some(c) = self.cell {
            c.accumulations_applied.fetch_add(1, Ordering::Relaxed);
            c.accumulate_s.add(seconds);
        }
        if let Some(t) = self.trace {
            t.lock().unwrap_or_else(|e| e.into_inner()).push(OriginRecord {
                consumer_rank: self.rank,
                consumer_lane: self.lane,
                origin: *origin,
            });
        }
    }

    pub fn waited(&self, seconds: f64) {
        if let Some(c) = self.cell {
            c.wait_s.add(seconds);
        }
    }

    pub fn ran(&self, seconds: f64) {
        if let Some(c) = self.cell {
            c.total_s.add(seconds);
        }
    }
}
