//! Closed-form allocation accounting for the original (full tensor per rank)
//! and distributed (one slice per rank) algorithms, plus a live tracker.
//!
//! Per rank, the original algorithm holds the full tensor and one payload per
//! lane; the distributed one holds a `1/p` slice and three payloads per lane
//! (the generated one plus send and receive buffers). Each payload is two
//! spin matrices.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index_tensor::{make_partition, CombinedIndexSpace, TensorError, ENTRY_BYTES};

pub const BUFFERS_ORIGINAL: u64 = 1;
pub const BUFFERS_DISTRIBUTED: u64 = 3;
/// The lower "two buffers per lane" count some accounts use (send and
/// receive only, not counting the generated payload).
pub const BUFFERS_ALTERNATE: u64 = 2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MemoryError {
    #[error("`{0}` must be positive")]
    NonPositive(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Original,
    Distributed,
}

impl Algorithm {
    pub fn buffers_per_lane(self) -> u64 {
        match self {
            Algorithm::Original => BUFFERS_ORIGINAL,
            Algorithm::Distributed => BUFFERS_DISTRIBUTED,
        }
    }
}

pub fn bytes_for_entries(entries: u64, entry_bytes: u64) -> u64 {
    entries * entry_bytes
}

/// Largest share when `total` bytes are split over `p` ranks.
pub fn slice_bytes(total: u64, p: u64) -> Result<u64, MemoryError> {
    if p == 0 {
        return Err(MemoryError::NonPositive("p"));
    }
    Ok(total.div_ceil(p))
}

/// Largest slice of a full tensor over `space` split along its last axis
/// into `p` contiguous ranges.
pub fn axis_slice_bytes(space: CombinedIndexSpace, p: usize) -> Result<u64, MemoryError> {
    let n = space.len() as u64;
    let plan = make_partition(space.len(), p)?;
    Ok(plan.max_len() as u64 * n * n * ENTRY_BYTES as u64)
}

/// Payload bytes per rank: two spin matrices per buffer, per lane.
pub fn gsigma_total_bytes(algorithm: Algorithm, lanes: u64, matrix_bytes: u64) -> u64 {
    matrix_bytes * 2 * algorithm.buffers_per_lane() * lanes
}

/// Growth of the tensor when the cluster size goes `l1 -> l2` and the
/// frequency count `f1 -> f2`: storage scales with the cube of each.
pub fn gt_growth_ratio(l1: f64, f1: f64, l2: f64, f2: f64) -> Result<f64, MemoryError> {
    for (name, v) in [("l1", l1), ("f1", f1), ("l2", l2), ("f2", f2)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(MemoryError::NonPositive(name));
        }
    }
    Ok((l2 / l1).powi(3) * (f2 / f1).powi(3))
}

/// One algorithm's per-rank allocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanTotals {
    pub buffers_per_lane: u64,
    pub gt_bytes: u64,
    pub gsigma_bytes: u64,
    pub total_bytes: u64,
}

impl PlanTotals {
    fn new(gt_bytes: u64, buffers_per_lane: u64, lanes: u64, matrix_bytes: u64) -> Self {
        let gsigma_bytes = matrix_bytes * 2 * buffers_per_lane * lanes;
        Self {
            buffers_per_lane,
            gt_bytes,
            gsigma_bytes,
            total_bytes: gt_bytes + gsigma_bytes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryPlan {
    pub gt_bytes_total: u64,
    pub ranks_per_subring: u64,
    pub gt_bytes_per_rank: u64,
    pub gsigma_matrix_bytes: u64,
    pub lanes: u64,
    pub original: PlanTotals,
    pub distributed: PlanTotals,
    /// Distributed totals under the two-buffers-per-lane count.
    pub distributed_alternate: PlanTotals,
    /// Lane count at which both algorithms need the same memory per rank;
    /// below it the distributed algorithm is cheaper.
    pub break_even_lanes: f64,
}

impl MemoryPlan {
    /// Plan from raw sizes; the slice is the balanced byte share.
    pub fn new(
        gt_bytes_total: u64,
        p: u64,
        matrix_bytes: u64,
        lanes: u64,
    ) -> Result<Self, MemoryError> {
        let per_rank = slice_bytes(gt_bytes_total, p)?;
        Self::with_slice(gt_bytes_total, p, per_rank, matrix_bytes, lanes)
    }

    /// Plan for a concrete index space split along its partition axis.
    pub fn for_space(space: CombinedIndexSpace, p: usize, lanes: u64) -> Result<Self, MemoryError> {
        let n = space.len() as u64;
        let total = bytes_for_entries(n * n * n, ENTRY_BYTES as u64);
        let per_rank = axis_slice_bytes(space, p)?;
        Self::with_slice(total, p as u64, per_rank, n * n * ENTRY_BYTES as u64, lanes)
    }

    fn with_slice(
        total: u64,
        p: u64,
        per_rank: u64,
        matrix_bytes: u64,
        lanes: u64,
    ) -> Result<Self, MemoryError> {
        if p == 0 {
            return Err(MemoryError::NonPositive("p"));
        }
        if lanes == 0 {
            return Err(MemoryError::NonPositive("lanes"));
        }
        if matrix_bytes == 0 {
            return Err(MemoryError::NonPositive("matrix_bytes"));
        }
        // gt/p + 6mk = gt + 2mk
        let break_even = total as f64 * (p - 1) as f64 / (4.0 * matrix_bytes as f64 * p as f64);
        Ok(Self {
            gt_bytes_total: total,
            ranks_per_subring: p,
            gt_bytes_per_rank: per_rank,
            gsigma_matrix_bytes: matrix_bytes,
            lanes,
            original: PlanTotals::new(total, BUFFERS_ORIGINAL, lanes, matrix_bytes),
            distributed: PlanTotals::new(per_rank, BUFFERS_DISTRIBUTED, lanes, matrix_bytes),
            distributed_alternate: PlanTotals::new(per_rank, BUFFERS_ALTERNATE, lanes, matrix_bytes),
            break_even_lanes: break_even,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    GtSlice,
    LaneBuffer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemorySample {
    pub time_s: f64,
    pub rank: usize,
    pub live_bytes: u64,
}

/// What one rank allocated over a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankMemory {
    pub rank: usize,
    pub peak_bytes: u64,
    pub gt_slice_peak_bytes: u64,
    pub lane_buffer_peak_bytes: u64,
    pub series: Vec<MemorySample>,
}

#[derive(Debug, Clone, Default)]
struct RankLedger {
    live: u64,
    peak: u64,
    live_by: [u64; 2],
    peak_by: [u64; 2],
    series: Vec<MemorySample>,
}

/// Live tracked bytes per rank with a time series of every change.
pub struct MemoryTracker {
    ranks: Mutex<Vec<RankLedger>>,
}

fn slot(c: Category) -> usize {
    match c {
        Category::GtSlice => 0,
        Category::LaneBuffer => 1,
    }
}

impl MemoryTracker {
    pub fn new(ranks: usize) -> Self {
        Self {
            ranks: Mutex::new(vec![RankLedger::default(); ranks]),
        }
    }

    pub fn alloc(&self, rank: usize, category: Category, bytes: u64, time_s: f64) {
        self.update(rank, time_s, |l| {
            l.live += bytes;
            l.live_by[slot(category)] += bytes;
        });
    }

    pub fn free(&self, rank: usize, category: Category, bytes: u64, time_s: f64) {
        self.update(rank, time_s, |l| {
            l.live = l.live.saturating_sub(bytes);
            let s = &mut l.live_by[slot(category)];
            *s = s.saturating_sub(bytes);
        });
    }

    fn update(&self, rank: usize, time_s: f64, f: impl FnOnce(&mut RankLedger)) {
        let mut ranks = self.ranks.lock().unwrap_or_else(|e| e.into_inner());
        let l = &mut ranks[rank];
        f(l);
        l.peak = l.peak.max(l.live);
        for i in 0..2 {
            l.peak_by[i] = l.peak_by[i].max(l.live_by[i]);
        }
        let live = l.live;
        l.series.push(MemorySample {
            time_s,
            rank,
            live_bytes: live,
        });
    }

    pub fn live(&self, rank: usize) -> u64 {
        self.ranks.lock().unwrap_or_else(|e| e.into_inner())[rank].live
    }

    pub fn peak(&self, rank: usize) -> u64 {
        self.ranks.lock().unwrap_or_else(|e| e.into_inner())[rank].peak
    }

    pub fn category_peak(&self, rank: usize, category: Category) -> u64 {
        self.ranks.lock().unwrap_or_else(|e| e.into_inner())[rank].peak_by[slot(category)]
    }

    pub fn summary(&self, rank: usize) -> RankMemory {
        let ranks = self.ranks.lock().unwrap_or_else(|e| e.into_inner());
        let l = &ranks[rank];
        RankMemory {
            rank,
            peak_bytes: l.peak,
            gt_slice_peak_bytes: l.peak_by[0],
            lane_buffer_peak_bytes: l.peak_by[1],
            series: l.series.clone(),
        }
    }
}
