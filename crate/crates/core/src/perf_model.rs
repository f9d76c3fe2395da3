//! Message-count laws, a slowest-link timing model, effective bandwidth and
//! least-squares fits over simulated sub-ring sweeps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, TransportKind};
use crate::index_tensor::{CombinedIndexSpace, ENTRY_BYTES, GSIGMA_HEADER_BYTES};
use crate::ring_engine::{
    run_experiment_with, DirectionPolicy, EngineError, RingTopology, RunOptions,
};
use crate::transport::sim::LinkResource;
use crate::transport::SimLinkConfig;

#[derive(Debug, Error)]
pub enum PerfError {
    #[error("elapsed time must be positive, got {0}")]
    NonPositiveElapsed(f64),
    #[error("a fit needs at least two distinct sub-ring sizes")]
    DegenerateFit,
    #[error("no sub-ring sizes given")]
    EmptySweep,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Per-measurement envelope counts of one lane's ring of `S` ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageCounts {
    pub per_rank_send: u64,
    pub per_rank_recv: u64,
    pub total: u64,
    /// Messages crossing each directed ring link.
    pub per_link: u64,
}

pub fn message_counts(s: u64) -> MessageCounts {
    let steps = s.saturating_sub(1);
    MessageCounts {
        per_rank_send: steps,
        per_rank_recv: steps,
        total: s * steps,
        per_link: steps,
    }
}

/// Delivered ring bytes per second: `msg_bytes * S * n_meas / elapsed`.
pub fn effective_bandwidth(msg_bytes: f64, s: u64, n_meas: u64, elapsed_s: f64) -> Result<f64, PerfError> {
    if elapsed_s.is_nan() || elapsed_s <= 0.0 {
        return Err(PerfError::NonPositiveElapsed(elapsed_s));
    }
    Ok(msg_bytes * s as f64 * n_meas as f64 / elapsed_s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares of `y` on `x`.
pub fn fit_xy(points: &[(f64, f64)]) -> Result<LinearFit, PerfError> {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if points.len() < 2 || sxx == 0.0 {
        return Err(PerfError::DegenerateFit);
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = points
        .iter()
        .map(|p| (p.1 - (slope * p.0 + intercept)).powi(2))
        .sum();
    let ss_tot: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 {
        1.0
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

/// Fit elapsed time against sub-ring size.
pub fn fit_linear(points: &[SweepPoint]) -> Result<LinearFit, PerfError> {
    let xy: Vec<(f64, f64)> = points
        .iter()
        .map(|p| (p.subring_size as f64, p.elapsed_s))
        .collect();
    fit_xy(&xy)
}

/// What a sweep point runs: ring geometry and traffic volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RingShape {
    pub world_size: usize,
    pub subring_size: usize,
    pub lanes: usize,
    pub direction: DirectionPolicy,
    pub n_meas: u64,
    pub msg_bytes: u64,
}

/// Messages each link server carries per ring step, over all sub-rings and
/// lanes.
pub fn link_loads(
    shape: &RingShape,
    link: &SimLinkConfig,
) -> Result<BTreeMap<LinkResource, u64>, ConfigError> {
    let mut loads = BTreeMap::new();
    if shape.subring_size < 2 {
        return Ok(loads);
    }
    for w in 0..shape.world_size {
        let topo = RingTopology::new(
            shape.world_size,
            shape.subring_size,
            w,
            shape.lanes,
            shape.direction,
        )?;
        let base = topo.subring * shape.subring_size;
        for lane in 0..shape.lanes {
            let dst = base + topo.lane_ring(lane).send_to;
            let (_, resources) = link.resources(w, dst);
            for r in resources.into_iter().flatten() {
                *loads.entry(r).or_insert(0) += 1;
            }
        }
    }
    Ok(loads)
}

/// Time of one ring step: the slowest server's latency plus its queued
/// bytes over its rate.
pub fn step_time(shape: &RingShape, link: &SimLinkConfig) -> Result<f64, ConfigError> {
    let loads = link_loads(shape, link)?;
    Ok(loads
        .iter()
        .map(|(r, &load)| {
            let rate = match r {
                LinkResource::Pair { .. } => link.intra_bandwidth_bps,
                LinkResource::Egress(_) | LinkResource::Ingress(_) => link.nic_rate(),
            };
            link.latency_s + shape.msg_bytes as f64 * load as f64 / rate
        })
        .fold(0.0, f64::max))
}

/// `n_meas * (S - 1)` slowest-link steps.
pub fn predict_elapsed(shape: &RingShape, link: &SimLinkConfig) -> Result<f64, ConfigError> {
    let steps = shape.subring_size.saturating_sub(1) as f64;
    Ok(shape.n_meas as f64 * steps * step_time(shape, link)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub subring_size: usize,
    pub world_size: usize,
    pub n_meas: u64,
    pub msg_bytes: u64,
    pub ranks_per_node: usize,
    pub elapsed_s: f64,
    pub eff_bw_bps: f64,
    pub predicted_s: f64,
}

/// How many ranks a sweep point runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SweepWorld {
    /// The configuration's world size; sizes that do not divide it are
    /// rejected.
    #[default]
    Configured,
    /// One sub-ring per point (`world = S`).
    SingleSubring,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejected {
    pub subring_size: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub points: Vec<SweepPoint>,
    pub rejected: Vec<Rejected>,
    /// Present when at least two distinct sizes ran.
    pub fit: Option<LinearFit>,
}

pub fn gsigma_wire_bytes(space: CombinedIndexSpace) -> u64 {
    let n = space.len() as u64;
    GSIGMA_HEADER_BYTES as u64 + 2 * n * n * ENTRY_BYTES as u64
}

/// Envelope size a sweep charges: the configured override or the real
/// payload size.
pub fn sweep_message_bytes(config: &ExperimentConfig) -> Result<u64, ConfigError> {
    Ok(match config.link.charged_message_bytes {
        Some(b) => b,
        None => gsigma_wire_bytes(config.space()?),
    })
}

/// The configuration a sweep point runs.
pub fn sweep_config(
    base: &ExperimentConfig,
    subring_size: usize,
    world: SweepWorld,
) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = base.clone();
    cfg.transport = TransportKind::Sim;
    cfg.subring_size = subring_size;
    if world == SweepWorld::SingleSubring {
        cfg.world_size = subring_size;
    }
    cfg.link.charged_message_bytes = Some(sweep_message_bytes(base)?);
    cfg.validate()?;
    Ok(cfg)
}

pub fn ring_shape(cfg: &ExperimentConfig) -> Result<RingShape, ConfigError> {
    Ok(RingShape {
        world_size: cfg.world_size,
        subring_size: cfg.subring_size,
        lanes: cfg.lanes,
        direction: cfg.direction,
        n_meas: cfg.measurements,
        msg_bytes: sweep_message_bytes(cfg)?,
    })
}

/// Time `base` on the simulated network for each sub-ring size. Envelopes
/// carry only headers and are charged `msg_bytes` each.
pub fn run_sweep(
    base: &ExperimentConfig,
    sizes: &[usize],
    world: SweepWorld,
) -> Result<SweepOutcome, PerfError> {
    if sizes.is_empty() {
        return Err(PerfError::EmptySweep);
    }
    let options = RunOptions {
        traffic_only: true,
        ..RunOptions::default()
    };
    let mut points = Vec::new();
    let mut rejected = Vec::new();
    for &s in sizes {
        let cfg = match sweep_config(base, s, world) {
            Ok(cfg) => cfg,
            Err(e) => {
                rejected.push(Rejected {
                    subring_size: s,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let shape = ring_shape(&cfg)?;
        let report = run_experiment_with(&cfg, &options)?;
        let eff_bw_bps = if report.elapsed_s > 0.0 {
            effective_bandwidth(shape.msg_bytes as f64, s as u64, cfg.measurements, report.elapsed_s)?
        } else {
            0.0
        };
        points.push(SweepPoint {
            subring_size: s,
            world_size: cfg.world_size,
            n_meas: cfg.measurements,
            msg_bytes: shape.msg_bytes,
            ranks_per_node: cfg.link.ranks_per_node,
            elapsed_s: report.elapsed_s,
            eff_bw_bps,
            predicted_s: predict_elapsed(&shape, &cfg.link)?,
        });
    }
    let fit = fit_linear(&points).ok();
    Ok(SweepOutcome {
        points,
        rejected,
        fit,
    })
}
