//! Pipeline ring broadcast of per-measurement payloads.
//!
//! The world is cut into sub-rings of `S` consecutive ranks. In every
//! measurement each lane of each rank generates one payload, applies it to
//! its rank's slice, then passes buffers around its sub-ring for `S - 1`
//! steps: receive from the left, send to the right, apply what arrived, and
//! swap the send and receive buffers. After the last step every rank has
//! applied all `S` payloads of the sub-ring exactly once, and the buffer it
//! holds for sending was born at its right neighbor.
//!
//! Lanes with the same index form independent rings, kept apart by tag
//! offsets. At the end, slices at the same sub-ring position are summed
//! across sub-rings.

mod run;

use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ConfigError;
use crate::index_tensor::{
    accumulate_g4, CombinedIndexSpace, GSigmaBuf, GtSlice, Origin, TensorError, ValueMode,
    ENTRY_BYTES,
};
use crate::instrument::LaneProbe;
use crate::memory_model::MemoryError;
use crate::transport::{Communicator, Endpoint, Tag, TransportError};

pub use run::{
    run_experiment, run_experiment_with, run_rank, ExperimentReport, Faults, MemorySection,
    ProbeEvent, ProbeHook, ProbePoint, RankSummary, RunOptions, StalledLane,
};

/// Base receive tag; lane `t` receives on `RECV_TAG + t`.
pub const RECV_TAG: Tag = 1000;
/// Base send tag. Equal to [`RECV_TAG`] so a sender's tag matches its
/// partner's receive.
pub const SEND_TAG: Tag = 1000;
/// Lane counts must stay below the tag stride so lane tags never overlap
/// the next block.
pub const MAX_LANES: usize = 1000;
/// Payload buffers a lane owns: the generated one, send and receive.
pub const BUFFERS_PER_LANE: usize = 3;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("deadlock ({detail}); stalled: {}", StalledLane::list(.stalled))]
    Deadlock {
        detail: String,
        stalled: Vec<StalledLane>,
    },
    #[error("rank {rank} failed: {reason}")]
    Rank { rank: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirectionPolicy {
    /// Every lane passes to the right.
    #[default]
    Forward,
    /// Odd lanes pass to the left.
    Alternate,
}

/// Where one rank sits and how its lanes are wired.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RingTopology {
    pub world_size: usize,
    pub subring_size: usize,
    pub world_rank: usize,
    pub subring: usize,
    pub rank: usize,
    pub lanes: usize,
    pub direction: DirectionPolicy,
}

/// One lane's neighbors (sub-ring ranks) and tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LaneRing {
    pub lane: usize,
    pub recv_from: usize,
    pub send_to: usize,
    pub recv_tag: Tag,
    pub send_tag: Tag,
}

impl RingTopology {
    pub fn new(
        world_size: usize,
        subring_size: usize,
        world_rank: usize,
        lanes: usize,
        direction: DirectionPolicy,
    ) -> Result<Self, ConfigError> {
        let invalid = |field: &str, reason: String| ConfigError::Invalid {
            field: field.into(),
            reason,
        };
        if subring_size == 0 || !world_size.is_multiple_of(subring_size) {
            return Err(invalid(
                "subring_size",
                format!("{subring_size} does not divide world_size {world_size}"),
            ));
        }
        if world_rank >= world_size {
            return Err(invalid(
                "world_rank",
                format!("{world_rank} out of range for world of {world_size}"),
            ));
        }
        if lanes == 0 || lanes >= MAX_LANES {
            return Err(invalid("lanes", format!("must be in [1, {MAX_LANES}), got {lanes}")));
        }
        Ok(Self {
            world_size,
            subring_size,
            world_rank,
            subring: world_rank / subring_size,
            rank: world_rank % subring_size,
            lanes,
            direction,
        })
    }

    pub fn left(&self) -> usize {
        (self.rank + self.subring_size - 1) % self.subring_size
    }

    pub fn right(&self) -> usize {
        (self.rank + 1) % self.subring_size
    }

    pub fn lane_ring(&self, lane: usize) -> LaneRing {
        lane_ring_id(self, lane)
    }

    pub fn origin(&self, lane: usize, measurement: u64) -> Origin {
        Origin::new(
            self.subring as u32,
            self.rank as u32,
            self.subring_size as u32,
            lane as u32,
            measurement,
        )
    }
}

pub fn lane_ring_id(topology: &RingTopology, lane: usize) -> LaneRing {
    let reversed = topology.direction == DirectionPolicy::Alternate && lane % 2 == 1;
    let (recv_from, send_to) = if reversed {
        (topology.right(), topology.left())
    } else {
        (topology.left(), topology.right())
    };
    LaneRing {
        lane,
        recv_from,
        send_to,
        recv_tag: RECV_TAG + lane as Tag,
        send_tag: SEND_TAG + lane as Tag,
    }
}

/// Collective: every rank joins the sub-ring of its `S` consecutive ranks.
pub async fn build_subrings<E: Endpoint>(
    world: &Communicator<E>,
    subring_size: usize,
) -> Result<Communicator<E>, EngineError> {
    if subring_size == 0 || !world.size().is_multiple_of(subring_size) {
        return Err(ConfigError::Invalid {
            field: "subring_size".into(),
            reason: format!("{subring_size} does not divide world_size {}", world.size()),
        }
        .into());
    }
    let r = world.rank();
    Ok(world
        .split((r / subring_size) as u32, (r % subring_size) as u32)
        .await?)
}

/// The three payload buffers of one lane plus its measurement counter.
#[derive(Debug)]
pub struct LaneState {
    lane: usize,
    gsigma: GSigmaBuf,
    send: GSigmaBuf,
    recv: GSigmaBuf,
    measurement: u64,
    traffic: bool,
}

impl LaneState {
    pub fn new(lane: usize, space: CombinedIndexSpace) -> Self {
        Self {
            lane,
            gsigma: GSigmaBuf::allocate(space),
            send: GSigmaBuf::allocate(space),
            recv: GSigmaBuf::allocate(space),
            measurement: 0,
            traffic: false,
        }
    }

    /// Buffers that carry only a header: the ring moves envelopes but
    /// nothing is generated or applied. Used to time large sweeps.
    pub fn traffic(lane: usize, space: CombinedIndexSpace) -> Self {
        Self {
            lane,
            gsigma: GSigmaBuf::header_only(space),
            send: GSigmaBuf::header_only(space),
            recv: GSigmaBuf::header_only(space),
            measurement: 0,
            traffic: true,
        }
    }

    pub fn lane(&self) -> usize {
        self.lane
    }

    pub fn measurements_done(&self) -> u64 {
        self.measurement
    }

    pub fn is_traffic(&self) -> bool {
        self.traffic
    }

    pub fn buffer_count(&self) -> usize {
        BUFFERS_PER_LANE
    }

    /// Matrix bytes held across the three buffers (headers excluded).
    pub fn matrix_bytes(&self) -> u64 {
        [&self.gsigma, &self.send, &self.recv]
            .iter()
            .map(|b| b.header().map(|(_, _, len)| len as u64).unwrap_or(0))
            .sum()
    }

    /// Origin of the payload currently in the send buffer.
    pub fn holding(&self) -> Result<Origin, TensorError> {
        self.send.origin()
    }
}

/// Bytes of one lane's three buffers for `space`.
pub fn lane_matrix_bytes(space: CombinedIndexSpace) -> u64 {
    let n = space.len() as u64;
    BUFFERS_PER_LANE as u64 * 2 * n * n * ENTRY_BYTES as u64
}

/// Everything a lane needs to run one measurement.
pub struct MeasurementContext<'a, E: Endpoint> {
    pub topology: &'a RingTopology,
    pub comm: &'a Communicator<E>,
    pub slice: &'a Mutex<GtSlice>,
    pub seed: u64,
    pub mode: ValueMode,
    pub probe: LaneProbe<'a>,
    /// Ring steps per measurement; `S - 1` unless a fault is injected.
    pub steps: usize,
    pub hook: Option<&'a ProbeHook>,
    /// Added to the lane's send tag; nonzero only for fault injection.
    pub send_tag_offset: Tag,
    pub(crate) progress: Option<&'a run::LaneProgress>,
}

impl<'a, E: Endpoint> MeasurementContext<'a, E> {
    pub fn new(
        topology: &'a RingTopology,
        comm: &'a Communicator<E>,
        slice: &'a Mutex<GtSlice>,
        seed: u64,
        mode: ValueMode,
        probe: LaneProbe<'a>,
    ) -> Self {
        Self {
            topology,
            comm,
            slice,
            seed,
            mode,
            probe,
            steps: topology.subring_size - 1,
            hook: None,
            send_tag_offset: 0,
            progress: None,
        }
    }

    fn emit(&self, lane: &LaneState, point: ProbePoint) {
        if let Some(hook) = self.hook {
            hook(ProbeEvent {
                world_rank: self.topology.world_rank,
                lane: lane.lane,
                measurement: lane.measurement,
                point,
            });
        }
    }

    fn accumulate(&self, buf: &GSigmaBuf) -> Result<(), EngineError> {
        let view = buf.view()?;
        let t = self.comm.now();
        {
            let mut slice = self.slice.lock().unwrap_or_else(|e| e.into_inner());
            accumulate_g4(&mut slice, &view)?;
        }
        self.probe.accumulated(&view.origin(), self.comm.now() - t);
        Ok(())
    }
}

/// One measurement of one lane: generate, apply locally, then `steps` ring
/// steps. Buffers are only ever swapped or moved through the transport.
pub async fn run_measurement<E: Endpoint>(
    ctx: &MeasurementContext<'_, E>,
    lane: &mut LaneState,
) -> Result<(), EngineError> {
    let ring = ctx.topology.lane_ring(lane.lane);
    let comm = ctx.comm;
    let start = comm.now();
    ctx.emit(lane, ProbePoint::MeasurementStart);

    let origin = ctx.topology.origin(lane.lane, lane.measurement);
    if lane.traffic {
        lane.gsigma.write_header(&origin);
    } else {
        lane.gsigma.fill(ctx.seed, origin, ctx.mode)?;
        ctx.accumulate(&lane.gsigma)?;
    }
    std::mem::swap(&mut lane.gsigma, &mut lane.send);

    ctx.emit(lane, ProbePoint::RingStart);
    let mut waited = 0.0;
    for step in 0..ctx.steps {
        if let Some(p) = ctx.progress {
            p.at(lane.measurement, step as u64);
        }
        let recv = comm.irecv(lane.recv.take(), ring.recv_from, ring.recv_tag)?;
        let payload = lane.send.take();
        let sent_bytes = payload.len();
        let send = comm.isend(payload, ring.send_to, ring.send_tag + ctx.send_tag_offset)?;
        ctx.probe.sent(sent_bytes);

        let t = comm.now();
        lane.recv.restore(comm.wait(recv).await?);
        waited += comm.now() - t;
        ctx.probe.received(lane.recv.len());
        if !lane.traffic {
            ctx.accumulate(&lane.recv)?;
        }

        let t = comm.now();
        lane.send.restore(comm.wait(send).await?);
        waited += comm.now() - t;
        std::mem::swap(&mut lane.send, &mut lane.recv);
    }
    ctx.emit(lane, ProbePoint::RingEnd);

    ctx.probe.waited(waited);
    ctx.probe.ran(comm.now() - start);
    ctx.emit(lane, ProbePoint::MeasurementEnd);
    lane.measurement += 1;
    Ok(())
}
