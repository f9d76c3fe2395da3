//! Message passing with nonblocking send/receive, tag matching, communicator
//! split and sum-reduction.
//!
//! Three fabrics implement [`Endpoint`]:
//!
//! * [`inproc`]: ranks are threads of one process sharing a matching table.
//! * [`sim`]: a single-threaded, deterministic virtual-time network with
//!   per-link FIFO servers. Rank programs run as tasks on its executor.
//! * [`tcp`]: one endpoint per OS process over length-prefixed TCP frames.
//!
//! [`Communicator`] layers groups, contexts and collectives on top of any of
//! them, so the ring engine is written once.
//!
//! Sends use rendezvous semantics: the payload vector moves into the
//! transport and comes back from `wait` once a matching receive has copied it
//! out. Receives supply their own buffer, which is returned filled. Neither
//! path allocates once buffers have warmed up.

mod comm;
mod exec;
pub mod inproc;
mod matching;
pub mod sim;
pub mod tcp;

use std::task::{Context, Poll};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index_tensor::TensorError;

pub use comm::{split_groups, Communicator, Request, RequestKind, Wait};
pub use exec::{block_on, Stalled};
pub use inproc::{InProcEndpoint, InProcFabric};
pub use sim::{LinkClass, LinkRecord, SimDeadlock, SimEndpoint, SimFabric, SimLinkConfig};
pub use tcp::{TcpEndpoint, TcpRendezvous};

/// Message tag. Negative tags are reserved for internal collectives.
pub type Tag = i32;

/// Opaque handle of an in-flight operation inside one fabric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RequestId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockKind {
    /// Monotonic wall clock, seconds since the fabric was created.
    Monotonic,
    /// Simulated time of the virtual network.
    Virtual,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransportError {
    #[error("rank {rank} out of range for communicator of size {size}")]
    InvalidRank { rank: usize, size: usize },
    #[error("tag {0} is reserved for internal collectives")]
    ReservedTag(Tag),
    #[error("request {0:?} is unknown or was already waited on")]
    UnknownRequest(RequestId),
    #[error("no progress within {0:?}")]
    Stalled(Duration),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("peer rank {0} disconnected")]
    Disconnected(usize),
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Payload(#[from] TensorError),
}

impl From<std::io::Error> for TransportError {
    fn from(e: std::io::Error) -> Self {
        TransportError::Io(e.to_string())
    }
}

/// Envelope traffic observed by a fabric.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FabricStats {
    pub sent: u64,
    pub delivered: u64,
}

/// One world rank's attachment to a fabric. Ranks, sources and destinations
/// here are world ranks; [`Communicator`] translates group ranks.
pub trait Endpoint: Send + Sync + 'static {
    fn rank(&self) -> usize;
    fn size(&self) -> usize;

    fn post_send(
        &self,
        context: u64,
        dest: usize,
        tag: Tag,
        payload: Vec<u8>,
    ) -> Result<RequestId, TransportError>;

    fn post_recv(
        &self,
        context: u64,
        source: usize,
        tag: Tag,
        buf: Vec<u8>,
    ) -> Result<RequestId, TransportError>;

    /// Hint that `(context, source, tag)` will carry a steady stream of
    /// messages to this rank with at most `depth` outstanding; fabrics may
    /// pre-size their queues so that stream never allocates.
    fn prepare_channel(&self, _context: u64, _source: usize, _tag: Tag, _depth: usize) {}

    /// Completes exactly once per request. Sends yield their payload buffer
    /// back, receives yield the filled buffer.
    fn poll_request(
        &self,
        id: RequestId,
        cx: &mut Context<'_>,
    ) -> Poll<Result<Vec<u8>, TransportError>>;

    /// Seconds on this fabric's clock.
    fn now(&self) -> f64;

    fn clock_kind(&self) -> ClockKind;
}
