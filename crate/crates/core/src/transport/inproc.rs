//! In-process fabric: every rank is a thread (or several) in this process.

use std::sync::{Arc, Mutex, MutexGuard};
use std::task::{Context, Poll};
use std::time::Instant;

use super::matching::{Arrival, MatchCore};
use super::{ClockKind, Endpoint, FabricStats, RequestId, Tag, TransportError};

pub struct InProcFabric {
    size: usize,
    core: Mutex<MatchCore>,
    epoch: Instant,
}

impl InProcFabric {
    pub fn new(size: usize) -> Arc<Self> {
        Arc::new(Self {
            size,
            core: Mutex::new(MatchCore::default()),
            epoch: Instant::now(),
        })
    }

    pub fn endpoints(self: &Arc<Self>) -> Vec<Arc<InProcEndpoint>> {
        (0..self.size)
            .map(|rank| {
                Arc::new(InProcEndpoint {
                    fabric: self.clone(),
                    rank,
                })
            })
            .collect()
    }

    pub fn stats(&self) -> FabricStats {
        self.lock().stats()
    }

    /// Requests posted but not yet completed, across all ranks.
    pub fn pending_requests(&self) -> usize {
        self.lock().pending_requests()
    }

    fn lock(&self) -> MutexGuard<'_, MatchCore> {
        self.core.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn with_core<T>(&self, f: impl FnOnce(&mut MatchCore) -> T) -> T {
        let mut core = self.lock();
        let out = f(&mut core);
        core.wake_all();
        out
    }
}

pub struct InProcEndpoint {
    fabric: Arc<InProcFabric>,
    rank: usize,
}

impl InProcEndpoint {
    fn check(&self, rank: usize) -> Result<(), TransportError> {
        if rank >= self.fabric.size {
            return Err(TransportError::InvalidRank {
                rank,
                size: self.fabric.size,
            });
        }
        Ok(())
    }
}

impl Endpoint for InProcEndpoint {
    fn rank(&self) -> usize {
        self.rank
    }

    fn size(&self) -> usize {
        self.fabric.size
    }

    fn post_send(
        &self,
        context: u64,
        dest: usize,
        tag: Tag,
        payload: Vec<u8>,
    ) -> Result<RequestId, TransportError> {
        self.check(dest)?;
        let source = self.rank;
        Ok(self.fabric.with_core(|core| {
            let id = core.new_send();
            core.deliver(
                dest,
                (context, source, tag),
                Arrival {
                    payload,
                    sender: Some(id),
                },
            );
            id
        }))
    }

    fn post_recv(
        &self,
        context: u64,
        source: usize,
        tag: Tag,
        buf: Vec<u8>,
    ) -> Result<RequestId, TransportError> {
        self.check(source)?;
        let dest = self.rank;
        Ok(self
            .fabric
            .with_core(|core| core.post_recv(dest, (context, source, tag), buf)))
    }

    fn prepare_channel(&self, context: u64, source: usize, tag: Tag, depth: usize) {
        let dest = self.rank;
        self.fabric
            .with_core(|core| core.prepare_channel(dest, (context, source, tag), depth));
    }

    fn poll_request(
        &self,
        id: RequestId,
        cx: &mut Context<'_>,
    ) -> Poll<Result<Vec<u8>, TransportError>> {
        self.fabric.lock().poll(id, cx)
    }

    fn now(&self) -> f64 {
        self.fabric.epoch.elapsed().as_secs_f64()
    }

    fn clock_kind(&self) -> ClockKind {
        ClockKind::Monotonic
    }
}
