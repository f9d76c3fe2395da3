//! Receive matching shared by all fabrics.
//!
//! Matching is exact on `(context, source, tag)` at the destination. Within
//! one key, arrivals and posted receives are both FIFO, so delivery order
//! equals send order.

use std::collections::{HashMap, VecDeque};
use std::task::{Context, Poll, Waker};

use super::{FabricStats, RequestId, Tag, TransportError};

pub(crate) type MatchKey = (u64, usize, Tag);

/// A message that reached its destination but may not be matched yet.
pub(crate) struct Arrival {
    pub payload: Vec<u8>,
    /// Rendezvous sends stay pending until their payload is copied out.
    pub sender: Option<RequestId>,
}

enum Slot {
    PendingSend { waker: Option<Waker> },
    PendingRecv { buf: Vec<u8>, waker: Option<Waker> },
    Done(Result<Vec<u8>, TransportError>),
}

#[derive(Default)]
struct Mailbox {
    unexpected: HashMap<MatchKey, VecDeque<Arrival>>,
    posted: HashMap<MatchKey, VecDeque<RequestId>>,
}

#[derive(Default)]
pub(crate) struct MatchCore {
    mailboxes: HashMap<usize, Mailbox>,
    slots: HashMap<RequestId, Slot>,
    next_id: u64,
    wake: Vec<Waker>,
    prepared: usize,
    stats: FabricStats,
}

impl MatchCore {
    fn fresh_id(&mut self) -> RequestId {
        self.next_id += 1;
        RequestId(self.next_id)
    }

    pub fn stats(&self) -> FabricStats {
        self.stats
    }

    /// Register a send whose completion is reported later.
    pub fn new_send(&mut self) -> RequestId {
        let id = self.fresh_id();
        self.slots.insert(id, Slot::PendingSend { waker: None });
        self.stats.sent += 1;
        id
    }

    pub fn complete(&mut self, id: RequestId, result: Result<Vec<u8>, TransportError>) {
        if let Some(slot) = self.slots.get_mut(&id) {
            let prev = std::mem::replace(slot, Slot::Done(result));
            match prev {
                Slot::PendingSend { waker } | Slot::PendingRecv { waker, .. } => {
                    self.wake.extend(waker);
                }
                Slot::Done(_) => {}
            }
        }
    }

    pub fn post_recv(&mut self, dest: usize, key: MatchKey, buf: Vec<u8>) -> RequestId {
        let id = self.fresh_id();
        self.slots.insert(id, Slot::PendingRecv { buf, waker: None });
        let mailbox = self.mailboxes.entry(dest).or_default();
        let arrival = mailbox.unexpected.get_mut(&key).and_then(VecDeque::pop_front);
        match arrival {
            Some(arrival) => self.matched(id, arrival),
            None => mailbox.posted.entry(key).or_default().push_back(id),
        }
        id
    }

    pub fn deliver(&mut self, dest: usize, key: MatchKey, arrival: Arrival) {
        let mailbox = self.mailboxes.entry(dest).or_default();
        let posted = mailbox.posted.get_mut(&key).and_then(VecDeque::pop_front);
        match posted {
            Some(id) => self.matched(id, arrival),
            None => mailbox.unexpected.entry(key).or_default().push_back(arrival),
        }
    }

    fn matched(&mut self, recv: RequestId, arrival: Arrival) {
        self.stats.delivered += 1;
        let buf = match self.slots.get_mut(&recv) {
            Some(Slot::PendingRecv { buf, .. }) => {
                let mut buf = std::mem::take(buf);
                buf.clear();
                buf.extend_from_slice(&arrival.payload);
                buf
            }
            _ => unreachable!("posted receive without a pending slot"),
        };
        self.complete(recv, Ok(buf));
        if let Some(sender) = arrival.sender {
            self.complete(sender, Ok(arrival.payload));
        }
    }

    pub fn poll(
        &mut self,
        id: RequestId,
        cx: &mut Context<'_>,
    ) -> Poll<Result<Vec<u8>, TransportError>> {
        match self.slots.get_mut(&id) {
            None => Poll::Ready(Err(TransportError::UnknownRequest(id))),
            Some(Slot::PendingSend { waker }) | Some(Slot::PendingRecv { waker, .. }) => {
                *waker = Some(cx.waker().clone());
                Poll::Pending
            }
            Some(Slot::Done(_)) => match self.slots.remove(&id) {
                Some(Slot::Done(result)) => Poll::Ready(result),
                _ => unreachable!(),
            },
        }
    }

    /// Fail every pending request (used when a peer link dies).
    pub fn fail_pending(&mut self, error: TransportError) {
        let pending: Vec<RequestId> = self
            .slots
            .iter()
            .filter(|(_, s)| !matches!(s, Slot::Done(_)))
            .map(|(id, _)| *id)
            .collect();
        for id in pending {
            self.complete(id, Err(error.clone()));
        }
    }

    pub fn pending_requests(&self) -> usize {
        self.slots.values().filter(|s| !matches!(s, Slot::Done(_))).count()
    }

    /// Wake everyone whose request completed since the last call. Drains in
    /// place so the waker list keeps its capacity.
    pub fn wake_all(&mut self) {
        self.wake.drain(..).for_each(Waker::wake);
    }

    /// Pre-size the queues of one receive channel and the request table so
    /// that steady-state traffic on it never allocates.
    pub fn prepare_channel(&mut self, dest: usize, key: MatchKey, depth: usize) {
        let mailbox = self.mailboxes.entry(dest).or_default();
        mailbox.unexpected.entry(key).or_default().reserve(depth);
        mailbox.posted.entry(key).or_default().reserve(depth);
        self.prepared += 2 * depth;
        let want = self.prepared + 64;
        self.slots.reserve(want.saturating_sub(self.slots.len()));
        self.wake.reserve(want.saturating_sub(self.wake.len()));
    }
}
