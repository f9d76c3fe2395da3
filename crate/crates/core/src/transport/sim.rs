//! Deterministic virtual-time network.
//!
//! Ranks are packed onto nodes consecutively (`node = rank / ranks_per_node`).
//! Every ordered pair of ranks on one node has its own intra-node link; each
//! node has one NIC with an egress and an ingress server at the per-port
//! bandwidth. An inter-node message passes its source node's egress and then
//! its destination node's ingress, each busy for
//! `bytes / (nic_bandwidth * nic_utilization)` seconds; the ingress may start
//! as soon as the egress has started (the switch buffers, so a busy ingress
//! never holds up the sender's egress). All servers are FIFO; latency is
//! added after transmission and does not occupy a server, so one message
//! costs `latency + bytes / bandwidth` and `n` messages queued on the same
//! server finish at `latency + n * bytes / bandwidth`.
//!
//! Events are processed in timestamp order with ties broken by
//! (source, dest, tag). Rank programs run as tasks on [`SimFabric::run`]: the
//! executor polls woken tasks in index order and only advances the clock once
//! every task is blocked, so a run is a pure function of its inputs.

use std::cmp::{Ordering as CmpOrdering, Reverse};
use std::collections::{BinaryHeap, HashMap};
use std::future::Future;
use std::pin::Pin;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::task::{Context, Poll, Wake, Waker};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::matching::{Arrival, MatchCore, MatchKey};
use super::{ClockKind, Endpoint, FabricStats, RequestId, Tag, TransportError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimLinkConfig {
    /// Per-port NIC bandwidth in each direction, bytes per second.
    pub nic_bandwidth_bps: f64,
    /// Bandwidth of each intra-node rank-to-rank link, bytes per second.
    pub intra_bandwidth_bps: f64,
    /// Per-message latency, seconds.
    pub latency_s: f64,
    pub ranks_per_node: usize,
    /// Fraction of the NIC port bandwidth the ring actually sustains.
    pub nic_utilization: f64,
    /// When set, every point-to-point message (non-negative tag) is charged
    /// this many bytes regardless of its real length, so small payloads can
    /// stand in for large ones. Internal collectives keep their real size.
    pub charged_message_bytes: Option<u64>,
}

impl Default for SimLinkConfig {
    fn default() -> Self {
        Self {
            nic_bandwidth_bps: 12.5e9,
            intra_bandwidth_bps: 25e9,
            latency_s: 5e-6,
            ranks_per_node: 6,
            nic_utilization: 1.0,
            charged_message_bytes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid link parameter `{field}`: {reason}")]
pub struct InvalidLinkConfig {
    pub field: &'static str,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkClass {
    Intra,
    Nic,
}

/// A FIFO server in the link model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LinkResource {
    Pair { src: usize, dst: usize },
    Egress(usize),
    Ingress(usize),
}

impl SimLinkConfig {
    pub fn validate(&self) -> Result<(), InvalidLinkConfig> {
        let positive = |field: &'static str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(InvalidLinkConfig {
                    field,
                    reason: format!("must be finite and > 0, got {v}"),
                })
            }
        };
        positive("nic_bandwidth_bps", self.nic_bandwidth_bps)?;
        positive("intra_bandwidth_bps", self.intra_bandwidth_bps)?;
        positive("latency_s", self.latency_s)?;
        positive("nic_utilization", self.nic_utilization)?;
        if self.nic_utilization > 1.0 {
            return Err(InvalidLinkConfig {
                field: "nic_utilization",
                reason: format!("must be at most 1, got {}", self.nic_utilization),
            });
        }
        if self.ranks_per_node == 0 {
            return Err(InvalidLinkConfig {
                field: "ranks_per_node",
                reason: "must be at least 1".into(),
            });
        }
        if self.charged_message_bytes == Some(0) {
            return Err(InvalidLinkConfig {
                field: "charged_message_bytes",
                reason: "must be at least 1 when set".into(),
            });
        }
        Ok(())
    }

    pub fn node_of(&self, rank: usize) -> usize {
        rank / self.ranks_per_node
    }

    pub fn class(&self, src: usize, dst: usize) -> LinkClass {
        if self.node_of(src) == self.node_of(dst) {
            LinkClass::Intra
        } else {
            LinkClass::Nic
        }
    }

    /// Sustained NIC service rate, bytes per second.
    pub fn nic_rate(&self) -> f64 {
        self.nic_bandwidth_bps * self.nic_utilization
    }

    pub fn rate(&self, class: LinkClass) -> f64 {
        match class {
            LinkClass::Intra => self.intra_bandwidth_bps,
            LinkClass::Nic => self.nic_rate(),
        }
    }

    /// The servers a message from `src` to `dst` occupies.
    pub fn resources(&self, src: usize, dst: usize) -> (LinkClass, [Option<LinkResource>; 2]) {
        match self.class(src, dst) {
            LinkClass::Intra => (
                LinkClass::Intra,
                [Some(LinkResource::Pair { src, dst }), None],
            ),
            LinkClass::Nic => (
                LinkClass::Nic,
                [
                    Some(LinkResource::Egress(self.node_of(src))),
                    Some(LinkResource::Ingress(self.node_of(dst))),
                ],
            ),
        }
    }
}

/// One delivered message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkRecord {
    pub src: usize,
    pub dst: usize,
    pub tag: Tag,
    pub bytes: u64,
    pub class: LinkClass,
    pub posted_s: f64,
    pub start_s: f64,
    /// Delivery time, after the transfer and the latency.
    pub end_s: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("simulated deadlock at t = {time_s} s: tasks {stalled_tasks:?} blocked with no pending events")]
pub struct SimDeadlock {
    pub time_s: f64,
    pub stalled_tasks: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EventKind {
    Posted,
    Delivered,
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    src: usize,
    dst: usize,
    tag: Tag,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == CmpOrdering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> CmpOrdering {
        self.time
            .total_cmp(&other.time)
            .then(self.src.cmp(&other.src))
            .then(self.dst.cmp(&other.dst))
            .then(self.tag.cmp(&other.tag))
            .then(self.seq.cmp(&other.seq))
    }
}

struct Flight {
    key: MatchKey,
    payload: Vec<u8>,
    send_id: RequestId,
    bytes: u64,
    posted: f64,
    start: f64,
}

struct SimCore {
    config: SimLinkConfig,
    clock: f64,
    seq: u64,
    events: BinaryHeap<Reverse<Event>>,
    flights: HashMap<u64, Flight>,
    free_at: HashMap<LinkResource, f64>,
    matcher: MatchCore,
    log: Option<Vec<LinkRecord>>,
}

impl SimCore {
    fn schedule(&mut self, time: f64, src: usize, dst: usize, tag: Tag, seq: u64, kind: EventKind) {
        self.events.push(Reverse(Event {
            time,
            src,
            dst,
            tag,
            seq,
            kind,
        }));
    }

    /// Process every event at the earliest pending timestamp.
    fn advance(&mut self) -> bool {
        let Some(Reverse(first)) = self.events.peek().copied() else {
            return false;
        };
        debug_assert!(first.time >= self.clock);
        self.clock = first.time;
        while let Some(Reverse(ev)) = self.events.peek().copied() {
            if ev.time != first.time {
                break;
            }
            self.events.pop();
            match ev.kind {
                EventKind::Posted => self.transmit(ev),
                EventKind::Delivered => self.deliver(ev),
            }
        }
        true
    }

    fn transmit(&mut self, ev: Event) {
        let (class, resources) = self.config.resources(ev.src, ev.dst);
        let flight = self.flights.get_mut(&ev.seq).expect("posted message is in flight");
        let duration = flight.bytes as f64 / self.config.rate(class);
        // Servers are stages of a cut-through path: each starts once the
        // previous one has started and it is free, and cannot finish before
        // the previous one.
        let (mut start, mut end) = (ev.time, ev.time);
        for (i, r) in resources.iter().flatten().enumerate() {
            let s = start.max(self.free_at.get(r).copied().unwrap_or(0.0));
            let e = (s + duration).max(end);
            self.free_at.insert(*r, e);
            if i == 0 {
                flight.start = s;
            }
            (start, end) = (s, e);
        }
        let delivery = end + self.config.latency_s;
        self.schedule(delivery, ev.src, ev.dst, ev.tag, ev.seq, EventKind::Delivered);
    }

    fn deliver(&mut self, ev: Event) {
        let flight = self.flights.remove(&ev.seq).expect("delivered message is in flight");
        if let Some(log) = self.log.as_mut() {
            log.push(LinkRecord {
                src: ev.src,
                dst: ev.dst,
                tag: ev.tag,
                bytes: flight.bytes,
                class: self.config.class(ev.src, ev.dst),
                posted_s: flight.posted,
                start_s: flight.start,
                end_s: ev.time,
            });
        }
        self.matcher.deliver(
            ev.dst,
            flight.key,
            Arrival {
                payload: flight.payload,
                sender: Some(flight.send_id),
            },
        );
    }
}

pub struct SimFabric {
    size: usize,
    core: Mutex<SimCore>,
}

impl SimFabric {
    pub fn new(size: usize, config: SimLinkConfig) -> Result<Arc<Self>, InvalidLinkConfig> {
        config.validate()?;
        Ok(Arc::new(Self {
            size,
            core: Mutex::new(SimCore {
                config,
                clock: 0.0,
                seq: 0,
                events: BinaryHeap::new(),
                flights: HashMap::new(),
                free_at: HashMap::new(),
                matcher: MatchCore::default(),
                log: Some(Vec::new()),
            }),
        }))
    }

    pub fn endpoints(self: &Arc<Self>) -> Vec<Arc<SimEndpoint>> {
        (0..self.size)
            .map(|rank| {
                Arc::new(SimEndpoint {
                    fabric: self.clone(),
                    rank,
                })
            })
            .collect()
    }

    /// Turn per-message logging on or off (on by default). Large sweeps
    /// switch it off to keep memory flat.
    pub fn set_logging(&self, enabled: bool) {
        let mut core = self.lock();
        match (enabled, core.log.is_some()) {
            (true, false) => core.log = Some(Vec::new()),
            (false, true) => core.log = None,
            _ => {}
        }
    }

    pub fn config(&self) -> SimLinkConfig {
        self.lock().config.clone()
    }

    pub fn now(&self) -> f64 {
        self.lock().clock
    }

    pub fn stats(&self) -> FabricStats {
        self.lock().matcher.stats()
    }

    /// Delivered messages so far, in delivery order.
    pub fn log(&self) -> Vec<LinkRecord> {
        self.lock().log.clone().unwrap_or_default()
    }

    /// Process all events at the next timestamp and wake whoever they
    /// complete. Returns `false` when nothing is pending.
    pub fn advance(&self) -> bool {
        let mut core = self.lock();
        let progressed = core.advance();
        core.matcher.wake_all();
        progressed
    }

    /// Run tasks to completion on the virtual clock.
    pub fn run<'a, T>(
        &self,
        tasks: Vec<Pin<Box<dyn Future<Output = T> + 'a>>>,
    ) -> Result<Vec<T>, SimDeadlock> {
        let n = tasks.len();
        let flags: Vec<Arc<TaskFlag>> = (0..n).map(|_| Arc::new(TaskFlag::default())).collect();
        let wakers: Vec<Waker> = flags.iter().map(|f| Waker::from(f.clone())).collect();
        let mut tasks: Vec<_> = tasks.into_iter().map(Some).collect();
        let mut results: Vec<Option<T>> = (0..n).map(|_| None).collect();
        let mut remaining = n;
        while remaining > 0 {
            let mut polled = false;
            for i in 0..n {
                let Some(task) = tasks[i].as_mut() else { continue };
                if !flags[i].0.swap(false, Ordering::AcqRel) {
                    continue;
                }
                polled = true;
                let mut cx = Context::from_waker(&wakers[i]);
                if let Poll::Ready(v) = task.as_mut().poll(&mut cx) {
                    results[i] = Some(v);
                    tasks[i] = None;
                    remaining -= 1;
                }
            }
            if !polled && !self.advance() {
                return Err(SimDeadlock {
                    time_s: self.now(),
                    stalled_tasks: (0..n).filter(|&i| tasks[i].is_some()).collect(),
                });
            }
        }
        Ok(results.into_iter().map(|r| r.expect("finished task")).collect())
    }

    pub fn block_on<'a, T>(&self, fut: impl Future<Output = T> + 'a) -> Result<T, SimDeadlock> {
        let mut out = self.run(vec![Box::pin(fut)])?;
        Ok(out.pop().expect("one task"))
    }

    fn lock(&self) -> MutexGuard<'_, SimCore> {
        self.core.lock().unwrap_or_else(|e| e.into_inner())
    }
}

struct TaskFlag(AtomicBool);

impl Default for TaskFlag {
    fn default() -> Self {
        TaskFlag(AtomicBool::new(true))
    }
}

impl Wake for TaskFlag {
    fn wake(self: Arc<Self>) {
        self.0.store(true, Ordering::Release);
    }

    fn wake_by_ref(self: &Arc<Self>) {
        self.0.store(true, Ordering::Release);
    }
}

pub struct SimEndpoint {
    fabric: Arc<SimFabric>,
    rank: usize,
}

impl SimEndpoint {
    pub fn fabric(&self) -> &Arc<SimFabric> {
        &self.fabric
    }

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

impl Endpoint for SimEndpoint {
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
        let mut core = self.fabric.lock();
        let send_id = core.matcher.new_send();
        core.seq += 1;
        let seq = core.seq;
        let now = core.clock;
        let bytes = match core.config.charged_message_bytes {
            Some(charged) if tag >= 0 => charged,
            _ => payload.len() as u64,
        };
        core.flights.insert(
            seq,
            Flight {
                key: (context, self.rank, tag),
                payload,
                send_id,
                bytes,
                posted: now,
                start: now,
            },
        );
        core.schedule(now, self.rank, dest, tag, seq, EventKind::Posted);
        Ok(send_id)
    }

    fn post_recv(
        &self,
        context: u64,
        source: usize,
        tag: Tag,
        buf: Vec<u8>,
    ) -> Result<RequestId, TransportError> {
        self.check(source)?;
        let mut core = self.fabric.lock();
        let id = core.matcher.post_recv(self.rank, (context, source, tag), buf);
        core.matcher.wake_all();
        Ok(id)
    }

    fn prepare_channel(&self, context: u64, source: usize, tag: Tag, depth: usize) {
        self.fabric
            .lock()
            .matcher
            .prepare_channel(self.rank, (context, source, tag), depth);
    }

    fn poll_request(
        &self,
        id: RequestId,
        cx: &mut Context<'_>,
    ) -> Poll<Result<Vec<u8>, TransportError>> {
        self.fabric.lock().matcher.poll(id, cx)
    }

    fn now(&self) -> f64 {
        self.fabric.now()
    }

    fn clock_kind(&self) -> ClockKind {
        ClockKind::Virtual
    }
}
