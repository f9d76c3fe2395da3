use std::collections::BTreeMap;
use std::future::Future;
use std::pin::Pin;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::task::{Context, Poll};

use super::{Endpoint, RequestId, Tag, TransportError};
use crate::index_tensor::GtSlice;

const TAG_SPLIT_GATHER: Tag = -1;
const TAG_SPLIT_SCATTER: Tag = -2;
const TAG_REDUCE: Tag = -3;
const TAG_GATHER: Tag = -4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestKind {
    Send,
    Recv,
}

/// An in-flight operation. Waiting consumes it, so a handle can only ever be
/// waited on once.
#[derive(Debug)]
#[must_use = "requests must be waited on"]
pub struct Request {
    id: RequestId,
    kind: RequestKind,
    peer: usize,
    tag: Tag,
}

impl Request {
    pub fn id(&self) -> RequestId {
        self.id
    }

    pub fn kind(&self) -> RequestKind {
        self.kind
    }

    /// Group rank of the peer.
    pub fn peer(&self) -> usize {
        self.peer
    }

    pub fn tag(&self) -> Tag {
        self.tag
    }
}

/// Future returned by [`Communicator::wait`].
pub struct Wait<'a, E: Endpoint> {
    endpoint: &'a E,
    id: RequestId,
}

impl<E: Endpoint> Future for Wait<'_, E> {
    type Output = Result<Vec<u8>, TransportError>;

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Self::Output> {
        self.endpoint.poll_request(self.id, cx)
    }
}

/// A group of world ranks with its own matching context.
pub struct Communicator<E: Endpoint> {
    endpoint: Arc<E>,
    context: u64,
    members: Arc<[usize]>,
    rank: usize,
    splits: AtomicU64,
}

impl<E: Endpoint> std::fmt::Debug for Communicator<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Communicator")
            .field("context", &self.context)
            .field("rank", &self.rank)
            .field("members", &self.members)
            .finish()
    }
}

impl<E: Endpoint> Communicator<E> {
    /// The communicator spanning every rank of the endpoint's fabric.
    pub fn world(endpoint: Arc<E>) -> Self {
        let size = endpoint.size();
        let rank = endpoint.rank();
        Self {
            endpoint,
            context: 0,
            members: (0..size).collect(),
            rank,
            splits: AtomicU64::new(0),
        }
    }

    /// A communicator over `members` (world ranks, in group-rank order)
    /// without running the collective split protocol. Every member must
    /// construct it with the same `context` and `members`.
    pub fn from_members(
        endpoint: Arc<E>,
        context: u64,
        members: Vec<usize>,
    ) -> Result<Self, TransportError> {
        let me = endpoint.rank();
        let rank = members.iter().position(|&w| w == me).ok_or_else(|| {
            TransportError::Protocol(format!("world rank {me} is not a member of {members:?}"))
        })?;
        if let Some(&bad) = members.iter().find(|&&w| w >= endpoint.size()) {
            return Err(TransportError::InvalidRank {
                rank: bad,
                size: endpoint.size(),
            });
        }
        Ok(Self {
            endpoint,
            context,
            members: members.into(),
            rank,
            splits: AtomicU64::new(0),
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn context(&self) -> u64 {
        self.context
    }

    pub fn endpoint(&self) -> &Arc<E> {
        &self.endpoint
    }

    /// World ranks of the members, in group-rank order.
    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn world_rank_of(&self, rank: usize) -> Result<usize, TransportError> {
        self.members
            .get(rank)
            .copied()
            .ok_or(TransportError::InvalidRank {
                rank,
                size: self.size(),
            })
    }

    /// Seconds on the underlying fabric's clock.
    pub fn now(&self) -> f64 {
        self.endpoint.now()
    }

    pub fn isend(&self, payload: Vec<u8>, dest: usize, tag: Tag) -> Result<Request, TransportError> {
        if tag < 0 {
            return Err(TransportError::ReservedTag(tag));
        }
        self.isend_raw(payload, dest, tag)
    }

    pub fn irecv(&self, buf: Vec<u8>, source: usize, tag: Tag) -> Result<Request, TransportError> {
        if tag < 0 {
            return Err(TransportError::ReservedTag(tag));
        }
        self.irecv_raw(buf, source, tag)
    }

    fn isend_raw(&self, payload: Vec<u8>, dest: usize, tag: Tag) -> Result<Request, TransportError> {
        let world_dest = self.world_rank_of(dest)?;
        let id = self
            .endpoint
            .post_send(self.context, world_dest, tag, payload)?;
        Ok(Request {
            id,
            kind: RequestKind::Send,
            peer: dest,
            tag,
        })
    }

    fn irecv_raw(&self, buf: Vec<u8>, source: usize, tag: Tag) -> Result<Request, TransportError> {
        let world_source = self.world_rank_of(source)?;
        let id = self
            .endpoint
            .post_recv(self.context, world_source, tag, buf)?;
        Ok(Request {
            id,
            kind: RequestKind::Recv,
            peer: source,
            tag,
        })
    }

    /// Resolves once the request completes: the returned vector is the send
    /// buffer handed back, or the received payload.
    pub fn wait(&self, request: Request) -> Wait<'_, E> {
        Wait {
            endpoint: &self.endpoint,
            id: request.id,
        }
    }

    /// Collective split. Ranks passing the same `color` end up in one new
    /// communicator, ordered by `key` with ties broken by parent rank.
    pub async fn split(&self, color: u32, key: u32) -> Result<Communicator<E>, TransportError> {
        let seq = self.splits.fetch_add(1, Ordering::Relaxed);
        let table = self.allgather_pairs(color, key).await?;
        let groups = split_groups(&table);
        let mine = &groups[&color];
        let members = mine
            .iter()
            .map(|&r| self.world_rank_of(r))
            .collect::<Result<Vec<_>, _>>()?;
        Communicator::from_members(
            self.endpoint.clone(),
            derive_context(self.context, seq, color),
            members,
        )
    }

    async fn allgather_pairs(&self, color: u32, key: u32) -> Result<Vec<(u32, u32)>, TransportError> {
        let mine = pack_pairs(&[(color, key)]);
        if self.rank != 0 {
            let send = self.isend_raw(mine, 0, TAG_SPLIT_GATHER)?;
            let recv = self.irecv_raw(Vec::new(), 0, TAG_SPLIT_SCATTER)?;
            let table = self.wait(recv).await?;
            self.wait(send).await?;
            return unpack_pairs(&table, self.size());
        }
        let recvs = (1..self.size())
            .map(|r| self.irecv_raw(Vec::new(), r, TAG_SPLIT_GATHER))
            .collect::<Result<Vec<_>, _>>()?;
        let mut table = vec![(color, key)];
        for recv in recvs {
            table.extend(unpack_pairs(&self.wait(recv).await?, 1)?);
        }
        let packed = pack_pairs(&table);
        let sends = (1..self.size())
            .map(|r| self.isend_raw(packed.clone(), r, TAG_SPLIT_SCATTER))
            .collect::<Result<Vec<_>, _>>()?;
        for send in sends {
            self.wait(send).await?;
        }
        Ok(table)
    }

    /// Entrywise sum of every member's slice at `root`, added in rank order
    /// 0, 1, 2, ... so the result is reproducible. Non-roots get `None`.
    pub async fn reduce_sum(
        &self,
        local: &GtSlice,
        root: usize,
    ) -> Result<Option<GtSlice>, TransportError> {
        self.world_rank_of(root)?;
        if self.rank != root {
            let send = self.isend_raw(local.encode(), root, TAG_REDUCE)?;
            self.wait(send).await?;
            return Ok(None);
        }
        let mut recvs = Vec::with_capacity(self.size());
        for r in 0..self.size() {
            recvs.push(if r == root {
                None
            } else {
                Some(self.irecv_raw(Vec::new(), r, TAG_REDUCE)?)
            });
        }
        let mut total: Option<GtSlice> = None;
        for recv in recvs {
            let part = match recv {
                None => local.clone(),
                Some(recv) => GtSlice::decode(&self.wait(recv).await?)?,
            };
            match total.as_mut() {
                None => total = Some(part),
                Some(acc) => acc.add_assign(&part)?,
            }
        }
        Ok(total)
    }

    /// Collect one byte payload from every member at `root`, in rank order.
    pub async fn gather(
        &self,
        payload: Vec<u8>,
        root: usize,
    ) -> Result<Option<Vec<Vec<u8>>>, TransportError> {
        self.world_rank_of(root)?;
        if self.rank != root {
            let send = self.isend_raw(payload, root, TAG_GATHER)?;
            self.wait(send).await?;
            return Ok(None);
        }
        let mut recvs = Vec::with_capacity(self.size());
        for r in 0..self.size() {
            recvs.push(if r == root {
                None
            } else {
                Some(self.irecv_raw(Vec::new(), r, TAG_GATHER)?)
            });
        }
        let mut out = Vec::with_capacity(self.size());
        let mut own = Some(payload);
        for recv in recvs {
            out.push(match recv {
                None => own.take().unwrap_or_default(),
                Some(recv) => self.wait(recv).await?,
            });
        }
        Ok(Some(out))
    }
}

/// Group membership produced by a split: for each color, the parent ranks in
/// new-rank order (by key, then parent rank).
pub fn split_groups(table: &[(u32, u32)]) -> BTreeMap<u32, Vec<usize>> {
    let mut groups: BTreeMap<u32, Vec<(u32, usize)>> = BTreeMap::new();
    for (parent, &(color, key)) in table.iter().enumerate() {
        groups.entry(color).or_default().push((key, parent));
    }
    groups
        .into_iter()
        .map(|(color, mut v)| {
            v.sort_unstable();
            (color, v.into_iter().map(|(_, p)| p).collect())
        })
        .collect()
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub(crate) fn derive_context(parent: u64, seq: u64, color: u32) -> u64 {
    splitmix64(parent ^ splitmix64(seq ^ splitmix64(u64::from(color) + 1)))
}

fn pack_pairs(pairs: &[(u32, u32)]) -> Vec<u8> {
    pairs
        .iter()
        .flat_map(|(c, k)| c.to_le_bytes().into_iter().chain(k.to_le_bytes()))
        .collect()
}

fn unpack_pairs(bytes: &[u8], expected: usize) -> Result<Vec<(u32, u32)>, TransportError> {
    if bytes.len() != expected * 8 {
        return Err(TransportError::Protocol(format!(
            "split table has {} bytes, expected {}",
            bytes.len(),
            expected * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| {
            (
                u32::from_le_bytes(c[0..4].try_into().unwrap()),
                u32::from_le_bytes(c[4..8].try_into().unwrap()),
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_follow_key_then_parent() {
        let table = [(0, 5), (1, 0), (0, 1), (0, 1), (1, 9)];
        let groups = split_groups(&table);
        assert_eq!(groups[&0], vec![2, 3, 0]);
        assert_eq!(groups[&1], vec![1, 4]);
    }

    #[test]
    fn consecutive_grouping_of_six() {
        let table: Vec<_> = (0..6u32).map(|r| (r / 3, r % 3)).collect();
        let groups = split_groups(&table);
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[&0], vec![0, 1, 2]);
        assert_eq!(groups[&1], vec![3, 4, 5]);
    }

    #[test]
    fn contexts_differ_by_color_and_sequence() {
        let a = derive_context(0, 0, 0);
        assert_ne!(a, derive_context(0, 0, 1));
        assert_ne!(a, derive_context(0, 1, 0));
        assert_ne!(a, 0);
    }

    #[test]
    fn pair_packing() {
        let pairs = vec![(1, 2), (3, 4)];
        assert_eq!(unpack_pairs(&pack_pairs(&pairs), 2).unwrap(), pairs);
        assert!(unpack_pairs(&[0; 7], 1).is_err());
    }
}
