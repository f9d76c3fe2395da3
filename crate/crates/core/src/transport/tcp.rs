//! TCP fabric: one endpoint per process, a full mesh of loopback or LAN
//! connections.
//!
//! Rank 0 owns the rendezvous listener. Every other rank connects to it,
//! announces its rank and the address of its own peer listener, and receives
//! the full address table back; that first connection stays up as the link
//! to rank 0. Ranks then connect to every lower nonzero rank and accept from
//! every higher one.
//!
//! Frames are an 8-byte big-endian length followed by a 20-byte header
//! (source, dest, context, tag; little-endian) and the payload. Sends are
//! written inline and complete as soon as the frame is on the socket. A
//! reader thread per link feeds arrivals into the matching table.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex, MutexGuard};
use std::task::{Context, Poll};
use std::thread;
use std::time::{Duration, Instant};

use super::matching::{Arrival, MatchCore};
use super::{ClockKind, Endpoint, FabricStats, RequestId, Tag, TransportError};

const MAGIC: &[u8; 4] = b"GTRG";
const VERSION: u32 = 1;
const FRAME_HEADER: usize = 20;
const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(30);
const MAX_FRAME: u64 = 1 << 36;

/// Rank 0's listening socket.
pub struct TcpRendezvous {
    listener: TcpListener,
}

impl TcpRendezvous {
    pub fn bind(addr: impl ToSocketAddrs) -> Result<Self, TransportError> {
        Ok(Self {
            listener: TcpListener::bind(addr)?,
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, TransportError> {
        Ok(self.listener.local_addr()?)
    }
}

type Shared = Arc<Mutex<MatchCore>>;

fn lock(core: &Shared) -> MutexGuard<'_, MatchCore> {
    core.lock().unwrap_or_else(|e| e.into_inner())
}

fn with_core<T>(core: &Shared, f: impl FnOnce(&mut MatchCore) -> T) -> T {
    let mut guard = lock(core);
    let out = f(&mut guard);
    guard.wake_all();
    out
}

pub struct TcpEndpoint {
    rank: usize,
    size: usize,
    core: Shared,
    links: Vec<Option<Mutex<BufWriter<TcpStream>>>>,
    epoch: Instant,
}

impl TcpEndpoint {
    /// Rank 0: wait for the other `size - 1` ranks to check in.
    pub fn root(rendezvous: TcpRendezvous, size: usize) -> Result<Arc<Self>, TransportError> {
        let mut streams: Vec<Option<TcpStream>> = (0..size).map(|_| None).collect();
        let mut table: Vec<String> = vec![String::new(); size];
        table[0] = rendezvous.local_addr()?.to_string();
        for _ in 1..size {
            let (mut stream, _) = rendezvous.listener.accept()?;
            stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT))?;
            let rank = read_hello(&mut stream, size)?;
            let addr = read_string(&mut stream)?;
            if rank == 0 || streams[rank].is_some() {
                return Err(TransportError::Protocol(format!("duplicate rank {rank}")));
            }
            table[rank] = addr;
            streams[rank] = Some(stream);
        }
        let mut packed = Vec::new();
        put_u32(&mut packed, size as u32);
        for addr in &table {
            put_string(&mut packed, addr);
        }
        for stream in streams.iter_mut().flatten() {
            stream.write_all(&packed)?;
        }
        Self::assemble(0, size, streams)
    }

    /// Rank `rank > 0`: check in with the rendezvous at `root` and connect
    /// to the rest of the mesh.
    pub fn join(root: SocketAddr, rank: usize, size: usize) -> Result<Arc<Self>, TransportError> {
        if rank == 0 || rank >= size {
            return Err(TransportError::InvalidRank { rank, size });
        }
        let mut to_root = TcpStream::connect(root)?;
        to_root.set_read_timeout(Some(HANDSHAKE_TIMEOUT))?;
        let peer_listener = TcpListener::bind((to_root.local_addr()?.ip(), 0))?;
        let mut hello = hello_bytes(rank);
        put_string(&mut hello, &peer_listener.local_addr()?.to_string());
        to_root.write_all(&hello)?;

        let count = read_u32(&mut to_root)? as usize;
        if count != size {
            return Err(TransportError::Protocol(format!(
                "root reports {count} ranks, expected {size}"
            )));
        }
        let table = (0..size)
            .map(|_| read_string(&mut to_root))
            .collect::<Result<Vec<_>, _>>()?;

        let mut streams: Vec<Option<TcpStream>> = (0..size).map(|_| None).collect();
        streams[0] = Some(to_root);
        for (peer, addr) in table.iter().enumerate().take(rank).skip(1) {
            let addr: SocketAddr = addr
                .parse()
                .map_err(|_| TransportError::Protocol(format!("bad address {addr:?}")))?;
            let mut stream = TcpStream::connect(addr)?;
            stream.write_all(&hello_bytes(rank))?;
            streams[peer] = Some(stream);
        }
        for _ in rank + 1..size {
            let (mut stream, _) = peer_listener.accept()?;
            stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT))?;
            let peer = read_hello(&mut stream, size)?;
            if peer <= rank || streams[peer].is_some() {
                return Err(TransportError::Protocol(format!(
                    "unexpected connection from rank {peer}"
                )));
            }
            streams[peer] = Some(stream);
        }
        Self::assemble(rank, size, streams)
    }

    fn assemble(
        rank: usize,
        size: usize,
        streams: Vec<Option<TcpStream>>,
    ) -> Result<Arc<Self>, TransportError> {
        let core: Shared = Arc::new(Mutex::new(MatchCore::default()));
        let mut links = Vec::with_capacity(size);
        for (peer, stream) in streams.into_iter().enumerate() {
            let Some(stream) = stream else {
                links.push(None);
                continue;
            };
            stream.set_read_timeout(None)?;
            stream.set_nodelay(true)?;
            let reader = stream.try_clone()?;
            let core = core.clone();
            thread::Builder::new()
                .name(format!("tcp-rx-{rank}<-{peer}"))
                .spawn(move || read_loop(reader, peer, rank, core))?;
            links.push(Some(Mutex::new(BufWriter::new(stream))));
        }
        Ok(Arc::new(Self {
            rank,
            size,
            core,
            links,
            epoch: Instant::now(),
        }))
    }

    pub fn stats(&self) -> FabricStats {
        lock(&self.core).stats()
    }

    fn check(&self, rank: usize) -> Result<(), TransportError> {
        if rank >= self.size {
            return Err(TransportError::InvalidRank {
                rank,
                size: self.size,
            });
        }
        Ok(())
    }
}

impl Drop for TcpEndpoint {
    fn drop(&mut self) {
        for link in self.links.iter().flatten() {
            let mut w = link.lock().unwrap_or_else(|e| e.into_inner());
            let _ = w.flush();
            let _ = w.get_ref().shutdown(Shutdown::Write);
        }
    }
}

fn read_loop(mut stream: TcpStream, peer: usize, me: usize, core: Shared) {
    let mut reader = BufReader::new(&mut stream);
    loop {
        match read_frame(&mut reader, peer, me) {
            Ok(Some((context, tag, payload))) => with_core(&core, |c| {
                c.deliver(
                    me,
                    (context, peer, tag),
                    Arrival {
                        payload,
                        sender: None,
                    },
                )
            }),
            Ok(None) => return,
            Err(_) => {
                with_core(&core, |c| c.fail_pending(TransportError::Disconnected(peer)));
                return;
            }
        }
    }
}

fn read_frame(
    r: &mut impl Read,
    peer: usize,
    me: usize,
) -> Result<Option<(u64, Tag, Vec<u8>)>, TransportError> {
    let mut len = [0u8; 8];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u64::from_be_bytes(len);
    if len < FRAME_HEADER as u64 || len > MAX_FRAME {
        return Err(TransportError::Protocol(format!("frame length {len}")));
    }
    let mut header = [0u8; FRAME_HEADER];
    r.read_exact(&mut header)?;
    let src = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
    let dst = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let context = u64::from_le_bytes(header[8..16].try_into().unwrap());
    let tag = i32::from_le_bytes(header[16..20].try_into().unwrap());
    if src != peer || dst != me {
        return Err(TransportError::Protocol(format!(
            "frame {src}->{dst} on link {peer}->{me}"
        )));
    }
    let mut payload = vec![0u8; (len - FRAME_HEADER as u64) as usize];
    r.read_exact(&mut payload)?;
    Ok(Some((context, tag, payload)))
}

impl Endpoint for TcpEndpoint {
    fn rank(&self) -> usize {
        self.rank
    }

    fn size(&self) -> usize {
        self.size
    }

    fn post_send(
        &self,
        context: u64,
        dest: usize,
        tag: Tag,
        payload: Vec<u8>,
    ) -> Result<RequestId, TransportError> {
        self.check(dest)?;
        let Some(link) = &self.links[dest] else {
            // Self-send: match locally with rendezvous semantics.
            let me = self.rank;
            return Ok(with_core(&self.core, |c| {
                let id = c.new_send();
                c.deliver(
                    me,
                    (context, me, tag),
                    Arrival {
                        payload,
                        sender: Some(id),
                    },
                );
                id
            }));
        };
        {
            let mut w = link.lock().unwrap_or_else(|e| e.into_inner());
            let len = (FRAME_HEADER + payload.len()) as u64;
            let write = (|| {
                w.write_all(&len.to_be_bytes())?;
                w.write_all(&(self.rank as u32).to_le_bytes())?;
                w.write_all(&(dest as u32).to_le_bytes())?;
                w.write_all(&context.to_le_bytes())?;
                w.write_all(&tag.to_le_bytes())?;
                w.write_all(&payload)?;
                w.flush()
            })();
            write.map_err(|_| TransportError::Disconnected(dest))?;
        }
        Ok(with_core(&self.core, |c| {
            let id = c.new_send();
            c.complete(id, Ok(payload));
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
        let me = self.rank;
        Ok(with_core(&self.core, |c| c.post_recv(me, (context, source, tag), buf)))
    }

    fn poll_request(
        &self,
        id: RequestId,
        cx: &mut Context<'_>,
    ) -> Poll<Result<Vec<u8>, TransportError>> {
        lock(&self.core).poll(id, cx)
    }

    fn now(&self) -> f64 {
        self.epoch.elapsed().as_secs_f64()
    }

    fn clock_kind(&self) -> ClockKind {
        ClockKind::Monotonic
    }
}

fn hello_bytes(rank: usize) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    put_u32(&mut out, VERSION);
    put_u32(&mut out, rank as u32);
    out
}

fn read_hello(r: &mut impl Read, size: usize) -> Result<usize, TransportError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TransportError::Protocol("bad preamble".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(TransportError::Protocol(format!(
            "protocol version {version}, expected {VERSION}"
        )));
    }
    let rank = read_u32(r)? as usize;
    if rank >= size {
        return Err(TransportError::InvalidRank { rank, size });
    }
    Ok(rank)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn read_u32(r: &mut impl Read) -> Result<u32, TransportError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string(r: &mut impl Read) -> Result<String, TransportError> {
    let len = read_u32(r)? as usize;
    if len > 1024 {
        return Err(TransportError::Protocol(format!("address of {len} bytes")));
    }
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| TransportError::Protocol("address is not utf-8".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_roundtrip() {
        let mut buf = Vec::new();
        buf.extend_from_slice(&((FRAME_HEADER + 3) as u64).to_be_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&5u32.to_le_bytes());
        buf.extend_from_slice(&77u64.to_le_bytes());
        buf.extend_from_slice(&1003i32.to_le_bytes());
        buf.extend_from_slice(&[1, 2, 3]);
        let mut r = &buf[..];
        let (ctx, tag, payload) = read_frame(&mut r, 2, 5).unwrap().unwrap();
        assert_eq!((ctx, tag, payload), (77, 1003, vec![1, 2, 3]));
        assert!(read_frame(&mut r, 2, 5).unwrap().is_none());
        let mut r = &buf[..];
        assert!(read_frame(&mut r, 3, 5).is_err());
    }

    #[test]
    fn hello_checks_magic_and_rank() {
        let ok = hello_bytes(3);
        assert_eq!(read_hello(&mut &ok[..], 4).unwrap(), 3);
        assert!(read_hello(&mut &ok[..], 3).is_err());
        let mut bad = ok.clone();
        bad[0] = b'X';
        assert!(read_hello(&mut &bad[..], 4).is_err());
    }
}
