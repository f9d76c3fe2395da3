//! Single-particle payloads: the typed [`GSigma`] pair and its wire-format
//! twin [`GSigmaBuf`], which is what the ring actually moves around.
//!
//! Wire layout (all little-endian):
//!
//! ```text
//! offset  size  field
//!      0     4  n_k
//!      4     4  n_w
//!      8     4  sub-ring id
//!     12     4  rank in sub-ring
//!     16     4  world rank
//!     20     4  lane id
//!     24     8  measurement id
//!     32     8  payload length in bytes (2 * N^2 * 16, or 0 for header-only buffers)
//!     40     -  up matrix, then down matrix; row-major (re: f64, im: f64) pairs
//! ```

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CombinedIndexSpace, Entry, TensorError, ValueMode, ENTRY_BYTES};

/// Bytes preceding the matrix data in a wire-format payload.
pub const GSIGMA_HEADER_BYTES: usize = 40;

/// Electron spin label selecting one of the two matrices of a payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Spin {
    Up,
    Down,
}

impl Spin {
    pub fn flip(self) -> Self {
        match self {
            Spin::Up => Spin::Down,
            Spin::Down => Spin::Up,
        }
    }

    fn offset(self) -> usize {
        match self {
            Spin::Up => 0,
            Spin::Down => 1,
        }
    }
}

/// Where a payload was born: which sub-ring, rank, lane and measurement.
///
/// The derived ordering (sub-ring, rank, world rank, lane, measurement) is
/// the canonical order used by the serial oracle; world rank is a function of
/// the first two fields, so it never changes the order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Origin {
    pub subring: u32,
    pub rank: u32,
    pub world_rank: u32,
    pub lane: u32,
    pub measurement: u64,
}

impl Origin {
    pub fn new(subring: u32, rank: u32, subring_size: u32, lane: u32, measurement: u64) -> Self {
        Self {
            subring,
            rank,
            world_rank: subring * subring_size + rank,
            lane,
            measurement,
        }
    }
}

/// Read access to the two spin matrices of a payload.
pub trait SpinPair {
    fn space(&self) -> CombinedIndexSpace;
    fn entry(&self, spin: Spin, row: usize, col: usize) -> Entry;
}

/// Counter-based stream for one payload. The key is the run seed together
/// with the payload's world rank, lane and measurement, so any payload can be
/// regenerated anywhere without communication. Entries are drawn in
/// (matrix, row, col) order, making the stream position the entry's counter.
fn payload_stream(seed: u64, origin: &Origin) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&u64::from(origin.world_rank).to_le_bytes());
    key[16..24].copy_from_slice(&u64::from(origin.lane).to_le_bytes());
    key[24..32].copy_from_slice(&origin.measurement.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

fn draw(rng: &mut ChaCha8Rng, mode: ValueMode) -> Entry {
    match mode {
        ValueMode::Float => {
            let radius = rng.random::<f64>().sqrt();
            let angle = TAU * rng.random::<f64>();
            Entry::from_polar(radius, angle)
        }
        ValueMode::Integer => {
            let re = rng.random_range(-2i32..=2);
            let im = rng.random_range(-2i32..=2);
            Entry::new(f64::from(re), f64::from(im))
        }
    }
}

fn for_each_generated(
    seed: u64,
    origin: &Origin,
    space: &CombinedIndexSpace,
    mode: ValueMode,
    mut sink: impl FnMut(usize, Entry),
) {
    let mut rng = payload_stream(seed, origin);
    let count = 2 * space.len() * space.len();
    for i in 0..count {
        sink(i, draw(&mut rng, mode));
    }
}

/// Typed single-particle payload: an up and a down `N x N` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GSigma {
    space: CombinedIndexSpace,
    origin: Origin,
    up: Vec<Entry>,
    down: Vec<Entry>,
}

impl GSigma {
    pub fn zeros(space: CombinedIndexSpace, origin: Origin) -> Self {
        let n2 = space.len() * space.len();
        Self {
            space,
            origin,
            up: vec![Entry::default(); n2],
            down: vec![Entry::default(); n2],
        }
    }

    pub fn from_fn(
        space: CombinedIndexSpace,
        origin: Origin,
        mut f: impl FnMut(Spin, usize, usize) -> Entry,
    ) -> Self {
        let n = space.len();
        let mut g = Self::zeros(space, origin);
        for row in 0..n {
            for col in 0..n {
                g.up[row * n + col] = f(Spin::Up, row, col);
                g.down[row * n + col] = f(Spin::Down, row, col);
            }
        }
        g
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn matrix(&self, spin: Spin) -> &[Entry] {
        match spin {
            Spin::Up => &self.up,
            Spin::Down => &self.down,
        }
    }

    pub fn matrix_mut(&mut self, spin: Spin) -> &mut [Entry] {
        match spin {
            Spin::Up => &mut self.up,
            Spin::Down => &mut self.down,
        }
    }

    /// Bytes of matrix data: `2 * N^2 * 16`.
    pub fn byte_size(&self) -> usize {
        matrix_bytes(&self.space)
    }

    pub fn to_wire(&self) -> GSigmaBuf {
        let mut buf = GSigmaBuf::allocate(self.space);
        buf.write_header(&self.origin);
        let n2 = self.space.len() * self.space.len();
        for (i, e) in self.up.iter().chain(self.down.iter()).enumerate() {
            buf.put_entry(i, *e);
        }
        debug_assert_eq!(buf.entry_count(), 2 * n2);
        buf
    }

    pub fn from_wire(buf: &GSigmaBuf) -> Result<Self, TensorError> {
        let view = buf.view()?;
        Ok(Self::from_fn(view.space, view.origin, |spin, r, c| {
            view.entry(spin, r, c)
        }))
    }
}

impl SpinPair for GSigma {
    fn space(&self) -> CombinedIndexSpace {
        self.space
    }

    #[inline]
    fn entry(&self, spin: Spin, row: usize, col: usize) -> Entry {
        let n = self.space.len();
        self.matrix(spin)[row * n + col]
    }
}

/// Deterministically generate the payload born at `origin`.
pub fn generate_gsigma(
    seed: u64,
    origin: Origin,
    space: CombinedIndexSpace,
    mode: ValueMode,
) -> GSigma {
    let n2 = space.len() * space.len();
    let mut g = GSigma::zeros(space, origin);
    for_each_generated(seed, &origin, &space, mode, |i, e| {
        if i < n2 {
            g.up[i] = e;
        } else {
            g.down[i - n2] = e;
        }
    });
    g
}

fn matrix_bytes(space: &CombinedIndexSpace) -> usize {
    2 * space.len() * space.len() * ENTRY_BYTES
}

/// A payload in wire format. Ring lanes own exactly three of these and only
/// ever swap them; the transport moves the underlying byte vector.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GSigmaBuf {
    bytes: Vec<u8>,
}

impl GSigmaBuf {
    /// Header plus zeroed matrices for `space`.
    pub fn allocate(space: CombinedIndexSpace) -> Self {
        let payload = matrix_bytes(&space);
        let mut bytes = vec![0u8; GSIGMA_HEADER_BYTES + payload];
        put_u32(&mut bytes, 0, space.n_k() as u32);
        put_u32(&mut bytes, 4, space.n_w() as u32);
        put_u64(&mut bytes, 32, payload as u64);
        Self { bytes }
    }

    /// A buffer carrying only the header (origin) and no matrix data.
    pub fn header_only(space: CombinedIndexSpace) -> Self {
        let mut bytes = vec![0u8; GSIGMA_HEADER_BYTES];
        put_u32(&mut bytes, 0, space.n_k() as u32);
        put_u32(&mut bytes, 4, space.n_w() as u32);
        Self { bytes }
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Self { bytes }
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    /// Moves the bytes out, leaving an empty (unallocated) buffer behind.
    pub fn take(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.bytes)
    }

    pub fn restore(&mut self, bytes: Vec<u8>) {
        self.bytes = bytes;
    }

    pub fn write_header(&mut self, origin: &Origin) {
        put_u32(&mut self.bytes, 8, origin.subring);
        put_u32(&mut self.bytes, 12, origin.rank);
        put_u32(&mut self.bytes, 16, origin.world_rank);
        put_u32(&mut self.bytes, 20, origin.lane);
        put_u64(&mut self.bytes, 24, origin.measurement);
    }

    /// Regenerate this buffer's matrices in place for `origin`.
    pub fn fill(&mut self, seed: u64, origin: Origin, mode: ValueMode) -> Result<(), TensorError> {
        let (space, _, payload_len) = self.header()?;
        if payload_len != matrix_bytes(&space) {
            return Err(TensorError::Malformed(
                "cannot fill a header-only payload".into(),
            ));
        }
        self.write_header(&origin);
        for_each_generated(seed, &origin, &space, mode, |i, e| self.put_entry(i, e));
        Ok(())
    }

    pub fn header(&self) -> Result<(CombinedIndexSpace, Origin, usize), TensorError> {
        if self.bytes.len() < GSIGMA_HEADER_BYTES {
            return Err(TensorError::Malformed(format!(
                "payload of {} bytes is shorter than its header",
                self.bytes.len()
            )));
        }
        let b = &self.bytes;
        let space = CombinedIndexSpace::new(get_u32(b, 0) as usize, get_u32(b, 4) as usize)?;
        let origin = Origin {
            subring: get_u32(b, 8),
            rank: get_u32(b, 12),
            world_rank: get_u32(b, 16),
            lane: get_u32(b, 20),
            measurement: get_u64(b, 24),
        };
        let payload_len = get_u64(b, 32) as usize;
        if GSIGMA_HEADER_BYTES + payload_len != b.len() {
            return Err(TensorError::Malformed(format!(
                "declared payload length {payload_len} does not match buffer length {}",
                b.len()
            )));
        }
        Ok((space, origin, payload_len))
    }

    pub fn origin(&self) -> Result<Origin, TensorError> {
        self.header().map(|(_, origin, _)| origin)
    }

    /// Typed view over a buffer that carries matrix data.
    pub fn view(&self) -> Result<GSigmaView<'_>, TensorError> {
        let (space, origin, payload_len) = self.header()?;
        if payload_len != matrix_bytes(&space) {
            return Err(TensorError::Malformed(format!(
                "payload carries {payload_len} bytes, expected {}",
                matrix_bytes(&space)
            )));
        }
        Ok(GSigmaView {
            space,
            origin,
            data: &self.bytes[GSIGMA_HEADER_BYTES..],
        })
    }

    fn entry_count(&self) -> usize {
        (self.bytes.len() - GSIGMA_HEADER_BYTES) / ENTRY_BYTES
    }

    fn put_entry(&mut self, i: usize, e: Entry) {
        let off = GSIGMA_HEADER_BYTES + i * ENTRY_BYTES;
        self.bytes[off..off + 8].copy_from_slice(&e.re.to_le_bytes());
        self.bytes[off + 8..off + 16].copy_from_slice(&e.im.to_le_bytes());
    }
}

/// Borrowed, decoded-on-access view of a wire payload.
#[derive(Debug, Clone, Copy)]
pub struct GSigmaView<'a> {
    space: CombinedIndexSpace,
    origin: Origin,
    data: &'a [u8],
}

impl GSigmaView<'_> {
    pub fn origin(&self) -> Origin {
        self.origin
    }
}

impl SpinPair for GSigmaView<'_> {
    fn space(&self) -> CombinedIndexSpace {
        self.space
    }

    #[inline]
    fn entry(&self, spin: Spin, row: usize, col: usize) -> Entry {
        let n = self.space.len();
        let off = ((spin.offset() * n + row) * n + col) * ENTRY_BYTES;
        let re = f64::from_le_bytes(self.data[off..off + 8].try_into().unwrap());
        let im = f64::from_le_bytes(self.data[off + 8..off + 16].try_into().unwrap());
        Entry::new(re, im)
    }
}

pub(crate) fn put_u32(b: &mut [u8], off: usize, v: u32) {
    b[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u64(b: &mut [u8], off: usize, v: u64) {
    b[off..off + 8].copy_from_slice(&v.to_le_bytes());
}

pub(crate) fn get_u32(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

pub(crate) fn get_u64(b: &[u8], off: usize) -> u64 {
    u64::from_le_bytes(b[off..off + 8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space(n: usize) -> CombinedIndexSpace {
        CombinedIndexSpace::new(n, 1).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        let origin = Origin::new(1, 2, 4, 3, 17);
        let a = generate_gsigma(42, origin, space(4), ValueMode::Float);
        let b = generate_gsigma(42, origin, space(4), ValueMode::Float);
        for spin in [Spin::Up, Spin::Down] {
            let bits = |g: &GSigma| -> Vec<(u64, u64)> {
                g.matrix(spin).iter().map(|e| (e.re.to_bits(), e.im.to_bits())).collect()
            };
            assert_eq!(bits(&a), bits(&b));
        }
    }

    #[test]
    fn lanes_get_distinct_streams() {
        let a = generate_gsigma(7, Origin::new(0, 0, 1, 0, 0), space(4), ValueMode::Float);
        let b = generate_gsigma(7, Origin::new(0, 0, 1, 1, 0), space(4), ValueMode::Float);
        let differing = a
            .matrix(Spin::Up)
            .iter()
            .chain(a.matrix(Spin::Down))
            .zip(b.matrix(Spin::Up).iter().chain(b.matrix(Spin::Down)))
            .filter(|(x, y)| x != y)
            .count();
        assert!(differing > 0);
    }

    #[test]
    fn float_entries_lie_in_unit_disk() {
        let g = generate_gsigma(0, Origin::default(), space(2), ValueMode::Float);
        for spin in [Spin::Up, Spin::Down] {
            for e in g.matrix(spin) {
                assert!(e.re.is_finite() && e.im.is_finite());
                assert!(e.norm() <= 1.0);
            }
        }
    }

    #[test]
    fn integer_entries_are_small_gaussian_integers() {
        let g = generate_gsigma(5, Origin::new(0, 1, 2, 0, 3), space(3), ValueMode::Integer);
        for e in g.matrix(Spin::Up).iter().chain(g.matrix(Spin::Down)) {
            assert_eq!(e.re.fract(), 0.0);
            assert_eq!(e.im.fract(), 0.0);
            assert!(e.re.abs() <= 2.0 && e.im.abs() <= 2.0);
        }
    }

    #[test]
    fn buffer_fill_matches_typed_generation() {
        let origin = Origin::new(2, 1, 3, 1, 9);
        let typed = generate_gsigma(11, origin, space(5), ValueMode::Float);
        let mut buf = GSigmaBuf::allocate(space(5));
        buf.fill(11, origin, ValueMode::Float).unwrap();
        assert_eq!(buf, typed.to_wire());
        assert_eq!(GSigma::from_wire(&buf).unwrap(), typed);
        assert_eq!(buf.len(), GSIGMA_HEADER_BYTES + typed.byte_size());
        assert_eq!(typed.byte_size(), 2 * 25 * 16);
    }

    #[test]
    fn header_only_buffers_carry_origin() {
        let mut buf = GSigmaBuf::header_only(space(3));
        let origin = Origin::new(0, 2, 3, 1, 4);
        buf.write_header(&origin);
        assert_eq!(buf.origin().unwrap(), origin);
        assert!(buf.view().is_err());
        assert!(buf.fill(0, origin, ValueMode::Float).is_err());
    }

    #[test]
    fn truncated_buffers_are_rejected() {
        let mut bytes = GSigmaBuf::allocate(space(2)).into_bytes();
        bytes.pop();
        assert!(matches!(
            GSigmaBuf::from_bytes(bytes).header(),
            Err(TensorError::Malformed(_))
        ));
        assert!(GSigmaBuf::from_bytes(vec![0; 10]).header().is_err());
    }
}
