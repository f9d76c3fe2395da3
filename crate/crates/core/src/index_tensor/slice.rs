use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::gsigma::{get_u32, get_u64, put_u32, put_u64};
use super::{
    generate_gsigma, CombinedIndexSpace, Entry, Origin, Spin, SpinPair, TensorError, ValueMode,
    ENTRY_BYTES,
};

/// Bytes preceding the entries in a serialized slice.
pub const GT_HEADER_BYTES: usize = 32;

/// A contiguous block `[lo, hi)` of the accumulation tensor along `K3`.
///
/// Entries are stored as `data[((k3 - lo) * N + k1) * N + k2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GtSlice {
    space: CombinedIndexSpace,
    lo: usize,
    hi: usize,
    data: Vec<Entry>,
    meas_count: u64,
}

impl GtSlice {
    pub fn zeros(space: CombinedIndexSpace, range: Range<usize>) -> Result<Self, TensorError> {
        let len = space.len();
        if range.start >= range.end || range.end > len {
            return Err(TensorError::InvalidRange {
                lo: range.start,
                hi: range.end,
                len,
            });
        }
        Ok(Self {
            space,
            lo: range.start,
            hi: range.end,
            data: vec![Entry::default(); range.len() * len * len],
            meas_count: 0,
        })
    }

    /// The whole, unpartitioned tensor.
    pub fn full(space: CombinedIndexSpace) -> Self {
        Self::zeros(space, 0..space.len()).expect("full range is always valid")
    }

    pub fn space(&self) -> CombinedIndexSpace {
        self.space
    }

    pub fn range(&self) -> Range<usize> {
        self.lo..self.hi
    }

    pub fn is_full(&self) -> bool {
        self.lo == 0 && self.hi == self.space.len()
    }

    pub fn meas_count(&self) -> u64 {
        self.meas_count
    }

    pub fn data(&self) -> &[Entry] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Entry] {
        &mut self.data
    }

    pub fn entry_count(&self) -> usize {
        self.data.len()
    }

    pub fn byte_size(&self) -> usize {
        self.data.len() * ENTRY_BYTES
    }

    fn offset(&self, k1: usize, k2: usize, k3: usize) -> Option<usize> {
        let n = self.space.len();
        if k1 >= n || k2 >= n || !(self.lo..self.hi).contains(&k3) {
            return None;
        }
        Some(((k3 - self.lo) * n + k1) * n + k2)
    }

    pub fn get(&self, k1: usize, k2: usize, k3: usize) -> Option<Entry> {
        self.offset(k1, k2, k3).map(|i| self.data[i])
    }

    pub fn get_mut(&mut self, k1: usize, k2: usize, k3: usize) -> Option<&mut Entry> {
        self.offset(k1, k2, k3).map(move |i| &mut self.data[i])
    }

    fn check_same_shape(&self, other: &GtSlice) -> Result<(), TensorError> {
        if self.space != other.space {
            return Err(TensorError::SpaceMismatch {
                expected: self.space,
                found: other.space,
            });
        }
        if self.range() != other.range() {
            return Err(TensorError::ShapeMismatch {
                lo: self.lo,
                hi: self.hi,
                other_lo: other.lo,
                other_hi: other.hi,
            });
        }
        Ok(())
    }

    /// Entrywise `self += other`; measurement counts add up too.
    pub fn add_assign(&mut self, other: &GtSlice) -> Result<(), TensorError> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        self.meas_count += other.meas_count;
        Ok(())
    }

    /// Stitch slices that tile `[0, N)` back into the full tensor.
    pub fn assemble(space: CombinedIndexSpace, slices: &[GtSlice]) -> Result<GtSlice, TensorError> {
        let mut ordered: Vec<&GtSlice> = slices.iter().collect();
        ordered.sort_by_key(|s| s.lo);
        let mut next = 0;
        let mut data = Vec::with_capacity(space.len().pow(3));
        let mut meas_count = None;
        for s in ordered {
            if s.space != space {
                return Err(TensorError::SpaceMismatch {
                    expected: space,
                    found: s.space,
                });
            }
            if s.lo != next {
                return Err(TensorError::InvalidRange {
                    lo: s.lo,
                    hi: s.hi,
                    len: space.len(),
                });
            }
            next = s.hi;
            data.extend_from_slice(&s.data);
            // Every slice of one sub-ring sees the same payloads.
            meas_count = Some(meas_count.map_or(s.meas_count, |m: u64| m.min(s.meas_count)));
        }
        if next != space.len() {
            return Err(TensorError::InvalidRange {
                lo: next,
                hi: space.len(),
                len: space.len(),
            });
        }
        Ok(GtSlice {
            space,
            lo: 0,
            hi: space.len(),
            data,
            meas_count: meas_count.unwrap_or(0),
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![0u8; GT_HEADER_BYTES + self.byte_size()];
        put_u64(&mut out, 0, self.lo as u64);
        put_u64(&mut out, 8, self.hi as u64);
        put_u32(&mut out, 16, self.space.n_k() as u32);
        put_u32(&mut out, 20, self.space.n_w() as u32);
        put_u64(&mut out, 24, self.meas_count);
        for (i, e) in self.data.iter().enumerate() {
            let off = GT_HEADER_BYTES + i * ENTRY_BYTES;
            out[off..off + 8].copy_from_slice(&e.re.to_le_bytes());
            out[off + 8..off + 16].copy_from_slice(&e.im.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TensorError> {
        if bytes.len() < GT_HEADER_BYTES {
            return Err(TensorError::Malformed("slice shorter than header".into()));
        }
        let lo = get_u64(bytes, 0) as usize;
        let hi = get_u64(bytes, 8) as usize;
        let space = CombinedIndexSpace::new(get_u32(bytes, 16) as usize, get_u32(bytes, 20) as usize)?;
        let mut slice = GtSlice::zeros(space, lo..hi)?;
        slice.meas_count = get_u64(bytes, 24);
        if bytes.len() != GT_HEADER_BYTES + slice.byte_size() {
            return Err(TensorError::Malformed(format!(
                "slice [{lo}, {hi}) needs {} bytes, got {}",
                GT_HEADER_BYTES + slice.byte_size(),
                bytes.len()
            )));
        }
        for (i, e) in slice.data.iter_mut().enumerate() {
            let off = GT_HEADER_BYTES + i * ENTRY_BYTES;
            e.re = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            e.im = f64::from_le_bytes(bytes[off + 8..off + 16].try_into().unwrap());
        }
        Ok(slice)
    }
}

/// Apply one payload to the `K3` range held by `slice`.
pub fn accumulate_g4(slice: &mut GtSlice, g: &impl SpinPair) -> Result<(), TensorError> {
    let space = slice.space;
    if g.space() != space {
        return Err(TensorError::SpaceMismatch {
            expected: space,
            found: g.space(),
        });
    }
    let n = space.len();
    let lo = slice.lo;
    for k3 in slice.range() {
        for k1 in 0..n {
            let d31 = space.diff_unchecked(k3, k1);
            let row = &mut slice.data[((k3 - lo) * n + k1) * n..((k3 - lo) * n + k1 + 1) * n];
            for (k2, out) in row.iter_mut().enumerate() {
                let d32 = space.diff_unchecked(k3, k2);
                let term = g.entry(Spin::Up, d32, d31) * g.entry(Spin::Down, k2, k1)
                    + g.entry(Spin::Down, d32, d31) * g.entry(Spin::Up, k2, k1);
                *out += term;
            }
        }
    }
    slice.meas_count += 1;
    Ok(())
}

/// Every payload produced by a distributed run: `subrings x subring_size`
/// ranks, each with `lanes` lanes running `measurements` measurements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentShape {
    pub subrings: u32,
    pub subring_size: u32,
    pub lanes: u32,
    pub measurements: u64,
}

impl ExperimentShape {
    /// All origins, sorted by (sub-ring, rank, lane, measurement).
    pub fn origins(&self) -> impl Iterator<Item = Origin> + '_ {
        let s = *self;
        (0..s.subrings).flat_map(move |sub| {
            (0..s.subring_size).flat_map(move |rank| {
                (0..s.lanes).flat_map(move |lane| {
                    (0..s.measurements)
                        .map(move |m| Origin::new(sub, rank, s.subring_size, lane, m))
                })
            })
        })
    }

    pub fn payload_count(&self) -> u64 {
        u64::from(self.subrings) * u64::from(self.subring_size) * u64::from(self.lanes) * self.measurements
    }
}

/// Serial reference: regenerate every payload of `shape` and accumulate them
/// into one full tensor in canonical origin order.
pub fn oracle_accumulate(
    seed: u64,
    shape: &ExperimentShape,
    space: CombinedIndexSpace,
    mode: ValueMode,
) -> GtSlice {
    let mut full = GtSlice::full(space);
    for origin in shape.origins() {
        let g = generate_gsigma(seed, origin, space, mode);
        accumulate_g4(&mut full, &g).expect("generated payloads share the oracle's space");
    }
    full
}
