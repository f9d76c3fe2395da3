//! Combined index space, single-particle payloads and the three-index
//! accumulation tensor.
//!
//! The tensor `G_t(K1, K2, K3)` is updated once per payload with
//!
//! ```text
//! G_t(K1, K2, K3) += sum over s in {up, down} of G_s(K3 - K2, K3 - K1) * G_{-s}(K2, K1)
//! ```
//!
//! where index differences are taken cyclically over the combined
//! (momentum x frequency) index. The tensor is partitioned along `K3`.

mod gsigma;
mod partition;
mod slice;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gsigma::{
    generate_gsigma, GSigma, GSigmaBuf, GSigmaView, Origin, Spin, SpinPair, GSIGMA_HEADER_BYTES,
};
pub use partition::{make_partition, PartitionPlan};
pub use slice::{accumulate_g4, oracle_accumulate, ExperimentShape, GtSlice, GT_HEADER_BYTES};

/// Tensor and payload entries are double-precision complex numbers.
pub type Entry = num_complex::Complex64;

/// Size of one [`Entry`] in bytes.
pub const ENTRY_BYTES: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("index space must be non-empty (n_k = {n_k}, n_w = {n_w})")]
    EmptySpace { n_k: usize, n_w: usize },
    #[error("combined index {index} out of range for space of size {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("index space mismatch: expected {expected:?}, found {found:?}")]
    SpaceMismatch {
        expected: CombinedIndexSpace,
        found: CombinedIndexSpace,
    },
    #[error("invalid axis range [{lo}, {hi}) for axis of length {len}")]
    InvalidRange { lo: usize, hi: usize, len: usize },
    #[error("cannot split an axis of length {len} into {parts} non-empty parts")]
    Partition { len: usize, parts: usize },
    #[error("slice shape mismatch: [{lo}, {hi}) vs [{other_lo}, {other_hi})")]
    ShapeMismatch {
        lo: usize,
        hi: usize,
        other_lo: usize,
        other_hi: usize,
    },
    #[error("malformed payload: {0}")]
    Malformed(String),
}

/// How synthetic payload entries are drawn.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueMode {
    /// Complex values uniformly distributed in the closed unit disk.
    #[default]
    Float,
    /// Gaussian integers with real and imaginary parts in `-2..=2`. All sums
    /// stay exactly representable, so any accumulation order is bitwise equal.
    Integer,
}

/// The discrete group of combined (momentum, frequency) indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CombinedIndexSpace {
    n_k: usize,
    n_w: usize,
}

impl CombinedIndexSpace {
    pub fn new(n_k: usize, n_w: usize) -> Result<Self, TensorError> {
        if n_k == 0 || n_w == 0 || n_k.checked_mul(n_w).is_none() {
            return Err(TensorError::EmptySpace { n_k, n_w });
        }
        Ok(Self { n_k, n_w })
    }

    pub fn n_k(&self) -> usize {
        self.n_k
    }

    pub fn n_w(&self) -> usize {
        self.n_w
    }

    /// Total number of combined indices, `N = n_k * n_w`.
    pub fn len(&self) -> usize {
        self.n_k * self.n_w
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Combined index of momentum point `k` and frequency point `w`.
    pub fn combine(&self, k: usize, w: usize) -> Result<usize, TensorError> {
        if k >= self.n_k {
            return Err(TensorError::IndexOutOfRange { index: k, len: self.n_k });
        }
        if w >= self.n_w {
            return Err(TensorError::IndexOutOfRange { index: w, len: self.n_w });
        }
        Ok(k * self.n_w + w)
    }

    /// Cyclic difference `(a - b) mod N`.
    pub fn diff(&self, a: usize, b: usize) -> Result<usize, TensorError> {
        let len = self.len();
        for index in [a, b] {
            if index >= len {
                return Err(TensorError::IndexOutOfRange { index, len });
            }
        }
        Ok(self.diff_unchecked(a, b))
    }

    #[inline]
    pub(crate) fn diff_unchecked(&self, a: usize, b: usize) -> usize {
        if a >= b {
            a - b
        } else {
            a + self.len() - b
        }
    }
}

/// Cyclic difference of two combined indices; see [`CombinedIndexSpace::diff`].
pub fn index_diff(a: usize, b: usize, space: &CombinedIndexSpace) -> Result<usize, TensorError> {
    space.diff(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diff_examples() {
        let space = CombinedIndexSpace::new(8, 1).unwrap();
        assert_eq!(index_diff(5, 2, &space).unwrap(), 3);
        assert_eq!(index_diff(1, 3, &space).unwrap(), 6);
        for k in 0..8 {
            assert_eq!(index_diff(k, k, &space).unwrap(), 0);
        }
    }

    #[test]
    fn diff_rejects_out_of_range() {
        let space = CombinedIndexSpace::new(2, 2).unwrap();
        assert_eq!(
            space.diff(4, 0),
            Err(TensorError::IndexOutOfRange { index: 4, len: 4 })
        );
        assert!(space.diff(0, 9).is_err());
    }

    #[test]
    fn empty_space_rejected() {
        assert!(CombinedIndexSpace::new(0, 3).is_err());
        assert!(CombinedIndexSpace::new(3, 0).is_err());
    }

    #[test]
    fn combine_is_row_major() {
        let space = CombinedIndexSpace::new(3, 4).unwrap();
        assert_eq!(space.len(), 12);
        assert_eq!(space.combine(2, 3).unwrap(), 11);
        assert!(space.combine(3, 0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn diff_is_closed(n_k in 1usize..12, n_w in 1usize..6, a in 0usize..72, b in 0usize..72) {
            let space = CombinedIndexSpace::new(n_k, n_w).unwrap();
            let (a, b) = (a % space.len(), b % space.len());
            let d = space.diff(a, b).unwrap();
            proptest::prop_assert!(d < space.len());
            proptest::prop_assert_eq!((d + b) % space.len(), a);
        }
    }
}
