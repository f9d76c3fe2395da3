use std::ops::Range;

use serde::Serialize;

use super::TensorError;

/// Balanced contiguous split of the partition axis over the ranks of one
/// sub-ring. The first `len % parts` ranges are one entry longer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PartitionPlan {
    len: usize,
    ranges: Vec<Range<usize>>,
}

impl PartitionPlan {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn parts(&self) -> usize {
        self.ranges.len()
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn range(&self, part: usize) -> Range<usize> {
        self.ranges[part].clone()
    }

    /// Length of the longest range.
    pub fn max_len(&self) -> usize {
        self.ranges.iter().map(|r| r.len()).max().unwrap_or(0)
    }
}

pub fn make_partition(len: usize, parts: usize) -> Result<PartitionPlan, TensorError> {
    if parts == 0 || parts > len {
        return Err(TensorError::Partition { len, parts });
    }
    let base = len / parts;
    let extra = len % parts;
    let mut ranges = Vec::with_capacity(parts);
    let mut lo = 0;
    for i in 0..parts {
        let hi = lo + base + usize::from(i < extra);
        ranges.push(lo..hi);
        lo = hi;
    }
    Ok(PartitionPlan { len, ranges })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(make_partition(8, 4).unwrap().ranges(), &[0..2, 2..4, 4..6, 6..8]);
        assert_eq!(make_partition(7, 2).unwrap().ranges(), &[0..4, 4..7]);
        assert_eq!(
            make_partition(5, 5).unwrap().ranges(),
            &[0..1, 1..2, 2..3, 3..4, 4..5]
        );
    }

    #[test]
    fn too_many_parts() {
        assert_eq!(
            make_partition(3, 4),
            Err(TensorError::Partition { len: 3, parts: 4 })
        );
        assert!(make_partition(3, 0).is_err());
    }

    proptest! {
        #[test]
        fn covers_axis_and_balances(len in 1usize..200, parts in 1usize..50) {
            prop_assume!(parts <= len);
            let plan = make_partition(len, parts).unwrap();
            prop_assert_eq!(plan.parts(), parts);
            let mut next = 0;
            for r in plan.ranges() {
                prop_assert_eq!(r.start, next);
                prop_assert!(r.end > r.start);
                next = r.end;
            }
            prop_assert_eq!(next, len);
            let sizes: Vec<_> = plan.ranges().iter().map(|r| r.len()).collect();
            let (min, max) = (*sizes.iter().min().unwrap(), *sizes.iter().max().unwrap());
            prop_assert!(max - min <= 1);
            // Larger pieces come first.
            prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
        }
    }
}
