//! Subject-count helpers for partition checks.

use std::collections::BTreeSet;

pub const REAL: [usize; 10] = [70, 27, 17, 12, 11, 9, 6, 6, 4, 3];

pub fn sizes(parts: &[Vec<u32>]) -> Vec<usize> {
    parts.iter().map(Vec::len).collect()
}

/// Pairwise disjoint and exhaustive over `items`.
pub fn is_set_partition(items: &[u32], parts: &[Vec<u32>]) -> bool {
    let mut seen = BTreeSet::new();
    let all_new = parts.iter().flatten().all(|id| seen.insert(*id));
    all_new && seen == items.iter().copied().collect()
}
