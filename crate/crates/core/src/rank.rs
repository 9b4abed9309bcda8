//! Bounded top-k selection over scored items.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::kb::ItemId;

/// Orders by score descending, then id ascending. `Greater` means "ranks
/// earlier".
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub id: ItemId,
    pub score: f64,
}

impl Eq for Scored {}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// The `k` best entries, best first. Keeps a min-heap of size `k`.
pub fn top_k(scored: impl IntoIterator<Item = Scored>, k: usize) -> Vec<(ItemId, f64)> {
    if k == 0 {
        return Vec::new();
    }
    let mut heap: BinaryHeap<std::cmp::Reverse<Scored>> = BinaryHeap::with_capacity(k + 1);
    for s in scored {
        if heap.len() < k {
            heap.push(std::cmp::Reverse(s));
        } else if let Some(mut worst) = heap.peek_mut() {
            if s > worst.0 {
                *worst = std::cmp::Reverse(s);
            }
        }
    }
    heap.into_sorted_vec()
        .into_iter()
        .map(|std::cmp::Reverse(s)| (s.id, s.score))
        .collect()
}
