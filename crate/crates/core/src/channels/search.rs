use alloc::collections::{BTreeMap, BinaryHeap};
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use super::Neighbor;
use crate::corpus::ItemId;
use crate::math::dot_f32;

/// Heap entry ordered so the heap's max is the *worst* kept neighbor
/// (lowest score, then highest id).
#[derive(Clone, Copy, PartialEq)]
struct Worst(f32, ItemId);

impl Eq for Worst {}

impl Ord for Worst {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.partial_cmp(&self.0).unwrap_or(Ordering::Equal).then(self.1.cmp(&other.1))
    }
}

impl PartialOrd for Worst {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Offers `cand` to a top-`k` heap and returns the score a later candidate
/// must reach to have a chance of entering.
#[inline]
fn offer(heap: &mut BinaryHeap<Worst>, k: usize, cand: Worst) -> f32 {
    if heap.len() < k {
        heap.push(cand);
    } else if let Some(mut worst) = heap.peek_mut() {
        if cand < *worst {
            *worst = cand;
        }
    }
    if heap.len() < k {
        f32::NEG_INFINITY
    } else {
        heap.peek().map_or(f32::NEG_INFINITY, |w| w.0)
    }
}

/// Exact top-`k` cosine neighbors among `ids`, whose unit vectors are stored
/// row-major in `vectors`. Each pair's score is computed once in `f32` with a
/// fixed reduction order, so results do not depend on iteration order.
pub fn exact_cosine_top_k(ids: &[ItemId], vectors: &[f32], dim: usize, k: usize) -> BTreeMap<ItemId, Vec<Neighbor>> {
    assert_eq!(ids.len() * dim, vectors.len());
    let n = ids.len();
    let mut heaps: Vec<BinaryHeap<Worst>> = (0..n).map(|_| BinaryHeap::with_capacity(k + 1)).collect();
    // a score below a row's floor loses to every kept neighbor
    let mut floor = vec![f32::NEG_INFINITY; n];
    let mut row = vec![0.0f32; n];
    if k > 0 {
        for a in 0..n {
            let va = &vectors[a * dim..(a + 1) * dim];
            let rest = &mut row[a + 1..];
            for (s, vb) in rest.iter_mut().zip(vectors[(a + 1) * dim..].chunks_exact(dim)) {
                *s = dot_f32(va, vb);
            }
            for (b, &s) in (a + 1..n).zip(rest.iter()) {
                if ids[a] == ids[b] {
                    continue;
                }
                if s >= floor[a] {
                    floor[a] = offer(&mut heaps[a], k, Worst(s, ids[b]));
                }
                if s >= floor[b] {
                    floor[b] = offer(&mut heaps[b], k, Worst(s, ids[a]));
                }
            }
        }
    }
    ids.iter()
        .zip(heaps)
        .map(|(&id, heap)| {
            // ascending under Worst's order = best first
            let list = heap
                .into_sorted_vec()
                .into_iter()
                .map(|Worst(s, item)| Neighbor { item, score: s as f64 })
                .collect();
            (id, list)
        })
        .collect()
}
