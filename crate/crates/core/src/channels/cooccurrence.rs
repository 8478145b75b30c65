//! Swing-style co-occurrence channel.
//!
//! `score(i, j) = sum over user pairs (u, v) that both effectively viewed i
//! and j of 1 / (alpha + |I_u ∩ I_v|)`.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use hashbrown::HashMap;

use super::{finish_list, Channel, ChannelId, IndexSnapshot, LogView, DEFAULT_K_RET};
use crate::corpus::{ItemId, Timestamp};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CooccurrenceChannel {
    pub alpha: f64,
    pub k_ret: usize,
}

impl Default for CooccurrenceChannel {
    fn default() -> Self {
        CooccurrenceChannel { alpha: 1.0, k_ret: DEFAULT_K_RET }
    }
}

/// Per-item scored partners, unsorted. `user_items` holds one item set per
/// user; duplicates inside a set are ignored.
pub fn swing_scores(user_items: &[Vec<ItemId>], alpha: f64) -> BTreeMap<ItemId, Vec<(f64, ItemId)>> {
    let mut vocab: Vec<ItemId> = user_items.iter().flatten().copied().collect();
    vocab.sort_unstable();
    vocab.dedup();
    let dense = |i: &ItemId| vocab.binary_search(i).unwrap() as u32;

    let sets: Vec<Vec<u32>> = user_items
        .iter()
        .map(|items| {
            let mut s: Vec<u32> = items.iter().map(dense).collect();
            s.sort_unstable();
            s.dedup();
            s
        })
        .collect();
    let mut users_of: Vec<Vec<u32>> = vec![Vec::new(); vocab.len()];
    for (u, set) in sets.iter().enumerate() {
        for &i in set {
            users_of[i as usize].push(u as u32);
        }
    }

    // pair key (lo << 32 | hi) over dense ids; accumulation order is fixed by
    // the (u, v, a, b) loop order, independent of map iteration
    let mut pair_scores: HashMap<u64, f64> = HashMap::new();
    let mut common: Vec<Vec<u32>> = vec![Vec::new(); sets.len()];
    let mut touched: Vec<u32> = Vec::new();
    for (u, set) in sets.iter().enumerate() {
        for &i in set {
            for &v in &users_of[i as usize] {
                if v as usize > u {
                    let c = &mut common[v as usize];
                    if c.is_empty() {
                        touched.push(v);
                    }
                    c.push(i);
                }
            }
        }
        touched.sort_unstable();
        for &v in &touched {
            let shared = core::mem::take(&mut common[v as usize]);
            if shared.len() >= 2 {
                let w = 1.0 / (alpha + shared.len() as f64);
                for (a, &x) in shared.iter().enumerate() {
                    for &y in &shared[a + 1..] {
                        *pair_scores.entry(((x as u64) << 32) | y as u64).or_insert(0.0) += w;
                    }
                }
            }
            common[v as usize] = {
                let mut s = shared;
                s.clear();
                s
            };
        }
        touched.clear();
    }

    let mut out: BTreeMap<ItemId, Vec<(f64, ItemId)>> = BTreeMap::new();
    for (key, score) in pair_scores {
        let (x, y) = (vocab[(key >> 32) as usize], vocab[(key & 0xffff_ffff) as usize]);
        out.entry(x).or_default().push((score, y));
        out.entry(y).or_default().push((score, x));
    }
    out
}

impl Channel for CooccurrenceChannel {
    fn id(&self) -> ChannelId {
        ChannelId::Cooccurrence
    }

    fn build(&self, log: LogView<'_>, as_of: Timestamp) -> Result<IndexSnapshot> {
        let sets = log.effective_sequences(as_of);
        let neighbors = swing_scores(&sets, self.alpha)
            .into_iter()
            .map(|(item, scored)| (item, finish_list(scored, self.k_ret)))
            .collect();
        IndexSnapshot::new(ChannelId::Cooccurrence, as_of, self.k_ret, neighbors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;
    use proptest::prelude::*;

    fn ids(xs: &[u32]) -> Vec<ItemId> {
        xs.iter().map(|&x| ItemId(x)).collect()
    }

    fn lookup(scores: &BTreeMap<ItemId, Vec<(f64, ItemId)>>, a: u32, b: u32) -> f64 {
        scores
            .get(&ItemId(a))
            .and_then(|l| l.iter().find(|(_, j)| *j == ItemId(b)))
            .map_or(0.0, |(s, _)| *s)
    }

    /// Literal nested-loop reading of the formula.
    fn brute_force(users: &[Vec<ItemId>], alpha: f64, a: ItemId, b: ItemId) -> f64 {
        let sets: Vec<BTreeSet<ItemId>> = users.iter().map(|u| u.iter().copied().collect()).collect();
        let mut total = 0.0;
        for u in 0..sets.len() {
            for v in u + 1..sets.len() {
                if sets[u].contains(&a) && sets[u].contains(&b) && sets[v].contains(&a) && sets[v].contains(&b) {
                    total += 1.0 / (alpha + sets[u].intersection(&sets[v]).count() as f64);
                }
            }
        }
        total
    }

    #[test]
    fn two_users_same_pair() {
        let users = vec![ids(&[1, 2]), ids(&[2, 1])];
        let s = swing_scores(&users, 1.0);
        assert!((lookup(&s, 1, 2) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(lookup(&s, 1, 2), lookup(&s, 2, 1));
    }

    #[test]
    fn single_viewer_has_no_neighbors() {
        let users = vec![ids(&[1, 2, 3]), ids(&[4, 5])];
        assert!(swing_scores(&users, 1.0).is_empty());
    }

    proptest! {
        #[test]
        fn matches_brute_force(users in prop::collection::vec(prop::collection::vec(0u32..8, 0..6), 0..7)) {
            let users: Vec<Vec<ItemId>> = users.iter().map(|u| ids(u)).collect();
            let s = swing_scores(&users, 1.0);
            for a in 0..8 {
                for b in 0..8 {
                    if a == b { continue; }
                    let want = brute_force(&users, 1.0, ItemId(a), ItemId(b));
                    let got = lookup(&s, a, b);
                    prop_assert!((want - got).abs() < 1e-12, "({a},{b}): {want} vs {got}");
                }
            }
        }
    }
}
