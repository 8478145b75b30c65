//! Item-to-item retrieval channels, timestamped index snapshots and
//! leakage-safe replay.
//!
//! A snapshot taken `as_of` a timestamp is derived only from interactions at
//! or before that timestamp (and, for content, from items created by then).
//! Replay for a request at `tau0` consults the latest snapshot no later than
//! `tau0 - delta`.

mod content;
mod cooccurrence;
mod embedding;
mod search;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

pub use content::ContentChannel;
pub use cooccurrence::{swing_scores, CooccurrenceChannel};
pub use embedding::{train_item_vectors, EmbeddingChannel, SkipGramConfig};
pub use search::exact_cosine_top_k;

use crate::corpus::{Catalog, EffectiveView, ItemId, Timestamp, UserHistory};
use crate::error::{Error, Result};

/// Neighbors kept per seed item.
pub const DEFAULT_K_RET: usize = 50;
/// Replay rollback, about twenty minutes.
pub const DEFAULT_DELTA_S: i64 = 1200;

/// Retrieval channel identifier. The derived order fixes iteration order over
/// the channel roster.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelId {
    Cooccurrence,
    Embedding,
    Content,
}

impl ChannelId {
    pub const ALL: [ChannelId; 3] = [ChannelId::Cooccurrence, ChannelId::Embedding, ChannelId::Content];

    pub fn name(self) -> &'static str {
        match self {
            ChannelId::Cooccurrence => "cooccurrence",
            ChannelId::Embedding => "embedding",
            ChannelId::Content => "content",
        }
    }
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ChannelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ChannelId::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Invalid(alloc::format!("unknown channel {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub item: ItemId,
    pub score: f64,
}

/// A channel's frozen neighbor lists as of a timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexSnapshot {
    pub channel: ChannelId,
    pub as_of: Timestamp,
    pub k_ret: usize,
    neighbors: BTreeMap<ItemId, Vec<Neighbor>>,
}

impl IndexSnapshot {
    /// Validates list length, ordering and self-exclusion. Empty lists are
    /// dropped.
    pub fn new(channel: ChannelId, as_of: Timestamp, k_ret: usize, neighbors: BTreeMap<ItemId, Vec<Neighbor>>) -> Result<Self> {
        let mut neighbors = neighbors;
        neighbors.retain(|_, list| !list.is_empty());
        for (item, list) in &neighbors {
            if list.len() > k_ret {
                return Err(Error::Invalid(alloc::format!("{channel} list of {item} exceeds k_ret={k_ret}")));
            }
            if list.iter().any(|n| n.item == *item) {
                return Err(Error::Invalid(alloc::format!("{channel} list of {item} contains the item itself")));
            }
            if list.iter().any(|n| !n.score.is_finite()) {
                return Err(Error::Invalid(alloc::format!("{channel} list of {item} has a non-finite score")));
            }
            let ordered = list
                .windows(2)
                .all(|w| w[0].score > w[1].score || (w[0].score == w[1].score && w[0].item < w[1].item));
            if !ordered {
                return Err(Error::Invalid(alloc::format!("{channel} list of {item} is not in (score desc, id asc) order")));
            }
        }
        Ok(IndexSnapshot { channel, as_of, k_ret, neighbors })
    }

    /// Neighbors of `item`, empty when the item has none.
    pub fn neighbors(&self, item: ItemId) -> &[Neighbor] {
        self.neighbors.get(&item).map_or(&[], Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ItemId, &[Neighbor])> + '_ {
        self.neighbors.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }
}

/// Sorts `(score, item)` candidates into a validated neighbor list of at most
/// `k` entries.
pub(crate) fn finish_list(scored: Vec<(f64, ItemId)>, k: usize) -> Vec<Neighbor> {
    crate::math::top_k(scored, k)
        .into_iter()
        .map(|(score, item)| Neighbor { item, score })
        .collect()
}

/// Per-channel, time-ordered snapshots.
#[derive(Clone, Debug, Default)]
pub struct SnapshotStore {
    snapshots: BTreeMap<ChannelId, Vec<IndexSnapshot>>,
}

impl SnapshotStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a snapshot; `as_of` must be strictly after the channel's last.
    pub fn insert(&mut self, snapshot: IndexSnapshot) -> Result<()> {
        let list = self.snapshots.entry(snapshot.channel).or_default();
        if let Some(last) = list.last() {
            if snapshot.as_of <= last.as_of {
                return Err(Error::SnapshotOrder { channel: snapshot.channel, as_of: snapshot.as_of });
            }
        }
        list.push(snapshot);
        Ok(())
    }

    pub fn channels(&self) -> impl Iterator<Item = ChannelId> + '_ {
        self.snapshots.keys().copied()
    }

    pub fn snapshots(&self, channel: ChannelId) -> &[IndexSnapshot] {
        self.snapshots.get(&channel).map_or(&[], Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = &IndexSnapshot> + '_ {
        self.snapshots.values().flatten()
    }

    /// Latest snapshot of `channel` with `as_of <= cutoff`.
    pub fn at_or_before(&self, channel: ChannelId, cutoff: Timestamp) -> Result<&IndexSnapshot> {
        let list = self.snapshots(channel);
        let n = list.partition_point(|s| s.as_of <= cutoff);
        if n == 0 {
            Err(Error::ReplayUnavailable { channel, cutoff })
        } else {
            Ok(&list[n - 1])
        }
    }

    /// Snapshot a replay at `tau0` would consult.
    pub fn for_request(&self, channel: ChannelId, tau0: Timestamp, delta_s: i64) -> Result<&IndexSnapshot> {
        self.at_or_before(channel, tau0 - delta_s)
    }

    /// True when every channel in `channels` can serve a replay at `tau0`.
    pub fn covers(&self, channels: &[ChannelId], tau0: Timestamp, delta_s: i64) -> bool {
        channels.iter().all(|&c| self.for_request(c, tau0, delta_s).is_ok())
    }
}

/// Retrieves the neighbors of `trigger` as channel `channel` would have
/// served them at `tau0`, rolled back by `delta_s`.
pub fn replay_retrieve(store: &SnapshotStore, channel: ChannelId, trigger: ItemId, tau0: Timestamp, delta_s: i64) -> Result<&[Neighbor]> {
    Ok(store.for_request(channel, tau0, delta_s)?.neighbors(trigger))
}

/// Independent record of which snapshots replays touched. A violation is a
/// consulted snapshot newer than the request's rollback cutoff.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReplayAudit {
    pub consulted: BTreeSet<(ChannelId, Timestamp)>,
    pub replays: u64,
    pub violations: u64,
}

impl ReplayAudit {
    pub fn record(&mut self, snapshot: &IndexSnapshot, tau0: Timestamp, delta_s: i64) {
        self.replays += 1;
        if snapshot.as_of > tau0 - delta_s {
            self.violations += 1;
        }
        self.consulted.insert((snapshot.channel, snapshot.as_of));
    }

    pub fn merge(&mut self, other: &ReplayAudit) {
        self.replays += other.replays;
        self.violations += other.violations;
        self.consulted.extend(other.consulted.iter().copied());
    }
}

/// Read-only view of the log a channel is built from.
#[derive(Clone, Copy)]
pub struct LogView<'a> {
    pub catalog: &'a Catalog,
    pub histories: &'a [UserHistory],
    pub effective: EffectiveView,
}

impl<'a> LogView<'a> {
    /// Per user, the effective views with `ts <= as_of`, in time order.
    pub fn effective_sequences(&self, as_of: Timestamp) -> Vec<Vec<ItemId>> {
        self.histories
            .iter()
            .map(|h| {
                h.interactions
                    .iter()
                    .take_while(|x| x.ts <= as_of)
                    .filter(|x| self.effective.accepts(x))
                    .map(|x| x.item)
                    .collect()
            })
            .collect()
    }
}

/// Common interface of the retrieval channels.
pub trait Channel {
    fn id(&self) -> ChannelId;

    /// Builds the channel's index from everything visible at `as_of`.
    fn build(&self, log: LogView<'_>, as_of: Timestamp) -> Result<IndexSnapshot>;
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn snap(as_of: i64, lists: &[(u32, &[(u32, f64)])]) -> IndexSnapshot {
        let map = lists
            .iter()
            .map(|(k, v)| (ItemId(*k), v.iter().map(|&(i, s)| Neighbor { item: ItemId(i), score: s }).collect()))
            .collect();
        IndexSnapshot::new(ChannelId::Cooccurrence, as_of, DEFAULT_K_RET, map).unwrap()
    }

    #[test]
    fn replay_selects_latest_qualifying_snapshot() {
        let mut store = SnapshotStore::new();
        store.insert(snap(100, &[(1, &[(2, 0.5)])])).unwrap();
        store.insert(snap(200, &[(1, &[(3, 0.7)])])).unwrap();
        let got = replay_retrieve(&store, ChannelId::Cooccurrence, ItemId(1), 250, 20).unwrap();
        assert_eq!(got[0].item, ItemId(3));
        let got = replay_retrieve(&store, ChannelId::Cooccurrence, ItemId(1), 120, 20).unwrap();
        assert_eq!(got[0].item, ItemId(2));
        // 110 - 20 = 90 precedes every snapshot
        assert!(replay_retrieve(&store, ChannelId::Cooccurrence, ItemId(1), 110, 20).is_err());
        // exactly at the cutoff
        let got = replay_retrieve(&store, ChannelId::Cooccurrence, ItemId(1), 220, 20).unwrap();
        assert_eq!(got[0].item, ItemId(3));
        let err = replay_retrieve(&store, ChannelId::Cooccurrence, ItemId(1), 119, 20).unwrap_err();
        assert!(matches!(err, Error::ReplayUnavailable { .. }));
        assert!(replay_retrieve(&store, ChannelId::Content, ItemId(1), 1000, 20).is_err());
        assert!(replay_retrieve(&store, ChannelId::Cooccurrence, ItemId(9), 1000, 20).unwrap().is_empty());
    }

    #[test]
    fn store_rejects_out_of_order_snapshots() {
        let mut store = SnapshotStore::new();
        store.insert(snap(200, &[])).unwrap();
        assert!(matches!(store.insert(snap(200, &[])), Err(Error::SnapshotOrder { .. })));
        assert!(store.insert(snap(100, &[])).is_err());
    }

    #[test]
    fn snapshot_validation() {
        let bad_order = vec![(ItemId(1), vec![Neighbor { item: ItemId(2), score: 0.1 }, Neighbor { item: ItemId(3), score: 0.2 }])];
        assert!(IndexSnapshot::new(ChannelId::Content, 0, 50, bad_order.into_iter().collect()).is_err());
        let self_ref = vec![(ItemId(1), vec![Neighbor { item: ItemId(1), score: 0.1 }])];
        assert!(IndexSnapshot::new(ChannelId::Content, 0, 50, self_ref.into_iter().collect()).is_err());
        let tie_order = vec![(ItemId(1), vec![Neighbor { item: ItemId(3), score: 0.5 }, Neighbor { item: ItemId(2), score: 0.5 }])];
        assert!(IndexSnapshot::new(ChannelId::Content, 0, 50, tie_order.into_iter().collect()).is_err());
    }

    #[test]
    fn audit_flags_future_snapshots() {
        let s = snap(200, &[]);
        let mut audit = ReplayAudit::default();
        audit.record(&s, 250, 20);
        assert_eq!(audit.violations, 0);
        audit.record(&s, 210, 20);
        assert_eq!(audit.violations, 1);
        assert_eq!(audit.replays, 2);
    }

    #[test]
    fn channel_names_round_trip() {
        for c in ChannelId::ALL {
            assert_eq!(c.name().parse::<ChannelId>().unwrap(), c);
        }
        assert!("swing".parse::<ChannelId>().is_err());
    }
}
