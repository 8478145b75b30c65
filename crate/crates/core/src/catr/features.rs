//! Discretized request features fed to the routing model.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{Catalog, EffectiveView, Feedback, ItemId, RequestInstance, Timestamp, UserHistory, UserId};

/// Upper edges (seconds) of the elapsed-time buckets; the last bucket is open.
/// Buckets: <1m, <10m, <1h, <6h, <1d, <3d, <7d, >=7d.
pub const AGE_EDGES_S: [i64; 7] = [60, 600, 3_600, 21_600, 86_400, 259_200, 604_800];
pub const AGE_BUCKETS: usize = AGE_EDGES_S.len() + 1;

/// Upper edges of the completion-ratio (watch time over duration) buckets.
pub const COMPLETION_EDGES: [f64; 6] = [0.1, 0.25, 0.5, 0.75, 1.0, 1.5];
/// Completion bucket crossed with the like flag.
pub const ENGAGEMENT_BUCKETS: usize = (COMPLETION_EDGES.len() + 1) * 2;

/// Upper edges of the recency-rank buckets (0 = most recent trigger).
pub const RANK_EDGES: [usize; 7] = [1, 2, 3, 5, 8, 13, 21];
pub const RANK_BUCKETS: usize = RANK_EDGES.len() + 1;

/// Quarter-day buckets of the request's time of day (UTC).
pub const DAYPART_BUCKETS: usize = 4;

pub fn age_bucket(elapsed_s: i64) -> u8 {
    AGE_EDGES_S.iter().take_while(|&&e| elapsed_s >= e).count() as u8
}

/// `completion` is watch time over item duration.
pub fn engagement_bucket(completion: f64, feedback: Feedback) -> u8 {
    let w = COMPLETION_EDGES.iter().take_while(|&&e| completion >= e).count() as u8;
    w * 2 + feedback.contains(Feedback::LIKE) as u8
}

pub fn rank_bucket(rank: usize) -> u8 {
    RANK_EDGES.iter().take_while(|&&e| rank >= e).count() as u8
}

pub fn daypart_bucket(ts: Timestamp) -> u8 {
    (ts.rem_euclid(86_400) / 21_600) as u8
}

/// Embedding-table sizes. Row 0 of the item, tag and user tables is the
/// shared out-of-vocabulary row; id `n` maps to row `n + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub item_rows: usize,
    pub tag_rows: usize,
    pub user_rows: usize,
}

impl Vocab {
    pub fn new(item_ids: usize, tag_ids: usize, user_ids: usize) -> Self {
        Vocab { item_rows: item_ids + 1, tag_rows: tag_ids + 1, user_rows: user_ids + 1 }
    }

    pub fn for_catalog(catalog: &Catalog, user_ids: usize) -> Self {
        Self::new(catalog.id_bound(), catalog.tag_bound(), user_ids)
    }

    fn row(id: u32, rows: usize) -> u32 {
        if (id as usize) + 1 < rows {
            id + 1
        } else {
            0
        }
    }

    pub fn item_row(&self, id: ItemId) -> u32 {
        Self::row(id.0, self.item_rows)
    }

    pub fn tag_row(&self, catalog: &Catalog, id: ItemId) -> u32 {
        catalog.get(id).map_or(0, |it| Self::row(it.tag.0, self.tag_rows))
    }

    pub fn user_row(&self, id: UserId) -> u32 {
        Self::row(id.0, self.user_rows)
    }
}

/// One behavior-sequence position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Token {
    pub item: u32,
    pub tag: u32,
    pub age: u8,
}

/// One candidate trigger.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CandidateFeatures {
    pub item: u32,
    pub tag: u32,
    pub age: u8,
    pub engagement: u8,
    /// Recency rank among the request's eligible triggers, bucketed.
    pub rank: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RequestFeatures {
    pub user: u32,
    pub daypart: u8,
    /// Most recent first, at most the model's sequence length.
    pub sequence: Vec<Token>,
    pub candidates: Vec<CandidateFeatures>,
}

fn completion(catalog: &Catalog, item: ItemId, watch_s: f64) -> f64 {
    match catalog.get(item) {
        Some(it) if it.duration_s > 0.0 => watch_s / it.duration_s,
        _ => 0.0,
    }
}

/// Encodes a request. The sequence is the `seq_len` most recent effective
/// views strictly before the request; candidates are the first
/// `candidates` eligible triggers (most recent first).
pub fn encode_request(
    vocab: &Vocab,
    catalog: &Catalog,
    history: &UserHistory,
    req: &RequestInstance,
    effective: EffectiveView,
    seq_len: usize,
    candidates: usize,
) -> RequestFeatures {
    let sequence = history
        .interactions
        .iter()
        .rev()
        .skip_while(|x| x.ts >= req.tau0)
        .filter(|x| effective.accepts(x))
        .take(seq_len)
        .map(|x| Token { item: vocab.item_row(x.item), tag: vocab.tag_row(catalog, x.item), age: age_bucket(req.tau0 - x.ts) })
        .collect();
    let candidates = req
        .eligible_triggers
        .iter()
        .take(candidates)
        .enumerate()
        .map(|(rank, t)| CandidateFeatures {
            item: vocab.item_row(t.item),
            tag: vocab.tag_row(catalog, t.item),
            age: age_bucket(req.tau0 - t.ts),
            engagement: engagement_bucket(completion(catalog, t.item, t.watch_s), t.feedback),
            rank: rank_bucket(rank),
        })
        .collect();
    RequestFeatures { user: vocab.user_row(req.user), daypart: daypart_bucket(req.tau0), sequence, candidates }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucket_edges() {
        assert_eq!(age_bucket(0), 0);
        assert_eq!(age_bucket(59), 0);
        assert_eq!(age_bucket(60), 1);
        assert_eq!(age_bucket(86_399), 4);
        assert_eq!(age_bucket(604_800), 7);
        assert_eq!(engagement_bucket(0.0, Feedback::empty()), 0);
        assert_eq!(engagement_bucket(0.25, Feedback::LIKE), 5);
        assert_eq!(engagement_bucket(9.0, Feedback::LIKE | Feedback::SHARE), 13);
        assert!((engagement_bucket(9.0, Feedback::LIKE) as usize) < ENGAGEMENT_BUCKETS);
        assert_eq!(rank_bucket(0), 0);
        assert_eq!(rank_bucket(4), 3);
        assert_eq!(rank_bucket(20), 6);
        assert_eq!(rank_bucket(500), 7);
        assert_eq!(daypart_bucket(0), 0);
        assert_eq!(daypart_bucket(86_399), 3);
        assert_eq!(daypart_bucket(-1), 3);
    }

    #[test]
    fn out_of_vocabulary_ids_use_row_zero() {
        let v = Vocab::new(10, 3, 5);
        assert_eq!(v.item_row(ItemId(0)), 1);
        assert_eq!(v.item_row(ItemId(9)), 10);
        assert_eq!(v.item_row(ItemId(10)), 0);
        assert_eq!(v.user_row(UserId(7)), 0);
    }
}
