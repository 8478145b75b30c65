//! Online/nearline trigger supply. A nearline job scores a long history in
//! batch and caches the best triggers per user; at request time the most
//! recent candidates are scored online and merged with the cached ones.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::catr::{encode_request, Model, Vocab};
use crate::channels::ChannelId;
use crate::corpus::{eligible_triggers, Catalog, EffectiveView, EligibleTrigger, ItemId, RequestId, RequestInstance, Timestamp, UserHistory, UserId};
use crate::error::{Error, Result};
use crate::math::score_desc_key_asc;
use crate::routing::{route_scores, routing_score, RoutingAssignment};

pub const DEFAULT_LONG_HISTORY: usize = 2000;
pub const DEFAULT_CACHE_SIZE: usize = 50;
pub const DEFAULT_RECENT: usize = 100;
/// Entries never expire.
pub const TTL_FOREVER: i64 = i64::MAX;

/// A trigger with its routing score for every channel, in roster order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrigger {
    pub item: ItemId,
    pub scores: Vec<f64>,
}

impl ScoredTrigger {
    pub fn best(&self) -> f64 {
        self.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Sorts by best channel score descending, then item id ascending.
fn sort_by_best(triggers: &mut [ScoredTrigger]) {
    triggers.sort_by(|a, b| score_desc_key_asc((a.best(), a.item), (b.best(), b.item)));
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub user: UserId,
    /// Sorted by best channel score descending.
    pub triggers: Vec<ScoredTrigger>,
    pub refreshed_at: Timestamp,
    pub ttl_s: i64,
    /// Identifies the model that produced the scores.
    pub model_version: String,
}

impl CacheEntry {
    pub fn is_valid(&self, now: Timestamp, model_version: &str) -> bool {
        self.model_version == model_version && now >= self.refreshed_at && now - self.refreshed_at <= self.ttl_s
    }
}

/// Per-user cache; a refresh replaces the whole entry.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TriggerCache {
    pub roster: Vec<ChannelId>,
    pub entries: BTreeMap<UserId, CacheEntry>,
}

impl TriggerCache {
    pub fn new(roster: Vec<ChannelId>) -> Self {
        TriggerCache { roster, entries: BTreeMap::new() }
    }

    pub fn put(&mut self, entry: CacheEntry) {
        self.entries.insert(entry.user, entry);
    }

    /// The user's entry if it is fresh and from `model_version`.
    pub fn lookup(&self, user: UserId, now: Timestamp, model_version: &str) -> Option<&CacheEntry> {
        self.entries.get(&user).filter(|e| e.is_valid(now, model_version))
    }
}

/// Produces per-channel routing scores for candidate triggers at a time.
pub trait TriggerScorer {
    fn roster(&self) -> &[ChannelId];

    /// `scores[candidate][channel]`, channels in roster order.
    fn score(&self, history: &UserHistory, at: Timestamp, candidates: &[EligibleTrigger]) -> Vec<Vec<f64>>;
}

/// Scores with a trained routing model.
pub struct ModelScorer<'a> {
    pub model: &'a Model,
    pub vocab: Vocab,
    pub catalog: &'a Catalog,
    pub effective: EffectiveView,
    pub eta: f64,
}

impl TriggerScorer for ModelScorer<'_> {
    fn roster(&self) -> &[ChannelId] {
        &self.model.config.channels
    }

    fn score(&self, history: &UserHistory, at: Timestamp, candidates: &[EligibleTrigger]) -> Vec<Vec<f64>> {
        let req = RequestInstance {
            id: RequestId(0),
            user: history.user,
            tau0: at,
            eligible_triggers: candidates.to_vec(),
            future_window: Vec::new(),
        };
        let f = encode_request(&self.vocab, self.catalog, history, &req, self.effective, self.model.config.seq_len, candidates.len());
        self.model
            .predict(&f)
            .into_iter()
            .map(|row| row.iter().map(|p| routing_score(p.calibrated, p.uniqueness, self.eta)).collect())
            .collect()
    }
}

fn scored(scorer: &dyn TriggerScorer, history: &UserHistory, at: Timestamp, candidates: &[EligibleTrigger]) -> Vec<ScoredTrigger> {
    scorer
        .score(history, at, candidates)
        .into_iter()
        .zip(candidates)
        .map(|(scores, t)| ScoredTrigger { item: t.item, scores })
        .collect()
}

/// Nearline batch job: scores up to `long_history` most recent distinct
/// items before `now` and keeps the best `top_m`.
pub fn nearline_refresh(
    scorer: &dyn TriggerScorer,
    history: &UserHistory,
    now: Timestamp,
    long_history: usize,
    top_m: usize,
    ttl_s: i64,
    model_version: &str,
) -> CacheEntry {
    let mut candidates = eligible_triggers(&history.interactions, now);
    candidates.truncate(long_history);
    let mut triggers = scored(scorer, history, now, &candidates);
    sort_by_best(&mut triggers);
    triggers.truncate(top_m);
    CacheEntry { user: history.user, triggers, refreshed_at: now, ttl_s, model_version: model_version.into() }
}

/// Merged trigger supply for one request.
#[derive(Clone, Debug, PartialEq)]
pub struct Supply {
    /// Distinct items, sorted by best channel score descending.
    pub triggers: Vec<ScoredTrigger>,
    pub cache_hit: bool,
}

/// Unions scored sets by item, keeping the higher score per channel.
pub fn merge(online: Vec<ScoredTrigger>, cached: &[ScoredTrigger]) -> Vec<ScoredTrigger> {
    let mut by_item: BTreeMap<ItemId, ScoredTrigger> = BTreeMap::new();
    for t in online.into_iter().chain(cached.iter().cloned()) {
        match by_item.get_mut(&t.item) {
            Some(have) => {
                for (h, s) in have.scores.iter_mut().zip(&t.scores) {
                    *h = h.max(*s);
                }
            }
            None => {
                by_item.insert(t.item, t);
            }
        }
    }
    let mut out: Vec<ScoredTrigger> = by_item.into_values().collect();
    sort_by_best(&mut out);
    out
}

/// Scores the `recent` most recent eligible triggers online and merges them
/// with the user's valid cache entry, if any.
pub fn online_supply(
    scorer: &dyn TriggerScorer,
    history: &UserHistory,
    req: &RequestInstance,
    cache: &TriggerCache,
    recent: usize,
    model_version: &str,
) -> Result<Supply> {
    if cache.roster.as_slice() != scorer.roster() {
        return Err(Error::Config("cache and scorer channel rosters differ".into()));
    }
    let candidates = &req.eligible_triggers[..req.eligible_triggers.len().min(recent)];
    let online = scored(scorer, history, req.tau0, candidates);
    Ok(match cache.lookup(req.user, req.tau0, model_version) {
        Some(entry) => Supply { triggers: merge(online, &entry.triggers), cache_hit: true },
        None => Supply { triggers: merge(online, &[]), cache_hit: false },
    })
}

/// Routes a merged supply under per-channel budgets.
pub fn route_supply(supply: &Supply, roster: &[ChannelId], budgets: &BTreeMap<ChannelId, usize>) -> Result<RoutingAssignment> {
    let items: Vec<ItemId> = supply.triggers.iter().map(|t| t.item).collect();
    let scores = roster
        .iter()
        .enumerate()
        .map(|(k, &c)| (c, supply.triggers.iter().map(|t| t.scores[k]).collect()))
        .collect();
    route_scores(&items, &scores, budgets)
}
