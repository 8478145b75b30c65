//! Budgeted per-channel trigger routing and the rule-based baselines.
//!
//! The routing objective is additive over (channel, trigger) pairs with an
//! independent budget per channel, so taking each channel's top-`B_c` by
//! score is an exact maximizer.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::catr::Prediction;
use crate::channels::ChannelId;
use crate::corpus::{AuthorId, Catalog, EffectiveView, Interaction, ItemId, TagId};
use crate::error::{Error, Result};
use crate::math::score_desc_key_asc;

pub const DEFAULT_BUDGET: usize = 8;
pub const DEFAULT_ETA: f64 = 0.2;
pub const DEFAULT_RISE_FACTOR: f64 = 1.5;

pub fn routing_score(calibrated: f64, uniqueness: f64, eta: f64) -> f64 {
    calibrated + eta * uniqueness
}

/// Per channel, the selected triggers with their scores, best first.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingAssignment {
    pub channels: BTreeMap<ChannelId, Vec<(ItemId, f64)>>,
}

impl RoutingAssignment {
    pub fn triggers(&self, c: ChannelId) -> Vec<ItemId> {
        self.channels.get(&c).map_or_else(Vec::new, |l| l.iter().map(|&(i, _)| i).collect())
    }

    /// Every list within budget and free of duplicates.
    pub fn is_feasible(&self, budgets: &BTreeMap<ChannelId, usize>) -> bool {
        self.channels.iter().all(|(c, l)| {
            let distinct: BTreeSet<ItemId> = l.iter().map(|&(i, _)| i).collect();
            distinct.len() == l.len() && l.len() <= budgets.get(c).copied().unwrap_or(0)
        })
    }

    /// Sum of selected scores, per channel in candidate order, then across
    /// channels in roster order.
    pub fn objective(&self, candidates: &[ItemId]) -> f64 {
        let mut total = 0.0;
        for list in self.channels.values() {
            let mut v = 0.0;
            for item in candidates {
                if let Some(&(_, s)) = list.iter().find(|(i, _)| i == item) {
                    v += s;
                }
            }
            total += v;
        }
        total
    }
}

/// Top-`B_c` per channel. `scores[c][k]` scores `candidates[k]` for channel
/// `c`; ties go to the lower item id.
pub fn route_scores(
    candidates: &[ItemId],
    scores: &BTreeMap<ChannelId, Vec<f64>>,
    budgets: &BTreeMap<ChannelId, usize>,
) -> Result<RoutingAssignment> {
    let mut out = RoutingAssignment::default();
    for (&c, row) in scores {
        if row.len() != candidates.len() {
            return Err(Error::Invalid(alloc::format!("{c}: {} scores for {} candidates", row.len(), candidates.len())));
        }
        let budget = *budgets.get(&c).ok_or_else(|| Error::Config(alloc::format!("no budget for channel {c}")))?;
        let mut ranked: Vec<(f64, ItemId)> = row.iter().copied().zip(candidates.iter().copied()).collect();
        ranked.sort_by(|a, b| score_desc_key_asc(*a, *b));
        ranked.dedup_by_key(|x| x.1);
        out.channels.insert(c, ranked.into_iter().take(budget).map(|(s, i)| (i, s)).collect());
    }
    Ok(out)
}

/// Routes model predictions (`[candidate][channel]`, channels in `roster`
/// order) by calibrated value plus `eta` times predicted uniqueness.
pub fn route(
    candidates: &[ItemId],
    predictions: &[Vec<Prediction>],
    roster: &[ChannelId],
    budgets: &BTreeMap<ChannelId, usize>,
    eta: f64,
) -> Result<RoutingAssignment> {
    if eta < 0.0 {
        return Err(Error::Config("eta must be nonnegative".into()));
    }
    if predictions.len() != candidates.len() {
        return Err(Error::Invalid("one prediction row per candidate is required".into()));
    }
    let mut scores = BTreeMap::new();
    for (k, &c) in roster.iter().enumerate() {
        let row = predictions.iter().map(|p| routing_score(p[k].calibrated, p[k].uniqueness, eta)).collect();
        scores.insert(c, row);
    }
    route_scores(candidates, &scores, budgets)
}

/// The same ordered trigger list for every channel, cut to each budget.
/// Scores record rank (1, 1/2, 1/3, ...) for the assignment dump.
pub fn uniform_assignment(list: &[ItemId], budgets: &BTreeMap<ChannelId, usize>) -> RoutingAssignment {
    let channels = budgets
        .iter()
        .map(|(&c, &b)| (c, list.iter().take(b).enumerate().map(|(r, &i)| (i, 1.0 / (r + 1) as f64)).collect()))
        .collect();
    RoutingAssignment { channels }
}

/// Triggering strategies compared by the evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Capts,
    Recent,
    TagTop,
    Ltv,
    Nic,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Capts, Method::Recent, Method::TagTop, Method::Ltv, Method::Nic];
    pub const BASELINES: [Method; 4] = [Method::Recent, Method::TagTop, Method::Ltv, Method::Nic];

    pub fn name(self) -> &'static str {
        match self {
            Method::Capts => "capts",
            Method::Recent => "recent",
            Method::TagTop => "tagtop",
            Method::Ltv => "ltv",
            Method::Nic => "nic",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(alloc::format!("unknown method {s:?} (expected capts, recent, tagtop, ltv or nic)")))
    }
}

/// What a rule-based baseline sees: the user's interactions strictly before
/// the request, in time order.
#[derive(Clone, Copy)]
pub struct BaselineInput<'a> {
    pub history: &'a [Interaction],
    pub catalog: &'a Catalog,
    pub effective: EffectiveView,
}

impl BaselineInput<'_> {
    fn tag(&self, i: ItemId) -> Option<TagId> {
        self.catalog.get(i).map(|it| it.tag)
    }

    fn author(&self, i: ItemId) -> Option<AuthorId> {
        self.catalog.get(i).map(|it| it.author)
    }

    /// Distinct items with the position of their most recent interaction,
    /// most recent first.
    fn latest_positions(&self) -> Vec<(ItemId, usize)> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for (p, x) in self.history.iter().enumerate().rev() {
            if seen.insert(x.item) {
                out.push((x.item, p));
            }
        }
        out
    }
}

/// Most recent effective views, de-duplicated, most recent first.
pub fn baseline_recent(input: &BaselineInput<'_>, n: usize) -> Vec<ItemId> {
    let mut seen = BTreeSet::new();
    input
        .history
        .iter()
        .rev()
        .filter(|x| input.effective.accepts(x))
        .filter(|x| seen.insert(x.item))
        .map(|x| x.item)
        .take(n)
        .collect()
}

/// Hierarchical popularity: tags ranked by exposure count in the history;
/// within a tag, candidates by watch time of their latest view with at most
/// one item per author; picks taken round-robin across tags.
pub fn baseline_tagtop(input: &BaselineInput<'_>, n: usize) -> Vec<ItemId> {
    let mut exposure: BTreeMap<TagId, usize> = BTreeMap::new();
    for x in input.history {
        if let Some(t) = input.tag(x.item) {
            *exposure.entry(t).or_insert(0) += 1;
        }
    }
    let mut tags: Vec<(TagId, usize)> = exposure.into_iter().collect();
    tags.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));

    let latest = input.latest_positions();
    let mut per_tag: Vec<Vec<ItemId>> = Vec::new();
    for &(tag, _) in &tags {
        let mut ranked: Vec<(f64, ItemId)> = latest
            .iter()
            .filter(|&&(i, _)| input.tag(i) == Some(tag))
            .map(|&(i, p)| (input.history[p].watch_s, i))
            .collect();
        ranked.sort_by(|a, b| score_desc_key_asc(*a, *b));
        let mut authors = BTreeSet::new();
        per_tag.push(ranked.into_iter().filter(|&(_, i)| authors.insert(input.author(i))).map(|(_, i)| i).collect());
    }
    let mut out = Vec::new();
    let mut round = 0;
    while out.len() < n && per_tag.iter().any(|l| l.len() > round) {
        for l in &per_tag {
            if out.len() == n {
                break;
            }
            if let Some(&i) = l.get(round) {
                out.push(i);
            }
        }
        round += 1;
    }
    out
}

/// Long-term value: each candidate scores the number of effective views
/// after its latest interaction that share its author or its tag.
pub fn baseline_ltv(input: &BaselineInput<'_>, n: usize) -> Vec<ItemId> {
    let mut scored: Vec<(f64, ItemId)> = input
        .latest_positions()
        .into_iter()
        .map(|(i, p)| {
            let (tag, author) = (input.tag(i), input.author(i));
            let follow = input.history[p + 1..]
                .iter()
                .filter(|x| input.effective.accepts(x))
                .filter(|x| {
                    let (t, a) = (input.tag(x.item), input.author(x.item));
                    (a.is_some() && a == author) || (t.is_some() && t == tag)
                })
                .count();
            (follow as f64, i)
        })
        .collect();
    scored.sort_by(|a, b| score_desc_key_asc(*a, *b));
    scored.into_iter().take(n).map(|(_, i)| i).collect()
}

/// Rising interests: a tag rises when its share of the last quarter of the
/// history exceeds `rise_factor` times its share of the earlier part.
/// Triggers are the most recent effective views of rising tags; with no
/// rising tag this falls back to [`baseline_recent`].
pub fn baseline_nic(input: &BaselineInput<'_>, n: usize, rise_factor: f64) -> Vec<ItemId> {
    let len = input.history.len();
    let split = len - len / 4;
    let (early, recent) = input.history.split_at(split);
    let share = |part: &[Interaction]| {
        let mut counts: BTreeMap<TagId, f64> = BTreeMap::new();
        for x in part {
            if let Some(t) = input.tag(x.item) {
                *counts.entry(t).or_insert(0.0) += 1.0;
            }
        }
        let total = part.len().max(1) as f64;
        counts.values_mut().for_each(|c| *c /= total);
        counts
    };
    let (early_share, recent_share) = (share(early), share(recent));
    let rising: BTreeSet<TagId> = recent_share
        .iter()
        .filter(|&(t, &r)| r > rise_factor * early_share.get(t).copied().unwrap_or(0.0))
        .map(|(&t, _)| t)
        .collect();
    if rising.is_empty() {
        return baseline_recent(input, n);
    }
    let mut seen = BTreeSet::new();
    input
        .history
        .iter()
        .rev()
        .filter(|x| input.effective.accepts(x))
        .filter(|x| input.tag(x.item).is_some_and(|t| rising.contains(&t)))
        .filter(|x| seen.insert(x.item))
        .map(|x| x.item)
        .take(n)
        .collect()
}

pub fn baseline(method: Method, input: &BaselineInput<'_>, n: usize) -> Result<Vec<ItemId>> {
    Ok(match method {
        Method::Recent => baseline_recent(input, n),
        Method::TagTop => baseline_tagtop(input, n),
        Method::Ltv => baseline_ltv(input, n),
        Method::Nic => baseline_nic(input, n, DEFAULT_RISE_FACTOR),
        Method::Capts => return Err(Error::Invalid(String::from("capts is not a rule-based baseline"))),
    })
}
