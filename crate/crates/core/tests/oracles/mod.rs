//! Deliberately naive reference implementations shared by property tests and
//! the acceptance suite. Nothing here calls into the library's algorithms.
#![allow(dead_code)]

use capts_core::channels::ChannelId;
use capts_core::ItemId;

/// One (trigger, channel) outcome computed with nested loops.
#[derive(Debug, PartialEq)]
pub struct OracleRecord {
    pub trigger: ItemId,
    pub channel: ChannelId,
    pub raw_reward: f64,
    pub intensity: f64,
    pub value_label: bool,
    pub uniqueness_ratio: f64,
    pub uniqueness_label: bool,
}

pub struct OracleLabeling {
    pub scale: f64,
    pub cap: f64,
    pub threshold: f64,
}

/// `lists[c][t]` is channel `channels[c]`'s neighbor list for `triggers[t]`;
/// `window` holds (item, watch seconds) pairs in time order.
pub fn supervision(
    triggers: &[ItemId],
    channels: &[ChannelId],
    lists: &[Vec<Vec<ItemId>>],
    window: &[(ItemId, f64)],
    labeling: &[OracleLabeling],
    epsilon: f64,
    theta: f64,
) -> Vec<OracleRecord> {
    let mut distinct_window: Vec<ItemId> = Vec::new();
    for &(i, _) in window {
        if !distinct_window.contains(&i) {
            distinct_window.push(i);
        }
    }
    distinct_window.sort();

    let mut trigger_order: Vec<usize> = (0..triggers.len()).collect();
    trigger_order.sort_by_key(|&t| triggers[t]);
    let mut channel_order: Vec<usize> = (0..channels.len()).collect();
    channel_order.sort_by_key(|&c| channels[c]);

    let mut out = Vec::new();
    for &t in &trigger_order {
        for &c in &channel_order {
            let retrieved = &lists[c][t];
            let mut reward = 0.0;
            for &item in &distinct_window {
                let mut total = 0.0;
                for &(i, s) in window {
                    if i == item {
                        total += s;
                    }
                }
                let mut hit = false;
                for &r in retrieved {
                    if r == item {
                        hit = true;
                    }
                }
                if hit {
                    reward += total;
                }
            }
            let lab = &labeling[c];
            let mut intensity = reward / lab.scale;
            if intensity < 0.0 {
                intensity = 0.0;
            }
            if intensity > lab.cap {
                intensity = lab.cap;
            }

            let mut distinct: Vec<ItemId> = Vec::new();
            for &r in retrieved {
                if !distinct.contains(&r) {
                    distinct.push(r);
                }
            }
            let mut unique = 0usize;
            for &r in &distinct {
                let mut elsewhere = false;
                for other in 0..channels.len() {
                    if other != c && lists[other][t].contains(&r) {
                        elsewhere = true;
                    }
                }
                if !elsewhere {
                    unique += 1;
                }
            }
            let ratio = unique as f64 / (distinct.len() as f64 + epsilon);
            out.push(OracleRecord {
                trigger: triggers[t],
                channel: channels[c],
                raw_reward: reward,
                intensity,
                value_label: intensity >= lab.threshold,
                uniqueness_ratio: ratio,
                uniqueness_label: ratio > theta,
            });
        }
    }
    out
}

/// Per-channel subset sum, added in ascending trigger order.
pub fn subset_value(row: &[f64], mask: u32) -> f64 {
    let mut v = 0.0;
    for (t, s) in row.iter().enumerate() {
        if mask & (1 << t) != 0 {
            v += s;
        }
    }
    v
}

/// Best objective over every joint choice of per-channel trigger subsets
/// within budget, by exhaustive enumeration of the cartesian product.
/// `scores[c][t]`. The joint value adds channel values in channel order.
pub fn best_assignment_value(scores: &[Vec<f64>], budgets: &[usize]) -> f64 {
    let n = scores.first().map_or(0, Vec::len);
    let feasible: Vec<Vec<f64>> = scores
        .iter()
        .zip(budgets)
        .map(|(row, &b)| (0u32..(1 << n)).filter(|m| m.count_ones() as usize <= b).map(|m| subset_value(row, m)).collect())
        .collect();
    fn walk(feasible: &[Vec<f64>], c: usize, acc: f64, best: &mut f64) {
        if c == feasible.len() {
            if acc > *best {
                *best = acc;
            }
            return;
        }
        for &v in &feasible[c] {
            walk(feasible, c + 1, acc + v, best);
        }
    }
    let mut best = f64::NEG_INFINITY;
    walk(&feasible, 0, 0.0, &mut best);
    best
}

/// Randomized tiny supervision instances checked against [`supervision`].
pub mod vam_cases {
    use super::*;
    use capts_core::channels::{IndexSnapshot, Neighbor, SnapshotStore};
    use capts_core::corpus::{EligibleTrigger, Feedback, RequestId, RequestInstance, UserId, WindowEntry};
    use capts_core::vam::{build_supervision, ChannelLabeling, VamConfig};
    use rand::seq::IndexedRandom;
    use rand::{Rng, RngCore};
    use std::collections::BTreeMap;

    pub struct Case {
        pub triggers: Vec<ItemId>,
        pub lists: Vec<Vec<Vec<ItemId>>>,
        pub window: Vec<(ItemId, f64)>,
        pub thresholds: [f64; 3],
    }

    pub fn random(rng: &mut dyn RngCore) -> Case {
        let pool: Vec<ItemId> = (0..16).map(ItemId).collect();
        let n_trig = rng.random_range(1..=5);
        let triggers: Vec<ItemId> = pool.choose_multiple(rng, n_trig).copied().collect();
        let lists = (0..3)
            .map(|_| {
                triggers
                    .iter()
                    .map(|&t| {
                        let others: Vec<ItemId> = pool.iter().copied().filter(|&i| i != t).collect();
                        let len = rng.random_range(0..=10);
                        others.choose_multiple(rng, len).copied().collect()
                    })
                    .collect()
            })
            .collect();
        let window = (0..rng.random_range(0..=10))
            .map(|_| (pool[rng.random_range(0..pool.len())], rng.random_range(70..4000) as f64 / 10.0))
            .collect();
        // thresholds on a coarse grid so exact ties with intensities happen
        let mut thresholds = [0.0; 3];
        for t in &mut thresholds {
            *t = rng.random_range(0..=12) as f64 * 0.5;
        }
        Case { triggers, lists, window, thresholds }
    }

    /// Runs the library and the oracle on `case`; returns a mismatch description.
    pub fn check(case: &Case) -> Result<(), String> {
        let channels = ChannelId::ALL;
        let mut store = SnapshotStore::new();
        for (c, &ch) in channels.iter().enumerate() {
            let mut neighbors = BTreeMap::new();
            for (t, &trig) in case.triggers.iter().enumerate() {
                let list: Vec<Neighbor> = case.lists[c][t]
                    .iter()
                    .enumerate()
                    .map(|(rank, &item)| Neighbor { item, score: 1.0 - rank as f64 / 64.0 })
                    .collect();
                neighbors.insert(trig, list);
            }
            store.insert(IndexSnapshot::new(ch, 0, 50, neighbors).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        }
        let req = RequestInstance {
            id: RequestId::new(UserId(0), 0),
            user: UserId(0),
            tau0: 1_000_000,
            eligible_triggers: case
                .triggers
                .iter()
                .map(|&item| EligibleTrigger { item, ts: 500_000, watch_s: 30.0, feedback: Feedback::empty() })
                .collect(),
            future_window: case.window.iter().map(|&(item, watch_s)| WindowEntry { item, ts: 2_000_000, watch_s }).collect(),
        };
        let mut cfg = VamConfig { window_size: 10, ..VamConfig::default() };
        for (c, &ch) in channels.iter().enumerate() {
            cfg.channels.insert(ch, ChannelLabeling { scale: 100.0, cap: 6.0, threshold: case.thresholds[c] });
        }
        let got = build_supervision(&[req], &store, &cfg, 5).map_err(|e| e.to_string())?;
        let labeling: Vec<OracleLabeling> =
            case.thresholds.iter().map(|&threshold| OracleLabeling { scale: 100.0, cap: 6.0, threshold }).collect();
        let want = supervision(&case.triggers, &channels, &case.lists, &case.window, &labeling, cfg.epsilon, cfg.uniqueness_threshold);
        if got.records.len() != want.len() {
            return Err(format!("{} records, oracle {}", got.records.len(), want.len()));
        }
        for (g, w) in got.records.iter().zip(&want) {
            let same = g.trigger == w.trigger
                && g.channel == w.channel
                && g.raw_reward == w.raw_reward
                && g.intensity == w.intensity
                && g.value_label == w.value_label
                && g.uniqueness_ratio == w.uniqueness_ratio
                && g.uniqueness_label == w.uniqueness_label;
            if !same {
                return Err(format!("library {g:?} vs oracle {w:?}"));
            }
        }
        Ok(())
    }
}

/// Small random models and batches for finite-difference checks.
pub mod tiny_models {
    use capts_core::catr::{CandidateFeatures, Example, Model, ModelConfig, RequestFeatures, Target, Token, Vocab};
    use capts_core::channels::ChannelId;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// A d=4 model over `channels` channels with every parameter jittered
    /// (so biases are nonzero), plus a batch of exactly three
    /// (request, candidate) records spread over two requests.
    pub fn random(seed: u64, channels: usize) -> (Model, Vec<Example>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = Vocab::new(6, 3, 3);
        let cfg = ModelConfig { d: 4, d_a: 4, d_h: 5, seq_len: 3, beta: 0.1, calibrator: true, vocab, channels: ChannelId::ALL[..channels].to_vec() };
        let mut model = Model::init(cfg, seed).unwrap();
        for p in &mut model.params {
            *p += rng.random_range(-0.3..0.3);
        }
        let mut batch = Vec::new();
        for n_cand in [2usize, 1] {
            let seq_len = rng.random_range(0..=3);
            let sequence = (0..seq_len)
                .map(|_| Token { item: rng.random_range(0..7), tag: rng.random_range(0..4), age: rng.random_range(0..8) })
                .collect();
            let candidates: Vec<CandidateFeatures> = (0..n_cand)
                .map(|_| CandidateFeatures {
                    item: rng.random_range(0..7),
                    tag: rng.random_range(0..4),
                    age: rng.random_range(0..8),
                    engagement: rng.random_range(0..14),
                    rank: rng.random_range(0..8),
                })
                .collect();
            let targets = (0..n_cand * channels)
                .map(|_| Target { intensity: rng.random_range(0.0..6.0), cap: 6.0, value: rng.random_bool(0.5), unique: rng.random_bool(0.5) })
                .collect();
            let features = RequestFeatures { user: rng.random_range(0..4), daypart: rng.random_range(0..4), sequence, candidates };
            batch.push(Example { features, targets });
        }
        (model, batch)
    }
}

/// Randomized routing instances checked against [`best_assignment_value`].
pub mod routing_cases {
    use super::*;
    use capts_core::routing::route_scores;
    use rand::{Rng, RngCore};
    use std::collections::BTreeMap;

    pub struct Case {
        pub candidates: Vec<ItemId>,
        pub scores: Vec<Vec<f64>>,
        pub budgets: Vec<usize>,
    }

    pub fn random(rng: &mut dyn RngCore) -> Case {
        let n = rng.random_range(1..=8);
        let mut ids: Vec<u32> = (0..40).collect();
        for i in 0..n {
            let j = rng.random_range(i..ids.len());
            ids.swap(i, j);
        }
        let candidates = ids[..n].iter().map(|&i| ItemId(i)).collect();
        let scores = (0..3).map(|_| (0..n).map(|_| rng.random_range(0.0..1.2)).collect()).collect();
        let budgets = (0..3).map(|_| rng.random_range(0..=3)).collect();
        Case { candidates, scores, budgets }
    }

    pub fn check(case: &Case) -> Result<(), String> {
        let scores: BTreeMap<ChannelId, Vec<f64>> = ChannelId::ALL.iter().copied().zip(case.scores.iter().cloned()).collect();
        let budgets: BTreeMap<ChannelId, usize> = ChannelId::ALL.iter().copied().zip(case.budgets.iter().copied()).collect();
        let a = route_scores(&case.candidates, &scores, &budgets).map_err(|e| e.to_string())?;
        if !a.is_feasible(&budgets) {
            return Err("infeasible assignment".into());
        }
        // recompute the objective from the oracle's point of view
        let mut got = 0.0;
        for (c, row) in case.scores.iter().enumerate() {
            let chosen = a.triggers(ChannelId::ALL[c]);
            let mut mask = 0u32;
            for (t, id) in case.candidates.iter().enumerate() {
                if chosen.contains(id) {
                    mask |= 1 << t;
                }
            }
            got += subset_value(row, mask);
        }
        let best = best_assignment_value(&case.scores, &case.budgets);
        if got == best {
            Ok(())
        } else {
            Err(format!("route objective {got} vs exhaustive best {best}"))
        }
    }
}
