//! Look-ahead supervision: per (request, trigger, channel) reward, intensity,
//! value label and cross-channel uniqueness, built by replaying each channel's
//! retrieval at request time and intersecting it with the future window.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::channels::{replay_retrieve, ChannelId, ReplayAudit, DEFAULT_DELTA_S};
use crate::corpus::{ItemId, RequestId, RequestInstance, WindowEntry};
use crate::error::{Error, Result};

/// Label parameters for one channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelLabeling {
    /// Seconds of window watch time per unit of intensity.
    pub scale: f64,
    /// Intensity cap.
    pub cap: f64,
    /// Intensity at or above which a trigger counts as valuable.
    pub threshold: f64,
}

impl Default for ChannelLabeling {
    fn default() -> Self {
        ChannelLabeling { scale: 100.0, cap: 6.0, threshold: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VamConfig {
    /// Future window length in effective views.
    pub window_size: usize,
    pub channels: BTreeMap<ChannelId, ChannelLabeling>,
    /// A trigger is channel-unique when its uniqueness ratio is strictly above this.
    pub uniqueness_threshold: f64,
    pub epsilon: f64,
    /// Fraction of training records that threshold calibration aims to label positive.
    pub target_positive_rate: f64,
    pub delta_s: i64,
}

impl Default for VamConfig {
    fn default() -> Self {
        VamConfig {
            window_size: 100,
            channels: ChannelId::ALL.iter().map(|&c| (c, ChannelLabeling::default())).collect(),
            uniqueness_threshold: 0.8,
            epsilon: 1e-6,
            target_positive_rate: 0.1,
            delta_s: DEFAULT_DELTA_S,
        }
    }
}

impl VamConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.window_size == 0 {
            return bad("window_size must be positive");
        }
        if self.channels.is_empty() {
            return bad("at least one channel is required");
        }
        for (c, l) in &self.channels {
            if !(l.scale > 0.0 && l.cap > 0.0 && l.scale.is_finite() && l.cap.is_finite()) {
                return Err(Error::Config(alloc::format!("{c}: scale and cap must be positive")));
            }
            if !(0.0..=l.cap).contains(&l.threshold) {
                return Err(Error::Config(alloc::format!("{c}: threshold must lie in [0, cap]")));
            }
        }
        if !(self.uniqueness_threshold > 0.0 && self.uniqueness_threshold < 1.0) {
            return bad("uniqueness_threshold must lie in (0, 1)");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive");
        }
        if !(self.target_positive_rate > 0.0 && self.target_positive_rate < 1.0) {
            return bad("target_positive_rate must lie in (0, 1)");
        }
        if self.delta_s < 0 {
            return bad("delta_s must be nonnegative");
        }
        Ok(())
    }

    pub fn labeling(&self, c: ChannelId) -> Result<ChannelLabeling> {
        self.channels.get(&c).copied().ok_or_else(|| Error::Config(alloc::format!("no labeling for channel {c}")))
    }

    pub fn roster(&self) -> Vec<ChannelId> {
        self.channels.keys().copied().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisionRecord {
    pub request: RequestId,
    pub trigger: ItemId,
    pub channel: ChannelId,
    pub raw_reward: f64,
    pub intensity: f64,
    pub value_label: bool,
    pub uniqueness_ratio: f64,
    pub uniqueness_label: bool,
}

/// Total window watch time per distinct item, ascending by item id. Repeat
/// views of one item are summed in window order.
pub fn window_totals(window: &[WindowEntry]) -> Vec<(ItemId, f64)> {
    let mut totals: BTreeMap<ItemId, f64> = BTreeMap::new();
    for e in window {
        *totals.entry(e.item).or_insert(0.0) += e.watch_s;
    }
    totals.into_iter().collect()
}

/// Window watch time on retrieved items, each window item counted once.
/// Summation runs over items in ascending id order.
pub fn raw_reward(retrieved: &[ItemId], window: &[WindowEntry]) -> f64 {
    reward_from_totals(retrieved, &window_totals(window))
}

fn reward_from_totals(retrieved: &[ItemId], totals: &[(ItemId, f64)]) -> f64 {
    let mut ids: Vec<ItemId> = retrieved.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut sum = 0.0;
    let mut r = ids.iter().peekable();
    for &(item, w) in totals {
        while r.next_if(|&&x| x < item).is_some() {}
        if r.peek() == Some(&&item) {
            sum += w;
        }
    }
    sum
}

pub fn intensity_label(reward: f64, scale: f64, cap: f64) -> f64 {
    (reward / scale).max(0.0).min(cap)
}

pub fn binary_label(intensity: f64, threshold: f64) -> bool {
    intensity >= threshold
}

/// Fraction of each channel's distinct retrieved items that no other channel
/// retrieved, smoothed by `epsilon`.
pub fn uniqueness_ratios(retrieved: &BTreeMap<ChannelId, Vec<ItemId>>, epsilon: f64) -> BTreeMap<ChannelId, f64> {
    let sets: BTreeMap<ChannelId, Vec<ItemId>> = retrieved
        .iter()
        .map(|(&c, items)| {
            let mut s = items.clone();
            s.sort_unstable();
            s.dedup();
            (c, s)
        })
        .collect();
    let mut owners: BTreeMap<ItemId, u32> = BTreeMap::new();
    for s in sets.values() {
        for &i in s {
            *owners.entry(i).or_insert(0) += 1;
        }
    }
    sets.iter()
        .map(|(&c, s)| {
            let unique = s.iter().filter(|i| owners[*i] == 1).count();
            (c, unique as f64 / (s.len() as f64 + epsilon))
        })
        .collect()
}

/// Output of [`build_supervision`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Supervision {
    /// Sorted by (request, trigger, channel).
    pub records: Vec<SupervisionRecord>,
    /// Requests dropped because some channel had no snapshot old enough.
    pub skipped_requests: usize,
    pub audit: ReplayAudit,
}

/// Records for every (request, candidate trigger, channel). `candidates`
/// caps the triggers considered per request to the most recent ones.
pub fn build_supervision(
    requests: &[RequestInstance],
    store: &crate::channels::SnapshotStore,
    cfg: &VamConfig,
    candidates: usize,
) -> Result<Supervision> {
    cfg.validate()?;
    let roster = cfg.roster();
    let mut out = Supervision::default();
    let mut order: Vec<&RequestInstance> = requests.iter().collect();
    order.sort_by_key(|r| r.id);
    for req in order {
        if !store.covers(&roster, req.tau0, cfg.delta_s) {
            out.skipped_requests += 1;
            continue;
        }
        for c in &roster {
            out.audit.record(store.for_request(*c, req.tau0, cfg.delta_s)?, req.tau0, cfg.delta_s);
        }
        let window: Vec<WindowEntry> = req.future_window.iter().take(cfg.window_size).copied().collect();
        let totals = window_totals(&window);
        let mut triggers: Vec<ItemId> = req.eligible_triggers.iter().take(candidates).map(|t| t.item).collect();
        triggers.sort_unstable();
        for t in triggers {
            let mut retrieved = BTreeMap::new();
            for &c in &roster {
                let list = replay_retrieve(store, c, t, req.tau0, cfg.delta_s)?;
                retrieved.insert(c, list.iter().map(|n| n.item).collect::<Vec<_>>());
            }
            let ratios = uniqueness_ratios(&retrieved, cfg.epsilon);
            for &c in &roster {
                let lab = cfg.labeling(c)?;
                let raw = reward_from_totals(&retrieved[&c], &totals);
                let intensity = intensity_label(raw, lab.scale, lab.cap);
                let rho = ratios[&c];
                out.records.push(SupervisionRecord {
                    request: req.id,
                    trigger: t,
                    channel: c,
                    raw_reward: raw,
                    intensity,
                    value_label: binary_label(intensity, lab.threshold),
                    uniqueness_ratio: rho,
                    uniqueness_label: rho > cfg.uniqueness_threshold,
                });
            }
        }
    }
    Ok(out)
}

/// Per-channel threshold whose positive fraction over `records` is closest to
/// `target`. Only positive intensities are candidates, so a zero-reward record
/// is never labeled valuable; ties go to the larger threshold. A channel with
/// no positive intensity gets its cap.
pub fn calibrate_thresholds(records: &[SupervisionRecord], cfg: &VamConfig, target: f64) -> Result<BTreeMap<ChannelId, f64>> {
    let mut out = BTreeMap::new();
    for c in cfg.roster() {
        let cap = cfg.labeling(c)?.cap;
        let mut values: Vec<f64> = records.iter().filter(|r| r.channel == c).map(|r| r.intensity).collect();
        let n = values.len();
        values.retain(|&v| v > 0.0);
        // descending; position i holds the (i+1)-th largest
        values.sort_by(|a, b| b.total_cmp(a));
        let mut best = (f64::INFINITY, cap);
        let mut i = 0;
        while i < values.len() {
            let v = values[i];
            while i < values.len() && values[i] == v {
                i += 1;
            }
            let gap = libm::fabs(i as f64 / n as f64 - target);
            if gap < best.0 {
                best = (gap, v);
            }
        }
        out.insert(c, best.1);
    }
    Ok(out)
}

/// Recomputes value labels under new thresholds and stores them in `cfg`.
pub fn apply_thresholds(records: &mut [SupervisionRecord], cfg: &mut VamConfig, thresholds: &BTreeMap<ChannelId, f64>) -> Result<()> {
    for (c, &t) in thresholds {
        let lab = cfg.channels.get_mut(c).ok_or_else(|| Error::Config(alloc::format!("no labeling for channel {c}")))?;
        lab.threshold = t;
    }
    cfg.validate()?;
    for r in records.iter_mut() {
        r.value_label = binary_label(r.intensity, cfg.labeling(r.channel)?.threshold);
    }
    Ok(())
}

/// Positive value-label fraction per channel.
pub fn positive_rates(records: &[SupervisionRecord]) -> BTreeMap<ChannelId, f64> {
    let mut counts: BTreeMap<ChannelId, (usize, usize)> = BTreeMap::new();
    for r in records {
        let e = counts.entry(r.channel).or_insert((0, 0));
        e.0 += r.value_label as usize;
        e.1 += 1;
    }
    counts.into_iter().map(|(c, (p, n))| (c, p as f64 / n as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::{IndexSnapshot, Neighbor, SnapshotStore};
    use crate::corpus::{EligibleTrigger, Feedback, UserId};

    fn w(item: u32, watch_s: f64) -> WindowEntry {
        WindowEntry { item: ItemId(item), ts: 0, watch_s }
    }

    #[test]
    fn reward_counts_each_window_item_once() {
        let window = [w(1, 30.0), w(2, 40.0)];
        assert_eq!(raw_reward(&[], &window), 0.0);
        assert_eq!(raw_reward(&[ItemId(9)], &window), 0.0);
        assert_eq!(raw_reward(&[ItemId(1)], &window), 30.0);
        assert_eq!(raw_reward(&[ItemId(2), ItemId(1), ItemId(1)], &window), 70.0);
        // a repeated window view contributes its total once
        assert_eq!(raw_reward(&[ItemId(1)], &[w(1, 30.0), w(1, 12.0)]), 42.0);
    }

    #[test]
    fn intensity_and_label() {
        assert_eq!(intensity_label(250.0, 100.0, 6.0), 2.5);
        assert_eq!(intensity_label(10000.0, 100.0, 6.0), 6.0);
        assert_eq!(intensity_label(0.0, 100.0, 6.0), 0.0);
        assert!(binary_label(2.5, 2.5));
        assert!(!binary_label(0.0, 0.5));
        assert!(binary_label(0.0, 0.0));
    }

    fn sets(lists: &[&[u32]]) -> BTreeMap<ChannelId, Vec<ItemId>> {
        ChannelId::ALL.iter().zip(lists).map(|(&c, l)| (c, l.iter().map(|&i| ItemId(i)).collect())).collect()
    }

    #[test]
    fn uniqueness_cases() {
        let eps = 1e-6;
        let disjoint: Vec<Vec<u32>> = (0..3).map(|c| (c * 50..c * 50 + 50).collect()).collect();
        let r = uniqueness_ratios(&sets(&[&disjoint[0], &disjoint[1], &disjoint[2]]), eps);
        assert!(r.values().all(|&x| x > 0.8 && x < 1.0));

        let r = uniqueness_ratios(&sets(&[&[1, 2], &[1, 2], &[3]]), eps);
        assert_eq!(r[&ChannelId::Cooccurrence], 0.0);
        assert_eq!(r[&ChannelId::Embedding], 0.0);
        assert!(r[&ChannelId::Content] > 0.99);

        let r = uniqueness_ratios(&sets(&[&[1, 2, 3, 4], &[1], &[]]), eps);
        assert_eq!(r[&ChannelId::Cooccurrence], 3.0 / (4.0 + eps));
        assert!(r[&ChannelId::Cooccurrence] <= 0.8);
        assert_eq!(r[&ChannelId::Content], 0.0);
    }

    fn store_with(lists: &[(ChannelId, u32, &[u32])]) -> SnapshotStore {
        let mut store = SnapshotStore::new();
        for c in ChannelId::ALL {
            let neighbors = lists
                .iter()
                .filter(|(ch, _, _)| *ch == c)
                .map(|(_, t, items)| {
                    let n = items.iter().enumerate().map(|(r, &i)| Neighbor { item: ItemId(i), score: 1.0 - r as f64 * 0.01 }).collect();
                    (ItemId(*t), n)
                })
                .collect();
            store.insert(IndexSnapshot::new(c, 0, 50, neighbors).unwrap()).unwrap();
        }
        store
    }

    fn request(triggers: &[u32], window: &[(u32, f64)]) -> RequestInstance {
        RequestInstance {
            id: RequestId::new(UserId(1), 0),
            user: UserId(1),
            tau0: 10_000,
            eligible_triggers: triggers
                .iter()
                .map(|&i| EligibleTrigger { item: ItemId(i), ts: 9_000, watch_s: 10.0, feedback: Feedback::empty() })
                .collect(),
            future_window: window.iter().map(|&(i, s)| WindowEntry { item: ItemId(i), ts: 11_000, watch_s: s }).collect(),
        }
    }

    #[test]
    fn one_record_per_trigger_and_channel() {
        let store = store_with(&[(ChannelId::Cooccurrence, 1, &[5, 6]), (ChannelId::Content, 2, &[6])]);
        let req = request(&[2, 1], &[(6, 300.0)]);
        let out = build_supervision(&[req], &store, &VamConfig::default(), 50).unwrap();
        assert_eq!(out.records.len(), 6);
        assert_eq!(out.skipped_requests, 0);
        let keys: Vec<_> = out.records.iter().map(|r| (r.trigger.0, r.channel)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        let r = out.records.iter().find(|r| r.trigger == ItemId(1) && r.channel == ChannelId::Cooccurrence).unwrap();
        assert_eq!((r.raw_reward, r.intensity, r.value_label), (300.0, 3.0, true));
        // trigger 2 has no neighbors in two channels
        let empty = out.records.iter().find(|r| r.trigger == ItemId(2) && r.channel == ChannelId::Embedding).unwrap();
        assert_eq!((empty.raw_reward, empty.uniqueness_ratio, empty.uniqueness_label), (0.0, 0.0, false));
    }

    #[test]
    fn unavailable_snapshots_skip_the_request() {
        let store = store_with(&[]);
        let mut req = request(&[1], &[]);
        req.tau0 = 100; // cutoff 100 - 1200 precedes the only snapshot
        let out = build_supervision(&[req], &store, &VamConfig::default(), 50).unwrap();
        assert_eq!((out.records.len(), out.skipped_requests), (0, 1));
    }

    fn rec(channel: ChannelId, intensity: f64) -> SupervisionRecord {
        SupervisionRecord {
            request: RequestId(0),
            trigger: ItemId(0),
            channel,
            raw_reward: intensity * 100.0,
            intensity,
            value_label: false,
            uniqueness_ratio: 0.0,
            uniqueness_label: false,
        }
    }

    #[test]
    fn calibration_hits_target_and_never_labels_zero_reward() {
        let c = ChannelId::Cooccurrence;
        // 100 records: 80 zero, 20 positive spread 0.1..2.0
        let mut records: Vec<_> = (0..80).map(|_| rec(c, 0.0)).collect();
        records.extend((1..=20).map(|i| rec(c, i as f64 * 0.1)));
        let mut cfg = VamConfig::default();
        cfg.channels.retain(|k, _| *k == c);
        let t = calibrate_thresholds(&records, &cfg, 0.1).unwrap();
        assert_eq!(t[&c], 1.1); // ten values 1.1..=2.0
        apply_thresholds(&mut records, &mut cfg, &t).unwrap();
        assert_eq!(positive_rates(&records)[&c], 0.1);

        // only 5% positive: every positive record is labeled, zeros never
        let mut sparse: Vec<_> = (0..95).map(|_| rec(c, 0.0)).collect();
        sparse.extend((1..=5).map(|i| rec(c, i as f64)));
        let t = calibrate_thresholds(&sparse, &cfg, 0.1).unwrap();
        assert_eq!(t[&c], 1.0);

        let none: Vec<_> = (0..10).map(|_| rec(c, 0.0)).collect();
        assert_eq!(calibrate_thresholds(&none, &cfg, 0.1).unwrap()[&c], 6.0);
    }

    #[test]
    fn config_validation() {
        assert!(VamConfig::default().validate().is_ok());
        let mut cfg = VamConfig::default();
        cfg.channels.get_mut(&ChannelId::Content).unwrap().threshold = 7.0;
        assert!(cfg.validate().is_err());
        let cfg = VamConfig { uniqueness_threshold: 1.0, ..VamConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = VamConfig { window_size: 0, ..VamConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
