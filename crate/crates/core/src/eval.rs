//! Union and per-channel Recall@K, Uniq@K, and paired significance tests.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::channels::{ChannelId, Neighbor, ReplayAudit, SnapshotStore};
use crate::corpus::{ItemId, RequestId, RequestInstance};
use crate::error::{Error, Result};
use crate::math::{mean_var, sqrt, student_t_two_sided_p};
use crate::routing::RoutingAssignment;
use crate::vam::uniqueness_ratios;

pub const DEFAULT_K_GRID: [usize; 4] = [20, 50, 100, 200];

/// A channel's top-`k`: per-trigger neighbor lists interleaved by rank
/// (every trigger's rank-1 item, then every rank-2 item, ...), keeping the
/// first occurrence of each item.
pub fn assemble_top_k(lists: &[&[Neighbor]], k: usize) -> Vec<ItemId> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    let depth = lists.iter().map(|l| l.len()).max().unwrap_or(0);
    'outer: for rank in 0..depth {
        for l in lists {
            if out.len() == k {
                break 'outer;
            }
            if let Some(n) = l.get(rank) {
                if seen.insert(n.item) {
                    out.push(n.item);
                }
            }
        }
    }
    out
}

/// Fraction of distinct `window` items found in `retrieved`.
pub fn recall(retrieved: &BTreeSet<ItemId>, window: &BTreeSet<ItemId>) -> f64 {
    if window.is_empty() {
        return 0.0;
    }
    window.iter().filter(|i| retrieved.contains(i)).count() as f64 / window.len() as f64
}

/// Per-channel share of top-`k` items that no other channel retrieved.
pub fn uniq_at_k(per_channel: &BTreeMap<ChannelId, Vec<ItemId>>, epsilon: f64) -> BTreeMap<ChannelId, f64> {
    uniqueness_ratios(per_channel, epsilon)
}

/// One request's metrics at every K of the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RequestMetrics {
    pub request: RequestId,
    pub window_items: usize,
    /// Parallel to the K grid.
    pub at_k: Vec<MetricsAtK>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsAtK {
    pub k: usize,
    pub union_recall: f64,
    pub channel_recall: BTreeMap<ChannelId, f64>,
    pub channel_uniq: BTreeMap<ChannelId, f64>,
}

/// Replays the routed triggers of every channel and scores the result
/// against the request's future window. `None` for an empty window.
pub fn evaluate_request(
    store: &SnapshotStore,
    req: &RequestInstance,
    assignment: &RoutingAssignment,
    k_grid: &[usize],
    delta_s: i64,
    epsilon: f64,
    audit: &mut ReplayAudit,
) -> Result<Option<RequestMetrics>> {
    let window: BTreeSet<ItemId> = req.future_window.iter().map(|e| e.item).collect();
    if window.is_empty() {
        return Ok(None);
    }
    if k_grid.iter().any(|&k| k == 0) {
        return Err(Error::Config("every K must be at least 1".into()));
    }
    let k_max = k_grid.iter().copied().max().unwrap_or(0);
    let mut full: BTreeMap<ChannelId, Vec<ItemId>> = BTreeMap::new();
    for (&c, routed) in &assignment.channels {
        let snap = store.for_request(c, req.tau0, delta_s)?;
        audit.record(snap, req.tau0, delta_s);
        let lists: Vec<&[Neighbor]> = routed.iter().map(|&(t, _)| snap.neighbors(t)).collect();
        full.insert(c, assemble_top_k(&lists, k_max));
    }
    let mut at_k = Vec::with_capacity(k_grid.len());
    for &k in k_grid {
        let cut: BTreeMap<ChannelId, Vec<ItemId>> = full.iter().map(|(&c, l)| (c, l[..l.len().min(k)].to_vec())).collect();
        let sets: BTreeMap<ChannelId, BTreeSet<ItemId>> = cut.iter().map(|(&c, l)| (c, l.iter().copied().collect())).collect();
        let union: BTreeSet<ItemId> = sets.values().flatten().copied().collect();
        at_k.push(MetricsAtK {
            k,
            union_recall: recall(&union, &window),
            channel_recall: sets.iter().map(|(&c, s)| (c, recall(s, &window))).collect(),
            channel_uniq: uniq_at_k(&cut, epsilon),
        });
    }
    Ok(Some(RequestMetrics { request: req.id, window_items: window.len(), at_k }))
}

/// Means over requests for one method at one K.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub k: usize,
    pub union_recall: f64,
    pub channel_recall: BTreeMap<ChannelId, f64>,
    pub channel_uniq: BTreeMap<ChannelId, f64>,
    pub n: usize,
}

/// Averages per-request metrics into one row per K (in grid order).
pub fn aggregate(method: &str, metrics: &[RequestMetrics]) -> Vec<MethodRow> {
    let Some(first) = metrics.first() else {
        return Vec::new();
    };
    let n = metrics.len() as f64;
    (0..first.at_k.len())
        .map(|j| {
            let mut row = MethodRow {
                method: method.into(),
                k: first.at_k[j].k,
                union_recall: 0.0,
                channel_recall: BTreeMap::new(),
                channel_uniq: BTreeMap::new(),
                n: metrics.len(),
            };
            for m in metrics {
                let a = &m.at_k[j];
                row.union_recall += a.union_recall;
                for (&c, &r) in &a.channel_recall {
                    *row.channel_recall.entry(c).or_insert(0.0) += r;
                }
                for (&c, &u) in &a.channel_uniq {
                    *row.channel_uniq.entry(c).or_insert(0.0) += u;
                }
            }
            row.union_recall /= n;
            row.channel_recall.values_mut().for_each(|v| *v /= n);
            row.channel_uniq.values_mut().for_each(|v| *v /= n);
            row
        })
        .collect()
}

/// Two-sided paired t-test result.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    pub p: f64,
    /// Fewer than two pairs, or differences with (numerically) zero variance;
    /// `t` and `p` are NaN then.
    pub degenerate: bool,
}

/// Paired t-test on `a[i] - b[i]`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() {
        return Err(Error::Invalid("paired samples must have equal length".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mean, var) = mean_var(&diffs);
    let n = diffs.len();
    // differences equal up to rounding count as constant
    let scale = diffs.iter().fold(0.0f64, |m, d| m.max(libm::fabs(*d)));
    if n < 2 || sqrt(var) <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
        return Ok(PairedTest { n, mean_diff: mean, t: f64::NAN, p: f64::NAN, degenerate: true });
    }
    let t = mean / sqrt(var / n as f64);
    Ok(PairedTest { n, mean_diff: mean, t, p: student_t_two_sided_p(t, (n - 1) as f64), degenerate: false })
}

/// Method `a` against method `b` at one K, paired by request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub k: usize,
    pub test: PairedTest,
}

/// Compares union recall at grid position `j` over requests both methods
/// evaluated.
pub fn compare(a_name: &str, a: &[RequestMetrics], b_name: &str, b: &[RequestMetrics], j: usize) -> Result<Comparison> {
    let b_by_id: BTreeMap<RequestId, &RequestMetrics> = b.iter().map(|m| (m.request, m)).collect();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut k = 0;
    for m in a {
        if let Some(o) = b_by_id.get(&m.request) {
            k = m.at_k[j].k;
            xs.push(m.at_k[j].union_recall);
            ys.push(o.at_k[j].union_recall);
        }
    }
    Ok(Comparison { a: a_name.into(), b: b_name.into(), k, test: paired_t_test(&xs, &ys)? })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<MethodRow>,
    pub comparisons: Vec<Comparison>,
    pub evaluated: usize,
    pub skipped_empty_window: usize,
    pub skipped_replay: usize,
}

impl EvalReport {
    pub fn row(&self, method: &str, k: usize) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method && r.k == k)
    }
}
