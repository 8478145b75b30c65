use alloc::vec::Vec;

use hashbrown::HashSet;
use serde::{Deserialize, Serialize};

use super::types::{EligibleTrigger, Interaction, RequestId, RequestInstance, UserHistory, WindowEntry};

pub const DEFAULT_EFFECTIVE_VIEW_S: f64 = 7.0;

/// Watch-time threshold separating effective views from skips.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveView {
    pub threshold_s: f64,
}

impl Default for EffectiveView {
    fn default() -> Self {
        EffectiveView { threshold_s: DEFAULT_EFFECTIVE_VIEW_S }
    }
}

impl EffectiveView {
    #[inline]
    pub fn accepts(&self, x: &Interaction) -> bool {
        is_effective_view(x, self.threshold_s)
    }
}

#[inline]
pub fn is_effective_view(x: &Interaction, threshold_s: f64) -> bool {
    x.watch_s >= threshold_s
}

/// Anchors one request at every `stride`-th effective view (0, stride,
/// 2*stride, ...). The anchoring view itself is neither a trigger nor part of
/// its future window.
pub fn build_request_instances(
    history: &UserHistory,
    window_size: usize,
    stride: usize,
    effective: EffectiveView,
) -> Vec<RequestInstance> {
    assert!(stride >= 1, "stride must be positive");
    let n = history.interactions.iter().filter(|x| effective.accepts(x)).count();
    requests_at_views(history, (0..n).step_by(stride), window_size, effective)
}

/// One request per listed effective-view rank (0 = the user's first effective
/// view); ranks past the end are ignored.
pub fn requests_at_views(
    history: &UserHistory,
    ranks: impl IntoIterator<Item = usize>,
    window_size: usize,
    effective: EffectiveView,
) -> Vec<RequestInstance> {
    assert!(window_size >= 1, "window size must be positive");
    let xs = &history.interactions;
    let views: Vec<usize> = (0..xs.len()).filter(|&i| effective.accepts(&xs[i])).collect();
    let mut out = Vec::new();
    for rank in ranks {
        let Some(&anchor) = views.get(rank) else { continue };
        let tau0 = xs[anchor].ts;
        let future_window = views[rank + 1..]
            .iter()
            .map(|&i| &xs[i])
            .filter(|x| x.ts > tau0)
            .take(window_size)
            .map(|x| WindowEntry { item: x.item, ts: x.ts, watch_s: x.watch_s })
            .collect();
        out.push(RequestInstance {
            id: RequestId::new(history.user, anchor),
            user: history.user,
            tau0,
            eligible_triggers: eligible_triggers(&xs[..anchor], tau0),
            future_window,
        });
    }
    out
}

/// Distinct items consumed strictly before `tau0`, most recent first, each
/// carrying its most recent occurrence.
pub fn eligible_triggers(prefix: &[Interaction], tau0: i64) -> Vec<EligibleTrigger> {
    let mut seen = HashSet::with_capacity(prefix.len());
    prefix
        .iter()
        .rev()
        .filter(|x| x.ts < tau0)
        .filter(|x| seen.insert(x.item))
        .map(|x| EligibleTrigger { item: x.item, ts: x.ts, watch_s: x.watch_s, feedback: x.feedback })
        .collect()
}
