//! In-memory pipeline stages. The commands wrap these with file IO; tests and
//! the acceptance suite call them directly.

use std::collections::BTreeMap;

use capts_core::catr::{encode_request, train, Example, Model, Target, TrainConfig, TrainReport, Vocab};
use capts_core::channels::{Channel, ContentChannel, CooccurrenceChannel, EmbeddingChannel, LogView, ReplayAudit};
use capts_core::corpus::{requests_at_views, Catalog, EffectiveView, Item, RequestId, RequestInstance, Timestamp, UserHistory, UserId};
use capts_core::eval::{aggregate, compare, evaluate_request, Comparison, EvalReport, RequestMetrics};
use capts_core::routing::{baseline, route, uniform_assignment, BaselineInput, Method, RoutingAssignment};
use capts_core::supply::{nearline_refresh, online_supply, route_supply, ModelScorer, TriggerCache};
use capts_core::vam::{apply_thresholds, build_supervision, calibrate_thresholds, positive_rates, SupervisionRecord, VamConfig};
use capts_core::{ChannelId, IndexSnapshot, SnapshotStore};

use serde::Serialize;

use crate::config::{stage_seed, RunConfig};
use crate::formats;
use crate::error::{CliError, CliResult};

/// Catalog plus histories sorted by user.
#[derive(Clone, Debug, PartialEq)]
pub struct Log {
    pub catalog: Catalog,
    pub histories: Vec<UserHistory>,
}

impl Log {
    pub fn new(catalog: Catalog, mut histories: Vec<UserHistory>) -> Self {
        histories.sort_by_key(|h| h.user);
        Log { catalog, histories }
    }

    pub fn history(&self, user: UserId) -> Option<&UserHistory> {
        self.histories.binary_search_by_key(&user, |h| h.user).ok().map(|i| &self.histories[i])
    }

    pub fn view(&self, effective: EffectiveView) -> LogView<'_> {
        LogView { catalog: &self.catalog, histories: &self.histories, effective }
    }

    pub fn vocab(&self) -> Vocab {
        let users = self.histories.last().map_or(0, |h| h.user.0 as usize + 1);
        Vocab::for_catalog(&self.catalog, users)
    }

    pub fn interaction_count(&self) -> usize {
        self.histories.iter().map(|h| h.interactions.len()).sum()
    }

    /// Everything observable at `as_of`: interactions up to it and items
    /// created by then.
    pub fn truncated(&self, as_of: Timestamp) -> CliResult<Log> {
        let items: Vec<Item> = self.catalog.items().iter().filter(|it| it.created_at <= as_of).cloned().collect();
        let catalog = Catalog::new(items, self.catalog.dim())?;
        let histories = self
            .histories
            .iter()
            .map(|h| UserHistory { user: h.user, interactions: h.interactions.iter().filter(|x| x.ts <= as_of).copied().collect() })
            .collect();
        Ok(Log { catalog, histories })
    }
}

/// Snapshot times: one per cadence strictly inside the simulated period.
pub fn snapshot_times(cfg: &RunConfig) -> Vec<Timestamp> {
    let (start, end) = (cfg.generator.start_ts, cfg.generator.end_ts());
    (1..).map(|k| start + k * cfg.indexes.cadence_s).take_while(|&t| t < end).collect()
}

pub fn channel(cfg: &RunConfig, c: ChannelId) -> Box<dyn Channel> {
    let ix = &cfg.indexes;
    match c {
        ChannelId::Cooccurrence => Box::new(CooccurrenceChannel { alpha: ix.swing_alpha, k_ret: ix.k_ret }),
        ChannelId::Embedding => {
            let mut ch = EmbeddingChannel::new(ix.skipgram, stage_seed(cfg.seed, "embedding"));
            ch.k_ret = ix.k_ret;
            Box::new(ch)
        }
        ChannelId::Content => Box::new(ContentChannel { k_ret: ix.k_ret }),
    }
}

pub fn build_snapshot(cfg: &RunConfig, log: &Log, c: ChannelId, as_of: Timestamp) -> CliResult<IndexSnapshot> {
    Ok(channel(cfg, c).build(log.view(cfg.effective()), as_of)?)
}

pub fn build_store(cfg: &RunConfig, log: &Log) -> CliResult<SnapshotStore> {
    let mut store = SnapshotStore::new();
    for c in cfg.roster() {
        for as_of in snapshot_times(cfg) {
            let t = std::time::Instant::now();
            let snap = build_snapshot(cfg, log, c, as_of)?;
            log::debug!("{c} snapshot at {as_of}: {} lists in {:.1?}", snap.len(), t.elapsed());
            store.insert(snap)?;
        }
    }
    Ok(store)
}

/// Result of rebuilding every snapshot the replays consult from the log as
/// it stood at the snapshot's timestamp.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LeakageAudit {
    pub replays: usize,
    pub consulted: Vec<(ChannelId, Timestamp)>,
    /// Snapshots whose rebuild differs from the stored bytes.
    pub mismatched: Vec<(ChannelId, Timestamp)>,
    /// Replays that selected a snapshot later than `tau0 - delta`.
    pub violations: usize,
}

impl LeakageAudit {
    pub fn passed(&self) -> bool {
        self.mismatched.is_empty() && self.violations == 0
    }
}

pub fn audit_leakage(cfg: &RunConfig, log: &Log, store: &SnapshotStore, requests: &[RequestInstance]) -> CliResult<LeakageAudit> {
    let delta = cfg.vam.delta_s;
    let mut out = LeakageAudit::default();
    let mut consulted = std::collections::BTreeSet::new();
    for req in requests {
        for c in cfg.roster() {
            let Ok(snap) = store.for_request(c, req.tau0, delta) else { continue };
            out.replays += 1;
            if snap.as_of > req.tau0 - delta {
                out.violations += 1;
            }
            consulted.insert((c, snap.as_of));
        }
    }
    for &(c, as_of) in &consulted {
        let stored = store
            .snapshots(c)
            .iter()
            .find(|s| s.as_of == as_of)
            .expect("consulted snapshots come from the store");
        let rebuilt = build_snapshot(cfg, &log.truncated(as_of)?, c, as_of)?;
        if formats::snapshot_bytes(&rebuilt) != formats::snapshot_bytes(stored) {
            out.mismatched.push((c, as_of));
        }
    }
    out.consulted = consulted.into_iter().collect();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<RequestInstance>,
    /// At most one per user, windowed over the user's last effective views.
    pub eval: Vec<RequestInstance>,
}

/// Per user, the evaluation anchor is the effective view just before the
/// last `eval_views`; training anchors sit every `stride` views from
/// `min_history` on, with windows that end before the evaluation anchor.
pub fn split_requests(cfg: &RunConfig, log: &Log) -> Split {
    let s = &cfg.split;
    let w = cfg.vam.window_size;
    let eff = cfg.effective();
    let mut out = Split { train: Vec::new(), eval: Vec::new() };
    for h in &log.histories {
        let views = h.interactions.iter().filter(|x| eff.accepts(x)).count();
        let Some(eval_rank) = views.checked_sub(s.eval_views + 1) else { continue };
        out.eval.extend(requests_at_views(h, [eval_rank], s.eval_views, eff));
        let ranks = (0..).step_by(s.stride).skip_while(|&r| r < s.min_history).take_while(|&r| r + w <= eval_rank);
        out.train.extend(requests_at_views(h, ranks, w, eff));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionSet {
    pub vam: VamConfig,
    pub records: Vec<SupervisionRecord>,
    pub requests: usize,
    pub skipped_requests: usize,
    pub positive_rates: BTreeMap<ChannelId, f64>,
    pub audit: ReplayAudit,
}

/// Builds records for the training requests and calibrates each channel's
/// value threshold to the target positive rate.
pub fn supervise(cfg: &RunConfig, store: &SnapshotStore, train_requests: &[RequestInstance]) -> CliResult<SupervisionSet> {
    let mut vam = cfg.vam.clone();
    let mut sup = build_supervision(train_requests, store, &vam, cfg.split.candidates)?;
    let thresholds = calibrate_thresholds(&sup.records, &vam, vam.target_positive_rate)?;
    apply_thresholds(&mut sup.records, &mut vam, &thresholds)?;
    Ok(SupervisionSet {
        positive_rates: positive_rates(&sup.records),
        requests: train_requests.len() - sup.skipped_requests,
        skipped_requests: sup.skipped_requests,
        records: sup.records,
        audit: sup.audit,
        vam,
    })
}

/// Joins records to encoded requests. Candidates follow the model's order
/// (most recent first); requests without records are dropped.
pub fn examples(
    cfg: &RunConfig,
    log: &Log,
    vocab: &Vocab,
    requests: &[RequestInstance],
    vam: &VamConfig,
    records: &[SupervisionRecord],
) -> CliResult<Vec<Example>> {
    let roster = vam.roster();
    let mut by_key: BTreeMap<(RequestId, u32, ChannelId), &SupervisionRecord> = BTreeMap::new();
    for r in records {
        by_key.insert((r.request, r.trigger.0, r.channel), r);
    }
    let mut out = Vec::new();
    for req in requests {
        let cands = &req.eligible_triggers[..req.eligible_triggers.len().min(cfg.split.candidates)];
        if cands.is_empty() || !by_key.contains_key(&(req.id, cands[0].item.0, roster[0])) {
            continue;
        }
        let hist = log.history(req.user).ok_or_else(|| CliError::Data(format!("no history for user {}", req.user)))?;
        let features = encode_request(vocab, &log.catalog, hist, req, cfg.effective(), cfg.model.seq_len, cands.len());
        let mut targets = Vec::with_capacity(cands.len() * roster.len());
        for t in cands {
            for &c in &roster {
                let r = by_key
                    .get(&(req.id, t.item.0, c))
                    .ok_or_else(|| CliError::Data(format!("request {} lacks a record for trigger {} on {c}", req.id, t.item)))?;
                targets.push(Target { intensity: r.intensity, cap: vam.labeling(c)?.cap, value: r.value_label, unique: r.uniqueness_label });
            }
        }
        out.push(Example { features, targets });
    }
    Ok(out)
}

/// Which routing model to train.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    Full,
    /// No diversity loss and no uniqueness bonus at routing.
    NoDiversity,
    /// Calibrator bypassed.
    NoCalibrator,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoDiversity, Variant::NoCalibrator];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoDiversity => "no-div",
            Variant::NoCalibrator => "no-cal",
        }
    }

    pub fn train_config(self, cfg: &RunConfig) -> TrainConfig {
        let mut t = cfg.train.clone();
        t.seed = stage_seed(cfg.seed, "train");
        if self == Variant::NoDiversity {
            t.mu = 0.0;
        }
        t
    }

    pub fn eta(self, cfg: &RunConfig) -> f64 {
        if self == Variant::NoDiversity {
            0.0
        } else {
            cfg.routing.eta
        }
    }
}

pub fn train_variant(cfg: &RunConfig, vocab: Vocab, variant: Variant, examples: &[Example]) -> CliResult<(Model, TrainReport)> {
    let mcfg = cfg.model_config(vocab, variant != Variant::NoCalibrator);
    let mut model = Model::init(mcfg, stage_seed(cfg.seed, "init"))?;
    let report = train(&mut model, examples, &variant.train_config(cfg))?;
    Ok((model, report))
}

/// How one evaluated method picks triggers.
pub enum Router<'a> {
    Model { model: &'a Model, eta: f64 },
    Rule(Method),
}

pub fn assign(cfg: &RunConfig, log: &Log, router: &Router<'_>, req: &RequestInstance) -> CliResult<RoutingAssignment> {
    let hist = log.history(req.user).ok_or_else(|| CliError::Data(format!("no history for user {}", req.user)))?;
    let budgets = cfg.budgets();
    match *router {
        Router::Model { model, eta } => {
            let n = req.eligible_triggers.len().min(cfg.split.candidates);
            let f = encode_request(&model.config.vocab, &log.catalog, hist, req, cfg.effective(), model.config.seq_len, n);
            let items: Vec<_> = req.eligible_triggers[..n].iter().map(|t| t.item).collect();
            Ok(route(&items, &model.predict(&f), &model.config.channels, &budgets, eta)?)
        }
        Router::Rule(m) => {
            let before = hist.interactions.partition_point(|x| x.ts < req.tau0);
            let input = BaselineInput { history: &hist.interactions[..before], catalog: &log.catalog, effective: cfg.effective() };
            let n = budgets.values().copied().max().unwrap_or(0);
            Ok(uniform_assignment(&baseline(m, &input, n)?, &budgets))
        }
    }
}

/// Per-method metrics and assignments over one shared request set.
#[derive(Clone, Debug, Default)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub metrics: BTreeMap<String, Vec<RequestMetrics>>,
    pub assignments: BTreeMap<String, Vec<(RequestId, RoutingAssignment)>>,
    pub audit: ReplayAudit,
}

/// Evaluates every named router on the requests all channels can replay.
/// Each method is compared with `reference` by a paired t-test per K.
pub fn evaluate(
    cfg: &RunConfig,
    log: &Log,
    store: &SnapshotStore,
    requests: &[RequestInstance],
    routers: &[(String, Router<'_>)],
    reference: &str,
) -> CliResult<EvalOutcome> {
    let roster = cfg.roster();
    let delta = cfg.vam.delta_s;
    let mut out = EvalOutcome::default();
    let mut usable = Vec::new();
    for req in requests {
        if req.future_window.is_empty() {
            out.report.skipped_empty_window += 1;
        } else if !store.covers(&roster, req.tau0, delta) {
            out.report.skipped_replay += 1;
        } else {
            usable.push(req);
        }
    }
    out.report.evaluated = usable.len();
    for (name, router) in routers {
        let mut metrics = Vec::with_capacity(usable.len());
        let mut assignments = Vec::with_capacity(usable.len());
        for req in &usable {
            let a = assign(cfg, log, router, req)?;
            let m = evaluate_request(store, req, &a, &cfg.eval.k_grid, delta, cfg.vam.epsilon, &mut out.audit)?;
            metrics.push(m.expect("window checked nonempty"));
            assignments.push((req.id, a));
        }
        out.report.rows.extend(aggregate(name, &metrics));
        out.metrics.insert(name.clone(), metrics);
        out.assignments.insert(name.clone(), assignments);
    }
    if let Some(base) = out.metrics.get(reference) {
        for (name, _) in routers.iter().filter(|(n, _)| n != reference) {
            for j in 0..cfg.eval.k_grid.len() {
                out.report.comparisons.push(compare(name, &out.metrics[name], reference, base, j)?);
            }
        }
    }
    Ok(out)
}

pub fn comparison<'a>(report: &'a EvalReport, a: &str, b: &str, k: usize) -> Option<&'a Comparison> {
    report.comparisons.iter().find(|c| c.a == a && c.b == b && c.k == k)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupplyOutcome {
    pub cache: TriggerCache,
    pub requests: usize,
    pub hits: usize,
    pub misses: usize,
    pub mean_merged: f64,
    pub metrics: Vec<RequestMetrics>,
}

/// Simulates the nearline/online split for the evaluation requests: each
/// user's cache entry is refreshed at the last refresh boundary before the
/// request, then merged with online scores of the most recent triggers.
pub fn simulate_supply(
    cfg: &RunConfig,
    log: &Log,
    store: &SnapshotStore,
    model: &Model,
    model_version: &str,
    requests: &[RequestInstance],
) -> CliResult<SupplyOutcome> {
    let s = &cfg.supply;
    let scorer = ModelScorer { model, vocab: model.config.vocab, catalog: &log.catalog, effective: cfg.effective(), eta: cfg.routing.eta };
    let mut cache = TriggerCache::new(model.config.channels.clone());
    let mut out = SupplyOutcome { cache: TriggerCache::default(), requests: 0, hits: 0, misses: 0, mean_merged: 0.0, metrics: Vec::new() };
    let mut audit = ReplayAudit::default();
    let start = cfg.generator.start_ts;
    for req in requests {
        if req.future_window.is_empty() || !store.covers(&model.config.channels, req.tau0, cfg.vam.delta_s) {
            continue;
        }
        let hist = log.history(req.user).ok_or_else(|| CliError::Data(format!("no history for user {}", req.user)))?;
        let refreshed = start + (req.tau0 - start).div_euclid(s.refresh_s) * s.refresh_s;
        if refreshed > start {
            cache.put(nearline_refresh(&scorer, hist, refreshed, s.long_history, s.cache_size, s.ttl_s, model_version));
        }
        let supply = online_supply(&scorer, hist, req, &cache, s.recent, model_version)?;
        out.requests += 1;
        if supply.cache_hit {
            out.hits += 1;
        } else {
            out.misses += 1;
        }
        out.mean_merged += supply.triggers.len() as f64;
        let a = route_supply(&supply, &model.config.channels, &cfg.budgets())?;
        if let Some(m) = evaluate_request(store, req, &a, &cfg.eval.k_grid, cfg.vam.delta_s, cfg.vam.epsilon, &mut audit)? {
            out.metrics.push(m);
        }
    }
    out.mean_merged /= out.requests.max(1) as f64;
    out.cache = cache;
    Ok(out)
}
