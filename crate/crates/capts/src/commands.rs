//! Subcommands. Each reads its inputs from the run directory, refuses to
//! overwrite existing outputs unless forced, and writes through
//! [`formats::write_atomic`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use capts_core::catr::{Model, TrainReport};
use capts_core::corpus::generate_synthetic_corpus;
use capts_core::eval::{aggregate, EvalReport, MethodRow};
use capts_core::routing::Method;
use capts_core::vam::{SupervisionRecord, VamConfig};
use capts_core::{ChannelId, SnapshotStore};
use serde::Serialize;

use crate::config::{stage_seed, RunConfig};
use crate::error::{CliError, CliResult};
use crate::formats::{self, SupervisionHeader};
use crate::pipeline::{self, Log, Router, Variant};

/// Method compared against in every report.
pub const REFERENCE: &str = "recent";

/// One run directory and the config that names it.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub cfg: RunConfig,
    pub dir: PathBuf,
    pub force: bool,
}

impl Workspace {
    pub fn new(cfg: RunConfig, force: bool) -> Self {
        let dir = cfg.run_dir();
        Workspace { cfg, dir, force }
    }

    fn under(&self, rel: &Path) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn events_path(&self) -> PathBuf {
        self.under(&self.cfg.paths.corpus).join("events.tsv")
    }

    pub fn catalog_path(&self) -> PathBuf {
        self.under(&self.cfg.paths.corpus).join("catalog.tsv")
    }

    pub fn snapshot_path(&self, c: ChannelId, as_of: i64) -> PathBuf {
        self.under(&self.cfg.paths.snapshots).join(formats::snapshot_file_name(c, as_of))
    }

    pub fn supervision_path(&self) -> PathBuf {
        self.under(&self.cfg.paths.supervision).join("supervision.jsonl")
    }

    pub fn checkpoint_path(&self, v: Variant) -> PathBuf {
        self.under(&self.cfg.paths.checkpoints).join(format!("{}.ckpt", v.name()))
    }

    pub fn report_path(&self, name: &str) -> PathBuf {
        self.under(&self.cfg.paths.reports).join(name)
    }

    pub fn cache_path(&self) -> PathBuf {
        self.under(&self.cfg.paths.cache).join("cache.jsonl")
    }

    /// Fails with `Exists` on the first output already present, unless forced.
    fn guard(&self, outputs: &[PathBuf]) -> CliResult<()> {
        if !self.force {
            if let Some(p) = outputs.iter().find(|p| p.exists()) {
                return Err(CliError::Exists(p.clone()));
            }
        }
        Ok(())
    }

    /// Records the resolved config next to the outputs it produced.
    fn write_config(&self) -> CliResult<()> {
        formats::write_atomic(&self.dir.join("config.toml"), self.cfg.to_toml().as_bytes())
    }

    fn write(&self, path: &Path, bytes: &[u8]) -> CliResult<()> {
        formats::write_atomic(path, bytes)?;
        log::debug!("wrote {}", path.display());
        Ok(())
    }

    pub fn load_log(&self) -> CliResult<Log> {
        let catalog = formats::parse_catalog(&self.catalog_path(), &formats::read(&self.catalog_path())?)?;
        let (histories, ties) = formats::parse_events(&self.events_path(), &formats::read(&self.events_path())?)?;
        if ties > 0 {
            log::warn!("{ties} same-timestamp interaction pairs; ordered by item id");
        }
        Ok(Log::new(catalog, histories))
    }

    pub fn load_store(&self) -> CliResult<SnapshotStore> {
        let mut store = SnapshotStore::new();
        for c in self.cfg.roster() {
            for as_of in pipeline::snapshot_times(&self.cfg) {
                let p = self.snapshot_path(c, as_of);
                let snap = formats::parse_snapshot(&p, &formats::read(&p)?)?;
                if snap.channel != c || snap.as_of != as_of {
                    return Err(CliError::format(&p, "header does not match the file name"));
                }
                store.insert(snap)?;
            }
        }
        Ok(store)
    }

    /// Supervision whose labeling parameters agree with the config apart
    /// from the calibrated thresholds.
    pub fn load_supervision(&self) -> CliResult<(SupervisionHeader, Vec<SupervisionRecord>)> {
        let p = self.supervision_path();
        let (head, records) = formats::parse_supervision(&p, &formats::read(&p)?)?;
        let mut expected: VamConfig = self.cfg.vam.clone();
        for (c, l) in expected.channels.iter_mut() {
            if let Some(h) = head.vam.channels.get(c) {
                l.threshold = h.threshold;
            }
        }
        if expected != head.vam {
            return Err(CliError::Config(format!("{} was built with different labeling settings", p.display())));
        }
        Ok((head, records))
    }

    /// The model and its content-derived version string.
    pub fn load_model(&self, v: Variant) -> CliResult<(Model, String)> {
        let p = self.checkpoint_path(v);
        let bytes = formats::read(&p)?;
        let model = formats::parse_checkpoint(&p, &bytes)?;
        if model.config.channels != self.cfg.roster() {
            return Err(CliError::Config(format!("{} was trained for channels {:?}", p.display(), model.config.channels)));
        }
        Ok((model, formats::model_version(&bytes)))
    }
}

pub fn gen_data(ws: &Workspace) -> CliResult<Log> {
    ws.guard(&[ws.events_path(), ws.catalog_path()])?;
    let t = Instant::now();
    let corpus = generate_synthetic_corpus(&ws.cfg.generator, stage_seed(ws.cfg.seed, "generate"))?;
    let log = Log::new(corpus.catalog, corpus.histories);
    ws.write_config()?;
    ws.write(&ws.catalog_path(), &formats::catalog_bytes(&log.catalog)?)?;
    ws.write(&ws.events_path(), &formats::events_bytes(&log.histories)?)?;
    log::info!(
        "generated {} users, {} items, {} interactions in {:.1?}",
        log.histories.len(),
        log.catalog.len(),
        log.interaction_count(),
        t.elapsed()
    );
    Ok(log)
}

pub fn build_indexes(ws: &Workspace) -> CliResult<usize> {
    let times = pipeline::snapshot_times(&ws.cfg);
    let outputs: Vec<PathBuf> = ws.cfg.roster().into_iter().flat_map(|c| times.iter().map(move |&t| (c, t))).map(|(c, t)| ws.snapshot_path(c, t)).collect();
    ws.guard(&outputs)?;
    let log = ws.load_log()?;
    let t = Instant::now();
    let mut n = 0;
    for c in ws.cfg.roster() {
        for &as_of in &times {
            let snap = pipeline::build_snapshot(&ws.cfg, &log, c, as_of)?;
            ws.write(&ws.snapshot_path(c, as_of), &formats::snapshot_bytes(&snap))?;
            n += 1;
        }
    }
    ws.write_config()?;
    log::info!("built {n} snapshots in {:.1?}", t.elapsed());
    Ok(n)
}

/// Rebuilds every snapshot consulted by the training and evaluation replays
/// from the truncated log and compares bytes. Fails when any differ.
pub fn audit_leakage(ws: &Workspace) -> CliResult<pipeline::LeakageAudit> {
    let out_path = ws.report_path("leakage.json");
    ws.guard(std::slice::from_ref(&out_path))?;
    let log = ws.load_log()?;
    let store = ws.load_store()?;
    let split = pipeline::split_requests(&ws.cfg, &log);
    let requests: Vec<_> = split.train.into_iter().chain(split.eval).collect();
    let audit = pipeline::audit_leakage(&ws.cfg, &log, &store, &requests)?;
    ws.write(&out_path, &formats::pretty(&audit))?;
    log::info!(
        "leakage audit: {} replays, {} snapshots rebuilt, {} mismatched, {} violations",
        audit.replays,
        audit.consulted.len(),
        audit.mismatched.len(),
        audit.violations
    );
    if !audit.passed() {
        return Err(CliError::Data(format!("leakage audit failed; see {}", out_path.display())));
    }
    Ok(audit)
}

pub fn build_supervision(ws: &Workspace) -> CliResult<SupervisionHeader> {
    ws.guard(&[ws.supervision_path()])?;
    let log = ws.load_log()?;
    let store = ws.load_store()?;
    let split = pipeline::split_requests(&ws.cfg, &log);
    let t = Instant::now();
    let sup = pipeline::supervise(&ws.cfg, &store, &split.train)?;
    let header = SupervisionHeader {
        format: "capts-supervision".into(),
        version: formats::VERSION,
        vam: sup.vam.clone(),
        requests: sup.requests,
        skipped_requests: sup.skipped_requests,
        records: sup.records.len(),
        positive_rates: sup.positive_rates.clone(),
    };
    ws.write(&ws.supervision_path(), &formats::supervision_bytes(&header, &sup.records))?;
    log::info!(
        "{} records from {} requests ({} skipped) in {:.1?}; positive rates {}",
        sup.records.len(),
        sup.requests,
        sup.skipped_requests,
        t.elapsed(),
        rates(&sup.positive_rates)
    );
    Ok(header)
}

fn rates(r: &BTreeMap<ChannelId, f64>) -> String {
    r.iter().map(|(c, x)| format!("{c} {:.1}%", 100.0 * x)).collect::<Vec<_>>().join(", ")
}

fn train_inner(ws: &Workspace, log: &Log, v: Variant) -> CliResult<(Model, TrainReport)> {
    let (head, records) = ws.load_supervision()?;
    let split = pipeline::split_requests(&ws.cfg, log);
    let vocab = log.vocab();
    let examples = pipeline::examples(&ws.cfg, log, &vocab, &split.train, &head.vam, &records)?;
    let t = Instant::now();
    let (model, report) = pipeline::train_variant(&ws.cfg, vocab, v, &examples)?;
    ws.write(&ws.checkpoint_path(v), &formats::checkpoint_bytes(&model))?;
    ws.write(&ws.report_path(&format!("train-{}.json", v.name())), &formats::train_report_json(v.name(), &report))?;
    let losses: Vec<String> = report.epochs.iter().map(|e| format!("{:.4}", e.loss.total)).collect();
    log::info!("trained {} on {} requests in {:.1?}; epoch losses {}", v.name(), report.requests, t.elapsed(), losses.join(" "));
    Ok((model, report))
}

pub fn train(ws: &Workspace, v: Variant) -> CliResult<TrainReport> {
    ws.guard(&[ws.checkpoint_path(v), ws.report_path(&format!("train-{}.json", v.name()))])?;
    let log = ws.load_log()?;
    Ok(train_inner(ws, &log, v)?.1)
}

fn routers<'a>(cfg: &RunConfig, capts: Option<&'a Model>) -> CliResult<Vec<(String, Router<'a>)>> {
    let mut out = Vec::new();
    for &m in &cfg.eval.methods {
        match m {
            Method::Capts => {
                let model = capts.ok_or_else(|| CliError::Config("capts needs a trained checkpoint".into()))?;
                out.push((m.name().to_string(), Router::Model { model, eta: cfg.routing.eta }));
            }
            _ => out.push((m.name().to_string(), Router::Rule(m))),
        }
    }
    Ok(out)
}

/// Writes the metrics table, text summary, raw report and assignment dump.
pub fn eval(ws: &Workspace) -> CliResult<EvalReport> {
    let outputs = ["metrics.csv", "summary.txt", "eval.json", "assignments.jsonl"].map(|n| ws.report_path(n));
    ws.guard(&outputs)?;
    let log = ws.load_log()?;
    let store = ws.load_store()?;
    let model = if ws.cfg.eval.methods.contains(&Method::Capts) { Some(ws.load_model(Variant::Full)?.0) } else { None };
    let split = pipeline::split_requests(&ws.cfg, &log);
    let t = Instant::now();
    let out = pipeline::evaluate(&ws.cfg, &log, &store, &split.eval, &routers(&ws.cfg, model.as_ref())?, REFERENCE)?;
    if out.audit.violations > 0 {
        return Err(CliError::Data(format!("{} replays consulted a snapshot past their cutoff", out.audit.violations)));
    }
    let roster = ws.cfg.roster();
    ws.write(&outputs[0], &formats::metrics_csv(&out.report, &roster, REFERENCE)?)?;
    let summary = formats::summary_text(&out.report, &roster, REFERENCE);
    ws.write(&outputs[1], summary.as_bytes())?;
    ws.write(&outputs[2], &formats::pretty(&out.report))?;
    ws.write(&outputs[3], &formats::assignments_bytes(&out.assignments))?;
    log::info!("evaluated {} requests in {:.1?}\n{summary}", out.report.evaluated, t.elapsed());
    Ok(out.report)
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub k: usize,
    pub union_recall: f64,
    pub channel_uniq: BTreeMap<ChannelId, f64>,
    /// Uniq@K minus the full model's.
    pub uniq_delta: BTreeMap<ChannelId, f64>,
    pub p_value: Option<f64>,
}

/// Trains whichever of the three variants lack a checkpoint and evaluates
/// them side by side against the full model.
pub fn ablate(ws: &Workspace) -> CliResult<Vec<AblationRow>> {
    let outputs = [ws.report_path("ablation.csv"), ws.report_path("ablation.txt")];
    ws.guard(&outputs)?;
    let log = ws.load_log()?;
    let store = ws.load_store()?;
    let mut models = Vec::new();
    for v in Variant::ALL {
        let model = if ws.checkpoint_path(v).exists() && !ws.force { ws.load_model(v)?.0 } else { train_inner(ws, &log, v)?.0 };
        models.push((v, model));
    }
    let split = pipeline::split_requests(&ws.cfg, &log);
    let routers: Vec<(String, Router<'_>)> =
        models.iter().map(|(v, m)| (v.name().to_string(), Router::Model { model: m, eta: v.eta(&ws.cfg) })).collect();
    let full = Variant::Full.name();
    let out = pipeline::evaluate(&ws.cfg, &log, &store, &split.eval, &routers, full)?;
    let rows = ablation_rows(&out.report, full);
    let roster = ws.cfg.roster();
    ws.write(&outputs[0], &ablation_csv(&rows, &roster)?)?;
    let text = ablation_text(&rows, &roster);
    ws.write(&outputs[1], text.as_bytes())?;
    log::info!("ablation\n{text}");
    Ok(rows)
}

pub fn ablation_rows(report: &EvalReport, full: &str) -> Vec<AblationRow> {
    report
        .rows
        .iter()
        .map(|r| {
            let base = report.row(full, r.k);
            let uniq_delta = r
                .channel_uniq
                .iter()
                .map(|(c, u)| (*c, u - base.and_then(|b| b.channel_uniq.get(c)).copied().unwrap_or(f64::NAN)))
                .collect();
            let p_value = report.comparisons.iter().find(|c| c.a == r.method && c.b == full && c.k == r.k).map(|c| c.test.p);
            AblationRow { variant: r.method.clone(), k: r.k, union_recall: r.union_recall, channel_uniq: r.channel_uniq.clone(), uniq_delta, p_value }
        })
        .collect()
}

fn ablation_csv(rows: &[AblationRow], roster: &[ChannelId]) -> CliResult<Vec<u8>> {
    let path = Path::new("ablation.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut head = vec!["variant".to_string(), "k".into(), "union_recall".into()];
    head.extend(roster.iter().map(|c| format!("uniq_{c}")));
    head.extend(roster.iter().map(|c| format!("uniq_delta_{c}")));
    head.push("p_value".into());
    w.write_record(&head).map_err(|e| CliError::format(path, e.to_string()))?;
    for r in rows {
        let mut rec = vec![r.variant.clone(), r.k.to_string(), r.union_recall.to_string()];
        rec.extend(roster.iter().map(|c| r.channel_uniq.get(c).map_or(String::new(), f64::to_string)));
        rec.extend(roster.iter().map(|c| r.uniq_delta.get(c).map_or(String::new(), f64::to_string)));
        rec.push(r.p_value.map_or(String::new(), |p| p.to_string()));
        w.write_record(&rec).map_err(|e| CliError::format(path, e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::format(path, e.to_string()))
}

fn ablation_text(rows: &[AblationRow], roster: &[ChannelId]) -> String {
    let mut s = format!("{:<10}{:>6}{:>10}", "variant", "K", "overall");
    for c in roster {
        s.push_str(&format!("{:>22}", format!("uniq {c}")));
    }
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{:<10}{:>6}{:>10.4}", r.variant, r.k, r.union_recall));
        for c in roster {
            let u = r.channel_uniq.get(c).copied().unwrap_or(f64::NAN);
            let d = r.uniq_delta.get(c).copied().unwrap_or(f64::NAN);
            s.push_str(&format!("{:>22}", format!("{u:.4} ({d:+.4})")));
        }
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub window_size: usize,
    pub k: usize,
    pub capts: f64,
    pub reference: f64,
    pub p_value: f64,
}

/// Retrains and evaluates the full model once per label window size. The
/// evaluation requests stay fixed; only the supervision changes.
pub fn sweep(ws: &Workspace) -> CliResult<Vec<SweepRow>> {
    let out_path = ws.report_path("sweep.csv");
    ws.guard(std::slice::from_ref(&out_path))?;
    let log = ws.load_log()?;
    let store = ws.load_store()?;
    let eval_requests = pipeline::split_requests(&ws.cfg, &log).eval;
    let mut rows = Vec::new();
    for &w in &ws.cfg.sweep.window_sizes {
        let t = Instant::now();
        let mut cfg = ws.cfg.clone();
        cfg.vam.window_size = w;
        let report = sweep_point(&cfg, &log, &store, &eval_requests)?;
        for &k in &cfg.eval.k_grid {
            let (Some(a), Some(b)) = (report.row("capts", k), report.row(REFERENCE, k)) else { continue };
            let p = pipeline::comparison(&report, "capts", REFERENCE, k).map_or(f64::NAN, |c| c.test.p);
            rows.push(SweepRow { window_size: w, k, capts: a.union_recall, reference: b.union_recall, p_value: p });
        }
        log::info!("window size {w} done in {:.1?}", t.elapsed());
    }
    let mut wr = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        wr.serialize(r).map_err(|e| CliError::format(&out_path, e.to_string()))?;
    }
    ws.write(&out_path, &wr.into_inner().map_err(|e| CliError::format(&out_path, e.to_string()))?)?;
    Ok(rows)
}

/// Supervision, training and evaluation of the full model and the reference
/// under one config.
pub fn sweep_point(cfg: &RunConfig, log: &Log, store: &SnapshotStore, eval_requests: &[capts_core::corpus::RequestInstance]) -> CliResult<EvalReport> {
    let split = pipeline::split_requests(cfg, log);
    let sup = pipeline::supervise(cfg, store, &split.train)?;
    let vocab = log.vocab();
    let examples = pipeline::examples(cfg, log, &vocab, &split.train, &sup.vam, &sup.records)?;
    let (model, _) = pipeline::train_variant(cfg, vocab, Variant::Full, &examples)?;
    let routers = vec![
        ("capts".to_string(), Router::Model { model: &model, eta: cfg.routing.eta }),
        (REFERENCE.to_string(), Router::Rule(Method::Recent)),
    ];
    Ok(pipeline::evaluate(cfg, log, store, eval_requests, &routers, REFERENCE)?.report)
}

#[derive(Clone, Debug, Serialize)]
pub struct SupplyReport {
    pub model_version: String,
    pub requests: usize,
    pub cache_hits: usize,
    pub cache_misses: usize,
    pub mean_merged_triggers: f64,
    pub rows: Vec<MethodRow>,
}

/// Serves the evaluation requests through the nearline cache and online
/// scoring, persisting the cache as it stands at the end.
pub fn supply(ws: &Workspace) -> CliResult<SupplyReport> {
    let outputs = [ws.cache_path(), ws.report_path("supply.json")];
    ws.guard(&outputs)?;
    let log = ws.load_log()?;
    let store = ws.load_store()?;
    let (model, version) = ws.load_model(Variant::Full)?;
    let split = pipeline::split_requests(&ws.cfg, &log);
    let out = pipeline::simulate_supply(&ws.cfg, &log, &store, &model, &version, &split.eval)?;
    let report = SupplyReport {
        model_version: version,
        requests: out.requests,
        cache_hits: out.hits,
        cache_misses: out.misses,
        mean_merged_triggers: out.mean_merged,
        rows: aggregate("capts-supply", &out.metrics),
    };
    ws.write(&outputs[0], &formats::cache_bytes(&out.cache))?;
    ws.write(&outputs[1], &formats::pretty(&report))?;
    log::info!("supply: {} requests, {} cache hits, {:.1} merged triggers on average", report.requests, report.cache_hits, report.mean_merged_triggers);
    Ok(report)
}

/// Every stage from data generation to evaluation.
pub fn run(ws: &Workspace) -> CliResult<EvalReport> {
    let t = Instant::now();
    gen_data(ws)?;
    build_indexes(ws)?;
    audit_leakage(ws)?;
    build_supervision(ws)?;
    train(ws, Variant::Full)?;
    let report = eval(ws)?;
    log::info!("pipeline finished in {:.1?}; outputs in {}", t.elapsed(), ws.dir.display());
    Ok(report)
}
