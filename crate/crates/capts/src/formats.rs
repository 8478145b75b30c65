//! On-disk formats. Every file starts with a line naming its format and
//! version; readers reject anything else. Text writers emit floats in their
//! shortest round-trip form so rewriting a loaded file reproduces it exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use capts_core::catr::{Model, ModelConfig, TrainReport};
use capts_core::channels::Neighbor;
use capts_core::corpus::{AuthorId, Catalog, Feedback, Interaction, Item, ItemId, RequestId, TagId, UserHistory, UserId};
use capts_core::eval::{EvalReport, MethodRow};
use capts_core::routing::RoutingAssignment;
use capts_core::supply::{CacheEntry, TriggerCache};
use capts_core::vam::{SupervisionRecord, VamConfig};
use capts_core::{ChannelId, IndexSnapshot};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const VERSION: u32 = 1;

pub fn read(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

/// Writes through a temporary sibling and a rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

fn header_line(kind: &str, fields: &[String]) -> String {
    let mut s = format!("capts-{kind}\t{VERSION}");
    for f in fields {
        s.push('\t');
        s.push_str(f);
    }
    s.push('\n');
    s
}

/// Splits off and checks the header line, returning its extra fields and the
/// remaining text.
fn split_header<'a>(path: &Path, text: &'a str, kind: &str) -> CliResult<(Vec<&'a str>, &'a str)> {
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    let mut fields = first.split('\t');
    let name = fields.next().unwrap_or_default();
    if name != format!("capts-{kind}") {
        return Err(CliError::format(path, format!("expected a capts-{kind} file, found header {first:?}")));
    }
    let version = fields.next().unwrap_or_default();
    if version != VERSION.to_string() {
        return Err(CliError::format(path, format!("unsupported version {version:?}")));
    }
    Ok((fields.collect(), rest))
}

fn utf8<'a>(path: &Path, bytes: &'a [u8]) -> CliResult<&'a str> {
    std::str::from_utf8(bytes).map_err(|_| CliError::format(path, "not UTF-8"))
}

fn parse<T: std::str::FromStr>(path: &Path, s: &str, what: &str) -> CliResult<T> {
    s.parse().map_err(|_| CliError::format(path, format!("bad {what} {s:?}")))
}

fn tsv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().delimiter(b'\t').from_writer(Vec::new())
}

fn tsv_reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new().delimiter(b'\t').from_reader(text.as_bytes())
}

fn finish(path: &Path, w: csv::Writer<Vec<u8>>, mut head: Vec<u8>) -> CliResult<Vec<u8>> {
    let body = w.into_inner().map_err(|e| CliError::format(path, e.to_string()))?;
    head.extend(body);
    Ok(head)
}

#[derive(Serialize, Deserialize)]
struct EventRow {
    user_id: u32,
    item_id: u32,
    ts: i64,
    watch_s: f64,
    like: u8,
    follow: u8,
    comment: u8,
    share: u8,
}

pub fn events_bytes(histories: &[UserHistory]) -> CliResult<Vec<u8>> {
    let path = Path::new("events");
    let mut w = tsv_writer();
    let flag = |fb: Feedback, f: Feedback| u8::from(fb.contains(f));
    for x in histories.iter().flat_map(|h| &h.interactions) {
        w.serialize(EventRow {
            user_id: x.user.0,
            item_id: x.item.0,
            ts: x.ts,
            watch_s: x.watch_s,
            like: flag(x.feedback, Feedback::LIKE),
            follow: flag(x.feedback, Feedback::FOLLOW),
            comment: flag(x.feedback, Feedback::COMMENT),
            share: flag(x.feedback, Feedback::SHARE),
        })
        .map_err(|e| CliError::format(path, e.to_string()))?;
    }
    finish(path, w, header_line("events", &[]).into_bytes())
}

/// Histories sorted by user, each in time order. Returns the number of
/// same-timestamp ties as well.
pub fn parse_events(path: &Path, bytes: &[u8]) -> CliResult<(Vec<UserHistory>, usize)> {
    let (_, body) = split_header(path, utf8(path, bytes)?, "events")?;
    let mut by_user: BTreeMap<UserId, Vec<Interaction>> = BTreeMap::new();
    for row in tsv_reader(body).deserialize::<EventRow>() {
        let r = row.map_err(|e| CliError::format(path, e.to_string()))?;
        let mut feedback = Feedback::empty();
        for (bit, f) in [(r.like, Feedback::LIKE), (r.follow, Feedback::FOLLOW), (r.comment, Feedback::COMMENT), (r.share, Feedback::SHARE)] {
            match bit {
                0 => {}
                1 => feedback |= f,
                _ => return Err(CliError::format(path, format!("feedback flag {bit} is not 0 or 1"))),
            }
        }
        let x = Interaction { user: UserId(r.user_id), item: ItemId(r.item_id), ts: r.ts, watch_s: r.watch_s, feedback };
        by_user.entry(x.user).or_default().push(x);
    }
    let mut ties = 0;
    let mut out = Vec::with_capacity(by_user.len());
    for (user, xs) in by_user {
        let (h, t) = UserHistory::from_events(user, xs)?;
        ties += t;
        out.push(h);
    }
    Ok((out, ties))
}

#[derive(Serialize, Deserialize)]
struct ItemRow {
    item_id: u32,
    author_id: u32,
    tag_id: u32,
    duration_s: f64,
    created_at: i64,
    content_vector: String,
}

pub fn catalog_bytes(catalog: &Catalog) -> CliResult<Vec<u8>> {
    let path = Path::new("catalog");
    let mut w = tsv_writer();
    for it in catalog.items() {
        let mut v = String::new();
        for (i, x) in it.content.iter().enumerate() {
            if i > 0 {
                v.push(',');
            }
            write!(v, "{x}").expect("write to string");
        }
        w.serialize(ItemRow {
            item_id: it.id.0,
            author_id: it.author.0,
            tag_id: it.tag.0,
            duration_s: it.duration_s,
            created_at: it.created_at,
            content_vector: v,
        })
        .map_err(|e| CliError::format(path, e.to_string()))?;
    }
    finish(path, w, header_line("catalog", &[format!("dim={}", catalog.dim())]).into_bytes())
}

pub fn parse_catalog(path: &Path, bytes: &[u8]) -> CliResult<Catalog> {
    let (fields, body) = split_header(path, utf8(path, bytes)?, "catalog")?;
    let dim = fields
        .iter()
        .find_map(|f| f.strip_prefix("dim="))
        .ok_or_else(|| CliError::format(path, "header lacks dim="))?;
    let dim: usize = parse(path, dim, "dimension")?;
    let mut items = Vec::new();
    for row in tsv_reader(body).deserialize::<ItemRow>() {
        let r = row.map_err(|e| CliError::format(path, e.to_string()))?;
        let content = if r.content_vector.is_empty() {
            Vec::new()
        } else {
            r.content_vector.split(',').map(|x| parse(path, x, "vector component")).collect::<CliResult<Vec<f32>>>()?
        };
        items.push(Item {
            id: ItemId(r.item_id),
            author: AuthorId(r.author_id),
            tag: TagId(r.tag_id),
            content,
            duration_s: r.duration_s,
            created_at: r.created_at,
        });
    }
    Ok(Catalog::new(items, dim)?)
}

pub fn snapshot_file_name(channel: ChannelId, as_of: i64) -> String {
    format!("{channel}-{as_of}.snap")
}

/// Header line, then one line per seed item: the item id followed by
/// tab-separated `neighbor:score` pairs, best first.
pub fn snapshot_bytes(s: &IndexSnapshot) -> Vec<u8> {
    let mut out = header_line("snapshot", &[s.channel.to_string(), s.as_of.to_string(), s.k_ret.to_string()]);
    for (item, list) in s.iter() {
        write!(out, "{item}").expect("write to string");
        for n in list {
            write!(out, "\t{}:{}", n.item, n.score).expect("write to string");
        }
        out.push('\n');
    }
    out.into_bytes()
}

pub fn parse_snapshot(path: &Path, bytes: &[u8]) -> CliResult<IndexSnapshot> {
    let (fields, body) = split_header(path, utf8(path, bytes)?, "snapshot")?;
    let [channel, as_of, k_ret] = fields[..] else {
        return Err(CliError::format(path, "header needs channel, as_of and k_ret"));
    };
    let channel: ChannelId = parse(path, channel, "channel")?;
    let as_of: i64 = parse(path, as_of, "as_of")?;
    let k_ret: usize = parse(path, k_ret, "k_ret")?;
    let mut neighbors = BTreeMap::new();
    for line in body.lines() {
        let mut parts = line.split('\t');
        let item = ItemId(parse(path, parts.next().unwrap_or_default(), "item id")?);
        let mut list = Vec::new();
        for p in parts {
            let (n, s) = p.split_once(':').ok_or_else(|| CliError::format(path, format!("bad neighbor {p:?}")))?;
            list.push(Neighbor { item: ItemId(parse(path, n, "neighbor id")?), score: parse(path, s, "score")? });
        }
        if neighbors.insert(item, list).is_some() {
            return Err(CliError::format(path, format!("item {item} listed twice")));
        }
    }
    Ok(IndexSnapshot::new(channel, as_of, k_ret, neighbors)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupervisionHeader {
    pub format: String,
    pub version: u32,
    /// Labeling parameters after threshold calibration.
    pub vam: VamConfig,
    pub requests: usize,
    pub skipped_requests: usize,
    pub records: usize,
    pub positive_rates: BTreeMap<ChannelId, f64>,
}

fn json_header<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string(v).expect("header serializes");
    s.push('\n');
    s
}

fn check_json_header(path: &Path, format: &str, version: u32, want: &str) -> CliResult<()> {
    if format != want {
        return Err(CliError::format(path, format!("expected a {want} file, found {format:?}")));
    }
    if version != VERSION {
        return Err(CliError::format(path, format!("unsupported version {version}")));
    }
    Ok(())
}

pub fn supervision_bytes(header: &SupervisionHeader, records: &[SupervisionRecord]) -> Vec<u8> {
    let mut out = json_header(header);
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out.into_bytes()
}

pub fn parse_supervision(path: &Path, bytes: &[u8]) -> CliResult<(SupervisionHeader, Vec<SupervisionRecord>)> {
    let text = utf8(path, bytes)?;
    let mut lines = text.lines();
    let head: SupervisionHeader = serde_json::from_str(lines.next().unwrap_or_default())
        .map_err(|e| CliError::format(path, format!("header: {e}")))?;
    check_json_header(path, &head.format, head.version, "capts-supervision")?;
    let records = lines
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::format(path, format!("record {}: {e}", i + 1))))
        .collect::<CliResult<Vec<SupervisionRecord>>>()?;
    if records.len() != head.records {
        return Err(CliError::format(path, format!("header announces {} records, file has {}", head.records, records.len())));
    }
    Ok((head, records))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format: String,
    version: u32,
    config: ModelConfig,
    /// Parameter blocks in storage order as (name, rows, cols).
    blocks: Vec<(String, usize, usize)>,
}

/// A JSON header line, then every parameter block in layout order as
/// little-endian `f32`.
pub fn checkpoint_bytes(model: &Model) -> Vec<u8> {
    let header = CheckpointHeader {
        format: "capts-checkpoint".into(),
        version: VERSION,
        config: model.config.clone(),
        blocks: model.blocks().iter().map(|b| (b.name.clone(), b.rows, b.cols)).collect(),
    };
    let mut out = json_header(&header).into_bytes();
    out.reserve(model.params.len() * 4);
    for &p in &model.params {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    out
}

pub fn parse_checkpoint(path: &Path, bytes: &[u8]) -> CliResult<Model> {
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| CliError::format(path, "missing header line"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| CliError::format(path, format!("header: {e}")))?;
    check_json_header(path, &header.format, header.version, "capts-checkpoint")?;
    let zeros = Model::zeros(header.config.clone())?;
    let layout: Vec<(String, usize, usize)> = zeros.blocks().iter().map(|b| (b.name.clone(), b.rows, b.cols)).collect();
    if layout != header.blocks {
        return Err(CliError::format(path, "parameter blocks do not match the model configuration"));
    }
    let data = &bytes[nl + 1..];
    if data.len() != zeros.params.len() * 4 {
        return Err(CliError::format(path, format!("expected {} parameter bytes, found {}", zeros.params.len() * 4, data.len())));
    }
    let params = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64).collect();
    Model::from_params(header.config, params).map_err(|e| CliError::format(path, e.to_string()))
}

/// Identifies a checkpoint by content; cache entries carry it.
pub fn model_version(checkpoint: &[u8]) -> String {
    Sha256::digest(checkpoint).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub fn train_report_json(variant: &str, report: &TrainReport) -> Vec<u8> {
    let epochs: Vec<_> = report
        .epochs
        .iter()
        .map(|e| {
            serde_json::json!({
                "epoch": e.epoch,
                "steps": e.steps,
                "total": e.loss.total,
                "value": e.loss.value,
                "calibration": e.loss.calibration,
                "diversity": e.loss.diversity,
                "samples": e.loss.samples,
                "clamps": e.loss.clamps,
            })
        })
        .collect();
    let v = serde_json::json!({
        "variant": variant,
        "requests": report.requests,
        "samples": report.samples,
        "epochs": epochs,
    });
    pretty(&v)
}

pub fn pretty<T: Serialize>(v: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("value serializes");
    out.push(b'\n');
    out
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheHeader {
    format: String,
    version: u32,
    roster: Vec<ChannelId>,
    entries: usize,
}

/// One line per user entry, ordered by user.
pub fn cache_bytes(cache: &TriggerCache) -> Vec<u8> {
    let header = CacheHeader { format: "capts-cache".into(), version: VERSION, roster: cache.roster.clone(), entries: cache.entries.len() };
    let mut out = json_header(&header);
    for e in cache.entries.values() {
        out.push_str(&serde_json::to_string(e).expect("entry serializes"));
        out.push('\n');
    }
    out.into_bytes()
}

pub fn parse_cache(path: &Path, bytes: &[u8]) -> CliResult<TriggerCache> {
    let text = utf8(path, bytes)?;
    let mut lines = text.lines();
    let head: CacheHeader =
        serde_json::from_str(lines.next().unwrap_or_default()).map_err(|e| CliError::format(path, format!("header: {e}")))?;
    check_json_header(path, &head.format, head.version, "capts-cache")?;
    let mut cache = TriggerCache::new(head.roster);
    for (i, l) in lines.enumerate() {
        let e: CacheEntry = serde_json::from_str(l).map_err(|e| CliError::format(path, format!("entry {}: {e}", i + 1)))?;
        cache.put(e);
    }
    if cache.entries.len() != head.entries {
        return Err(CliError::format(path, "entry count does not match the header"));
    }
    Ok(cache)
}

/// One JSON line per (method, request).
pub fn assignments_bytes(assignments: &BTreeMap<String, Vec<(RequestId, RoutingAssignment)>>) -> Vec<u8> {
    let mut out = String::new();
    for (method, list) in assignments {
        for (req, a) in list {
            let channels: BTreeMap<String, Vec<(u32, f64)>> =
                a.channels.iter().map(|(c, l)| (c.to_string(), l.iter().map(|&(i, s)| (i.0, s)).collect())).collect();
            let line = serde_json::json!({
                "method": method,
                "request": req.0,
                "user": req.user().0,
                "channels": channels,
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
    }
    out.into_bytes()
}

/// One row per (method, K). `p_value` is the paired test against
/// `reference` and stays empty on the reference's own rows.
pub fn metrics_csv(report: &EvalReport, roster: &[ChannelId], reference: &str) -> CliResult<Vec<u8>> {
    let path = Path::new("metrics.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut head = vec!["method".to_string(), "k".into(), "union_recall".into()];
    head.extend(roster.iter().map(|c| format!("recall_{c}")));
    head.extend(roster.iter().map(|c| format!("uniq_{c}")));
    head.extend(["n".to_string(), "p_value".into()]);
    w.write_record(&head).map_err(|e| CliError::format(path, e.to_string()))?;
    for r in &report.rows {
        let p = report
            .comparisons
            .iter()
            .find(|c| c.a == r.method && c.b == reference && c.k == r.k)
            .map_or(String::new(), |c| c.test.p.to_string());
        let mut rec = vec![r.method.clone(), r.k.to_string(), r.union_recall.to_string()];
        rec.extend(roster.iter().map(|c| r.channel_recall.get(c).map_or(String::new(), f64::to_string)));
        rec.extend(roster.iter().map(|c| r.channel_uniq.get(c).map_or(String::new(), f64::to_string)));
        rec.extend([r.n.to_string(), p]);
        w.write_record(&rec).map_err(|e| CliError::format(path, e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::format(path, e.to_string()))
}

/// Fixed-width tables for reading side by side: recall by method and K,
/// then Uniq@K by channel.
pub fn summary_text(report: &EvalReport, roster: &[ChannelId], reference: &str) -> String {
    let mut ks: Vec<usize> = report.rows.iter().map(|r| r.k).collect();
    ks.sort_unstable();
    ks.dedup();
    let mut methods: Vec<&str> = Vec::new();
    for r in &report.rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let row = |m: &str, k: usize| -> Option<&MethodRow> { report.rows.iter().find(|r| r.method == m && r.k == k) };
    let mut s = String::new();
    writeln!(s, "requests evaluated: {}  skipped (empty window): {}  skipped (no snapshot): {}", report.evaluated, report.skipped_empty_window, report.skipped_replay)
        .expect("write to string");
    for &k in &ks {
        writeln!(s, "\nRecall@{k}").expect("write to string");
        write!(s, "{:<16}{:>10}", "method", "overall").expect("write to string");
        for c in roster {
            write!(s, "{:>14}", c.name()).expect("write to string");
        }
        writeln!(s, "{:>10}{:>10}", "vs ref", "p").expect("write to string");
        let base = row(reference, k).map(|r| r.union_recall);
        for m in &methods {
            let Some(r) = row(m, k) else { continue };
            write!(s, "{:<16}{:>10.4}", m, r.union_recall).expect("write to string");
            for c in roster {
                write!(s, "{:>14.4}", r.channel_recall.get(c).copied().unwrap_or(f64::NAN)).expect("write to string");
            }
            let rel = match base {
                Some(b) if *m != reference && b > 0.0 => format!("{:+.1}%", 100.0 * (r.union_recall / b - 1.0)),
                _ => "-".into(),
            };
            let p = report
                .comparisons
                .iter()
                .find(|c| c.a == *m && c.b == reference && c.k == k)
                .map_or("-".into(), |c| format!("{:.3}", c.test.p));
            writeln!(s, "{rel:>10}{p:>10}").expect("write to string");
        }
    }
    for &k in &ks {
        writeln!(s, "\nUniq@{k}").expect("write to string");
        write!(s, "{:<16}", "method").expect("write to string");
        for c in roster {
            write!(s, "{:>14}", c.name()).expect("write to string");
        }
        s.push('\n');
        for m in &methods {
            let Some(r) = row(m, k) else { continue };
            write!(s, "{m:<16}").expect("write to string");
            for c in roster {
                write!(s, "{:>14.4}", r.channel_uniq.get(c).copied().unwrap_or(f64::NAN)).expect("write to string");
            }
            s.push('\n');
        }
    }
    s
}
