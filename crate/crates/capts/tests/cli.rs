use std::path::{Path, PathBuf};
use std::process::Command;

use capts::commands::{self, Workspace};
use capts::formats;
use capts::pipeline::{self, Variant};
use capts::{CliError, RunConfig};
use capts_core::catr::{Model, Vocab};

const TINY: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/tiny.toml");

fn tiny(data_root: &Path) -> RunConfig {
    let mut cfg = RunConfig::load(Path::new(TINY)).unwrap();
    cfg.paths.data_root = data_root.to_path_buf();
    cfg
}

fn capts(data_root: &Path, args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_capts"))
        .arg("--config")
        .arg(TINY)
        .args(args)
        .env("CAPTS_DATA_DIR", data_root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn run_dir(data_root: &Path) -> PathBuf {
    let dirs: Vec<_> = std::fs::read_dir(data_root).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.into_iter().next().unwrap()
}

#[test]
fn gen_data_refuses_to_overwrite_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(capts(tmp.path(), &["gen-data"]).0, 0);
    let events = run_dir(tmp.path()).join("corpus/events.tsv");
    let first = std::fs::read(&events).unwrap();
    let (code, err) = capts(tmp.path(), &["gen-data"]);
    assert_eq!(code, CliError::EXIT_IO);
    assert!(err.contains("--force"), "{err}");
    assert_eq!(capts(tmp.path(), &["gen-data", "--force"]).0, 0);
    assert_eq!(std::fs::read(&events).unwrap(), first, "same seed, same bytes");
}

#[test]
fn config_errors_exit_with_the_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(capts(tmp.path(), &["--eta=-1", "show-config"]).0, CliError::EXIT_CONFIG);
    assert_eq!(capts(tmp.path(), &["--k-grid", "0,10", "show-config"]).0, CliError::EXIT_CONFIG);
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[routing]\nbudgett = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_capts")).arg("--config").arg(&bad).arg("show-config").output().unwrap();
    assert_eq!(out.status.code(), Some(CliError::EXIT_CONFIG));
}

#[test]
fn missing_inputs_are_io_errors() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(capts(tmp.path(), &["build-indexes"]).0, CliError::EXIT_IO);
}

#[test]
fn data_dir_variable_overrides_the_config_root() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(capts(tmp.path(), &["--seed", "11", "gen-data"]).0, 0);
    let dir = run_dir(tmp.path());
    let cfg = tiny(tmp.path());
    assert_eq!(dir.file_name().unwrap().to_str().unwrap(), format!("{}-seed11", cfg.hash()));
}

#[test]
fn pipeline_outputs_are_complete_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, err) = capts(tmp.path(), &["run"]);
    assert_eq!(code, 0, "{err}");
    let dir = run_dir(tmp.path());
    let cfg = tiny(tmp.path());

    let snaps = std::fs::read_dir(dir.join("snapshots")).unwrap().count();
    assert_eq!(snaps, cfg.roster().len() * pipeline::snapshot_times(&cfg).len());
    assert_eq!(pipeline::snapshot_times(&cfg).len(), cfg.generator.days as usize - 1);

    let metrics = std::fs::read_to_string(dir.join("reports/metrics.csv")).unwrap();
    for m in ["capts", "recent", "tagtop", "ltv", "nic"] {
        assert!(metrics.lines().any(|l| l.starts_with(&format!("{m},"))), "{m} missing");
    }
    let report: capts_core::eval::EvalReport = serde_json::from_slice(&std::fs::read(dir.join("reports/eval.json")).unwrap()).unwrap();
    for r in &report.rows {
        for rc in r.channel_recall.values() {
            assert!(r.union_recall + 1e-12 >= *rc, "{} K={}: union below a channel", r.method, r.k);
        }
    }

    let before: Vec<(PathBuf, Vec<u8>)> = ["reports/metrics.csv", "reports/summary.txt", "reports/assignments.jsonl", "snapshots/embedding-1700086400.snap", "checkpoints/full.ckpt"]
        .iter()
        .map(|p| (dir.join(p), std::fs::read(dir.join(p)).unwrap()))
        .collect();
    for cmd in ["build-indexes", "build-supervision", "train", "eval"] {
        let (code, err) = capts(tmp.path(), &[cmd, "--force"]);
        assert_eq!(code, 0, "{cmd}: {err}");
    }
    for (p, bytes) in before {
        assert_eq!(std::fs::read(&p).unwrap(), bytes, "{} changed on rerun", p.display());
    }
}

#[test]
fn corpus_files_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = Workspace::new(tiny(tmp.path()), false);
    let log = commands::gen_data(&ws).unwrap();
    let text = std::fs::read_to_string(ws.events_path()).unwrap();
    // version line and column header
    assert_eq!(text.lines().count(), log.interaction_count() + 2);
    assert_eq!(ws.load_log().unwrap(), log);
    assert_eq!(formats::catalog_bytes(&ws.load_log().unwrap().catalog).unwrap(), std::fs::read(ws.catalog_path()).unwrap());
}

#[test]
fn supervision_file_matches_its_header_and_the_calibration_target() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = Workspace::new(tiny(tmp.path()), false);
    commands::gen_data(&ws).unwrap();
    commands::build_indexes(&ws).unwrap();
    let header = commands::build_supervision(&ws).unwrap();
    let (head, records) = ws.load_supervision().unwrap();
    assert_eq!(head, header);

    let log = ws.load_log().unwrap();
    let store = ws.load_store().unwrap();
    let split = pipeline::split_requests(&ws.cfg, &log);
    let roster = ws.cfg.roster();
    let expected: usize = split
        .train
        .iter()
        .filter(|r| store.covers(&roster, r.tau0, ws.cfg.vam.delta_s))
        .map(|r| r.eligible_triggers.len().min(ws.cfg.split.candidates) * roster.len())
        .sum();
    assert_eq!(records.len(), expected);
    assert_eq!(head.requests + head.skipped_requests, split.train.len());

    for c in &roster {
        let mine: Vec<_> = records.iter().filter(|r| r.channel == *c).collect();
        let rate = mine.iter().filter(|r| r.value_label).count() as f64 / mine.len() as f64;
        assert!((rate - head.positive_rates[c]).abs() < 1e-12);
        let cap = head.vam.channels[c].cap;
        // the rate can only miss the target when the threshold sits at the cap
        if head.vam.channels[c].threshold < cap {
            assert!((rate - ws.cfg.vam.target_positive_rate).abs() <= 0.02, "{c}: {rate}");
        }
    }

    let mut other = ws.cfg.clone();
    other.vam.uniqueness_threshold = 0.5;
    let stale = Workspace { cfg: other, ..ws.clone() };
    assert!(matches!(stale.load_supervision(), Err(CliError::Config(_))));
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let cfg = RunConfig::default().model_config(Vocab::new(30, 6, 4), true);
    let mut model = Model::init(cfg, 5).unwrap();
    model.quantize();
    let bytes = formats::checkpoint_bytes(&model);
    let back = formats::parse_checkpoint(Path::new("m.ckpt"), &bytes).unwrap();
    assert_eq!(back, model);
    assert_eq!(formats::checkpoint_bytes(&back), bytes);

    let mut truncated = bytes.clone();
    truncated.pop();
    assert!(matches!(formats::parse_checkpoint(Path::new("m.ckpt"), &truncated), Err(CliError::Format { .. })));
    assert_ne!(formats::model_version(&bytes), formats::model_version(&truncated));
}

#[test]
fn trained_checkpoint_loads_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path());
    // both auxiliary losses off
    cfg.train.lambda = 0.0;
    cfg.train.mu = 0.0;
    let ws = Workspace::new(cfg, false);
    commands::gen_data(&ws).unwrap();
    commands::build_indexes(&ws).unwrap();
    commands::build_supervision(&ws).unwrap();
    let report = commands::train(&ws, Variant::Full).unwrap();
    assert!(report.epochs.iter().all(|e| e.loss.total == e.loss.value));
    let (a, va) = ws.load_model(Variant::Full).unwrap();
    let (b, vb) = ws.load_model(Variant::Full).unwrap();
    assert_eq!(a, b);
    assert_eq!(va, vb);
}

#[test]
fn snapshot_and_cache_files_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = Workspace::new(tiny(tmp.path()), false);
    commands::gen_data(&ws).unwrap();
    commands::build_indexes(&ws).unwrap();
    let store = ws.load_store().unwrap();
    for s in store.iter() {
        let p = ws.snapshot_path(s.channel, s.as_of);
        assert_eq!(formats::snapshot_bytes(s), std::fs::read(&p).unwrap());
    }
    commands::build_supervision(&ws).unwrap();
    commands::train(&ws, Variant::Full).unwrap();
    let report = commands::supply(&ws).unwrap();
    assert_eq!(report.cache_hits + report.cache_misses, report.requests);
    let cache = formats::parse_cache(&ws.cache_path(), &std::fs::read(ws.cache_path()).unwrap()).unwrap();
    assert_eq!(formats::cache_bytes(&cache), std::fs::read(ws.cache_path()).unwrap());
    assert!(cache.entries.values().all(|e| e.model_version == report.model_version));
}

#[test]
fn malformed_files_are_rejected() {
    let p = Path::new("x");
    assert!(formats::parse_snapshot(p, b"capts-snapshot\t2\tcontent\t0\t50\n").is_err());
    assert!(formats::parse_snapshot(p, b"capts-events\t1\n").is_err());
    assert!(formats::parse_snapshot(p, b"capts-snapshot\t1\tcontent\t0\t50\n3\t3:0.5\n").is_err(), "self neighbor");
    assert!(formats::parse_events(p, b"capts-events\t1\nuser_id\titem_id\tts\twatch_s\tlike\tfollow\tcomment\tshare\n1\t2\t3\t4.0\t2\t0\t0\t0\n").is_err());
}
