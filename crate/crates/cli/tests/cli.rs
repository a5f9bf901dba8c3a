use std::path::Path;
use std::process::{Command, Output};

use ocean_core::evalx::{read_explanation, METRICS_COLUMNS};
use ocean_core::pipeline::{Preset, PresetName};
use ocean_core::slotcoder::SlotcoderConfig;

fn ocean(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ocean"))
        .args(args)
        .env("OCEAN_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = ocean(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Preset A shrunk to 8×8 images so the whole pipeline runs in seconds.
fn tiny_preset(dir: &Path) -> std::path::PathBuf {
    let mut p = Preset::named(PresetName::A);
    p.slotcoder = SlotcoderConfig::tiny();
    p.player_hidden = 8;
    p.modulator_hidden = 8;
    p.warmup.batch_size = 4;
    p.train.batch_size = 4;
    let path = dir.join("tiny.json");
    std::fs::write(&path, serde_json::to_string_pretty(&p).unwrap()).unwrap();
    path
}

fn gen_tiny(out: &Path, seed: &str) {
    ok(&["gen-data", "--seed", seed, "--n-train", "16", "--n-val", "8", "--n-test", "8", "--res", "8", "--out", s(out)]);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = ocean(&["gen-data", "--bogus", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bogus"));
    assert_eq!(ocean(&["warmup"]).status.code(), Some(2));
    assert_eq!(ocean(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ocean(&["warmup", "--data", s(&dir.path().join("nope")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    let out = ocean(&["warmup", "--config", "Z", "--data", s(dir.path()), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_data_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    gen_tiny(&a, "3");
    gen_tiny(&b, "3");
    gen_tiny(&c, "4");
    for f in ["train.ocds", "val.ocds", "test.ocds"] {
        let x = std::fs::read(a.join(f)).unwrap();
        assert_eq!(x, std::fs::read(b.join(f)).unwrap(), "{f}");
        assert_ne!(x, std::fs::read(c.join(f)).unwrap(), "{f}");
    }
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "gen-data");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["outputs"].as_array().unwrap().len(), 3);
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (data, ck, ev, ex, rep) = (root.join("data"), root.join("ck"), root.join("eval"), root.join("explain"), root.join("report"));
    let preset = tiny_preset(root);
    gen_tiny(&data, "1");

    ok(&["warmup", "--config", s(&preset), "--epochs", "1", "--data", s(&data), "--out", s(&ck)]);
    assert!(ck.join("slotcoder.ockp").is_file());
    let warm = std::fs::read_to_string(ck.join("warmup_stats.csv")).unwrap();
    assert_eq!(warm.lines().count(), 2);

    ok(&["train-game", "--config", s(&preset), "--epochs", "2", "--data", s(&data), "--checkpoint", s(&ck), "--out", s(&ck)]);
    assert!(ck.join("players.ockp").is_file());
    assert_eq!(std::fs::read_to_string(ck.join("train_stats.csv")).unwrap().lines().count(), 3);

    ok(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&ev)]);
    let csv = std::fs::read_to_string(ev.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_COLUMNS.join(","));
    assert_eq!(lines.len(), 3, "{csv}");
    for row in &lines[1..] {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells.len(), METRICS_COLUMNS.len());
        assert_eq!(cells[1], "A");
        for c in &cells[2..] {
            c.parse::<f64>().unwrap();
        }
    }
    let episodes = std::fs::read_to_string(ev.join("episodes_test.jsonl")).unwrap();
    assert_eq!(episodes.lines().count(), 8);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ev.join("manifest.json")).unwrap()).unwrap();
    let hash = m["input_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    assert!(hash.chars().all(|c| c.is_ascii_hexdigit()));
    assert!(ev.join("game_reward.svg").is_file());

    // same checkpoint, same seed → same table
    let ev2 = root.join("eval2");
    ok(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&ev2)]);
    assert_eq!(csv, std::fs::read_to_string(ev2.join("metrics.csv")).unwrap());

    ok(&["explain", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&ex), "--count", "3"]);
    let jsons: Vec<_> = std::fs::read_dir(ex.join("test"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    assert_eq!(jsons.len(), 3);
    for j in &jsons {
        let rec = read_explanation(j).unwrap();
        assert!(!rec.turns.is_empty() && rec.turns.len() <= 10);
        assert!(j.with_extension("svg").is_file());
    }

    ok(&["report", "--inputs", s(&ev), s(&ev2), "--out", s(&rep)]);
    assert_eq!(std::fs::read_to_string(rep.join("metrics.csv")).unwrap().lines().count(), 5);

    // a checkpoint from another preset is refused
    let out = ocean(&["eval", "--config", "C", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&ev)]);
    assert_eq!(out.status.code(), Some(1));
}
