use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "seed": 3,
  "model": {
    "crop_size": 16,
    "visual": {"conv3d_out_channels": 4, "resnet_stage_widths": [4, 8], "vtcn_blocks": 1, "embed_dim": 8, "pool_grid": 2},
    "audio": {"embed_dim": 8},
    "context": {"heads": 2, "hidden_dim": 8, "local_kernel": 3}
  },
  "train": {"epochs": 1, "batch_tracks": 2, "learning_rate": 0.001},
  "synth": {"min_frames": 8, "max_frames": 12, "tracks_per_video": 2}
}"#;

fn laser(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_laser")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.json"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn synth(&self, name: &str, tracks: usize, seed: u64) -> PathBuf {
        let out = self.path(name);
        let config = self.path("tiny.json");
        let o = laser(&[
            "synth",
            "--out",
            s(&out),
            "--num-tracks",
            &tracks.to_string(),
            "--seed",
            &seed.to_string(),
            "--crop-size",
            "16",
            "--config",
            s(&config),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        out
    }
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn help_lists_every_command() {
    let o = laser(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for c in ["synth", "train", "eval", "curate", "ablate", "encode"] {
        assert!(text.contains(c), "{c} missing from help");
    }
    let o = laser(&["train", "--help"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("--no-consistency"));
}

#[test]
fn synth_is_deterministic_and_guards_its_output() {
    let f = Fixture::new();
    let a = f.synth("a", 3, 7);
    let b = f.synth("b", 3, 7);
    assert_eq!(tree_bytes(&a), tree_bytes(&b));
    let again = laser(&["synth", "--out", s(&a), "--num-tracks", "3", "--crop-size", "16"]);
    assert_eq!(code(&again), 2, "{}", stderr(&again));
    let forced = laser(&["synth", "--out", s(&a), "--num-tracks", "3", "--crop-size", "16", "--force"]);
    assert_eq!(code(&forced), 0, "{}", stderr(&forced));
}

#[test]
fn train_then_evaluate() {
    let f = Fixture::new();
    let corpus = f.synth("corpus", 4, 1);
    let run = f.path("run");
    let o = laser(&["train", "--config", s(&f.path("tiny.json")), "--corpus", s(&corpus), "--out", s(&run)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let header: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(header["command"], "train");
    assert_eq!(header["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(header["variant"]["consistency"], true);
    assert!(log.lines().count() > 1);

    let ckpt = fs::read_dir(&run)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_string_lossy().contains("epoch001"))
        .next()
        .expect("epoch 1 checkpoint");
    let report = f.path("report.json");
    let o = laser(&["eval", "--checkpoint", s(&ckpt), "--corpus", s(&corpus), "--out", s(&report)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let acc = doc["subsets"][0]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let o = laser(&["eval", "--checkpoint", s(&ckpt), "--corpus", s(&corpus), "--protocol", "shift", "--delays", "0.2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("delay_0.20"));

    let o = laser(&["eval", "--checkpoint", s(&ckpt), "--corpus", s(&corpus), "--protocol", "sideways"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn swap_needs_more_than_one_video() {
    let f = Fixture::new();
    let corpus = f.synth("one_video", 2, 2);
    let run = f.path("run");
    let mut cfg: Value = serde_json::from_str(TINY).unwrap();
    cfg["train"]["epochs"] = 0.into();
    fs::write(f.path("zero.json"), cfg.to_string()).unwrap();
    let o = laser(&["train", "--config", s(&f.path("zero.json")), "--corpus", s(&corpus), "--out", s(&run)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = fs::read_dir(&run)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.to_string_lossy().contains("epoch000"))
        .unwrap();
    let o = laser(&["eval", "--checkpoint", s(&ckpt), "--corpus", s(&corpus), "--protocol", "swap"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("video"), "{}", stderr(&o));
}

#[test]
fn config_and_data_errors_have_distinct_codes() {
    let f = Fixture::new();
    let corpus = f.synth("corpus", 2, 4);
    fs::write(f.path("bad.json"), r#"{"train": {"lr": 1}}"#).unwrap();
    let o = laser(&["train", "--config", s(&f.path("bad.json")), "--corpus", s(&corpus)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let o = laser(&["train", "--config", s(&f.path("tiny.json")), "--corpus", s(&f.path("missing"))]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    let mut cfg: Value = serde_json::from_str(TINY).unwrap();
    cfg["model"]["crop_size"] = 32.into();
    cfg["model"]["visual"]["pool_grid"] = 1.into();
    fs::write(f.path("wide.json"), cfg.to_string()).unwrap();
    let o = laser(&["train", "--config", s(&f.path("wide.json")), "--corpus", s(&corpus), "--out", s(&f.path("r"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("crop_size"));
}

#[test]
fn curate_splits_every_clip() {
    let f = Fixture::new();
    let corpus = f.synth("corpus", 6, 5);
    let out = f.path("split.json");
    let o = laser(&["curate", "--corpus", s(&corpus), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let n = |k: &str| doc[k].as_array().unwrap().len();
    assert_eq!(n("low") + n("high") + n("undetermined") + n("dropped_short"), 6);
    assert_eq!(doc["threshold"], 0.03);
    assert_eq!(doc["normalization"], "fullscale_pm1");

    let o = laser(&["curate", "--corpus", s(&corpus), "--min-track-seconds", "100"]);
    assert_eq!(code(&o), 0);
    let doc: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(doc["dropped_short"].as_array().unwrap().len(), 6);

    let o = laser(&["curate", "--corpus", s(&corpus), "--vad", "neural"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn ablate_writes_one_row_per_value() {
    let f = Fixture::new();
    let corpus = f.synth("corpus", 4, 3);
    let o = laser(&[
        "ablate",
        "--config",
        s(&f.path("tiny.json")),
        "--corpus",
        s(&corpus),
        "--sweep",
        "lambda_c=0.5",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "key,value,seed,map,accuracy");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("lambda_c,0.5,3,"));

    let o = laser(&["ablate", "--config", s(&f.path("tiny.json")), "--corpus", s(&corpus), "--sweep", "depth=1"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn encode_demo_dumps_maps() {
    let f = Fixture::new();
    let out = f.path("enc");
    let o = laser(&["encode", "--demo", "--out", s(&out), "--crop-size", "16", "--frames", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let layout: Value = serde_json::from_str(&fs::read_to_string(out.join("layout.json")).unwrap()).unwrap();
    assert_eq!(layout["lip_maps.lsrt"]["shape"], serde_json::json!([2, 82, 2, 16, 16]));
    assert_eq!(layout["aggregated.lsrt"]["shape"], serde_json::json!([2, 4, 2, 16, 16]));
    for name in ["frames.lsrt", "lip_maps.lsrt", "aggregated.lsrt"] {
        assert!(out.join(name).exists());
    }
    assert_eq!(code(&laser(&["encode", "--out", s(&out)])), 2);
}
