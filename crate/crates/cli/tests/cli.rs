use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use histnet::audio::write_wav;

const BIN: &str = env!("CARGO_BIN_EXE_sonar-histnet");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"
[paths]
data = "w/data"
cache = "w/cache"
output = "w/runs"
[dataset]
class_names = ["tonal400", "tonal900", "gaussian", "laplacian"]
[synth]
n_signals_per_class = 3
signal_duration_s = 6.0
[extract]
kinds = ["stft"]
[model]
block_channels = [4, 4, 8, 8]
embed_dim = 8
bins = 4
[train]
epochs = 2
patience = 1
seeds = [0]
batch = 8
"#;

fn workspace(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.toml"), config).unwrap();
    dir
}

fn ok(dir: &Path, args: &[&str]) {
    let o = run(dir, args);
    assert!(o.status.success(), "{:?} failed: {}", args, stderr(&o));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = workspace(SMALL);
    let d = dir.path();
    let o = run(d, &[]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(d, &["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown command `frobnicate`"));
    let o = run(d, &["train", "--config", "cfg.toml", "--train.lrr", "0.1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`train.lrr`"), "{}", stderr(&o));
    let o = run(d, &["train", "--config", "cfg.toml", "--train.lr"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(d, &["train", "--config", "cfg.toml", "--model", "resnet"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(d, &["synth", "--config", "missing.toml"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(d, &["train", "--config", "cfg.toml", "--train.patience", "5"]);
    assert_eq!(o.status.code(), Some(1), "patience above epochs must be rejected");

    std::fs::write(d.join("bad.toml"), "[model]\nblocks = 3\n").unwrap();
    let o = run(d, &["train", "--config", "bad.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`model.blocks`"), "{}", stderr(&o));

    let o = Command::new(BIN)
        .args(["synth", "--config", "cfg.toml"])
        .current_dir(d)
        .env("SONAR_HISTNET_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("SONAR_HISTNET_THREADS"));
}

#[test]
fn missing_stages_are_named() {
    let dir = workspace(SMALL);
    let d = dir.path();
    for (cmd, stage) in [
        ("ingest", "sonar-histnet synth"),
        ("extract", "sonar-histnet ingest"),
        ("train", "sonar-histnet extract"),
        ("evaluate", "sonar-histnet train"),
        ("report", "sonar-histnet train"),
    ] {
        let o = run(d, &[cmd, "--config", "cfg.toml"]);
        assert_eq!(o.status.code(), Some(1), "{}", cmd);
        assert!(stderr(&o).contains(stage), "{}: {}", cmd, stderr(&o));
    }
}

#[test]
fn corrupt_inputs_are_runtime_failures() {
    let dir = workspace(SMALL);
    let d = dir.path();
    std::fs::create_dir_all(d.join("w/data")).unwrap();
    std::fs::write(d.join("w/data/bad.wav"), b"RIFF\x10\x00\x00\x00WAVE").unwrap();
    let mut manifest = String::from("record_id,path,label,duration_s\n");
    for c in 0..4 {
        for i in 0..3 {
            manifest.push_str(&format!("r{}_{},bad.wav,{},1.0\n", c, i, c));
        }
    }
    std::fs::write(d.join("w/data/manifest.csv"), manifest).unwrap();
    let o = run(d, &["ingest", "--config", "cfg.toml"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

/// Ten 3 s segments from twelve recordings; two are too short to yield any.
#[test]
fn extract_writes_one_file_per_segment_and_kind() {
    let dir = workspace("");
    let d = dir.path();
    let data = d.join("rec");
    std::fs::create_dir_all(&data).unwrap();
    let mut manifest = String::from("record_id,path,label,duration_s\n");
    for c in 0..4 {
        for i in 0..3 {
            let id = format!("r{}_{}", c, i);
            let secs = if c == 0 && i < 2 { 2.0 } else { 3.5 };
            let n = (secs * 16_000.0) as usize;
            let samples: Vec<f32> = (0..n)
                .map(|t| 0.1 * ((t * (c + 1) * (i + 2)) as f32 * 0.01).sin())
                .collect();
            write_wav(&data.join(format!("{}.wav", id)), &samples, 16_000).unwrap();
            manifest.push_str(&format!("{},{}.wav,{},{}\n", id, id, c, secs));
        }
    }
    std::fs::write(data.join("manifest.csv"), manifest).unwrap();
    let args = ["--paths.manifest", "rec/manifest.csv", "--paths.cache", "cache"];
    ok(d, &[&["ingest"][..], &args].concat());
    ok(d, &[&["extract"][..], &args].concat());
    let index = std::fs::read_to_string(d.join("cache/features/index.csv")).unwrap();
    assert_eq!(index.lines().count(), 1 + 60);
    assert!(index.starts_with("segment_id,kind,path,label,partition\n"));
    let mut files = 0;
    for kind in ["ms", "mfcc", "stft", "gfcc", "cqt", "vqt"] {
        files += std::fs::read_dir(d.join("cache/features").join(kind)).unwrap().count();
        assert!(d.join(format!("cache/features/norm_{}.json", kind)).is_file());
    }
    assert_eq!(files, 60);
    let snapshot = |p: &str| std::fs::read(d.join(p)).unwrap();
    let before = (snapshot("cache/features/index.csv"), snapshot("cache/features/gfcc/r1_0_0000.tff"));
    ok(d, &[&["ingest"][..], &args].concat());
    ok(d, &[&["extract"][..], &args].concat());
    assert_eq!(before, (snapshot("cache/features/index.csv"), snapshot("cache/features/gfcc/r1_0_0000.tff")));
    let partition: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("cache/partition.json")).unwrap()).unwrap();
    for key in ["seed", "train", "val", "test"] {
        assert!(partition.get(key).is_some());
    }
}

fn lines(path: PathBuf) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().map(str::to_owned).collect()
}

#[test]
fn full_pipeline_and_report_layout() {
    let dir = workspace(SMALL);
    let d = dir.path();
    for cmd in ["synth", "ingest", "extract"] {
        ok(d, &[cmd, "--config", "cfg.toml"]);
    }
    ok(d, &["train", "--model", "tdnn,hltdnn", "--feature", "stft", "--config", "cfg.toml", "--out", "w/exp", "--train.lr", "0.02"]);
    for model in ["tdnn", "hltdnn"] {
        let exp = d.join(format!("w/exp/{}_stft", model));
        for f in ["run_0/checkpoint.bin", "run_0/curves.csv", "run_0/metrics.json", "summary.json", "config.toml"] {
            assert!(exp.join(f).is_file(), "{} missing", f);
        }
        assert_eq!(lines(exp.join("run_0/curves.csv"))[0], "epoch,train_loss,val_loss");
        let frozen = std::fs::read_to_string(exp.join("config.toml")).unwrap();
        assert!(frozen.contains("lr = 0.02"));
        assert!(frozen.contains(&format!("models = [\"{}\"]", model)));
    }
    let metrics = std::fs::read(d.join("w/exp/hltdnn_stft/run_0/metrics.json")).unwrap();
    ok(d, &["evaluate", "--config", "cfg.toml", "--out", "w/exp"]);
    assert_eq!(metrics, std::fs::read(d.join("w/exp/hltdnn_stft/run_0/metrics.json")).unwrap());
    assert!(d.join("w/exp/hltdnn_stft/run_0/confusion.csv").is_file());
    ok(d, &["report", "--config", "cfg.toml", "--out", "w/exp"]);
    let table = lines(d.join("w/exp/report/table1.csv"));
    assert_eq!(table.len(), 3);
    assert_eq!(table[0], "Feature,Model,Accuracy,Precision,Recall,F1,MCC,logFDR");
    assert!(table[1].starts_with("STFT,TDNN,"));
    assert!(table[2].starts_with("STFT,HLTDNN,"));
    for model in ["tdnn", "hltdnn"] {
        let cm = lines(d.join(format!("w/exp/report/confusion_{}_stft.csv", model)));
        assert_eq!(cm.len(), 5);
        assert!(cm[0].ends_with("tonal400,tonal900,gaussian,laplacian"));
    }
}

#[test]
fn class_subset_trains_a_smaller_head() {
    let dir = workspace(SMALL);
    let d = dir.path();
    for cmd in ["synth", "ingest", "extract"] {
        ok(d, &[cmd, "--config", "cfg.toml"]);
    }
    ok(d, &["train", "--config", "cfg.toml", "--dataset.classes", "2,3", "--model", "hltdnn"]);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("w/runs/hltdnn_stft/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["class_names"], serde_json::json!(["gaussian", "laplacian"]));
    assert_eq!(summary["confusion"].as_array().unwrap().len(), 2);
    ok(d, &["evaluate", "--config", "cfg.toml", "--model", "hltdnn"]);
}
