use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use avdialog::corpus::{toy_manifest, CorpusStats};

const TINY: &str = r#"{
  "seed": 11,
  "model": { "n_layers": 1, "d_model": 32, "n_heads": 2, "d_ff": 64, "max_seq_len": 256, "dropout": 0.0 },
  "schedule": { "stage1_steps": 4, "stage2_steps": 4, "stage3_steps": 4 },
  "train": { "batch_size": 2, "checkpoint_every": 2, "threads": 1 },
  "decode": { "max_new_tokens": 16 },
  "length": { "steps": 8, "n_layers": 1, "d_model": 16, "n_heads": 2, "d_ff": 32 },
  "sweep": { "seeds": [0, 1], "threads": 1 }
}"#;

fn avdialog(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avdialog"))
        .current_dir(dir)
        .env_remove("AVDIALOG_CONFIG")
        .env_remove("RUST_LOG")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = avdialog(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    dir
}

fn prepare(dir: &Path) {
    for args in [
        &["synth"][..],
        &["train-quantizer"],
        &["train-quantizer", "--modality", "audio"],
        &["tokenize"],
        &["build-vocab"],
    ] {
        let mut full = vec!["--config", "tiny.json"];
        full.extend_from_slice(args);
        ok(dir, &full);
    }
}

fn run(dir: &Path, args: &[&str]) -> String {
    let mut full = vec!["--config", "tiny.json"];
    full.extend_from_slice(args);
    ok(dir, &full)
}

fn read(dir: &Path, rel: &str) -> Vec<u8> {
    std::fs::read(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

fn stats_json(stdout: &str) -> CorpusStats {
    let start = stdout.find('{').expect("JSON in output");
    serde_json::from_str(&stdout[start..]).unwrap()
}

#[test]
fn stats_on_toy_manifest_prints_hand_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["stats", "--toy", "--out", "stats.json"]);
    assert!(out.contains("dialogues"));
    let s = stats_json(&out);
    assert_eq!((s.n_dialogues, s.n_turns, s.n_utterances), (4, 12, 24));
    assert_eq!(s.avg_dialogue_seconds, 5.375);
    let file: CorpusStats = serde_json::from_slice(&read(dir.path(), "stats.json")).unwrap();
    assert_eq!(file, s);
}

#[test]
fn stats_on_empty_manifest_is_all_zero() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("m.json"), r#"{"speakers": [], "dialogues": []}"#).unwrap();
    let s = stats_json(&ok(dir.path(), &["stats", "--manifest", "m.json"]));
    assert_eq!(s, CorpusStats::default());
}

#[test]
fn missing_inputs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = avdialog(dir.path(), &["stats", "--manifest", "nope.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
    let out = avdialog(dir.path(), &["train", "--stage", "1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("synth"));
    let out = avdialog(dir.path(), &["train", "--stage", "4"]);
    assert!(!out.status.success());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"sede": 3}"#).unwrap();
    let out = avdialog(dir.path(), &["--config", "c.json", "stats", "--toy"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sede"));
}

#[test]
fn config_can_come_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"sede": 3}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_avdialog"))
        .current_dir(dir.path())
        .env("AVDIALOG_CONFIG", "c.json")
        .args(["stats", "--toy"])
        .output()
        .unwrap();
    assert!(!out.status.success(), "the env config should have been read and rejected");
}

#[test]
fn gold_filter_writes_the_hand_subset() {
    let dir = tempfile::tempdir().unwrap();
    toy_manifest().save(&dir.path().join("m.json")).unwrap();
    std::fs::write(dir.path().join("acc.json"), r#"{"s1": 0.55, "s2": 0.41, "s3": 0.40, "s4": 0.9, "s5": 0.7}"#)
        .unwrap();
    ok(dir.path(), &["gold-filter", "--manifest", "m.json", "--accuracy", "acc.json", "--out", "gold/m.json"]);
    let kept = avdialog::corpus::load_manifest(&dir.path().join("gold/m.json")).unwrap();
    let ids: Vec<_> = kept.dialogues.iter().map(|d| d.id.as_str()).collect();
    assert_eq!(ids, ["d1", "d3"]);

    std::fs::write(dir.path().join("partial.json"), r#"{"s1": 0.9}"#).unwrap();
    let out =
        avdialog(dir.path(), &["gold-filter", "--manifest", "m.json", "--accuracy", "partial.json", "--out", "x.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("s2"));
}

#[test]
fn pipeline_is_reproducible_and_resumable() {
    let a = tiny_dir();
    let b = tiny_dir();
    let (a, b) = (a.path(), b.path());
    prepare(a);
    prepare(b);
    for rel in ["work/manifest.json", "work/units.json", "work/vocab.txt", "work/codebook.fused.avck"] {
        assert_eq!(read(a, rel), read(b, rel), "{rel} differs between runs");
    }

    for stage in ["1", "2", "3"] {
        run(a, &["train", "--stage", stage]);
    }
    // Interrupted stage 1 in b: stop after 2 steps, then resume to the end.
    run(b, &["train", "--stage", "1", "--steps", "2"]);
    run(b, &["train", "--stage", "1"]);
    assert_eq!(read(a, "work/stage1.avck"), read(b, "work/stage1.avck"), "resumed stage 1 differs");
    for stage in ["2", "3"] {
        run(b, &["train", "--stage", stage]);
    }
    assert_eq!(read(a, "work/stage3.avck"), read(b, "work/stage3.avck"));
    assert_eq!(read(a, "work/reports/train_stage3.json"), read(b, "work/reports/train_stage3.json"));

    let table = run(a, &["eval"]);
    assert!(table.contains("bleu"));
    let first = read(a, "work/reports/eval.json");
    run(a, &["eval"]);
    assert_eq!(first, read(a, "work/reports/eval.json"));
    run(b, &["eval"]);
    assert_eq!(first, read(b, "work/reports/eval.json"));
    let report: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(report["seed"], 11);
    assert_eq!(report["report"]["n_pairs"], 24);

    run(a, &["noise-eval", "--snr", "clean,-5"]);
    run(b, &["noise-eval", "--snr", "clean,-5"]);
    for rel in ["work/reports/noise.json", "work/reports/noise.csv"] {
        assert_eq!(read(a, rel), read(b, rel), "{rel} differs between runs");
    }
    let noise: serde_json::Value = serde_json::from_slice(&read(a, "work/reports/noise.json")).unwrap();
    assert_eq!(noise["cells"].as_array().unwrap().len(), 4);

    run(a, &["train-length"]);
    let chat = |input: &str| {
        let mut child = Command::new(env!("CARGO_BIN_EXE_avdialog"))
            .current_dir(a)
            .env_remove("AVDIALOG_CONFIG")
            .args(["--config", "tiny.json", "chat", "--save-dir", "frames"])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
        let out = child.wait_with_output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    let t1 = chat("do you like jazz\nyes a lot\n/quit\nnever read\n");
    let t2 = chat("do you like jazz\nyes a lot\n/quit\n");
    assert_eq!(t1, t2, "chat at temperature 0 is deterministic");
    assert_eq!(t1.matches("ai> ").count(), 2, "lines after /quit are not read: {t1}");
    assert!(t1.contains("units ["));
    assert!(chat("/quit\n").is_empty());
}
