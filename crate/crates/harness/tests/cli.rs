use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

use onerec_harness::error::ErrorRecord;
use onerec_harness::manifest::{Manifest, Status, DONE};

const TINY: &str = r#"
seed = 3
[world]
users = 32
items = 128
[model]
preset = "toy-s"
[tokenizer]
n_t = 16
[pretrain]
steps = 20
[pscore]
epochs = 1
[posttrain]
steps = 3
group_size = 8
rl_users = 2
[posttrain.generation]
constrain_to_trie = true
[eval]
users = 8
ntp_every = 10
"#;

fn onerec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_onerec"))
        .args(args)
        .output()
        .unwrap()
}

fn stage(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        cmd,
        "-c",
        config.to_str().unwrap(),
        "-o",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    onerec(&args)
}

fn error_of(out: &Output) -> ErrorRecord {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.lines().last().unwrap_or_default())
        .unwrap_or_else(|e| panic!("{e}: {text}"))
}

fn ok(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p
}

fn full_run(cfg: &Path, run: &Path) {
    for cmd in [
        "gen-world",
        "fit-tokenizer",
        "tokenize",
        "pretrain",
        "train-pscore",
        "posttrain",
    ] {
        ok(&stage(cmd, cfg, run, &[]));
    }
    for policy in ["pretrain", "posttrain"] {
        ok(&stage("generate", cfg, run, &["--policy", policy]));
        ok(&stage("eval", cfg, run, &["--policy", policy]));
    }
}

#[test]
fn stage_commands_write_complete_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let run = tmp.path().join("run");
    full_run(&cfg, &run);

    for s in [
        "gen-world",
        "fit-tokenizer",
        "pretrain",
        "posttrain",
        "eval-posttrain",
        "generate-pretrain",
    ] {
        let dir = run.join(s);
        assert!(dir.join(DONE).is_file(), "{s}");
        let m = Manifest::read(&dir).unwrap();
        assert_eq!(m.status, Status::Complete);
        assert_eq!(m.seed, 3);
        assert_eq!(m.config_hash.len(), 64);
        assert!(!m.files.is_empty());
    }
    assert!(run.join("pretrain/metrics.csv").is_file());
    let summary: Value =
        serde_json::from_slice(&fs::read(run.join("eval-posttrain/summary.json")).unwrap())
            .unwrap();
    assert!(summary["pass@32/vtr"].is_number());
    let upstream = Manifest::read(&run.join("eval-posttrain"))
        .unwrap()
        .upstream;
    assert!(upstream.contains_key("posttrain"));
}

#[test]
fn rerunning_a_stage_refuses_to_touch_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let run = tmp.path().join("run");
    ok(&stage("gen-world", &cfg, &run, &[]));
    let before = fs::read(run.join("gen-world/summary.json")).unwrap();
    let out = stage("gen-world", &cfg, &run, &[]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_of(&out).error, "dir_exists");
    assert_eq!(
        fs::read(run.join("gen-world/summary.json")).unwrap(),
        before
    );
}

#[test]
fn missing_and_mismatched_upstream_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let run = tmp.path().join("run");
    let out = stage("pretrain", &cfg, &run, &[]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_of(&out).error, "missing_stage");

    ok(&stage("gen-world", &cfg, &run, &[]));
    let out = stage("fit-tokenizer", &cfg, &run, &["--set", "world.users=40"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_of(&out).error, "config_mismatch");
    assert!(!run.join("fit-tokenizer").exists());
    // Options the world does not depend on leave the upstream hash alone.
    ok(&stage(
        "fit-tokenizer",
        &cfg,
        &run,
        &["--set", "pretrain.steps=5"],
    ));
}

#[test]
fn configuration_and_usage_errors_are_machine_readable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = stage(
        "gen-world",
        &cfg,
        &tmp.path().join("a"),
        &["--set", "world.nonsense=1"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_of(&out).error, "config");
    let out = stage(
        "gen-world",
        &cfg,
        &tmp.path().join("b"),
        &["--set", "posttrain.group_size=1"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(!tmp.path().join("b").exists());

    let out = onerec(&["pretrain"]);
    assert_eq!(out.status.code(), Some(2));
    let rec = error_of(&out);
    assert_eq!((rec.error.as_str(), rec.exit_code), ("usage", 2));
    assert!(onerec(&["--help"]).status.success());
}

#[test]
fn compare_of_identical_runs_is_zero_with_zero_width() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    full_run(&cfg, &a);
    full_run(&cfg, &b);
    let table = tmp.path().join("cmp");
    let out = onerec(&[
        "compare",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
        "--metrics",
        "pass@32/vtr,legality",
        "--out",
        table.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("metric,"));
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[3..6], ["0", "0", "0"], "{line}");
        assert_eq!(cols[7], "users");
    }
    assert!(table.join("comparison.json").is_file());

    let out = onerec(&[
        "compare",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
        "--metrics",
        "no-such-metric",
    ]);
    assert_eq!(out.status.code(), Some(5));
    assert_eq!(error_of(&out).error, "missing_metric");
}

#[test]
fn sweep_runs_every_point_and_aggregates() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out_dir = tmp.path().join("sweep");
    let out = stage(
        "sweep",
        &cfg,
        &out_dir,
        &[
            "--axis",
            "model.preset=toy-s,toy-m",
            "--seeds",
            "1,2",
            "--stages",
            "gen-world,fit-tokenizer,pretrain,eval-pretrain",
        ],
    );
    assert_eq!(ok(&out)["runs"], 4);
    assert!(out_dir.join(DONE).is_file());
    for p in ["model.preset=toy-s", "model.preset=toy-m"] {
        for s in [1, 2] {
            assert!(out_dir
                .join(format!("points/{p}/seed-{s}/eval-pretrain/{DONE}"))
                .is_file());
        }
    }
    let points = fs::read_to_string(out_dir.join("points.csv")).unwrap();
    assert_eq!(points.lines().count(), 5);
    assert!(points.lines().next().unwrap().contains("pass@32/vtr"));
    assert!(out_dir.join("scaling.csv").is_file());

    let again = stage("sweep", &cfg, &out_dir, &["--seeds", "1"]);
    assert_eq!(again.status.code(), Some(4));
}
