//! End-to-end CLI tests at micro scale: the full command pipeline, rerun
//! determinism, output-directory locking, dotted config overrides, and
//! exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_hiermoe")
}

fn run<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn hiermoe")
}

fn ok<S: AsRef<std::ffi::OsStr> + std::fmt::Debug>(args: &[S]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn owned(args: &[&str]) -> Vec<String> {
    args.iter().map(|s| s.to_string()).collect()
}

fn hash_dir(dir: &Path) -> String {
    fn walk(dir: &Path, files: &mut Vec<PathBuf>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap()).collect();
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                walk(&p, files);
            } else {
                files.push(p);
            }
        }
    }
    use sha2::{Digest, Sha256};
    let mut files = Vec::new();
    walk(dir, &mut files);
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        h.update(std::fs::read(&f).unwrap());
    }
    format!("{:x}", h.finalize())
}

const TRAIN_FLAGS: &[&str] = &[
    "--model.hidden",
    "10",
    "--model.layers",
    "2",
    "--model.experts",
    "2",
    "--train.pretrain_epochs",
    "4",
    "--train.warmup_stage_epochs",
    "2",
    "--train.finetune_epochs",
    "3",
    "--train.finetune_k",
    "10",
    "--train.finetune_class_ratio",
    "2",
    "--train.warmup_steps",
    "10",
];

fn gen_args(out: &str) -> Vec<String> {
    [
        "gen-data",
        "--seed",
        "7",
        "--source",
        "3",
        "--target",
        "1",
        "--out",
        out,
        "--data.regre_source",
        "30",
        "--data.regre_target",
        "24",
        "--data.class_ratio",
        "2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[test]
fn full_pipeline_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let p = |name: &str| root.join(name).to_string_lossy().to_string();

    // gen-data twice with the same seed: identical directory trees
    ok(&gen_args(&p("data")));
    ok(&gen_args(&p("data2")));
    assert_eq!(hash_dir(&root.join("data")), hash_dir(&root.join("data2")));

    // pretrain twice with the same seed: identical checkpoint bytes
    let mut pre = owned(&["pretrain", "--data", &p("data"), "--out", &p("pre"), "--seed", "3", "--model.variant", "node_moe"]);
    pre.extend(owned(TRAIN_FLAGS));
    ok(&pre);
    let mut pre2 = owned(&["pretrain", "--data", &p("data"), "--out", &p("pre2"), "--seed", "3", "--model.variant", "node_moe"]);
    pre2.extend(owned(TRAIN_FLAGS));
    ok(&pre2);
    assert_eq!(
        std::fs::read(root.join("pre/checkpoint.bin")).unwrap(),
        std::fs::read(root.join("pre2/checkpoint.bin")).unwrap()
    );
    assert_eq!(
        std::fs::read(root.join("pre/train.log.jsonl")).unwrap(),
        std::fs::read(root.join("pre2/train.log.jsonl")).unwrap()
    );

    // rerunning into the same directory is refused without --force
    let denied = run(&pre);
    assert_eq!(denied.status.code(), Some(3));
    let mut forced = pre.clone();
    forced.push("--force".into());
    ok(&forced);

    // finetune twice: identical per-kernel checkpoints
    let mut ft = owned(&["finetune", "--data", &p("data"), "--model", &p("pre"), "--out", &p("ft"), "--seed", "3"]);
    ft.extend(owned(TRAIN_FLAGS));
    ok(&ft);
    let mut ft2 = owned(&["finetune", "--data", &p("data"), "--model", &p("pre"), "--out", &p("ft2"), "--seed", "3"]);
    ft2.extend(owned(TRAIN_FLAGS));
    ok(&ft2);
    assert_eq!(hash_dir(&root.join("ft")), hash_dir(&root.join("ft2")));

    // classifier path
    let mut cls = owned(&["pretrain", "--data", &p("data"), "--out", &p("cls"), "--seed", "3", "--task", "classification", "--model.variant", "harp"]);
    cls.extend(owned(TRAIN_FLAGS));
    ok(&cls);
    let mut clsft = owned(&["finetune", "--data", &p("data"), "--model", &p("cls"), "--out", &p("clsft"), "--seed", "3"]);
    clsft.extend(owned(TRAIN_FLAGS));
    ok(&clsft);

    // eval-offline emits a report with per-kernel rows
    ok(&owned(&["eval-offline", "--data", &p("data"), "--finetuned", &p("ft"), "--classifier", &p("clsft"), "--out", &p("eval"), "--seed", "3"]));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(root.join("eval/report.json")).unwrap()).unwrap();
    assert!(report["per_kernel"].as_array().unwrap().len() == 1);
    assert!(report["mean_total_mse"].as_f64().unwrap().is_finite());
    assert!(report["classifier_accuracy"].as_f64().is_some());

    // search with a tight budget emits dse-report.json with speedup >= 1
    ok(&owned(&["search", "--data", &p("data"), "--finetuned", &p("ft"), "--classifier", &p("clsft"), "--out", &p("dse"), "--seed", "3", "--budget", "300", "--topk", "5"]));
    let dse: serde_json::Value =
        serde_json::from_slice(&std::fs::read(root.join("dse/dse-report.json")).unwrap()).unwrap();
    assert!(dse["geo_mean_speedup"].as_f64().unwrap() >= 1.0);
    assert_eq!(dse["results"][0]["enumerated"].as_u64().unwrap(), 300);

    // analyze-gating on the MoE model fills the node table
    ok(&owned(&["analyze-gating", "--data", &p("data"), "--model", &p("pre"), "--out", &p("gating"), "--seed", "3"]));
    let gating: serde_json::Value =
        serde_json::from_slice(&std::fs::read(root.join("gating/gating-report.json")).unwrap()).unwrap();
    assert!(gating["node_moe"]["rows"].as_array().unwrap().len() == 2);

    // manifests record the run and the config snapshot
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(root.join("pre/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "pretrain");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config"]["model.variant"], "node_moe");
    assert!(manifest["inputs"]["data"].as_str().unwrap().len() == 64);
}

#[test]
fn exit_codes_and_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let p = |name: &str| root.join(name).to_string_lossy().to_string();

    // unknown config key -> 2
    let out = run(&owned(&["gen-data", "--out", &p("x"), "--bogus.key", "1"]));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown config keys"));

    // bad value -> 2
    let out = run(&owned(&["gen-data", "--out", &p("x"), "--train.alpha", "not-a-number"]));
    assert_eq!(out.status.code(), Some(2));

    // missing data dir -> 3
    let out = run(&owned(&["pretrain", "--data", &p("nope"), "--out", &p("y"), "--seed", "1"]));
    assert_eq!(out.status.code(), Some(3));

    // invalid thread cap -> 2
    let out = Command::new(bin())
        .args(["gen-data", "--out", &p("z")])
        .env("HIERMOE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // --key=value override form works and lands in the manifest
    let mut args: Vec<String> = gen_args(&p("data"));
    args.push("--train.alpha=0.25".into());
    ok(&args);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(root.join("data/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["train.alpha"], "0.25");

    // config file + override precedence
    let cfg_path = root.join("run.cfg");
    std::fs::write(&cfg_path, "data.regre_source = 25\ndata.class_ratio = 2\n").unwrap();
    ok(&owned(&[
        "gen-data",
        "--seed",
        "9",
        "--source",
        "2",
        "--target",
        "1",
        "--out",
        &p("cfgdata"),
        "--config",
        cfg_path.to_str().unwrap(),
        "--data.regre_source",
        "20",
    ]));
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(root.join("cfgdata/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["data.regre_source"], "20");
}
