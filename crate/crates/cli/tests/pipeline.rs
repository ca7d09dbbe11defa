use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const CONFIG: &str = r#"
seed = 3
out_dir = "run"
eval_seeds = 2
baseline_kinds = ["mse", "gaussian", "idm_fixed", "idm_learned"]

[dataset]
source = "synthetic"
n_drivers = 24
length = 80

[contrastive]
passes = 1

[prior]
epochs = 1

[policy]
epochs = 2
max_batches_per_epoch = 4
val_examples = 64
checkpoint_every = 1

[baselines.policy]
epochs = 1
max_batches_per_epoch = 4
val_examples = 64

[baselines.idm]
budget = 100

[eval]
f1_scenarios = 4
crash_scenarios = 10
crash_steps = 60
"#;

fn dsdp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsdp"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(["-c", "tiny.toml"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = dsdp(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str]) -> String {
    let out = dsdp(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), CONFIG).unwrap();
    dir
}

fn pipeline(dir: &Path, extra: &[&str]) {
    for stage in [
        "synth",
        "preprocess",
        "train-style",
        "train-prior",
        "train-policy",
        "train-baseline",
    ] {
        ok(dir, &[&[stage], extra].concat());
    }
    ok(
        dir,
        &[
            &["eval-f1", "--policy", "dsdp", "--policy", "gaussian"],
            extra,
        ]
        .concat(),
    );
    ok(
        dir,
        &[
            &["eval-crash", "--policy", "idm_fixed", "--policy", "dsdp"],
            extra,
        ]
        .concat(),
    );
    ok(dir, &[&["report"], extra].concat());
}

fn hashes(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, hex::encode(Sha256::digest(std::fs::read(&p).unwrap())));
            }
        }
    }
    out
}

#[test]
fn whole_pipeline_is_byte_reproducible() {
    let (a, b) = (workspace(), workspace());
    pipeline(a.path(), &[]);
    pipeline(b.path(), &["--workers", "1"]);
    let (mut ha, mut hb) = (hashes(&a.path().join("run")), hashes(&b.path().join("run")));
    // The echoed config records the worker count; nothing else may differ.
    let config = |d: &Path| std::fs::read_to_string(d.join("run/config.toml")).unwrap();
    assert_eq!(
        config(a.path()).lines().next(),
        config(b.path()).lines().next()
    );
    ha.remove("config.toml");
    hb.remove("config.toml");
    assert!(ha.len() > 20, "{:?}", ha.keys());
    assert_eq!(ha, hb);

    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(a.path().join("run/data/source.manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["n_styles"], 4);

    let crash: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(a.path().join("run/reports/crash_idm_fixed_0.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(crash["crash_pct"], 0.0);
    assert_eq!(crash["scenarios"], 10);

    let summary = std::fs::read_to_string(a.path().join("run/reports/summary.csv")).unwrap();
    let header = summary.lines().next().unwrap();
    for col in [
        "policy",
        "seeds",
        "f1_mean",
        "f1_2se",
        "crash_pct_mean",
        "crash_pct_2se",
    ] {
        assert!(header.split(',').any(|c| c == col), "{header}");
    }
    assert_eq!(summary.lines().count(), 5);

    // Retraining on the same inputs reproduces the checkpoint exactly.
    let before = hashes(&a.path().join("run/models"));
    ok(a.path(), &["train-policy"]);
    assert_eq!(hashes(&a.path().join("run/models")), before);
}

#[test]
fn missing_input_names_the_path() {
    let dir = workspace();
    let err = fails(
        dir.path(),
        &["ingest", "--input", "nowhere/trajectories.csv"],
    );
    assert!(err.contains("nowhere/trajectories.csv"), "{err}");
}

#[test]
fn stages_refuse_to_run_out_of_order() {
    let dir = workspace();
    let err = fails(dir.path(), &["preprocess"]);
    assert!(err.contains("synth"), "{err}");
    ok(dir.path(), &["synth"]);
    ok(dir.path(), &["preprocess"]);
    let err = fails(dir.path(), &["train-policy"]);
    assert!(err.contains("train-style"), "{err}");
    let err = fails(dir.path(), &["train-prior"]);
    assert!(err.contains("train-style"), "{err}");
    let err = fails(dir.path(), &["eval-crash", "--policy", "idm_fixed"]);
    assert!(err.contains("train-baseline"), "{err}");
    let err = fails(dir.path(), &["report"]);
    assert!(err.contains("no reports"), "{err}");
}

#[test]
fn fingerprint_mismatch_needs_an_explicit_override() {
    let dir = workspace();
    ok(dir.path(), &["synth"]);
    ok(dir.path(), &["preprocess"]);
    ok(dir.path(), &["train-baseline", "--kind", "idm_fixed"]);
    let err = fails(
        dir.path(),
        &[
            "eval-crash",
            "--policy",
            "idm_fixed",
            "--set",
            "eval.crash_steps=30",
        ],
    );
    assert!(err.contains("fingerprint"), "{err}");
    ok(
        dir.path(),
        &[
            "eval-crash",
            "--policy",
            "idm_fixed",
            "--set",
            "eval.crash_steps=30",
            "--allow-fingerprint-mismatch",
        ],
    );
    // Placement-only flags keep the fingerprint.
    ok(
        dir.path(),
        &["eval-crash", "--policy", "idm_fixed", "--workers", "2"],
    );
}

#[test]
fn bad_configuration_is_reported() {
    let dir = workspace();
    let err = fails(dir.path(), &["synth", "--set", "policy.epochz=1"]);
    assert!(err.contains("epochz"), "{err}");
    let err = fails(dir.path(), &["train-baseline", "--kind", "lstm"]);
    assert!(err.contains("lstm"), "{err}");
    let err = fails(dir.path(), &["ingest"]);
    assert!(err.contains("--input"), "{err}");
}
