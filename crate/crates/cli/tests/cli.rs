//! End-to-end tests of the `conformal-audit` binary: exit codes,
//! artifact layout, overrides, reporting, and rerun determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_conformal-audit"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn base_config() -> Value {
    json!({
        "data": {
            "source": "synthetic",
            "generator": {
                "groups": [
                    { "label": "A", "size": 120, "gamma": 1.4,
                      "cutpoints": [-1.0, 0.0, 1.0], "coef_scale": 1.0 },
                    { "label": "B", "size": 240, "gamma": 1.0,
                      "cutpoints": [-0.5, 0.5, 1.5], "coef_scale": 1.0 },
                    { "label": "C", "size": 480, "gamma": 0.8,
                      "cutpoints": [0.0, 1.0, 2.0], "coef_scale": 1.0 }
                ],
                "n_classes": 4,
                "covariate_dim": 3,
                "informativeness": 0.8,
                "weight_law": { "law": "lognormal", "mu": 0.0, "sigma": 0.5 },
                "master_seed": 99
            }
        },
        "n_splits": 3,
        "alpha": 0.1,
        "models": [ { "kind": "prior" }, { "kind": "oracle" } ],
        "master_seed": 7
    })
}

fn write_config(dir: &Path, config: &Value) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_vec_pretty(config).unwrap()).unwrap();
    path
}

/// Recursively collect (relative path, bytes) for every file under a root.
fn snapshot(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, acc: &mut Vec<(PathBuf, Vec<u8>)>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                walk(root, &path, acc);
            } else {
                acc.push((
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                ));
            }
        }
    }
    let mut acc = Vec::new();
    walk(root, root, &mut acc);
    acc
}

#[test]
fn missing_config_exits_one_and_writes_error_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "validate",
        "--config",
        dir.path().join("absent.json").to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1), "stderr: {}", stderr(&out));
    let err: Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("out/error.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(err["exit_code"], 1);
    assert!(err["error"].as_str().unwrap().contains("absent.json"));
}

#[test]
fn unknown_override_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &base_config());
    let out = run(&[
        "validate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
        "--override",
        "alhpa=0.2",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr(&out).contains("unknown field `alhpa`"),
        "stderr: {}",
        stderr(&out)
    );
}

#[test]
fn bad_flag_exits_one_and_help_exits_zero() {
    let out = run(&["validate", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("experiment"));
}

#[test]
fn validate_split_fit_calibrate_produce_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &base_config());
    let out_dir = dir.path().join("out");
    let common = [
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ];

    let out = run(&[&["validate"], &common[..]].concat());
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let validation: Value = serde_json::from_str(
        &std::fs::read_to_string(out_dir.join("validation.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(validation["n_respondents"], 840);
    assert_eq!(validation["n_groups"], 3);

    let out = run(&[&["split"], &common[..]].concat());
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    assert!(out_dir.join("splits.json").exists());
    assert!(out_dir.join("splits.csv").exists());

    let out = run(&[&["fit"], &common[..]].concat());
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    assert!(out_dir.join("probs_prior_split000.csv").exists());
    assert!(out_dir.join("model_prior_split000.json").exists());
    assert!(out_dir.join("probs_oracle.csv").exists());

    let out = run(&[&["calibrate"], &common[..]].concat());
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    // 2 models x 4 methods for split 0.
    let thresholds: Vec<_> = std::fs::read_dir(out_dir.join("thresholds"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(thresholds.len(), 8, "{thresholds:?}");
    assert!(thresholds
        .iter()
        .all(|name| name.ends_with("_split000.json")));
}

#[test]
fn experiment_writes_expected_row_count_and_report_renders() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &base_config());
    let out_dir = dir.path().join("out");
    let out = run(&[
        "experiment",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--quiet",
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));

    let results = std::fs::read_to_string(out_dir.join("results.csv")).unwrap();
    // Header plus n_splits x models x methods rows.
    assert_eq!(results.lines().count(), 1 + 3 * 2 * 4);

    let out = run(&["report", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("main results over 3 split(s)"));
    assert!(text.contains("paired deltas vs STANDARD"));
    assert!(text.contains("MONDRIAN - STANDARD"));
    assert!(!text.contains("CI n/a"), "multi-split runs carry real CIs");
    for f in [
        "report_main_results.csv",
        "report_per_group.csv",
        "report_paired.csv",
    ] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
}

#[test]
fn alpha_override_reaches_threshold_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &base_config());
    let out_dir = dir.path().join("out");
    let out = run(&[
        "calibrate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--override",
        "alpha=0.25",
        "--quiet",
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let mut n = 0;
    for entry in std::fs::read_dir(out_dir.join("thresholds")).unwrap() {
        let text = std::fs::read_to_string(entry.unwrap().path()).unwrap();
        let doc: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(doc["alpha"], 0.25);
        n += 1;
    }
    assert_eq!(n, 8);
}

#[test]
fn seed_flag_changes_splits_but_explicit_override_wins() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &base_config());
    let args = |out: &Path, extra: &[&str]| -> Vec<String> {
        let mut v = vec![
            "split".to_string(),
            "--config".into(),
            config.to_str().unwrap().into(),
            "--out".into(),
            out.to_str().unwrap().into(),
            "--quiet".into(),
        ];
        v.extend(extra.iter().map(|s| s.to_string()));
        v
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    assert!(bin().args(args(&a, &[])).status().unwrap().success());
    assert!(bin()
        .args(args(&b, &["--seed", "1234"]))
        .status()
        .unwrap()
        .success());
    // --override master_seed=7 restores the config value over --seed.
    assert!(bin()
        .args(args(&c, &["--seed", "1234", "--override", "master_seed=7"]))
        .status()
        .unwrap()
        .success());
    let read = |d: &Path| std::fs::read(d.join("splits.csv")).unwrap();
    assert_ne!(read(&a), read(&b), "--seed must change the partition");
    assert_eq!(read(&a), read(&c), "explicit override outranks --seed");
}

#[test]
fn single_split_report_marks_missing_intervals() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &base_config());
    let out_dir = dir.path().join("out");
    let out = run(&[
        "audit",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--quiet",
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("paired deltas skipped"));

    let out = run(&["report", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("main results over 1 split(s)"));
    assert!(text.contains("CI n/a"), "report: {text}");
    // The CSV mirror leaves the interval fields empty rather than faking them.
    let paired = std::fs::read_to_string(out_dir.join("report_paired.csv")).unwrap();
    let line = paired.lines().nth(1).unwrap();
    assert!(line.contains(",,"), "empty stat fields expected: {line}");
}

#[test]
fn tampered_results_warn_but_report_proceeds() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &base_config());
    let out_dir = dir.path().join("out");
    let out = run(&[
        "experiment",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--quiet",
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));

    let results_path = out_dir.join("results.csv");
    let tampered = std::fs::read_to_string(&results_path)
        .unwrap()
        .replacen("0.9", "0.7", 1);
    std::fs::write(&results_path, tampered).unwrap();

    let out = run(&["report", "--out", out_dir.to_str().unwrap(), "--quiet"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    assert!(
        stderr(&out).contains("hash mismatch for results.csv"),
        "stderr: {}",
        stderr(&out)
    );
}

#[test]
fn report_names_missing_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["report", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr(&out).contains("missing artifact"),
        "stderr: {}",
        stderr(&out)
    );
    assert!(stderr(&out).contains("results.csv"));
}

#[test]
fn experiment_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &base_config());
    let out_dir = dir.path().join("out");
    let args = [
        "experiment",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--quiet",
    ];
    assert!(bin().args(args).status().unwrap().success());
    let first = snapshot(&out_dir);
    assert!(bin().args(args).status().unwrap().success());
    let second = snapshot(&out_dir);
    assert_eq!(
        first.len(),
        second.len(),
        "file sets differ: {:?} vs {:?}",
        first.iter().map(|(p, _)| p).collect::<Vec<_>>(),
        second.iter().map(|(p, _)| p).collect::<Vec<_>>()
    );
    for ((pa, ba), (pb, bb)) in first.iter().zip(&second) {
        assert_eq!(pa, pb);
        assert_eq!(ba, bb, "artifact {} changed between reruns", pa.display());
    }
}

#[test]
fn thread_cap_does_not_change_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &base_config());
    let free = dir.path().join("free");
    let capped = dir.path().join("capped");
    let args = |out: &Path| {
        vec![
            "experiment".to_string(),
            "--config".into(),
            config.to_str().unwrap().into(),
            "--out".into(),
            out.to_str().unwrap().into(),
            "--quiet".into(),
        ]
    };
    assert!(bin().args(args(&free)).status().unwrap().success());
    assert!(bin()
        .args(args(&capped))
        .env("CONFORMAL_AUDIT_THREADS", "1")
        .status()
        .unwrap()
        .success());
    assert_eq!(snapshot(&free), snapshot(&capped));
}

#[test]
fn mechanism_runs_on_its_own_config_shape() {
    let dir = tempfile::tempdir().unwrap();
    let mut base = base_config();
    base["models"] = json!([{ "kind": "oracle" }]);
    base["methods"] = json!(["STANDARD", "MONDRIAN"]);
    base["n_splits"] = json!(2);
    let mech = json!({ "base": base, "informativeness_levels": [0.2, 0.8] });
    let config = write_config(dir.path(), &mech);
    let out_dir = dir.path().join("out");
    let out = run(&[
        "mechanism",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("oracle[info=0.2]"), "stdout: {text}");
    assert!(text.contains("oracle[info=0.8]"));
    assert!(out_dir.join("diagnostics.json").exists());

    // An experiment config is not a mechanism config.
    let exp_cfg_dir = dir.path().join("expcfg");
    std::fs::create_dir_all(&exp_cfg_dir).unwrap();
    let exp_config = write_config(&exp_cfg_dir, &base_config());
    let out = run(&[
        "mechanism",
        "--config",
        exp_config.to_str().unwrap(),
        "--out",
        dir.path().join("bad").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn audit_matches_first_split_of_full_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &base_config());
    let audit_dir = dir.path().join("audit");
    let exp_dir = dir.path().join("exp");
    for (cmd, out) in [("audit", &audit_dir), ("experiment", &exp_dir)] {
        let r = run(&[
            cmd,
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--quiet",
        ]);
        assert_eq!(r.status.code(), Some(0), "stderr: {}", stderr(&r));
    }
    let split0 = |p: &Path| -> Vec<String> {
        std::fs::read_to_string(p.join("results.csv"))
            .unwrap()
            .lines()
            .filter(|l| l.starts_with("0,") || l.starts_with("split_index"))
            .map(str::to_string)
            .collect()
    };
    assert_eq!(
        split0(&audit_dir),
        split0(&exp_dir),
        "audit must reproduce split 0 of the full run"
    );
}
