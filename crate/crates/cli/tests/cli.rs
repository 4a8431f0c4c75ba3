use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = include_str!("../../../configs/desk.toml");

fn rimsa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rimsa"))
        .current_dir(dir)
        .env_remove("RIMSA_CONFIG")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = rimsa(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Desk configuration with a short pilot and a few epochs.
fn small_config(dir: &Path) -> PathBuf {
    let text = CONFIG
        .replace("pilot_len = 30", "pilot_len = 8")
        .replace("epochs = 500", "epochs = 3")
        .replace("batch_size = 32", "batch_size = 2")
        .replace("accum_steps = 4", "accum_steps = 1");
    let path = dir.join("small.toml");
    fs::write(&path, text).unwrap();
    path
}

fn gen(dir: &Path, cfg: &Path, out: &str, seed: &str) {
    ok(
        dir,
        &[
            "--config",
            cfg.to_str().unwrap(),
            "gen-data",
            "--out",
            out,
            "--samples",
            "6",
            "--val-samples",
            "2",
            "--test-samples",
            "3",
            "--seed",
            seed,
        ],
    );
}

#[test]
fn gen_data_is_reproducible_and_reports_dims() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let out = ok(
        d,
        &[
            "--config",
            cfg.to_str().unwrap(),
            "gen-data",
            "--out",
            "a.rmds",
            "--samples",
            "100",
            "--seed",
            "7",
            "--val-samples",
            "0",
            "--test-samples",
            "0",
        ],
    );
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("N_R=8 N_t=128 K=2 L=8 train=100"), "{text}");
    ok(
        d,
        &[
            "--config",
            cfg.to_str().unwrap(),
            "gen-data",
            "--out",
            "b.rmds",
            "--samples",
            "100",
            "--seed",
            "7",
            "--val-samples",
            "0",
            "--test-samples",
            "0",
        ],
    );
    assert_eq!(
        fs::read(d.join("a.rmds")).unwrap(),
        fs::read(d.join("b.rmds")).unwrap()
    );
}

#[test]
fn missing_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.toml");
    fs::write(&path, CONFIG.replace("rician_k = 10.0\n", "")).unwrap();
    let out = rimsa(
        dir.path(),
        &[
            "--config",
            path.to_str().unwrap(),
            "gen-data",
            "--out",
            "x.rmds",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rician_k"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(rimsa(dir.path(), &["bogus"]).status.code(), Some(1));
    assert_eq!(rimsa(dir.path(), &["gen-data"]).status.code(), Some(1));
}

#[test]
fn corrupt_dataset_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.rmds"), b"not a dataset").unwrap();
    let out = rimsa(dir.path(), &["eval", "--data", "bad.rmds"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_writes_one_row_per_epoch_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let c = cfg.to_str().unwrap();
    gen(d, &cfg, "data.rmds", "1");
    let out = ok(
        d,
        &[
            "--config",
            c,
            "train",
            "--data",
            "data.rmds",
            "--out-dir",
            "run1",
            "--seed",
            "4",
        ],
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("validation utility: sum"));
    ok(
        d,
        &[
            "--config",
            c,
            "train",
            "--data",
            "data.rmds",
            "--out-dir",
            "run2",
            "--seed",
            "4",
        ],
    );
    let csv = fs::read_to_string(d.join("run1/metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "epoch,lr,lambda_rate,train_total,l_mse,l_rate,l_fro,val_rate,val_maxmin"
    );
    assert_eq!(lines.len(), 1 + 3);
    assert_eq!(csv, fs::read_to_string(d.join("run2/metrics.csv")).unwrap());
    assert_eq!(
        fs::read(d.join("run1/checkpoint.rmck")).unwrap(),
        fs::read(d.join("run2/checkpoint.rmck")).unwrap()
    );

    let out = ok(
        d,
        &[
            "--config",
            c,
            "train",
            "--data",
            "data.rmds",
            "--out-dir",
            "run3",
            "--utility",
            "maxmin",
            "--epochs",
            "1",
        ],
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("validation utility: maxmin"));
    assert_eq!(
        fs::read_to_string(d.join("run3/metrics.csv"))
            .unwrap()
            .lines()
            .count(),
        2
    );

    let eval = |ckpt: &str| {
        let out = ok(
            d,
            &[
                "--config",
                c,
                "eval",
                "--data",
                "data.rmds",
                "--checkpoint",
                ckpt,
            ],
        );
        serde_json::from_slice::<serde_json::Value>(&out.stdout).unwrap()
    };
    let a = eval("run1/checkpoint.rmck");
    assert_eq!(a, eval("run1/checkpoint.rmck"));
    assert_eq!(a["samples"], 3);
    assert!(a["controller"]["mean_sum_rate"].as_f64().unwrap() > 0.0);
    assert!(a["controller"]["l_mse"].is_number());
}

#[test]
fn eval_without_checkpoint_reports_baselines() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let c = cfg.to_str().unwrap();
    gen(d, &cfg, "data.rmds", "2");
    let out = ok(
        d,
        &[
            "--config",
            c,
            "eval",
            "--data",
            "data.rmds",
            "--power-dbm",
            "-5",
        ],
    );
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v.get("controller").is_none());
    assert_eq!(v["power_dbm"], -5.0);
    let random = v["random_baseline"]["mean_sum_rate"].as_f64().unwrap();
    let zf = v["zf_reference"]["mean_sum_rate"].as_f64().unwrap();
    assert!(random > 0.0 && zf > random);
}

#[test]
fn malformed_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let c = cfg.to_str().unwrap();
    gen(d, &cfg, "data.rmds", "3");
    fs::write(d.join("junk.rmck"), b"JUNKJUNKJUNK").unwrap();
    let out = rimsa(
        d,
        &[
            "--config",
            c,
            "eval",
            "--data",
            "data.rmds",
            "--checkpoint",
            "junk.rmck",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad checkpoint"));
}

#[test]
fn mismatched_dataset_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    gen(d, &cfg, "data.rmds", "3");
    // default desk configuration expects L = 30
    let out = rimsa(d, &["eval", "--data", "data.rmds"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pilot_sweep_emits_three_rows_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    ok(
        d,
        &[
            "--config",
            cfg.to_str().unwrap(),
            "sweep",
            "--axis",
            "pilot",
            "--values",
            "4,6,8",
            "--out",
            "s.csv",
            "--samples",
            "4",
            "--val-samples",
            "2",
            "--test-samples",
            "2",
            "--epochs",
            "1",
        ],
    );
    let csv = fs::read_to_string(d.join("s.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "axis_value,method,mean_rate,mean_maxmin");
    assert_eq!(lines.len(), 1 + 9);
    for method in ["controller", "random", "zf_reference"] {
        assert_eq!(
            lines
                .iter()
                .filter(|l| l.split(',').nth(1) == Some(method))
                .count(),
            3
        );
    }
}

#[test]
fn power_sweep_reuses_one_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let out = ok(
        d,
        &[
            "--config",
            cfg.to_str().unwrap(),
            "sweep",
            "--axis",
            "power",
            "--values",
            "-10,0,10",
            "--out",
            "p.csv",
            "--samples",
            "4",
            "--val-samples",
            "2",
            "--test-samples",
            "2",
            "--epochs",
            "1",
        ],
    );
    let log = String::from_utf8_lossy(&out.stderr);
    assert_eq!(log.matches("best epoch").count(), 1, "{log}");
    let csv = fs::read_to_string(d.join("p.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 9);
}
