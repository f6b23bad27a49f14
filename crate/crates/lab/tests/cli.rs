mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

fn zsq(out: &Path, args: &[&str]) -> std::process::Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_zsq"));
    cmd.args(args)
        .arg("--out")
        .arg(out)
        .args(common::tiny_args());
    cmd.output().expect("spawn zsq")
}

fn ok(o: &std::process::Output) {
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn dataset_pretrain_run_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();

    ok(&zsq(out, &["dataset"]));
    let train = fs::read_to_string(out.join("reports/dataset/train.csv")).unwrap();
    assert_eq!(train.lines().count(), 1 + 3 * 40);
    assert!(out.join("reports/dataset/val.csv").exists());

    ok(&zsq(out, &["pretrain"]));
    let ckpts: Vec<_> = fs::read_dir(out.join("checkpoints")).unwrap().collect();
    assert_eq!(ckpts.len(), 1);

    for arm in ["baseline", "ait"] {
        ok(&zsq(out, &["run", "--arm", arm, "--seed", "3"]));
        let name = format!("{arm}_s3");
        assert!(out.join("reports").join(&name).join("metrics.csv").exists());
        assert!(out.join("reports").join(&name).join("record.json").exists());
        assert!(out.join("diag").join(&name).join("cosine.csv").exists());
        assert!(out
            .join("checkpoints")
            .join(format!("{name}_student.zsq"))
            .exists());
    }
    assert!(out.join("reports/ait_s3/gi.csv").exists());
    assert!(!out.join("reports/baseline_s3/gi.csv").exists());

    ok(&zsq(out, &["report"]));
    let ablation = fs::read_to_string(out.join("reports/ablation.csv")).unwrap();
    let arms: Vec<&str> = ablation
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(arms, ["baseline", "ait"]);
}

#[test]
fn unknown_key_and_arm_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = zsq(dir.path(), &["run", "--set", "gi.rhoo=0.1"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("gi.rhoo"));
    let o = zsq(dir.path(), &["run", "--arm", "nonsense"]);
    assert!(!o.status.success());
}

#[test]
fn config_file_is_read() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    fs::write(&cfg, "# quick\narm = kl_only\nseed = 11\n").unwrap();
    let out = dir.path().join("out");
    let o = zsq(&out, &["run", "--config", cfg.to_str().unwrap()]);
    ok(&o);
    assert!(out.join("reports/kl_only_s11/metrics.csv").exists());
    let text = fs::read_to_string(out.join("reports/kl_only_s11/config.txt")).unwrap();
    assert!(text.lines().any(|l| l == "arm=kl_only"));
}

#[test]
fn sweep_verb_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let o = zsq(
        dir.path(),
        &["sweep", "--grid", "arm=baseline,kl_only", "--repeat", "2"],
    );
    ok(&o);
    let csv = fs::read_to_string(dir.path().join("reports/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    let summary = fs::read_to_string(dir.path().join("reports/sweep_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 2);
}
