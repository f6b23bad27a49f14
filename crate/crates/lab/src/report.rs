//! Ablation table and summary export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::config::Arm;
use crate::experiment::{io_err, write_atomic, LabError, LabResult, RunRecord};
use crate::sweep::mean_std;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmSummary {
    pub arm: String,
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub val_acc_mean: f64,
    pub val_acc_std: f64,
    pub train_acc_mean: f64,
    pub final_kl_mean: f64,
    pub final_ce_mean: f64,
    pub val_kl_mean: f64,
    pub grad_cosine_mean: Option<f64>,
    pub diverged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct RunLine<'a> {
    name: &'a str,
    arm: &'a str,
    seed: u64,
    config_hash: &'a str,
    final_val_acc: f64,
    final_train_acc: f64,
    final_kl: f64,
    diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct Summary<'a> {
    arms: Vec<ArmSummary>,
    runs: Vec<RunLine<'a>>,
}

/// Mean over student-updated epochs of the per-epoch CE/KL gradient cosine.
pub fn mean_grad_cosine(r: &RunRecord) -> Option<f64> {
    let v: Vec<f64> = r
        .epochs
        .iter()
        .filter(|e| e.student_updated)
        .filter_map(|e| e.grad_cosine)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// One row per arm in `order` that has records; records of other arms follow in
/// first-seen order.
pub fn summarize_arms(records: &[RunRecord], order: &[Arm]) -> Vec<ArmSummary> {
    let mut names: Vec<String> = order.iter().map(|a| a.name().to_string()).collect();
    for r in records {
        if !names.contains(&r.arm) {
            names.push(r.arm.clone());
        }
    }
    let mut rows = Vec::new();
    for name in names {
        let mut rs: Vec<&RunRecord> = records.iter().filter(|r| r.arm == name).collect();
        if rs.is_empty() {
            continue;
        }
        rs.sort_by(|a, b| a.seed.cmp(&b.seed).then(a.name.cmp(&b.name)));
        let col = |f: &dyn Fn(&RunRecord) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<f64>>();
        let (vm, vs) = mean_std(&col(&|r| r.final_val_acc));
        let cos: Vec<f64> = rs.iter().filter_map(|r| mean_grad_cosine(r)).collect();
        rows.push(ArmSummary {
            arm: name,
            runs: rs.len(),
            seeds: rs.iter().map(|r| r.seed).collect(),
            val_acc_mean: vm,
            val_acc_std: vs,
            train_acc_mean: mean_std(&col(&|r| r.final_train_acc)).0,
            final_kl_mean: mean_std(&col(&|r| r.final_kl)).0,
            final_ce_mean: mean_std(&col(&|r| r.final_ce)).0,
            val_kl_mean: mean_std(&rs.iter().filter_map(|r| r.val_kl).collect::<Vec<_>>()).0,
            grad_cosine_mean: (!cos.is_empty()).then(|| mean_std(&cos).0),
            diverged: rs.iter().filter(|r| r.diverged.is_some()).count(),
        });
    }
    rows
}

pub fn ablation_csv(rows: &[ArmSummary]) -> String {
    let mut s = String::from(
        "arm,runs,val_acc_mean,val_acc_std,train_acc_mean,final_kl_mean,final_ce_mean,val_kl_mean,grad_cosine_mean,diverged\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.arm,
            r.runs,
            r.val_acc_mean,
            r.val_acc_std,
            r.train_acc_mean,
            r.final_kl_mean,
            r.final_ce_mean,
            r.val_kl_mean,
            crate::experiment::opt(r.grad_cosine_mean),
            r.diverged
        );
    }
    s
}

/// Writes `ablation.csv` and `summary.json` into `dir`. Output depends only on
/// the records and `order`, so re-exporting is byte-stable.
pub fn export_report(records: &[RunRecord], order: &[Arm], dir: &Path) -> LabResult<()> {
    if records.is_empty() {
        return Err(LabError::Other("no run records to report".into()));
    }
    let mut sorted: Vec<&RunRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    let arms = summarize_arms(records, order);
    write_atomic(&dir.join("ablation.csv"), ablation_csv(&arms).as_bytes())?;
    let summary = Summary {
        arms,
        runs: sorted
            .iter()
            .map(|r| RunLine {
                name: &r.name,
                arm: &r.arm,
                seed: r.seed,
                config_hash: &r.config_hash,
                final_val_acc: r.final_val_acc,
                final_train_acc: r.final_train_acc,
                final_kl: r.final_kl,
                diverged: r.diverged.is_some(),
            })
            .collect(),
    };
    write_atomic(
        &dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )
}

/// Every `reports/*/record.json` under `out`, sorted by run name.
pub fn collect_records(out: &Path) -> LabResult<Vec<RunRecord>> {
    let dir = out.join("reports");
    let mut recs = Vec::new();
    let entries = fs::read_dir(&dir).map_err(io_err(dir.display().to_string()))?;
    for e in entries {
        let p = e
            .map_err(io_err(dir.display().to_string()))?
            .path()
            .join("record.json");
        if p.is_file() {
            let text = fs::read_to_string(&p).map_err(io_err(p.display().to_string()))?;
            recs.push(serde_json::from_str::<RunRecord>(&text)?);
        }
    }
    recs.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(recs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::EpochRow;

    fn rec(arm: &str, seed: u64, acc: f64) -> RunRecord {
        RunRecord {
            name: format!("{arm}_s{seed}"),
            arm: arm.into(),
            seed,
            config_hash: "h".into(),
            teacher_hash: "t".into(),
            epochs: vec![EpochRow {
                epoch: 0,
                loss_g: 1.0,
                loss_q: 1.0,
                ce: 1.0,
                kl: 0.5,
                batch_acc: 0.5,
                val_acc: acc,
                crossings_total: 3,
                crossings_gini: 0.1,
                grad_cosine: Some(0.2),
                student_updated: true,
            }],
            initial_val_acc: 0.5,
            final_train_acc: acc,
            final_val_acc: acc,
            final_kl: 0.5,
            final_ce: 1.0,
            val_kl: Some(0.4),
            teacher_train_acc: 1.0,
            teacher_val_acc: 1.0,
            diagnostics: None,
            diverged: None,
            wall_clock_secs: seed as f64,
        }
    }

    #[test]
    fn rows_follow_configured_order() {
        let recs = vec![
            rec("ait", 0, 0.9),
            rec("baseline", 0, 0.8),
            rec("kl_only", 0, 0.7),
            rec("ait", 1, 0.7),
        ];
        let rows = summarize_arms(&recs, &[Arm::Baseline, Arm::KlOnly, Arm::Ait]);
        let names: Vec<&str> = rows.iter().map(|r| r.arm.as_str()).collect();
        assert_eq!(names, ["baseline", "kl_only", "ait"]);
        assert_eq!(rows[2].runs, 2);
        assert!((rows[2].val_acc_mean - 0.8).abs() < 1e-12);
        assert_eq!(rows[0].grad_cosine_mean, Some(0.2));
    }

    #[test]
    fn single_record_single_row_and_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![rec("baseline", 3, 0.8)];
        export_report(&recs, &Arm::ALL, dir.path()).unwrap();
        let a = fs::read(dir.path().join("ablation.csv")).unwrap();
        let j = fs::read(dir.path().join("summary.json")).unwrap();
        assert_eq!(String::from_utf8_lossy(&a).lines().count(), 2);
        export_report(&recs, &Arm::ALL, dir.path()).unwrap();
        assert_eq!(a, fs::read(dir.path().join("ablation.csv")).unwrap());
        assert_eq!(j, fs::read(dir.path().join("summary.json")).unwrap());
        assert!(export_report(&[], &Arm::ALL, dir.path()).is_err());
    }
}
