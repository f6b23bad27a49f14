//! Grid sweeps over config keys, run in parallel with a shared teacher.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::config::ExperimentConfig;
use crate::dataset::make_dataset;
use crate::experiment::{
    obtain_teacher, run_experiment, write_atomic, write_outputs, LabError, LabResult, RunRecord,
    Teacher,
};

/// One axis of the grid: a config key and the values it takes.
#[derive(Debug, Clone, PartialEq)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<String>,
}

impl GridAxis {
    /// Parses `key=v1,v2,...`.
    pub fn parse(s: &str) -> Result<Self, LabError> {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| LabError::Other(format!("grid axis {s:?} is not key=v1,v2")))?;
        let values: Vec<String> = v
            .split(',')
            .map(|x| x.trim().to_string())
            .filter(|x| !x.is_empty())
            .collect();
        if values.is_empty() {
            return Err(LabError::Other(format!("grid axis {k:?} has no values")));
        }
        Ok(Self {
            key: k.trim().to_string(),
            values,
        })
    }
}

/// Cartesian product of the axes, first axis slowest.
pub fn expand_grid(axes: &[GridAxis]) -> Vec<Vec<(String, String)>> {
    let mut points = vec![Vec::new()];
    for ax in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                ax.values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((ax.key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    points
}

#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub point: usize,
    pub assignments: Vec<(String, String)>,
    pub seed: u64,
    pub record: Option<RunRecord>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointSummary {
    pub point: usize,
    pub assignments: Vec<(String, String)>,
    pub runs: usize,
    pub failed: usize,
    pub val_acc_mean: f64,
    pub val_acc_std: f64,
    pub final_kl_mean: f64,
    pub final_kl_std: f64,
}

/// Thread budget from `ZSQ_THREADS`, else the machine's parallelism.
pub fn thread_budget() -> usize {
    std::env::var("ZSQ_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// One run per grid point and seed (`template.seed .. + repeat`). Failed runs are
/// recorded and the sweep carries on. Results come back in grid order.
pub fn sweep(
    template: &ExperimentConfig,
    axes: &[GridAxis],
    repeat: usize,
    out: Option<&Path>,
    threads: usize,
) -> LabResult<Vec<SweepEntry>> {
    if repeat == 0 {
        return Err(LabError::Other("repeat must be positive".into()));
    }
    let points = expand_grid(axes);
    let mut jobs = Vec::new();
    for (pi, p) in points.iter().enumerate() {
        for r in 0..repeat as u64 {
            let mut cfg = template.clone();
            for (k, v) in p {
                cfg.set(k, v)?;
            }
            cfg.seed = template.seed + r;
            cfg.validate()?;
            jobs.push((pi, p.clone(), cfg));
        }
    }

    // One teacher per distinct dataset/model, trained before the workers start.
    let mut teachers: HashMap<String, (crate::dataset::Dataset, Teacher)> = HashMap::new();
    for (_, _, cfg) in &jobs {
        let h = cfg.teacher_hash();
        if !teachers.contains_key(&h) {
            let ds = make_dataset(&cfg.dataset)?;
            let t = obtain_teacher(cfg, &ds, out)?;
            teachers.insert(h, (ds, t));
        }
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<SweepEntry>>> = Mutex::new(vec![None; jobs.len()]);
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((pi, assignments, cfg)) = jobs.get(i) else {
                    break;
                };
                let (ds, t) = &teachers[&cfg.teacher_hash()];
                let res = run_experiment(cfg, ds, t).and_then(|mut o| {
                    if let Some(out) = out {
                        o.record.name = format!("sweep_p{pi}_{}", o.record.name);
                        write_outputs(out, &mut o, cfg)?;
                    }
                    Ok(o.record)
                });
                let entry = SweepEntry {
                    point: *pi,
                    assignments: assignments.clone(),
                    seed: cfg.seed,
                    error: res.as_ref().err().map(|e| e.to_string()),
                    record: res.ok(),
                };
                results.lock().expect("sweep results lock")[i] = Some(entry);
            });
        }
    });
    let entries: Vec<SweepEntry> = results
        .into_inner()
        .expect("sweep results lock")
        .into_iter()
        .map(|e| e.expect("every job reports"))
        .collect();
    if let Some(out) = out {
        let dir = out.join("reports");
        write_atomic(&dir.join("sweep.csv"), sweep_csv(&entries).as_bytes())?;
        write_atomic(
            &dir.join("sweep_summary.csv"),
            summary_csv(&summarize(&entries)).as_bytes(),
        )?;
    }
    Ok(entries)
}

pub fn summarize(entries: &[SweepEntry]) -> Vec<PointSummary> {
    let mut out: Vec<PointSummary> = Vec::new();
    let npoints = entries.iter().map(|e| e.point + 1).max().unwrap_or(0);
    for p in 0..npoints {
        let es: Vec<&SweepEntry> = entries.iter().filter(|e| e.point == p).collect();
        let recs: Vec<&RunRecord> = es.iter().filter_map(|e| e.record.as_ref()).collect();
        let acc: Vec<f64> = recs.iter().map(|r| r.final_val_acc).collect();
        let kl: Vec<f64> = recs.iter().map(|r| r.final_kl).collect();
        let (am, asd) = mean_std(&acc);
        let (km, ksd) = mean_std(&kl);
        out.push(PointSummary {
            point: p,
            assignments: es
                .first()
                .map(|e| e.assignments.clone())
                .unwrap_or_default(),
            runs: es.len(),
            failed: es.len() - recs.len(),
            val_acc_mean: am,
            val_acc_std: asd,
            final_kl_mean: km,
            final_kl_std: ksd,
        });
    }
    out
}

fn label(a: &[(String, String)]) -> String {
    a.iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(";")
}

pub fn sweep_csv(entries: &[SweepEntry]) -> String {
    let mut s =
        String::from("point,setting,seed,final_val_acc,final_train_acc,final_kl,diverged,error\n");
    for e in entries {
        let r = e.record.as_ref();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            e.point,
            label(&e.assignments),
            e.seed,
            r.map(|r| r.final_val_acc.to_string()).unwrap_or_default(),
            r.map(|r| r.final_train_acc.to_string()).unwrap_or_default(),
            r.map(|r| r.final_kl.to_string()).unwrap_or_default(),
            r.map(|r| r.diverged.is_some()).unwrap_or(false),
            e.error.as_deref().unwrap_or("").replace(',', ";"),
        );
    }
    s
}

pub fn summary_csv(points: &[PointSummary]) -> String {
    let mut s = String::from(
        "point,setting,runs,failed,val_acc_mean,val_acc_std,final_kl_mean,final_kl_std\n",
    );
    for p in points {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            p.point,
            label(&p.assignments),
            p.runs,
            p.failed,
            p.val_acc_mean,
            p.val_acc_std,
            p.final_kl_mean,
            p.final_kl_std
        );
    }
    s
}
