use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use zsq_lab::config::{Arm, ExperimentConfig};
use zsq_lab::dataset::{make_dataset, to_csv};
use zsq_lab::experiment::{obtain_teacher, run_to_dir, teacher_checkpoint, write_atomic};
use zsq_lab::report::{collect_records, export_report};
use zsq_lab::selftest;
use zsq_lab::sweep::{summarize, summary_csv, sweep, thread_budget, GridAxis};

#[derive(Parser)]
#[command(name = "zsq", about = "Zero-shot quantization lab")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (flat key=value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    arm: Option<String>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Verb {
    /// Generate the dataset and write it as CSV.
    Dataset(Common),
    /// Train (or load) the full-precision teacher.
    Pretrain(Common),
    /// Run one experiment arm.
    Run(Common),
    /// Run a grid of settings, `repeat` seeds each.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Grid axis `key=v1,v2,...`; repeatable.
        #[arg(long = "grid", required = true)]
        grid: Vec<String>,
        #[arg(long, default_value_t = 1)]
        repeat: usize,
    },
    /// Aggregate every run under --out into ablation.csv and summary.json.
    Report(Common),
    /// Run the built-in oracle suites.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set {kv:?} is not key=value"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(a) = &c.arm {
        cfg.arm = Arm::parse(a).with_context(|| format!("unknown arm {a:?}"))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn dataset(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let ds = make_dataset(&cfg.dataset)?;
    let dir = c.out.join("reports").join("dataset");
    write_atomic(&dir.join("train.csv"), to_csv(&ds.train).as_bytes())?;
    write_atomic(&dir.join("val.csv"), to_csv(&ds.val).as_bytes())?;
    println!(
        "{}: {} train / {} val samples, {} classes, dim {} -> {}",
        cfg.dataset.kind.name(),
        ds.train.len(),
        ds.val.len(),
        cfg.dataset.classes,
        cfg.dataset.dim,
        dir.display()
    );
    Ok(())
}

fn pretrain(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let ds = make_dataset(&cfg.dataset)?;
    let t = obtain_teacher(&cfg, &ds, Some(&c.out))?;
    println!(
        "teacher: train {} val {} -> {}",
        pct(t.train_acc),
        pct(t.val_acc),
        teacher_checkpoint(&c.out, &cfg).display()
    );
    Ok(())
}

fn run(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let o = run_to_dir(&cfg, &c.out)?;
    let r = &o.record;
    println!(
        "{}: val {} (start {}) train {} kl {:.5} in {:.1}s  [config {}]",
        r.name,
        pct(r.final_val_acc),
        pct(r.initial_val_acc),
        pct(r.final_train_acc),
        r.final_kl,
        r.wall_clock_secs,
        &r.config_hash[..12]
    );
    if let Some(d) = &r.diverged {
        bail!("run diverged: {d}");
    }
    Ok(())
}

fn do_sweep(c: &Common, grid: &[String], repeat: usize) -> Result<()> {
    let cfg = load_config(c)?;
    let axes = grid
        .iter()
        .map(|g| GridAxis::parse(g))
        .collect::<Result<Vec<_>, _>>()?;
    let entries = sweep(&cfg, &axes, repeat, Some(&c.out), thread_budget())?;
    print!("{}", summary_csv(&summarize(&entries)));
    let failed = entries.iter().filter(|e| e.error.is_some()).count();
    if failed > 0 {
        eprintln!(
            "{failed} of {} runs failed; see reports/sweep.csv",
            entries.len()
        );
    }
    Ok(())
}

fn report(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let recs = collect_records(&c.out)?;
    let dir = c.out.join("reports");
    export_report(&recs, &cfg.report_arms, &dir)?;
    print!("{}", std::fs::read_to_string(dir.join("ablation.csv"))?);
    Ok(())
}

fn run_selftest(seed: u64) -> bool {
    let mut ok = true;
    for c in selftest::run_all(seed) {
        println!(
            "{} {:<24} {:>7.2}s  {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.seconds,
            c.detail
        );
        ok &= c.passed;
    }
    ok
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.verb {
        Verb::Dataset(c) => dataset(c),
        Verb::Pretrain(c) => pretrain(c),
        Verb::Run(c) => run(c),
        Verb::Sweep {
            common,
            grid,
            repeat,
        } => do_sweep(common, grid, *repeat),
        Verb::Report(c) => report(c),
        Verb::Selftest { seed } => {
            return if run_selftest(*seed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
