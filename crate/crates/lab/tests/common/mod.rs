#![allow(dead_code)]

use zsq_lab::ExperimentConfig;

/// Overrides for a run that finishes in well under a second.
pub const TINY: &[(&str, &str)] = &[
    ("dataset.classes", "3"),
    ("dataset.dim", "4"),
    ("dataset.per_class", "40"),
    ("dataset.val_per_class", "20"),
    ("dataset.separation", "8"),
    ("dataset.nuisance", "0"),
    ("dataset.nuisance_rank", "0"),
    ("model.hidden", "8,8"),
    ("train.epochs", "4"),
    ("train.steps_per_epoch", "3"),
    ("train.batch_size", "16"),
    ("gen.warmup_epochs", "1"),
    ("gen.hidden", "8"),
    ("gen.noise_dim", "4"),
    ("gi.warmup_epochs", "1"),
    ("teacher.epochs", "10"),
    ("diag.every", "2"),
    ("diag.probe_batch", "16"),
    ("diag.probes", "3"),
    ("diag.lanczos_steps", "8"),
];

pub fn tiny() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    for (k, v) in TINY {
        c.set(k, v).unwrap();
    }
    c.validate().unwrap();
    c
}

pub fn tiny_args() -> Vec<String> {
    TINY.iter()
        .flat_map(|(k, v)| ["--set".to_string(), format!("{k}={v}")])
        .collect()
}
