//! Flat `key=value` experiment configuration.
//!
//! Lines are `section.key=value`; `#` starts a comment; blank lines are ignored.
//! Every key has a default, unknown keys are rejected, and the canonical form
//! (all keys, sorted) is what gets hashed.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;
use zsq_core::gi::GiConfig;
use zsq_core::loss::LossWeights;
use zsq_core::nets::{GeneratorSpec, MlpSpec};
use zsq_core::optim::{OptimizerKind, OptimizerState};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected key=value, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("key {key:?}: cannot parse {value:?}")]
    BadValue { key: String, value: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    GaussianBlobs,
    Concentric,
    GridPatterns,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::GaussianBlobs => "gaussian-blobs",
            DatasetKind::Concentric => "concentric",
            DatasetKind::GridPatterns => "grid-patterns",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub val_per_class: usize,
    /// Within-class standard deviation.
    pub spread: f64,
    /// Distance scale of class centers or rings.
    pub separation: f64,
    /// Standard deviation along shared, class-independent directions.
    pub nuisance: f64,
    pub nuisance_rank: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptKind {
    Sgd,
    SgdNesterov,
    Adam,
    RmsProp,
}

impl OptKind {
    pub fn name(self) -> &'static str {
        match self {
            OptKind::Sgd => "sgd",
            OptKind::SgdNesterov => "sgd_nesterov",
            OptKind::Adam => "adam",
            OptKind::RmsProp => "rmsprop",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerSpec {
    pub kind: OptKind,
    pub lr: f64,
    pub momentum: f64,
}

impl OptimizerSpec {
    pub fn build(&self) -> OptimizerState {
        let kind = match self.kind {
            OptKind::Sgd => OptimizerKind::Sgd {
                momentum: self.momentum,
                nesterov: false,
            },
            OptKind::SgdNesterov => OptimizerKind::nesterov(self.momentum),
            OptKind::Adam => OptimizerKind::adam(),
            OptKind::RmsProp => OptimizerKind::rmsprop(),
        };
        OptimizerState::new(kind, self.lr)
    }
}

/// Experiment arms. Each fixes the student loss mix and whether GI is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    Baseline,
    KlOnly,
    Ait,
    BaselineGi,
    CeOnlyGi,
    KlOnlyHighLr,
    Kd,
}

impl Arm {
    pub const ALL: [Arm; 7] = [
        Arm::Baseline,
        Arm::KlOnly,
        Arm::Ait,
        Arm::BaselineGi,
        Arm::CeOnlyGi,
        Arm::KlOnlyHighLr,
        Arm::Kd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::KlOnly => "kl_only",
            Arm::Ait => "ait",
            Arm::BaselineGi => "baseline_gi",
            Arm::CeOnlyGi => "ce_only_gi",
            Arm::KlOnlyHighLr => "kl_only_high_lr",
            Arm::Kd => "kd",
        }
    }

    pub fn parse(s: &str) -> Option<Arm> {
        Arm::ALL.into_iter().find(|a| a.name() == s)
    }

    /// Student mix δ used by this arm.
    pub fn delta(self, configured: f64) -> f64 {
        match self {
            Arm::Baseline | Arm::BaselineGi | Arm::Kd => configured,
            Arm::KlOnly | Arm::Ait | Arm::KlOnlyHighLr => 1.0,
            Arm::CeOnlyGi => 0.0,
        }
    }

    pub fn uses_gi(self) -> bool {
        matches!(self, Arm::Ait | Arm::BaselineGi | Arm::CeOnlyGi)
    }

    pub fn lr_multiplier(self) -> f64 {
        if self == Arm::KlOnlyHighLr {
            100.0
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagToggles {
    pub cosine: bool,
    pub hessian: bool,
    pub spectrum: bool,
    pub slice: bool,
    pub gi_trace: bool,
    /// Curvature and slice diagnostics run every `every` student epochs.
    pub every: usize,
    pub probes: usize,
    pub lanczos_steps: usize,
    pub slice_points: usize,
    pub probe_batch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub arm: Arm,
    pub dataset: DatasetSpec,
    pub hidden: Vec<usize>,
    pub w_bits: u32,
    pub a_bits: u32,
    /// EMA weight of each new batch in the activation range observers.
    pub observer_momentum: f64,
    pub loss: LossWeights,
    pub optim: OptimizerSpec,
    pub gen_lr: f64,
    pub gen_noise_dim: usize,
    pub gen_hidden: usize,
    pub gen_output_scale: f64,
    pub gen_warmup: usize,
    pub gi: GiConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub teacher_epochs: usize,
    pub teacher_lr: f64,
    pub teacher_batch: usize,
    pub teacher_seed: u64,
    pub kd_lr: f64,
    pub diag: DiagToggles,
    /// Row order of the ablation table.
    pub report_arms: Vec<Arm>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            arm: Arm::Baseline,
            dataset: DatasetSpec {
                kind: DatasetKind::GaussianBlobs,
                classes: 10,
                dim: 16,
                per_class: 1000,
                val_per_class: 500,
                spread: 1.0,
                separation: 8.5,
                nuisance: 30.0,
                nuisance_rank: 4,
                seed: 0,
            },
            hidden: vec![64, 64],
            w_bits: 4,
            a_bits: 4,
            observer_momentum: 0.01,
            loss: LossWeights::default(),
            optim: OptimizerSpec {
                kind: OptKind::SgdNesterov,
                lr: 2e-6,
                momentum: 0.9,
            },
            gen_lr: 1e-3,
            gen_noise_dim: 16,
            gen_hidden: 64,
            gen_output_scale: 3.0,
            gen_warmup: 20,
            gi: GiConfig {
                rho0: 0.001,
                ..GiConfig::default()
            },
            epochs: 120,
            batch_size: 64,
            steps_per_epoch: 50,
            teacher_epochs: 30,
            teacher_lr: 0.05,
            teacher_batch: 64,
            teacher_seed: 0,
            kd_lr: 0.01,
            diag: DiagToggles {
                cosine: true,
                hessian: false,
                spectrum: false,
                slice: false,
                gi_trace: true,
                every: 10,
                probes: 20,
                lanczos_steps: 64,
                slice_points: 21,
                probe_batch: 256,
            },
            report_arms: Arm::ALL.to_vec(),
        }
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

fn join(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = || ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        };
        macro_rules! num {
            ($t:ty) => {
                value.parse::<$t>().map_err(|_| bad())?
            };
        }
        macro_rules! flag {
            () => {
                parse_bool(value).ok_or_else(bad)?
            };
        }
        match key {
            "seed" => self.seed = num!(u64),
            "arm" => self.arm = Arm::parse(value).ok_or_else(bad)?,
            "dataset.kind" => {
                self.dataset.kind = match value {
                    "gaussian-blobs" => DatasetKind::GaussianBlobs,
                    "concentric" => DatasetKind::Concentric,
                    "grid-patterns" => DatasetKind::GridPatterns,
                    _ => return Err(bad()),
                }
            }
            "dataset.classes" => self.dataset.classes = num!(usize),
            "dataset.dim" => self.dataset.dim = num!(usize),
            "dataset.per_class" => self.dataset.per_class = num!(usize),
            "dataset.val_per_class" => self.dataset.val_per_class = num!(usize),
            "dataset.spread" => self.dataset.spread = num!(f64),
            "dataset.separation" => self.dataset.separation = num!(f64),
            "dataset.nuisance" => self.dataset.nuisance = num!(f64),
            "dataset.nuisance_rank" => self.dataset.nuisance_rank = num!(usize),
            "dataset.seed" => self.dataset.seed = num!(u64),
            "model.hidden" => {
                self.hidden = value
                    .split(',')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| bad())?
            }
            "quant.w_bits" => self.w_bits = num!(u32),
            "quant.a_bits" => self.a_bits = num!(u32),
            "quant.observer_momentum" => self.observer_momentum = num!(f64),
            "loss.alpha" => self.loss.alpha = num!(f64),
            "loss.delta" => self.loss.delta = num!(f64),
            "loss.label_smoothing" => self.loss.label_smoothing = num!(f64),
            "loss.temperature" => self.loss.temperature = num!(f64),
            "optim.kind" => {
                self.optim.kind = match value {
                    "sgd" => OptKind::Sgd,
                    "sgd_nesterov" => OptKind::SgdNesterov,
                    "adam" => OptKind::Adam,
                    "rmsprop" => OptKind::RmsProp,
                    _ => return Err(bad()),
                }
            }
            "optim.lr" => self.optim.lr = num!(f64),
            "optim.momentum" => self.optim.momentum = num!(f64),
            "gen.lr" => self.gen_lr = num!(f64),
            "gen.noise_dim" => self.gen_noise_dim = num!(usize),
            "gen.hidden" => self.gen_hidden = num!(usize),
            "gen.output_scale" => self.gen_output_scale = num!(f64),
            "gen.warmup_epochs" => self.gen_warmup = num!(usize),
            "gi.rho0" => self.gi.rho0 = num!(f64),
            "gi.decay_factor" => self.gi.decay_factor = num!(f64),
            "gi.decay_interval" => self.gi.decay_interval = num!(usize),
            "gi.warmup_epochs" => self.gi.warmup_epochs = num!(usize),
            "gi.kappa_cap_warmup" => self.gi.kappa_cap_warmup = num!(f64),
            "gi.search_budget" => self.gi.search_budget = num!(u32),
            "gi.doubling_cap" => self.gi.doubling_cap = num!(u32),
            "gi.constrained" => self.gi.constrained = flag!(),
            "train.epochs" => self.epochs = num!(usize),
            "train.batch_size" => self.batch_size = num!(usize),
            "train.steps_per_epoch" => self.steps_per_epoch = num!(usize),
            "teacher.epochs" => self.teacher_epochs = num!(usize),
            "teacher.lr" => self.teacher_lr = num!(f64),
            "teacher.batch_size" => self.teacher_batch = num!(usize),
            "teacher.seed" => self.teacher_seed = num!(u64),
            "kd.lr" => self.kd_lr = num!(f64),
            "diag.cosine" => self.diag.cosine = flag!(),
            "diag.hessian" => self.diag.hessian = flag!(),
            "diag.spectrum" => self.diag.spectrum = flag!(),
            "diag.slice" => self.diag.slice = flag!(),
            "diag.gi_trace" => self.diag.gi_trace = flag!(),
            "diag.every" => self.diag.every = num!(usize),
            "diag.probes" => self.diag.probes = num!(usize),
            "diag.lanczos_steps" => self.diag.lanczos_steps = num!(usize),
            "diag.slice_points" => self.diag.slice_points = num!(usize),
            "diag.probe_batch" => self.diag.probe_batch = num!(usize),
            "report.arms" => {
                let arms: Option<Vec<Arm>> =
                    value.split(',').map(|a| Arm::parse(a.trim())).collect();
                self.report_arms = arms.filter(|a| !a.is_empty()).ok_or_else(bad)?
            }
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Every key with its current value, sorted by key.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.dataset;
        let g = &self.gi;
        let t = &self.diag;
        let mut v: Vec<(&'static str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("arm", self.arm.name().into()),
            ("dataset.kind", d.kind.name().into()),
            ("dataset.classes", d.classes.to_string()),
            ("dataset.dim", d.dim.to_string()),
            ("dataset.per_class", d.per_class.to_string()),
            ("dataset.val_per_class", d.val_per_class.to_string()),
            ("dataset.spread", d.spread.to_string()),
            ("dataset.separation", d.separation.to_string()),
            ("dataset.nuisance", d.nuisance.to_string()),
            ("dataset.nuisance_rank", d.nuisance_rank.to_string()),
            ("dataset.seed", d.seed.to_string()),
            ("model.hidden", join(&self.hidden)),
            ("quant.w_bits", self.w_bits.to_string()),
            ("quant.a_bits", self.a_bits.to_string()),
            (
                "quant.observer_momentum",
                self.observer_momentum.to_string(),
            ),
            ("loss.alpha", self.loss.alpha.to_string()),
            ("loss.delta", self.loss.delta.to_string()),
            (
                "loss.label_smoothing",
                self.loss.label_smoothing.to_string(),
            ),
            ("loss.temperature", self.loss.temperature.to_string()),
            ("optim.kind", self.optim.kind.name().into()),
            ("optim.lr", self.optim.lr.to_string()),
            ("optim.momentum", self.optim.momentum.to_string()),
            ("gen.lr", self.gen_lr.to_string()),
            ("gen.noise_dim", self.gen_noise_dim.to_string()),
            ("gen.hidden", self.gen_hidden.to_string()),
            ("gen.output_scale", self.gen_output_scale.to_string()),
            ("gen.warmup_epochs", self.gen_warmup.to_string()),
            ("gi.rho0", g.rho0.to_string()),
            ("gi.decay_factor", g.decay_factor.to_string()),
            ("gi.decay_interval", g.decay_interval.to_string()),
            ("gi.warmup_epochs", g.warmup_epochs.to_string()),
            ("gi.kappa_cap_warmup", g.kappa_cap_warmup.to_string()),
            ("gi.search_budget", g.search_budget.to_string()),
            ("gi.doubling_cap", g.doubling_cap.to_string()),
            ("gi.constrained", g.constrained.to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.steps_per_epoch", self.steps_per_epoch.to_string()),
            ("teacher.epochs", self.teacher_epochs.to_string()),
            ("teacher.lr", self.teacher_lr.to_string()),
            ("teacher.batch_size", self.teacher_batch.to_string()),
            ("teacher.seed", self.teacher_seed.to_string()),
            ("kd.lr", self.kd_lr.to_string()),
            ("diag.cosine", t.cosine.to_string()),
            ("diag.hessian", t.hessian.to_string()),
            ("diag.spectrum", t.spectrum.to_string()),
            ("diag.slice", t.slice.to_string()),
            ("diag.gi_trace", t.gi_trace.to_string()),
            ("diag.every", t.every.to_string()),
            ("diag.probes", t.probes.to_string()),
            ("diag.lanczos_steps", t.lanczos_steps.to_string()),
            ("diag.slice_points", t.slice_points.to_string()),
            ("diag.probe_batch", t.probe_batch.to_string()),
            (
                "report.arms",
                self.report_arms
                    .iter()
                    .map(|a| a.name())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
        ];
        v.sort_by(|a, b| a.0.cmp(b.0));
        v
    }

    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Hex SHA-256 of the canonical form.
    pub fn hash(&self) -> String {
        hex_digest(self.canonical().as_bytes())
    }

    /// Hash of the keys that determine the dataset and the teacher only.
    pub fn teacher_hash(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            if k.starts_with("dataset.") || k.starts_with("teacher.") || k == "model.hidden" {
                let _ = writeln!(s, "{k}={v}");
            }
        }
        hex_digest(s.as_bytes())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        let d = &self.dataset;
        if d.classes < 2 || d.dim == 0 || d.per_class == 0 || d.val_per_class == 0 {
            return inv("dataset needs ≥ 2 classes and positive sizes");
        }
        if !(d.spread > 0.0) || !(d.separation > 0.0) {
            return inv("dataset spread and separation must be positive");
        }
        if !(d.nuisance >= 0.0) || d.nuisance_rank > d.dim {
            return inv("nuisance must be nonnegative with rank at most the input dimension");
        }
        if d.kind == DatasetKind::GridPatterns && d.dim < 4 {
            return inv("grid patterns need at least 4 input features");
        }
        if self.w_bits < 2 || self.a_bits < 2 || self.w_bits > 16 || self.a_bits > 16 {
            return inv("bit widths must lie in 2..=16");
        }
        if !(self.observer_momentum > 0.0 && self.observer_momentum < 1.0) {
            return inv("observer momentum must lie in (0, 1)");
        }
        self.loss
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.gi
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.model_spec()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.optim.lr >= 0.0)
            || !(self.gen_lr >= 0.0)
            || !(self.teacher_lr > 0.0)
            || !(self.kd_lr >= 0.0)
        {
            return inv("learning rates must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.optim.momentum) {
            return inv("momentum must lie in [0, 1)");
        }
        if self.batch_size < 2 || self.steps_per_epoch == 0 || self.teacher_batch < 2 {
            return inv("batch sizes must be ≥ 2 and steps positive");
        }
        if self.gen_noise_dim == 0 || self.gen_hidden == 0 || !(self.gen_output_scale > 0.0) {
            return inv("generator widths and scale must be positive");
        }
        let t = &self.diag;
        if t.every == 0
            || t.probes == 0
            || t.lanczos_steps == 0
            || t.slice_points == 0
            || t.probe_batch < 2
        {
            return inv("diagnostic counts must be positive");
        }
        Ok(())
    }

    pub fn model_spec(&self) -> MlpSpec {
        MlpSpec {
            input: self.dataset.dim,
            hidden: self.hidden.clone(),
            classes: self.dataset.classes,
        }
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            noise_dim: self.gen_noise_dim,
            classes: self.dataset.classes,
            hidden: self.gen_hidden,
            output: self.dataset.dim,
            output_scale: self.gen_output_scale,
        }
    }

    /// Loss weights with the arm's δ applied.
    pub fn arm_weights(&self) -> LossWeights {
        LossWeights {
            delta: self.arm.delta(self.loss.delta),
            ..self.loss
        }
    }

    /// Student optimizer with the arm's learning-rate multiplier applied.
    pub fn student_optimizer(&self) -> OptimizerSpec {
        OptimizerSpec {
            lr: self.optim.lr * self.arm.lr_multiplier(),
            ..self.optim
        }
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in d.iter() {
        let _ = write!(s, "{b:02x}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_canonical_text() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::parse(&c.canonical()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn reordering_keeps_hash() {
        let a = ExperimentConfig::parse("gi.rho0=0.02\n# note\narm=ait\n").unwrap();
        let b = ExperimentConfig::parse("arm = ait   # trailing\n\ngi.rho0=0.02").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(matches!(
            ExperimentConfig::parse("gi.rho=1"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse("seed"),
            Err(ConfigError::Syntax { .. })
        ));
        assert!(matches!(
            ExperimentConfig::parse("seed=-1"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            ExperimentConfig::parse("loss.delta=1.5"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse("arm=nope"),
            Err(ConfigError::BadValue { .. })
        ));
    }

    #[test]
    fn arms() {
        let mut c = ExperimentConfig::default();
        c.arm = Arm::Ait;
        assert_eq!(c.arm_weights().delta, 1.0);
        c.arm = Arm::CeOnlyGi;
        assert_eq!(c.arm_weights().delta, 0.0);
        assert!(c.arm.uses_gi());
        c.arm = Arm::KlOnlyHighLr;
        assert!((c.student_optimizer().lr - 100.0 * c.optim.lr).abs() < 1e-15);
        c.arm = Arm::Baseline;
        assert_eq!(c.arm_weights().delta, 0.5);
        assert_eq!(c.arm_weights().alpha, 0.5);
        for a in Arm::ALL {
            assert_eq!(Arm::parse(a.name()), Some(a));
        }
    }

    #[test]
    fn teacher_hash_ignores_student_keys() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.seed = 99;
        b.gi.rho0 = 0.5;
        b.arm = Arm::Kd;
        assert_eq!(a.teacher_hash(), b.teacher_hash());
        b.dataset.seed = 1;
        assert_ne!(a.teacher_hash(), b.teacher_hash());
    }
}
