//! Teacher pretraining and end-to-end experiment runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use zsq_core::checkpoint::{decode, encode};
use zsq_core::diag::{
    crossing_histogram, epoch_mean_grad, grad_cosine, hutchinson_trace_screened, hvp, hvp_epsilon,
    inter_epoch_cosine, lanczos_spectrum, loss_slice, slice_grid, FlatGradient, SlicePoint,
    SpectrumEstimate, TraceEstimate,
};
use zsq_core::loss::{kl_divergence, BatchStats};
use zsq_core::nets::{
    build_generator, build_mlp, load_state, quantized_student, state_records, Network,
};
use zsq_core::optim::{OptimizerKind, OptimizerState};
use zsq_core::rng::SeedRng;
use zsq_core::train::{
    evaluate, generate_samples, kd_epoch, sample_noise, supervised_epoch, zsq_epoch, EpochOutput,
    LabeledData, Objective, ProbeObjective, SyntheticBatch, ZsqConfig, ZsqState,
};
use zsq_core::{Mode, Tensor};

use crate::config::{Arm, ConfigError, ExperimentConfig};
use crate::dataset::{make_dataset, Dataset};

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] zsq_core::Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("teacher reached only {:.1}% train accuracy; dataset and model do not fit", 100.0 * .0)]
    WeakTeacher(f64),
    #[error("{0}")]
    Other(String),
}

pub type LabResult<T> = Result<T, LabError>;

pub(crate) fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> LabError {
    let context = context.into();
    move |source| LabError::Io { context, source }
}

/// Writes through a temporary sibling so concurrent readers never see a torn file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> LabResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir.display().to_string()))?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(io_err(tmp.display().to_string()))?;
    fs::rename(&tmp, path).map_err(io_err(path.display().to_string()))
}

#[derive(Debug, Clone)]
pub struct Teacher {
    pub net: Network,
    pub train_acc: f64,
    pub val_acc: f64,
}

/// Recomputes every BN layer's running statistics from the whole of `x`, layer by
/// layer, so eval mode reproduces the full-data normalization exactly.
pub fn finalize_batch_norm(net: &mut Network, x: &Tensor) -> LabResult<()> {
    for i in 0..net.bn_inputs.len() {
        let acts = net.graph.eval_in(x, Mode::Eval)?;
        let st = BatchStats::of(acts.get(net.bn_inputs[i]))?;
        let bn = &mut net.graph.bn_states_mut()[i];
        bn.running_mean = st.mean;
        bn.running_var = st.var;
    }
    Ok(())
}

pub fn pretrain_teacher(cfg: &ExperimentConfig, ds: &Dataset) -> LabResult<Teacher> {
    let mut rng = SeedRng::new(cfg.dataset.seed ^ cfg.teacher_seed.rotate_left(32) ^ 0x7eac_4e52);
    let mut init = rng.fork(1);
    let mut net = build_mlp(&cfg.model_spec(), &mut init)?;
    let mut opt = OptimizerState::new(OptimizerKind::nesterov(0.9), cfg.teacher_lr);
    let mut order = rng.fork(2);
    for _ in 0..cfg.teacher_epochs {
        supervised_epoch(&mut net, &mut opt, &ds.train, cfg.teacher_batch, &mut order)?;
    }
    finalize_batch_norm(&mut net, &ds.train.x)?;
    let train_acc = evaluate(&net, &ds.train)?;
    if train_acc < 0.8 {
        return Err(LabError::WeakTeacher(train_acc));
    }
    let val_acc = evaluate(&net, &ds.val)?;
    Ok(Teacher {
        net,
        train_acc,
        val_acc,
    })
}

pub fn teacher_checkpoint(out: &Path, cfg: &ExperimentConfig) -> PathBuf {
    out.join("checkpoints")
        .join(format!("teacher_{}.zsq", &cfg.teacher_hash()[..16]))
}

pub fn save_network(path: &Path, net: &Network) -> LabResult<()> {
    write_atomic(path, &encode(&state_records(&net.graph)))
}

pub fn load_teacher(path: &Path, cfg: &ExperimentConfig, ds: &Dataset) -> LabResult<Teacher> {
    let bytes = fs::read(path).map_err(io_err(path.display().to_string()))?;
    let mut net = build_mlp(&cfg.model_spec(), &mut SeedRng::new(0))?;
    load_state(&mut net.graph, &decode(&bytes)?)?;
    Ok(Teacher {
        train_acc: evaluate(&net, &ds.train)?,
        val_acc: evaluate(&net, &ds.val)?,
        net,
    })
}

/// Loads the cached teacher for this dataset and model, training and saving it first if absent.
pub fn obtain_teacher(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    out: Option<&Path>,
) -> LabResult<Teacher> {
    let Some(out) = out else {
        return pretrain_teacher(cfg, ds);
    };
    let path = teacher_checkpoint(out, cfg);
    if path.exists() {
        return load_teacher(&path, cfg, ds);
    }
    let t = pretrain_teacher(cfg, ds)?;
    save_network(&path, &t.net)?;
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss_g: f64,
    pub loss_q: f64,
    pub ce: f64,
    pub kl: f64,
    pub batch_acc: f64,
    pub val_acc: f64,
    pub crossings_total: usize,
    pub crossings_gini: f64,
    pub grad_cosine: Option<f64>,
    pub student_updated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GiRow {
    pub epoch: usize,
    pub step: usize,
    pub layer: usize,
    pub warmup: bool,
    pub kappa: f64,
    pub crossings: usize,
    pub target: f64,
    pub dim: usize,
    pub doublings: u32,
    pub search_steps: u32,
    pub capped: bool,
    pub zero_grad: bool,
}

impl GiRow {
    pub fn guaranteed(&self) -> bool {
        self.target <= 0.0 || self.crossings as f64 > self.target || self.capped || self.zero_grad
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub arm: String,
    pub seed: u64,
    pub config_hash: String,
    pub teacher_hash: String,
    pub epochs: Vec<EpochRow>,
    pub initial_val_acc: f64,
    pub final_train_acc: f64,
    pub final_val_acc: f64,
    /// KL and CE of the last student epoch on its training batches.
    pub final_kl: f64,
    pub final_ce: f64,
    /// Teacher-to-student KL on the validation set; absent when the student diverged.
    pub val_kl: Option<f64>,
    pub teacher_train_acc: f64,
    pub teacher_val_acc: f64,
    /// Relative path of the diagnostics JSON under the output root.
    pub diagnostics: Option<String>,
    pub diverged: Option<String>,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DiagnosticsReport {
    /// Per-epoch series keyed by name; `None` where nothing was measured.
    pub series: BTreeMap<String, Vec<Option<f64>>>,
    pub curvature_epochs: Vec<usize>,
    pub probe_batch: usize,
    pub flagged_probes: usize,
}

impl DiagnosticsReport {
    fn put(&mut self, name: &str, epoch: usize, v: Option<f64>) {
        let s = self.series.entry(name.to_string()).or_default();
        if s.len() <= epoch {
            s.resize(epoch + 1, None);
        }
        s[epoch] = v;
    }

    fn pad(&mut self, epochs: usize) {
        for s in self.series.values_mut() {
            s.resize(epochs, None);
        }
    }

    pub fn get(&self, name: &str) -> &[Option<f64>] {
        self.series.get(name).map_or(&[], |v| v.as_slice())
    }

    /// Median of the measured entries of a series.
    pub fn median(&self, name: &str) -> Option<f64> {
        let mut v: Vec<f64> = self.get(name).iter().flatten().copied().collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(|a, b| a.total_cmp(b));
        let n = v.len();
        Some(if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumRow {
    pub epoch: usize,
    pub objective: &'static str,
    pub ritz: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceCurve {
    pub epoch: usize,
    pub ce: Vec<SlicePoint>,
    pub kl: Vec<SlicePoint>,
    pub g_hat_ce: f64,
    pub g_hat_kl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub record: RunRecord,
    pub gi: Vec<GiRow>,
    pub diagnostics: DiagnosticsReport,
    pub spectra: Vec<SpectrumRow>,
    pub slices: Vec<SliceCurve>,
    /// Per-layer mean crossings per step at curvature epochs.
    pub crossings: Vec<(usize, Vec<f64>)>,
    pub student: Network,
}

struct Probe {
    batch: SyntheticBatch,
    teacher_logits: Tensor,
}

fn synthetic_probe(
    generator: &Network,
    teacher: &Network,
    cfg: &ExperimentConfig,
    seed: u64,
) -> LabResult<Probe> {
    let mut r = SeedRng::new(seed);
    let k = cfg.dataset.classes;
    let (noise, labels) = sample_noise(&mut r, cfg.diag.probe_batch, cfg.gen_noise_dim, k)?;
    let batch = generate_samples(generator, &noise, &labels, k)?;
    let teacher_logits = teacher.logits(&batch.samples)?;
    Ok(Probe {
        batch,
        teacher_logits,
    })
}

fn real_probe(data: &LabeledData, teacher: &Network, size: usize, seed: u64) -> LabResult<Probe> {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    SeedRng::new(seed).shuffle(&mut idx);
    idx.truncate(size.min(data.len()));
    let samples = data.x.gather_rows(&idx)?;
    let labels = idx.iter().map(|&i| data.labels[i]).collect();
    let teacher_logits = teacher.logits(&samples)?;
    Ok(Probe {
        batch: SyntheticBatch { samples, labels },
        teacher_logits,
    })
}

struct Curvature {
    trace: Option<TraceEstimate>,
    spectrum: Option<SpectrumEstimate>,
    slice: Option<(Vec<SlicePoint>, f64)>,
}

fn curvature(
    student: &Network,
    probe: &Probe,
    objective: Objective,
    cfg: &ExperimentConfig,
    seed: u64,
    mean_grad: Option<&FlatGradient>,
) -> LabResult<Curvature> {
    let d = &cfg.diag;
    let mut obj = ProbeObjective::new(
        student,
        &probe.batch,
        probe.teacher_logits.clone(),
        objective,
        cfg.loss.temperature,
    );
    let screen = obj.clone();
    let theta = obj.theta();
    let dim = obj.dim();
    let eps = hvp_epsilon(&theta);
    let trace = if d.hessian {
        Some(hutchinson_trace_screened(
            |v| hvp(&mut |t| obj.grad(t), &theta, v, eps),
            |v| !screen.straddles(&theta, v, eps).unwrap_or(true),
            dim,
            d.probes,
            seed,
            5,
        )?)
    } else {
        None
    };
    let spectrum = if d.spectrum || d.slice {
        Some(lanczos_spectrum(
            |v| hvp(&mut |t| obj.grad(t), &theta, v, eps),
            dim,
            d.lanczos_steps.min(dim),
            seed ^ 0x5bd1,
        )?)
    } else {
        None
    };
    let slice = match (&spectrum, mean_grad) {
        (Some(sp), Some(g)) if d.slice => {
            let g_hat = zsq_core::tensor::dot(&g.values, &sp.top_vector);
            let pts = loss_slice(
                |t| obj.loss(t),
                &theta,
                &sp.top_vector,
                g_hat,
                &slice_grid(d.slice_points),
            )?;
            Some((pts, g_hat))
        }
        _ => None,
    };
    Ok(Curvature {
        trace,
        spectrum,
        slice,
    })
}

fn is_curvature_epoch(cfg: &ExperimentConfig, first: usize, epoch: usize) -> bool {
    epoch >= first && ((epoch - first) % cfg.diag.every == 0 || epoch + 1 == cfg.epochs)
}

/// Per-epoch diagnostics bookkeeping shared by the zero-shot and KD loops.
struct DiagState {
    report: DiagnosticsReport,
    prev_ce: Option<FlatGradient>,
    prev_kl: Option<FlatGradient>,
    spectra: Vec<SpectrumRow>,
    slices: Vec<SliceCurve>,
    seed: u64,
}

impl DiagState {
    fn observe(
        &mut self,
        cfg: &ExperimentConfig,
        epoch: usize,
        out: &EpochOutput,
        student: &Network,
        probe: Option<&Probe>,
        curvature_now: bool,
    ) -> LabResult<()> {
        let r = &mut self.report;
        let (mut mean_ce, mut mean_kl) = (None, None);
        if !out.grads_ce.is_empty() {
            let ce = epoch_mean_grad(&out.grads_ce)?;
            let kl = epoch_mean_grad(&out.grads_kl)?;
            if cfg.diag.cosine {
                r.put("cosine_ce_kl", epoch, out.metrics.grad_cosine);
                r.put("cosine_ce_kl_epoch_mean", epoch, grad_cosine(&ce, &kl)?);
                r.put(
                    "inter_epoch_cosine_ce",
                    epoch,
                    inter_epoch_cosine(&ce, self.prev_ce.as_ref())?,
                );
                r.put(
                    "inter_epoch_cosine_kl",
                    epoch,
                    inter_epoch_cosine(&kl, self.prev_kl.as_ref())?,
                );
            }
            self.prev_ce = Some(ce.clone());
            self.prev_kl = Some(kl.clone());
            mean_ce = Some(ce);
            mean_kl = Some(kl);
        }
        let want = cfg.diag.hessian || cfg.diag.spectrum || cfg.diag.slice;
        let Some(probe) = probe.filter(|_| curvature_now && want) else {
            return Ok(());
        };
        let seed = self.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9);
        let ce = curvature(
            student,
            probe,
            Objective::CrossEntropy,
            cfg,
            seed,
            mean_ce.as_ref(),
        )?;
        let kl = curvature(student, probe, Objective::Kl, cfg, seed, mean_kl.as_ref())?;
        let r = &mut self.report;
        r.curvature_epochs.push(epoch);
        for (name, c) in [("ce", &ce), ("kl", &kl)] {
            if let Some(t) = &c.trace {
                r.put(&format!("trace_{name}"), epoch, Some(t.mean));
                r.put(&format!("trace_{name}_stderr"), epoch, Some(t.stderr));
                r.flagged_probes += t.flagged;
            }
            if let Some(sp) = &c.spectrum {
                r.put(
                    &format!("top_eigenvalue_{name}"),
                    epoch,
                    sp.ritz.first().copied(),
                );
                if cfg.diag.spectrum {
                    self.spectra.push(SpectrumRow {
                        epoch,
                        objective: name,
                        ritz: sp.ritz.clone(),
                    });
                }
            }
        }
        if let (Some((pce, gce)), Some((pkl, gkl))) = (ce.slice, kl.slice) {
            self.slices.push(SliceCurve {
                epoch,
                ce: pce,
                kl: pkl,
                g_hat_ce: gce,
                g_hat_kl: gkl,
            });
        }
        Ok(())
    }
}

fn kl_on(student: &Network, teacher: &Network, data: &LabeledData, t: f64) -> LabResult<f64> {
    Ok(kl_divergence(&student.logits(&data.x)?, &teacher.logits(&data.x)?, t)?.value)
}

/// Accuracy, or `None` with the divergence noted when the forward pass fails.
fn eval_or_flag(net: &Network, data: &LabeledData, diverged: &mut Option<String>) -> Option<f64> {
    match evaluate(net, data) {
        Ok(a) => Some(a),
        Err(e) => {
            diverged.get_or_insert_with(|| e.to_string());
            None
        }
    }
}

pub fn run_name(cfg: &ExperimentConfig) -> String {
    format!("{}_s{}", cfg.arm.name(), cfg.seed)
}

/// Runs one arm end to end in memory. A divergence ends training early and is
/// recorded in the returned record instead of failing the run.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    teacher: &Teacher,
) -> LabResult<RunOutcome> {
    cfg.validate()?;
    let t0 = Instant::now();
    let spec = cfg.model_spec();
    let mut student = quantized_student(&teacher.net, &spec, cfg.w_bits, cfg.a_bits)?;
    for slot in student.graph.quant_slots_mut() {
        slot.observer.momentum = cfg.observer_momentum;
    }
    let initial_val_acc = evaluate(&student, &ds.val)?;
    let mut root = SeedRng::new(cfg.seed);
    let mut gen_rng = root.fork(1);
    let loop_rng = root.fork(2);
    let diag_seed = root.fork(3).next_u64();
    let track = cfg.diag.cosine || cfg.diag.slice;
    let weights = cfg.arm_weights();

    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut gi = Vec::new();
    let mut crossings = Vec::new();
    let mut diverged = None;
    let mut diag = DiagState {
        report: DiagnosticsReport {
            probe_batch: cfg.diag.probe_batch,
            ..Default::default()
        },
        prev_ce: None,
        prev_kl: None,
        spectra: Vec::new(),
        slices: Vec::new(),
        seed: diag_seed,
    };

    if cfg.arm == Arm::Kd {
        let opt_spec = crate::config::OptimizerSpec {
            lr: cfg.kd_lr,
            ..cfg.optim
        };
        let mut opt = opt_spec.build();
        let mut rng = loop_rng;
        let probe = real_probe(&ds.train, &teacher.net, cfg.diag.probe_batch, diag_seed)?;
        for epoch in 0..cfg.epochs {
            let out = match kd_epoch(
                &teacher.net,
                &mut student,
                &mut opt,
                &ds.train,
                &weights,
                cfg.batch_size,
                &mut rng,
                epoch,
                track,
            ) {
                Ok(o) => o,
                Err(e) => {
                    diverged = Some(e.to_string());
                    break;
                }
            };
            let Some(acc) = eval_or_flag(&student, &ds.val, &mut diverged) else {
                break;
            };
            rows.push(epoch_row(&out, acc));
            let now = is_curvature_epoch(cfg, 0, epoch);
            diag.observe(cfg, epoch, &out, &student, Some(&probe), now)?;
        }
    } else {
        let generator = build_generator(&cfg.generator_spec(), &mut gen_rng)?;
        let mut state = ZsqState {
            teacher: teacher.net.clone(),
            student,
            generator,
            student_opt: cfg.student_optimizer().build(),
            generator_opt: OptimizerState::new(OptimizerKind::adam(), cfg.gen_lr),
            rng: loop_rng,
            epoch: 0,
        };
        let zcfg = ZsqConfig {
            weights,
            batch_size: cfg.batch_size,
            steps_per_epoch: cfg.steps_per_epoch,
            noise_dim: cfg.gen_noise_dim,
            classes: cfg.dataset.classes,
            generator_warmup: cfg.gen_warmup,
            gi: cfg.arm.uses_gi().then_some(cfg.gi),
            track_gradients: track,
        };
        let mut probe = None;
        for epoch in 0..cfg.epochs {
            if probe.is_none() && epoch >= cfg.gen_warmup {
                probe = Some(synthetic_probe(
                    &state.generator,
                    &state.teacher,
                    cfg,
                    diag_seed,
                )?);
            }
            let out = match zsq_epoch(&mut state, &zcfg) {
                Ok(o) => o,
                Err(e) => {
                    diverged = Some(e.to_string());
                    break;
                }
            };
            let in_warmup = zcfg.gi_phase(epoch).unwrap_or(false);
            for s in &out.gi_reports {
                let r = &s.report;
                gi.push(GiRow {
                    epoch,
                    step: s.step,
                    layer: r.layer,
                    warmup: in_warmup,
                    kappa: r.kappa,
                    crossings: r.crossings,
                    target: r.target,
                    dim: r.dim,
                    doublings: r.doublings,
                    search_steps: r.search_steps,
                    capped: r.capped,
                    zero_grad: r.zero_grad,
                });
            }
            let Some(acc) = eval_or_flag(&state.student, &ds.val, &mut diverged) else {
                break;
            };
            rows.push(epoch_row(&out, acc));
            let now = out.metrics.student_updated && is_curvature_epoch(cfg, cfg.gen_warmup, epoch);
            if now {
                let layers = state.student.quant_layers.len();
                let hist = if out.gi_reports.is_empty() {
                    let n = cfg.steps_per_epoch as f64;
                    out.metrics
                        .per_layer_crossings
                        .iter()
                        .map(|&c| c as f64 / n)
                        .collect()
                } else {
                    let reps: Vec<_> = out.gi_reports.iter().map(|s| s.report).collect();
                    let h = crossing_histogram(&reps, layers)?;
                    diag.report
                        .put("crossings_top3_share", epoch, Some(h.top3_share));
                    h.per_layer_mean
                };
                crossings.push((epoch, hist));
            }
            diag.report
                .put("crossings_gini", epoch, Some(out.metrics.crossings_gini));
            diag.observe(cfg, epoch, &out, &state.student, probe.as_ref(), now)?;
        }
        student = state.student;
    }

    diag.report.pad(rows.len());
    let last = rows.last();
    let record = RunRecord {
        name: run_name(cfg),
        arm: cfg.arm.name().to_string(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        teacher_hash: cfg.teacher_hash(),
        initial_val_acc,
        final_train_acc: eval_or_flag(&student, &ds.train, &mut diverged).unwrap_or(0.0),
        final_val_acc: eval_or_flag(&student, &ds.val, &mut diverged).unwrap_or(0.0),
        final_kl: last.map_or(f64::NAN, |r| r.kl),
        final_ce: last.map_or(f64::NAN, |r| r.ce),
        val_kl: kl_on(&student, &teacher.net, &ds.val, cfg.loss.temperature)
            .ok()
            .filter(|v| v.is_finite()),
        teacher_train_acc: teacher.train_acc,
        teacher_val_acc: teacher.val_acc,
        diagnostics: None,
        diverged,
        wall_clock_secs: t0.elapsed().as_secs_f64(),
        epochs: rows,
    };
    Ok(RunOutcome {
        record,
        gi,
        diagnostics: diag.report,
        spectra: diag.spectra,
        slices: diag.slices,
        crossings,
        student,
    })
}

fn epoch_row(out: &EpochOutput, val_acc: f64) -> EpochRow {
    let m = &out.metrics;
    EpochRow {
        epoch: m.epoch,
        loss_g: m.loss_g,
        loss_q: m.loss_q,
        ce: m.ce,
        kl: m.kl,
        batch_acc: m.acc,
        val_acc,
        crossings_total: m.crossings_total,
        crossings_gini: m.crossings_gini,
        grad_cosine: m.grad_cosine,
        student_updated: m.student_updated,
    }
}

pub(crate) fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(rows: &[EpochRow]) -> String {
    let mut s = String::from(
        "epoch,loss_g,loss_q,ce,kl,batch_acc,val_acc,crossings_total,crossings_gini,grad_cosine,student_updated\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.loss_g,
            r.loss_q,
            r.ce,
            r.kl,
            r.batch_acc,
            r.val_acc,
            r.crossings_total,
            r.crossings_gini,
            opt(r.grad_cosine),
            r.student_updated
        );
    }
    s
}

pub fn gi_csv(rows: &[GiRow]) -> String {
    let mut s = String::from("epoch,step,layer,warmup,kappa,crossings,target,dim,doublings,search_steps,capped,zero_grad\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.step,
            r.layer,
            r.warmup,
            r.kappa,
            r.crossings,
            r.target,
            r.dim,
            r.doublings,
            r.search_steps,
            r.capped,
            r.zero_grad
        );
    }
    s
}

fn series_csv(report: &DiagnosticsReport, names: &[&str], epochs: usize) -> String {
    let mut s = String::from("epoch");
    for n in names {
        s.push(',');
        s.push_str(n);
    }
    s.push('\n');
    for e in 0..epochs {
        s.push_str(&e.to_string());
        for n in names {
            s.push(',');
            s.push_str(&opt(report.get(n).get(e).copied().flatten()));
        }
        s.push('\n');
    }
    s
}

/// Writes reports, diagnostics and the student checkpoint under `out`.
pub fn write_outputs(
    out: &Path,
    outcome: &mut RunOutcome,
    cfg: &ExperimentConfig,
) -> LabResult<()> {
    let name = outcome.record.name.clone();
    let reports = out.join("reports").join(&name);
    let diag = out.join("diag").join(&name);
    let epochs = outcome.record.epochs.len();
    write_atomic(
        &reports.join("metrics.csv"),
        metrics_csv(&outcome.record.epochs).as_bytes(),
    )?;
    if cfg.diag.gi_trace && cfg.arm.uses_gi() {
        write_atomic(&reports.join("gi.csv"), gi_csv(&outcome.gi).as_bytes())?;
    }
    write_atomic(&reports.join("config.txt"), cfg.canonical().as_bytes())?;

    let d = &outcome.diagnostics;
    if cfg.diag.cosine {
        let names = [
            "cosine_ce_kl",
            "cosine_ce_kl_epoch_mean",
            "inter_epoch_cosine_ce",
            "inter_epoch_cosine_kl",
        ];
        write_atomic(
            &diag.join("cosine.csv"),
            series_csv(d, &names, epochs).as_bytes(),
        )?;
    }
    if cfg.diag.hessian {
        let names = ["trace_ce", "trace_ce_stderr", "trace_kl", "trace_kl_stderr"];
        let mut s = series_csv(d, &names, epochs);
        // only the epochs that were measured
        let keep: Vec<String> = s
            .lines()
            .enumerate()
            .filter(|(i, _)| *i == 0 || d.curvature_epochs.contains(&(i - 1)))
            .map(|(_, l)| l.to_string())
            .collect();
        s = keep.join("\n") + "\n";
        write_atomic(&diag.join("hessian_trace.csv"), s.as_bytes())?;
    }
    if cfg.diag.spectrum {
        let mut s = String::from("epoch,objective,rank,eigenvalue\n");
        for row in &outcome.spectra {
            for (i, v) in row.ritz.iter().enumerate() {
                let _ = writeln!(s, "{},{},{},{}", row.epoch, row.objective, i, v);
            }
        }
        write_atomic(&diag.join("spectrum.csv"), s.as_bytes())?;
    }
    for c in &outcome.slices {
        let mut s = format!(
            "# g_hat_ce={} g_hat_kl={}\nk,loss_ce,loss_kl\n",
            c.g_hat_ce, c.g_hat_kl
        );
        for (a, b) in c.ce.iter().zip(&c.kl) {
            let _ = writeln!(s, "{},{},{}", a.k, opt(a.loss), opt(b.loss));
        }
        write_atomic(
            &diag.join(format!("slice_epoch{}.csv", c.epoch)),
            s.as_bytes(),
        )?;
    }
    if cfg.diag.gi_trace {
        for (epoch, hist) in &outcome.crossings {
            let mut s = String::from("layer,mean_crossings\n");
            for (l, v) in hist.iter().enumerate() {
                let _ = writeln!(s, "{l},{v}");
            }
            write_atomic(
                &diag.join(format!("crossings_epoch{epoch}.csv")),
                s.as_bytes(),
            )?;
        }
    }
    let djson = serde_json::to_string_pretty(d)?;
    write_atomic(&diag.join("diagnostics.json"), djson.as_bytes())?;
    outcome.record.diagnostics = Some(format!("diag/{name}/diagnostics.json"));
    save_network(
        &out.join("checkpoints").join(format!("{name}_student.zsq")),
        &outcome.student,
    )?;
    let rjson = serde_json::to_string_pretty(&outcome.record)?;
    write_atomic(&reports.join("record.json"), rjson.as_bytes())
}

/// Dataset, cached teacher, run and outputs in one call.
pub fn run_to_dir(cfg: &ExperimentConfig, out: &Path) -> LabResult<RunOutcome> {
    let ds = make_dataset(&cfg.dataset)?;
    let teacher = obtain_teacher(cfg, &ds, Some(out))?;
    let mut outcome = run_experiment(cfg, &ds, &teacher)?;
    write_outputs(out, &mut outcome, cfg)?;
    Ok(outcome)
}
