//! Training loops: supervised pretraining, the joint generator/student
//! zero-shot loop with optional gradient inundation, and real-data distillation.

use alloc::vec;
use alloc::vec::Vec;

use crate::diag::{gini, FlatGradient};
use crate::error::{shape_err, Error, Result};
use crate::gi::{gi_step, plain_step, rho_schedule, GiConfig, GiLayer, LayerUpdateReport};
use crate::graph::{Gradients, Graph, Mode};
use crate::loss::{
    accuracy, bns_input_grads, cross_entropy, kl_divergence, one_hot, student_loss, LossWeights,
    Targets,
};
use crate::nets::Network;
use crate::optim::OptimizerState;
use crate::quant::{count_threshold_crossings, quantize, QuantizedLayerState};
use crate::rng::SeedRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBatch {
    pub samples: Tensor,
    pub labels: Vec<usize>,
}

/// Generator input rows `[noise | onehot(label)]`.
pub fn generator_input(noise: &Tensor, labels: &[usize], classes: usize) -> Result<Tensor> {
    let (b, _) = noise.dims2()?;
    if b != labels.len() {
        return Err(shape_err!("{} noise rows for {} labels", b, labels.len()));
    }
    Tensor::concat_cols(noise, &one_hot(labels, classes)?)
}

/// Runs the generator with batch statistics but without touching its running state.
pub fn generate_samples(
    gen: &Network,
    noise: &Tensor,
    labels: &[usize],
    classes: usize,
) -> Result<SyntheticBatch> {
    let x = generator_input(noise, labels, classes)?;
    let acts = gen.graph.eval_in(&x, Mode::Train)?;
    Ok(SyntheticBatch {
        samples: acts.get(gen.logits).clone(),
        labels: labels.to_vec(),
    })
}

pub fn sample_noise(
    rng: &mut SeedRng,
    batch: usize,
    noise_dim: usize,
    classes: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let noise = Tensor::matrix(
        batch,
        noise_dim,
        (0..batch * noise_dim).map(|_| rng.normal()).collect(),
    )?;
    let labels = (0..batch).map(|_| rng.below(classes)).collect();
    Ok((noise, labels))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorLoss {
    pub value: f64,
    pub ce: f64,
    pub bns: f64,
    /// Gradient with respect to the synthetic samples.
    pub grad_samples: Tensor,
}

/// `(1-α) CE(teacher(x), labels) + α BNS`, teacher in eval mode with batch
/// statistics read at each batch-norm input.
pub fn generator_loss(
    teacher: &Network,
    batch: &SyntheticBatch,
    alpha: f64,
) -> Result<GeneratorLoss> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Invalid("alpha must lie in [0, 1]".into()));
    }
    let acts = teacher.graph.eval(&batch.samples)?;
    let ce = cross_entropy(acts.get(teacher.logits), Targets::Hard(&batch.labels))?;
    let inputs: Vec<&Tensor> = teacher.bn_inputs.iter().map(|&n| acts.get(n)).collect();
    let (bns, bgrads) = bns_input_grads(&inputs, teacher.graph.bn_states())?;
    let mut seeds = vec![(teacher.logits, ce.grad.map(|g| (1.0 - alpha) * g))];
    for (&n, g) in teacher.bn_inputs.iter().zip(bgrads) {
        seeds.push((n, g.map(|v| alpha * v)));
    }
    let grads = teacher.graph.backward_seeded(&acts, &seeds)?;
    let grad_samples = grads
        .input
        .unwrap_or_else(|| Tensor::zeros(batch.samples.shape()));
    Ok(GeneratorLoss {
        value: (1.0 - alpha) * ce.value + alpha * bns,
        ce: ce.value,
        bns,
        grad_samples,
    })
}

/// Settings of the zero-shot loop.
#[derive(Debug, Clone, PartialEq)]
pub struct ZsqConfig {
    pub weights: LossWeights,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub noise_dim: usize,
    pub classes: usize,
    /// Epochs during which only the generator trains.
    pub generator_warmup: usize,
    /// Gradient inundation; `None` trains with plain optimizer steps.
    pub gi: Option<GiConfig>,
    /// Keep per-step CE and KL gradients for the surface diagnostics.
    pub track_gradients: bool,
}

impl ZsqConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0
            || self.steps_per_epoch == 0
            || self.noise_dim == 0
            || self.classes < 2
        {
            return Err(Error::Invalid(
                "batch size, steps, noise width and classes must be positive".into(),
            ));
        }
        if let Some(gi) = &self.gi {
            gi.validate()?;
        }
        Ok(())
    }

    /// GI warm-up covers the `warmup_epochs` that follow the generator warm-up.
    pub fn gi_phase(&self, epoch: usize) -> Option<bool> {
        let gi = self.gi.as_ref()?;
        if epoch < self.generator_warmup {
            return None;
        }
        Some(epoch < self.generator_warmup + gi.warmup_epochs)
    }
}

/// Everything the zero-shot loop mutates.
#[derive(Debug, Clone)]
pub struct ZsqState {
    pub teacher: Network,
    pub student: Network,
    pub generator: Network,
    pub student_opt: OptimizerState,
    pub generator_opt: OptimizerState,
    pub rng: SeedRng,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_g: f64,
    pub loss_q: f64,
    pub ce: f64,
    pub kl: f64,
    /// Student accuracy against the batch labels.
    pub acc: f64,
    pub crossings_total: usize,
    pub crossings_gini: f64,
    pub per_layer_crossings: Vec<usize>,
    /// Mean over steps of cos(g_CE, g_KL); steps with a zero gradient are skipped.
    pub grad_cosine: Option<f64>,
    pub student_updated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub report: LayerUpdateReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochOutput {
    pub metrics: EpochMetrics,
    pub gi_reports: Vec<StepReport>,
    pub grads_ce: Vec<FlatGradient>,
    pub grads_kl: Vec<FlatGradient>,
}

fn snapshot(graph: &Graph, layers: &[GiLayer]) -> Result<Vec<QuantizedLayerState>> {
    layers
        .iter()
        .enumerate()
        .map(|(i, l)| QuantizedLayerState::from_weights(i, graph.param_value(l.param), l.config))
        .collect()
}

/// Codes flipped since `before`, measured under the pre-step quantizer.
fn crossings_since(
    graph: &Graph,
    layers: &[GiLayer],
    before: &[QuantizedLayerState],
) -> Result<Vec<usize>> {
    layers
        .iter()
        .zip(before)
        .map(|(l, b)| {
            let now = quantize(graph.param_value(l.param).data(), &b.params)?;
            count_threshold_crossings(&b.codes, &now)
        })
        .collect()
}

struct StudentStep {
    loss: f64,
    ce: f64,
    kl: f64,
    acc: f64,
    grads: Gradients,
    g_ce: FlatGradient,
    g_kl: FlatGradient,
}

fn student_gradients(
    student: &mut Network,
    teacher_logits: &Tensor,
    x: &Tensor,
    labels: &[usize],
    weights: &LossWeights,
) -> Result<StudentStep> {
    let acts = student.graph.forward(x, Mode::Train)?;
    let logits = acts.get(student.logits);
    let sl = student_loss(logits, teacher_logits, labels, weights)?;
    let acc = accuracy(logits, labels);
    let grads = student
        .graph
        .backward_seeded(&acts, &[(student.logits, sl.grad)])?;
    let gce = student
        .graph
        .backward_seeded(&acts, &[(student.logits, sl.grad_ce)])?;
    let gkl = student
        .graph
        .backward_seeded(&acts, &[(student.logits, sl.grad_kl)])?;
    Ok(StudentStep {
        loss: sl.value,
        ce: sl.ce,
        kl: sl.kl,
        acc,
        grads,
        g_ce: FlatGradient::from_graph(&student.graph, &gce),
        g_kl: FlatGradient::from_graph(&student.graph, &gkl),
    })
}

fn non_finite(what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(alloc::format!("{what} became non-finite")))
    }
}

/// One epoch of joint training: per step a generator update on a fresh batch,
/// then a student update on another fresh batch. During the generator warm-up
/// the student only calibrates its activation observers.
pub fn zsq_epoch(state: &mut ZsqState, cfg: &ZsqConfig) -> Result<EpochOutput> {
    cfg.validate()?;
    let epoch = state.epoch;
    let layers = state.student.quant_layers.clone();
    let train_student = epoch >= cfg.generator_warmup;
    let phase = cfg.gi_phase(epoch);
    let mut per_layer = vec![0usize; layers.len()];
    let mut reports = Vec::new();
    let (mut grads_ce, mut grads_kl) = (Vec::new(), Vec::new());
    let (mut sg, mut sq, mut sce, mut skl, mut sacc) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut cos_sum, mut cos_n) = (0.0, 0usize);

    for step in 0..cfg.steps_per_epoch {
        // generator
        let (noise, labels) =
            sample_noise(&mut state.rng, cfg.batch_size, cfg.noise_dim, cfg.classes)?;
        let gx = generator_input(&noise, &labels, cfg.classes)?;
        let gacts = state.generator.graph.forward(&gx, Mode::Train)?;
        let batch = SyntheticBatch {
            samples: gacts.get(state.generator.logits).clone(),
            labels,
        };
        let gl = generator_loss(&state.teacher, &batch, cfg.weights.alpha)?;
        non_finite("generator loss", gl.value)?;
        let ggrads = state
            .generator
            .graph
            .backward_seeded(&gacts, &[(state.generator.logits, gl.grad_samples)])?;
        plain_step(
            &mut state.generator.graph,
            &ggrads,
            &mut state.generator_opt,
        )?;
        sg += gl.value;

        // student on a fresh batch
        let (noise, labels) =
            sample_noise(&mut state.rng, cfg.batch_size, cfg.noise_dim, cfg.classes)?;
        let batch = generate_samples(&state.generator, &noise, &labels, cfg.classes)?;
        let t_logits = state.teacher.logits(&batch.samples)?;
        let st = student_gradients(
            &mut state.student,
            &t_logits,
            &batch.samples,
            &batch.labels,
            &cfg.weights,
        )?;
        non_finite("student loss", st.loss)?;
        sq += st.loss;
        sce += st.ce;
        skl += st.kl;
        sacc += st.acc;
        if let Ok(Some(c)) = crate::diag::grad_cosine(&st.g_ce, &st.g_kl) {
            cos_sum += c;
            cos_n += 1;
        }
        if cfg.track_gradients {
            grads_ce.push(st.g_ce);
            grads_kl.push(st.g_kl);
        }
        if !train_student {
            continue;
        }
        match (phase, &cfg.gi) {
            (Some(in_warmup), Some(gi)) => {
                let rho = rho_schedule(epoch, gi);
                let reps = gi_step(
                    &mut state.student.graph,
                    &st.grads,
                    &mut state.student_opt,
                    &layers,
                    rho,
                    gi,
                    in_warmup,
                )?;
                for r in reps {
                    per_layer[r.layer] += r.crossings;
                    reports.push(StepReport { step, report: r });
                }
            }
            _ => {
                let before = snapshot(&state.student.graph, &layers)?;
                plain_step(&mut state.student.graph, &st.grads, &mut state.student_opt)?;
                for (acc, c) in per_layer.iter_mut().zip(crossings_since(
                    &state.student.graph,
                    &layers,
                    &before,
                )?) {
                    *acc += c;
                }
            }
        }
    }

    let n = cfg.steps_per_epoch as f64;
    let counts: Vec<f64> = per_layer.iter().map(|&c| c as f64).collect();
    state.epoch += 1;
    Ok(EpochOutput {
        metrics: EpochMetrics {
            epoch,
            loss_g: sg / n,
            loss_q: sq / n,
            ce: sce / n,
            kl: skl / n,
            acc: sacc / n,
            crossings_total: per_layer.iter().sum(),
            crossings_gini: gini(&counts),
            per_layer_crossings: per_layer,
            grad_cosine: (cos_n > 0).then(|| cos_sum / cos_n as f64),
            student_updated: train_student,
        },
        gi_reports: reports,
        grads_ce,
        grads_kl,
    })
}

/// A labelled real-valued dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledData {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn minibatches(&self, rng: &mut SeedRng, batch: usize) -> Result<Vec<(Tensor, Vec<usize>)>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut idx);
        idx.chunks(batch)
            .filter(|c| c.len() > 1)
            .map(|c| {
                Ok((
                    self.x.gather_rows(c)?,
                    c.iter().map(|&i| self.labels[i]).collect(),
                ))
            })
            .collect()
    }
}

/// Eval-mode accuracy of `net` on `data`.
pub fn evaluate(net: &Network, data: &LabeledData) -> Result<f64> {
    Ok(accuracy(&net.logits(&data.x)?, &data.labels))
}

/// One shuffled pass of cross-entropy training; returns (mean loss, mean batch accuracy).
pub fn supervised_epoch(
    net: &mut Network,
    opt: &mut OptimizerState,
    data: &LabeledData,
    batch: usize,
    rng: &mut SeedRng,
) -> Result<(f64, f64)> {
    let batches = data.minibatches(rng, batch)?;
    if batches.is_empty() {
        return Err(Error::Empty(
            "no minibatch with at least two samples".into(),
        ));
    }
    let (mut sl, mut sa) = (0.0, 0.0);
    for (x, y) in &batches {
        let acts = net.graph.forward(x, Mode::Train)?;
        let ce = cross_entropy(acts.get(net.logits), Targets::Hard(y))?;
        non_finite("training loss", ce.value)?;
        sa += accuracy(acts.get(net.logits), y);
        sl += ce.value;
        let grads = net.graph.backward_seeded(&acts, &[(net.logits, ce.grad)])?;
        plain_step(&mut net.graph, &grads, opt)?;
    }
    let n = batches.len() as f64;
    Ok((sl / n, sa / n))
}

/// One epoch of real-data distillation of a full-precision student.
pub fn kd_epoch(
    teacher: &Network,
    student: &mut Network,
    opt: &mut OptimizerState,
    data: &LabeledData,
    weights: &LossWeights,
    batch: usize,
    rng: &mut SeedRng,
    epoch: usize,
    track_gradients: bool,
) -> Result<EpochOutput> {
    let batches = data.minibatches(rng, batch)?;
    if batches.is_empty() {
        return Err(Error::Empty(
            "no minibatch with at least two samples".into(),
        ));
    }
    let (mut sq, mut sce, mut skl, mut sacc) = (0.0, 0.0, 0.0, 0.0);
    let (mut cos_sum, mut cos_n) = (0.0, 0usize);
    let (mut grads_ce, mut grads_kl) = (Vec::new(), Vec::new());
    for (x, y) in &batches {
        let t = teacher.logits(x)?;
        let st = student_gradients(student, &t, x, y, weights)?;
        non_finite("student loss", st.loss)?;
        sq += st.loss;
        sce += st.ce;
        skl += st.kl;
        sacc += st.acc;
        if let Ok(Some(c)) = crate::diag::grad_cosine(&st.g_ce, &st.g_kl) {
            cos_sum += c;
            cos_n += 1;
        }
        if track_gradients {
            grads_ce.push(st.g_ce);
            grads_kl.push(st.g_kl);
        }
        plain_step(&mut student.graph, &st.grads, opt)?;
    }
    let n = batches.len() as f64;
    Ok(EpochOutput {
        metrics: EpochMetrics {
            epoch,
            loss_g: 0.0,
            loss_q: sq / n,
            ce: sce / n,
            kl: skl / n,
            acc: sacc / n,
            crossings_total: 0,
            crossings_gini: 0.0,
            per_layer_crossings: Vec::new(),
            grad_cosine: (cos_n > 0).then(|| cos_sum / cos_n as f64),
            student_updated: true,
        },
        gi_reports: Vec::new(),
        grads_ce,
        grads_kl,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    CrossEntropy,
    Kl,
}

/// A single loss term of the student on a fixed batch, as a function of the flat
/// parameter vector. Activation quantizers are bypassed; weight quantizers stay.
#[derive(Debug, Clone)]
pub struct ProbeObjective {
    net: Network,
    x: Tensor,
    labels: Vec<usize>,
    teacher_logits: Tensor,
    objective: Objective,
    temperature: f64,
}

impl ProbeObjective {
    pub fn new(
        student: &Network,
        batch: &SyntheticBatch,
        teacher_logits: Tensor,
        objective: Objective,
        temperature: f64,
    ) -> Self {
        let mut net = student.clone();
        net.graph.set_activation_quant(false);
        Self {
            net,
            x: batch.samples.clone(),
            labels: batch.labels.clone(),
            teacher_logits,
            objective,
            temperature,
        }
    }

    pub fn theta(&self) -> Vec<f64> {
        self.net.graph.flat_params()
    }

    pub fn dim(&self) -> usize {
        self.net.graph.num_scalars()
    }

    fn head(&self, logits: &Tensor) -> Result<crate::loss::LossOutput> {
        match self.objective {
            Objective::CrossEntropy => cross_entropy(logits, Targets::Hard(&self.labels)),
            Objective::Kl => kl_divergence(logits, &self.teacher_logits, self.temperature),
        }
    }

    pub fn loss(&mut self, theta: &[f64]) -> Result<f64> {
        self.net.graph.set_flat_params(theta)?;
        let acts = self.net.graph.eval(&self.x)?;
        Ok(self.head(acts.get(self.net.logits))?.value)
    }

    pub fn grad(&mut self, theta: &[f64]) -> Result<Vec<f64>> {
        self.net.graph.set_flat_params(theta)?;
        let acts = self.net.graph.eval(&self.x)?;
        let out = self.head(acts.get(self.net.logits))?;
        let g = self
            .net
            .graph
            .backward_seeded(&acts, &[(self.net.logits, out.grad)])?;
        Ok(Graph::flatten_grads(&g))
    }

    /// True when displacing `theta` by `±eps·v̂` changes any weight code.
    pub fn straddles(&self, theta: &[f64], v: &[f64], eps: f64) -> Result<bool> {
        let nv = crate::tensor::norm(v);
        let layout = self.net.graph.layout();
        for l in &self.net.quant_layers {
            let (off, len) = layout[l.param];
            let at = |sign: f64| -> Result<Vec<i32>> {
                let w: Vec<f64> = (off..off + len)
                    .map(|i| theta[i] + sign * eps * v[i] / nv)
                    .collect();
                let shape = self.net.graph.param_value(l.param).shape().to_vec();
                Ok(QuantizedLayerState::from_weights(0, &Tensor::new(shape, w)?, l.config)?.codes)
            };
            if count_threshold_crossings(&at(1.0)?, &at(-1.0)?)? > 0 {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::finite_diff_grad;
    use crate::loss::bns_loss;
    use crate::loss::BatchStats;
    use crate::nets::{build_generator, build_mlp, quantized_student, GeneratorSpec, MlpSpec};
    use crate::optim::OptimizerKind;

    fn mlp() -> MlpSpec {
        MlpSpec {
            input: 4,
            hidden: vec![8, 8],
            classes: 3,
        }
    }

    fn gspec() -> GeneratorSpec {
        GeneratorSpec {
            noise_dim: 5,
            classes: 3,
            hidden: 8,
            output: 4,
            output_scale: 2.0,
        }
    }

    fn setup(seed: u64, lr: f64, glr: f64) -> ZsqState {
        let mut r = SeedRng::new(seed);
        let mut teacher = build_mlp(&mlp(), &mut r).unwrap();
        let x = Tensor::matrix(32, 4, (0..128).map(|_| r.normal()).collect()).unwrap();
        teacher.graph.forward(&x, Mode::Train).unwrap();
        let student = quantized_student(&teacher, &mlp(), 4, 4).unwrap();
        let generator = build_generator(&gspec(), &mut r).unwrap();
        ZsqState {
            teacher,
            student,
            generator,
            student_opt: OptimizerState::new(OptimizerKind::nesterov(0.9), lr),
            generator_opt: OptimizerState::new(OptimizerKind::adam(), glr),
            rng: r.fork(1),
            epoch: 0,
        }
    }

    fn zcfg(gi: Option<GiConfig>) -> ZsqConfig {
        ZsqConfig {
            weights: LossWeights::default(),
            batch_size: 16,
            steps_per_epoch: 4,
            noise_dim: 5,
            classes: 3,
            generator_warmup: 0,
            gi,
            track_gradients: true,
        }
    }

    #[test]
    fn generator_loss_endpoints_and_gradient() {
        let st = setup(1, 0.0, 0.0);
        let mut r = SeedRng::new(5);
        let (noise, labels) = sample_noise(&mut r, 12, 5, 3).unwrap();
        let batch = generate_samples(&st.generator, &noise, &labels, 3).unwrap();
        let a0 = generator_loss(&st.teacher, &batch, 0.0).unwrap();
        let a1 = generator_loss(&st.teacher, &batch, 1.0).unwrap();
        let ah = generator_loss(&st.teacher, &batch, 0.5).unwrap();
        assert!((a0.value - a0.ce).abs() < 1e-15);
        assert!((a1.value - a1.bns).abs() < 1e-15);
        assert!((ah.value - 0.5 * (a0.ce + a1.bns)).abs() < 1e-12);
        // bns from the loss module on the same inputs
        let acts = st.teacher.graph.eval(&batch.samples).unwrap();
        let stats: Vec<BatchStats> = st
            .teacher
            .bn_inputs
            .iter()
            .map(|&n| BatchStats::of(acts.get(n)).unwrap())
            .collect();
        assert!((bns_loss(&stats, st.teacher.graph.bn_states()).unwrap() - a1.bns).abs() < 1e-12);

        let f = |x: &Tensor| {
            let b = SyntheticBatch {
                samples: x.clone(),
                labels: labels.clone(),
            };
            Ok(generator_loss(&st.teacher, &b, 0.5)?.value)
        };
        let fd = finite_diff_grad(f, &batch.samples, 1e-6).unwrap();
        for (a, b) in fd.data().iter().zip(ah.grad_samples.data()) {
            assert!((a - b).abs() <= 1e-5 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn generate_samples_deterministic() {
        let st = setup(2, 0.0, 0.0);
        let noise = Tensor::zeros(&[4, 5]);
        let b = generate_samples(&st.generator, &noise, &[1, 1, 1, 1], 3).unwrap();
        for r in 1..4 {
            assert_eq!(b.samples.row(r), b.samples.row(0));
        }
        let (n2, l2) = sample_noise(&mut SeedRng::new(3), 6, 5, 3).unwrap();
        let (n3, l3) = sample_noise(&mut SeedRng::new(3), 6, 5, 3).unwrap();
        assert_eq!(
            generate_samples(&st.generator, &n2, &l2, 3).unwrap(),
            generate_samples(&st.generator, &n3, &l3, 3).unwrap()
        );
        assert!(generate_samples(&st.generator, &noise, &[0, 1], 3).is_err());
    }

    #[test]
    fn hand_weighted_generator() {
        // one sample, noise 1 wide, 2 classes; hidden blocks see identical rows in
        // a batch of two so batch-norm outputs beta = 0 and the head sees only its bias
        let gs = GeneratorSpec {
            noise_dim: 1,
            classes: 2,
            hidden: 3,
            output: 2,
            output_scale: 1.5,
        };
        let mut g = build_generator(&gs, &mut SeedRng::new(0)).unwrap();
        let b = g.graph.param_by_name("g2.b").unwrap();
        g.graph.set_param(b, Tensor::vector(&[0.3, -0.7])).unwrap();
        let out = generate_samples(&g, &Tensor::filled(&[2, 1], 0.4), &[1, 1], 2).unwrap();
        let expect = [1.5 * libm::tanh(0.3), 1.5 * libm::tanh(-0.7)];
        for r in 0..2 {
            for c in 0..2 {
                assert!((out.samples.get2(r, c) - expect[c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_learning_rate_freezes_student() {
        let mut st = setup(3, 0.0, 0.0);
        let before = st.student.graph.flat_params();
        let out = zsq_epoch(&mut st, &zcfg(None)).unwrap();
        assert_eq!(st.student.graph.flat_params(), before);
        assert_eq!(out.metrics.crossings_total, 0);
        assert!(out.metrics.per_layer_crossings.iter().all(|&c| c == 0));
        assert_eq!(out.grads_ce.len(), 4);
    }

    #[test]
    fn zsq_epoch_deterministic_and_gi_reports() {
        let gi = GiConfig {
            rho0: 0.05,
            warmup_epochs: 1,
            ..Default::default()
        };
        let run = || {
            let mut st = setup(4, 1e-4, 1e-3);
            (0..3)
                .map(|_| zsq_epoch(&mut st, &zcfg(Some(gi))).unwrap())
                .collect::<Vec<_>>()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        for e in &a {
            assert_eq!(e.gi_reports.len(), 4 * 3);
            assert!(e.gi_reports.iter().all(|r| r.report.satisfies_guarantee()));
            let sum: usize = e.gi_reports.iter().map(|r| r.report.crossings).sum();
            assert_eq!(sum, e.metrics.crossings_total);
        }
    }

    #[test]
    fn warmup_leaves_student_alone() {
        let mut st = setup(5, 1e-2, 1e-3);
        let mut cfg = zcfg(None);
        cfg.generator_warmup = 1;
        let before = st.student.graph.flat_params();
        let g0 = st.generator.graph.flat_params();
        let out = zsq_epoch(&mut st, &cfg).unwrap();
        assert!(!out.metrics.student_updated);
        assert_eq!(st.student.graph.flat_params(), before);
        assert_ne!(st.generator.graph.flat_params(), g0);
        let out = zsq_epoch(&mut st, &cfg).unwrap();
        assert!(out.metrics.student_updated);
        assert_ne!(st.student.graph.flat_params(), before);
    }

    #[test]
    fn gi_phases() {
        let mut cfg = zcfg(Some(GiConfig {
            warmup_epochs: 2,
            ..Default::default()
        }));
        cfg.generator_warmup = 3;
        let p: Vec<_> = (0..7).map(|e| cfg.gi_phase(e)).collect();
        assert_eq!(
            p,
            vec![
                None,
                None,
                None,
                Some(true),
                Some(true),
                Some(false),
                Some(false)
            ]
        );
        assert_eq!(zcfg(None).gi_phase(10), None);
    }

    fn data(r: &mut SeedRng, n: usize) -> LabeledData {
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let x = Tensor::matrix(
            n,
            4,
            labels
                .iter()
                .flat_map(|&l| (0..4).map(move |c| if c == l { 3.0 } else { 0.0 }))
                .map(|v| v + 0.3 * r.normal())
                .collect(),
        )
        .unwrap();
        LabeledData { x, labels }
    }

    #[test]
    fn supervised_learns_separable_data() {
        let mut r = SeedRng::new(6);
        let d = data(&mut r, 90);
        let mut net = build_mlp(&mlp(), &mut r).unwrap();
        let mut opt = OptimizerState::new(OptimizerKind::nesterov(0.9), 0.05);
        for _ in 0..20 {
            supervised_epoch(&mut net, &mut opt, &d, 16, &mut r).unwrap();
        }
        assert!(evaluate(&net, &d).unwrap() > 0.99);
    }

    #[test]
    fn kd_self_match_and_frozen() {
        let mut r = SeedRng::new(7);
        let d = data(&mut r, 48);
        let mut teacher = build_mlp(&mlp(), &mut r).unwrap();
        teacher.graph.forward(&d.x, Mode::Train).unwrap();
        let mut student = teacher.clone();
        for st in student.graph.bn_states_mut() {
            st.frozen = true;
        }
        let w = LossWeights {
            delta: 1.0,
            ..Default::default()
        };
        let mut opt = OptimizerState::new(OptimizerKind::sgd(), 0.1);
        let before = student.graph.flat_params();
        let out = kd_epoch(
            &teacher,
            &mut student,
            &mut opt,
            &d,
            &w,
            16,
            &mut r,
            0,
            true,
        )
        .unwrap();
        assert!(out.metrics.loss_q.abs() < 1e-12);
        assert!(out.grads_kl.iter().all(|g| g.norm() < 1e-12));
        assert_eq!(student.graph.flat_params(), before);

        let mut fresh = build_mlp(&mlp(), &mut r).unwrap();
        let mut opt0 = OptimizerState::new(OptimizerKind::sgd(), 0.0);
        let b = fresh.graph.flat_params();
        kd_epoch(
            &teacher,
            &mut fresh,
            &mut opt0,
            &d,
            &LossWeights::default(),
            16,
            &mut r,
            0,
            false,
        )
        .unwrap();
        assert_eq!(fresh.graph.flat_params(), b);
    }

    #[test]
    fn kd_deterministic() {
        let run = || {
            let mut r = SeedRng::new(8);
            let d = data(&mut r, 60);
            let teacher = build_mlp(&mlp(), &mut r).unwrap();
            let mut s = build_mlp(&mlp(), &mut r).unwrap();
            let mut opt = OptimizerState::new(OptimizerKind::nesterov(0.9), 0.01);
            (0..3)
                .map(|e| {
                    kd_epoch(
                        &teacher,
                        &mut s,
                        &mut opt,
                        &d,
                        &LossWeights::default(),
                        16,
                        &mut r,
                        e,
                        false,
                    )
                    .unwrap()
                    .metrics
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn teacher_is_detached() {
        // teacher logits enter the KL as constants: a KL-only epoch leaves every
        // teacher parameter and running statistic untouched
        let mut st = setup(9, 1e-2, 1e-3);
        let t0 = st.teacher.graph.clone();
        let cfg = ZsqConfig {
            weights: LossWeights {
                delta: 1.0,
                ..Default::default()
            },
            ..zcfg(None)
        };
        let out = zsq_epoch(&mut st, &cfg).unwrap();
        assert!(out.grads_kl.iter().any(|g| g.norm() > 0.0));
        assert_eq!(st.teacher.graph, t0);
    }

    #[test]
    fn probe_objective_gradient_matches_fd() {
        let st = setup(10, 0.0, 0.0);
        let mut r = SeedRng::new(3);
        let (noise, labels) = sample_noise(&mut r, 16, 5, 3).unwrap();
        let batch = generate_samples(&st.generator, &noise, &labels, 3).unwrap();
        let t = st.teacher.logits(&batch.samples).unwrap();
        let mut p = ProbeObjective::new(&st.student, &batch, t, Objective::Kl, 1.0);
        let th = p.theta();
        let g = p.grad(&th).unwrap();
        assert_eq!(g.len(), p.dim());
        let v: Vec<f64> = (0..th.len()).map(|_| r.normal()).collect();
        let far = p.straddles(&th, &v, 1.0).unwrap();
        assert!(far);
        assert!(!p.straddles(&th, &v, 1e-14).unwrap());
        assert_eq!(p.loss(&th).unwrap(), p.loss(&th).unwrap());
    }
}
