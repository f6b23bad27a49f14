//! Static computation graphs with reverse-mode differentiation.
//!
//! Nodes are appended in topological order (every input id is smaller than
//! the node's own id), so evaluation walks the node list forward and the
//! backward pass walks it in reverse. Accumulation order is fixed, which keeps
//! seeded runs bit-reproducible.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::quant::{
    dequantize_scalar, quant_params_widened, quantize_scalar, ActivationObserver, AffineParams,
    QuantConfig, RangeSource,
};
use crate::tensor::{matmul, matmul_at, matmul_bt, Tensor};

pub type NodeId = usize;
pub type ParamId = usize;

/// Batch-norm running-statistic momentum: `running <- (1-m) running + m batch`.
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch-norm, running stats and activation observers update.
    Train,
    /// Running statistics; nothing is updated.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input,
    Param(ParamId),
    /// `x[B,in] * w[in,out] + b[out]`.
    Dense {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Relu(NodeId),
    Tanh(NodeId),
    /// Per-feature normalization of `x[B,F]`, state index into [`Graph::bn_states`].
    BatchNorm {
        x: NodeId,
        bn: usize,
    },
    Softmax(NodeId),
    LogSoftmax(NodeId),
    /// Elementwise sum; `b` may also be a rank-1 row broadcast over `a`'s rows.
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    /// Quantize-dequantize with a straight-through backward; slot index into
    /// [`Graph::quant_slots`].
    FakeQuant {
        x: NodeId,
        slot: usize,
    },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Input | Op::Param(_) => vec![],
            Op::Dense { x, w, b } => {
                let mut v = vec![x, w];
                v.extend(b);
                v
            }
            Op::Relu(a)
            | Op::Tanh(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Mean(a) => vec![a],
            Op::BatchNorm { x, .. } | Op::FakeQuant { x, .. } => vec![x],
            Op::Add(a, b) | Op::Mul(a, b) => vec![a, b],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    /// A frozen layer normalizes with running statistics even in train mode.
    pub frozen: bool,
}

impl BatchNormState {
    pub fn features(&self) -> usize {
        self.running_mean.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantSlot {
    pub config: QuantConfig,
    pub observer: ActivationObserver,
    /// Disabled slots pass values through untouched.
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnCache {
    /// Batch mean and (biased) variance of the layer input.
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub used_batch_stats: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantCache {
    pub params: AffineParams,
    pub codes: Vec<i32>,
}

/// Per-node outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    pub values: Vec<Tensor>,
    pub bn: Vec<Option<BnCache>>,
    pub quant: Vec<Option<QuantCache>>,
    pub mode: Mode,
    version: u64,
}

impl Activations {
    pub fn get(&self, node: NodeId) -> &Tensor {
        &self.values[node]
    }

    pub fn version(&self) -> u64 {
        self.version
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<Tensor>,
    pub input: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    nodes: Vec<Op>,
    params: Vec<Param>,
    bn: Vec<BatchNormState>,
    quant: Vec<QuantSlot>,
    input_width: usize,
    output: Option<NodeId>,
    version: u64,
}

impl Graph {
    /// An empty graph taking `[batch, input_width]` inputs.
    pub fn new(input_width: usize) -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            bn: Vec::new(),
            quant: Vec::new(),
            input_width,
            output: None,
            version: 0,
        }
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    fn bump(&mut self) {
        self.version += 1;
    }

    pub fn nodes(&self) -> &[Op] {
        &self.nodes
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.bump();
        self.params.push(Param {
            name: name.into(),
            value,
        });
        self.params.len() - 1
    }

    pub fn add_node(&mut self, op: Op) -> Result<NodeId> {
        let id = self.nodes.len();
        for i in op.inputs() {
            if i >= id {
                return Err(Error::Invalid(format!(
                    "node {id} references non-preceding node {i}"
                )));
            }
        }
        match op {
            Op::Param(p) if p >= self.params.len() => {
                return Err(Error::Invalid(format!("unknown parameter {p}")))
            }
            Op::BatchNorm { bn, .. } if bn >= self.bn.len() => {
                return Err(Error::Invalid(format!("unknown batch-norm state {bn}")))
            }
            Op::FakeQuant { slot, .. } if slot >= self.quant.len() => {
                return Err(Error::Invalid(format!("unknown quant slot {slot}")))
            }
            _ => {}
        }
        self.bump();
        self.nodes.push(op);
        self.output = Some(id);
        Ok(id)
    }

    pub fn input(&mut self) -> NodeId {
        self.add_node(Op::Input).expect("input node")
    }

    /// Registers a parameter and returns its leaf node.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        let p = self.add_param(name, value);
        self.add_node(Op::Param(p)).expect("param node")
    }

    /// Dense layer with weights `[in, out]` and bias `[out]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        self.add_node(Op::Dense { x, w, b })
    }

    /// Batch-norm over `features` with fresh `gamma = 1`, `beta = 0` parameters.
    pub fn batch_norm(&mut self, x: NodeId, features: usize, name: &str) -> Result<NodeId> {
        let gamma = self.add_param(format!("{name}.gamma"), Tensor::filled(&[features], 1.0));
        let beta = self.add_param(format!("{name}.beta"), Tensor::zeros(&[features]));
        // gamma/beta reach the graph through the batch-norm op itself
        self.bn.push(BatchNormState {
            gamma,
            beta,
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            frozen: false,
        });
        let bn = self.bn.len() - 1;
        self.add_node(Op::BatchNorm { x, bn })
    }

    pub fn fake_quant(&mut self, x: NodeId, config: QuantConfig) -> Result<NodeId> {
        config.validate()?;
        self.quant.push(QuantSlot {
            config,
            observer: ActivationObserver::new(0.1),
            enabled: true,
        });
        let slot = self.quant.len() - 1;
        self.add_node(Op::FakeQuant { x, slot })
    }

    pub fn set_output(&mut self, node: NodeId) {
        self.output = Some(node);
    }

    pub fn output(&self) -> NodeId {
        self.output.expect("graph has no nodes")
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param_value(&self, p: ParamId) -> &Tensor {
        &self.params[p].value
    }

    pub fn param_by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn set_param(&mut self, p: ParamId, value: Tensor) -> Result<()> {
        if !value.same_shape(&self.params[p].value) {
            return Err(shape_err!(
                "parameter {} is {:?}, got {:?}",
                self.params[p].name,
                self.params[p].value.shape(),
                value.shape()
            ));
        }
        self.bump();
        self.params[p].value = value;
        Ok(())
    }

    /// Mutable access to a parameter's values; bumps the graph version.
    pub fn param_data_mut(&mut self, p: ParamId) -> &mut [f64] {
        self.bump();
        self.params[p].value.data_mut()
    }

    pub fn bn_states(&self) -> &[BatchNormState] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [BatchNormState] {
        &mut self.bn
    }

    pub fn quant_slots(&self) -> &[QuantSlot] {
        &self.quant
    }

    pub fn quant_slots_mut(&mut self) -> &mut [QuantSlot] {
        &mut self.quant
    }

    /// Enables or bypasses every activation (observer-ranged) quantizer.
    pub fn set_activation_quant(&mut self, enabled: bool) {
        for s in &mut self.quant {
            if s.config.range_source == RangeSource::Observed {
                s.enabled = enabled;
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// `(offset, len)` of each parameter in the flat layout.
    pub fn layout(&self) -> Vec<(usize, usize)> {
        let mut off = 0;
        self.params
            .iter()
            .map(|p| {
                let e = (off, p.value.len());
                off += p.value.len();
                e
            })
            .collect()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_scalars());
        for p in &self.params {
            v.extend_from_slice(p.value.data());
        }
        v
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(shape_err!(
                "flat parameter vector has {} values, graph has {}",
                flat.len(),
                self.num_scalars()
            ));
        }
        self.bump();
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn flatten_grads(grads: &Gradients) -> Vec<f64> {
        let mut v = Vec::new();
        for g in &grads.params {
            v.extend_from_slice(g.data());
        }
        v
    }

    /// Structural invariants: acyclic ordering and every parameter in use.
    pub fn validate(&self) -> Result<()> {
        let mut used = vec![false; self.params.len()];
        for (id, op) in self.nodes.iter().enumerate() {
            if op.inputs().iter().any(|&i| i >= id) {
                return Err(Error::Invalid(format!(
                    "node {id} breaks topological order"
                )));
            }
            match *op {
                Op::Param(p) => used[p] = true,
                Op::BatchNorm { bn, .. } => {
                    used[self.bn[bn].gamma] = true;
                    used[self.bn[bn].beta] = true;
                }
                _ => {}
            }
        }
        if let Some(p) = used.iter().position(|u| !u) {
            return Err(Error::Invalid(format!(
                "parameter {} is not referenced",
                self.params[p].name
            )));
        }
        Ok(())
    }

    /// Forward pass without mutating state: batch-norm uses running statistics and
    /// activation quantizers use their stored ranges.
    pub fn eval(&self, input: &Tensor) -> Result<Activations> {
        self.run(input, Mode::Eval, &mut None)
    }

    /// Forward pass in `mode` that leaves running statistics and observers untouched.
    pub fn eval_in(&self, input: &Tensor, mode: Mode) -> Result<Activations> {
        self.run(input, mode, &mut None)
    }

    /// Forward pass; in train mode batch-norm running statistics and activation
    /// observers are updated.
    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Activations> {
        let mut updates = Some(StateUpdates::default());
        let acts = self.run(input, mode, &mut updates)?;
        if mode == Mode::Train {
            let u = updates.unwrap();
            for (bn, mean, var) in u.bn {
                let st = &mut self.bn[bn];
                let m = st.momentum;
                for f in 0..st.features() {
                    st.running_mean[f] = (1.0 - m) * st.running_mean[f] + m * mean[f];
                    st.running_var[f] = (1.0 - m) * st.running_var[f] + m * var[f];
                }
            }
            for (slot, obs) in u.observers {
                self.quant[slot].observer = obs;
            }
        }
        Ok(acts)
    }

    fn run(
        &self,
        input: &Tensor,
        mode: Mode,
        updates: &mut Option<StateUpdates>,
    ) -> Result<Activations> {
        let (_, w) = input.dims2()?;
        if w != self.input_width {
            return Err(shape_err!(
                "graph expects {} input features, got {}",
                self.input_width,
                w
            ));
        }
        let n = self.nodes.len();
        let mut values: Vec<Tensor> = Vec::with_capacity(n);
        let mut bn_cache: Vec<Option<BnCache>> = vec![None; n];
        let mut q_cache: Vec<Option<QuantCache>> = vec![None; n];
        for (id, op) in self.nodes.iter().enumerate() {
            let out = match *op {
                Op::Input => input.clone(),
                Op::Param(p) => self.params[p].value.clone(),
                Op::Dense { x, w, b } => {
                    dense_forward(&values[x], &values[w], b.map(|b| &values[b]))?
                }
                Op::Relu(a) => values[a].map(|v| v.max(0.0)),
                Op::Tanh(a) => values[a].map(libm::tanh),
                Op::BatchNorm { x, bn } => {
                    let st = &self.bn[bn];
                    let use_batch = mode == Mode::Train && !st.frozen;
                    let (out, cache) = bn_forward(
                        &values[x],
                        st,
                        self.params[st.gamma].value.data(),
                        self.params[st.beta].value.data(),
                        use_batch,
                    )?;
                    if use_batch {
                        if let Some(u) = updates.as_mut() {
                            u.bn.push((bn, cache.batch_mean.clone(), cache.batch_var.clone()));
                        }
                    }
                    bn_cache[id] = Some(cache);
                    out
                }
                Op::Softmax(a) => softmax_rows(&values[a], false),
                Op::LogSoftmax(a) => softmax_rows(&values[a], true),
                Op::Add(a, b) => add_forward(&values[a], &values[b])?,
                Op::Mul(a, b) => values[a].zip_map(&values[b], |x, y| x * y)?,
                Op::Scale(a, c) => values[a].map(|v| v * c),
                Op::Sum(a) => Tensor::scalar(values[a].sum()),
                Op::Mean(a) => Tensor::scalar(values[a].sum() / values[a].len() as f64),
                Op::FakeQuant { x, slot } => {
                    let s = &self.quant[slot];
                    if !s.enabled {
                        values[x].clone()
                    } else {
                        let xv = &values[x];
                        let range = match s.config.range_source {
                            RangeSource::MinMax => xv.min_max(),
                            RangeSource::Observed => {
                                if mode == Mode::Train {
                                    let mut obs = s.observer;
                                    obs.observe(xv.data())?;
                                    if let Some(u) = updates.as_mut() {
                                        u.observers.push((slot, obs));
                                    }
                                    obs.range().unwrap()
                                } else {
                                    s.observer.range().unwrap_or_else(|| xv.min_max())
                                }
                            }
                        };
                        let params = quant_params_widened(range.0, range.1, s.config.bits)?;
                        let codes: Vec<i32> = xv
                            .data()
                            .iter()
                            .map(|&v| quantize_scalar(v, &params))
                            .collect();
                        let data = codes
                            .iter()
                            .map(|&q| dequantize_scalar(q, &params))
                            .collect();
                        q_cache[id] = Some(QuantCache { params, codes });
                        Tensor::new(xv.shape().to_vec(), data)?
                    }
                }
            };
            if !out.is_finite() {
                return Err(Error::NonFinite(format!("output of node {id} ({op:?})")));
            }
            values.push(out);
        }
        Ok(Activations {
            values,
            bn: bn_cache,
            quant: q_cache,
            mode,
            version: self.version,
        })
    }

    /// Gradients of a scalar node with respect to every parameter and the input.
    pub fn backward(&self, acts: &Activations, loss: NodeId) -> Result<Gradients> {
        if acts.values[loss].len() != 1 {
            return Err(Error::NotScalar(loss));
        }
        self.backward_seeded(acts, &[(loss, Tensor::scalar(1.0))])
    }

    /// Vector-Jacobian product: seeds are upstream gradients placed on arbitrary nodes.
    pub fn backward_seeded(
        &self,
        acts: &Activations,
        seeds: &[(NodeId, Tensor)],
    ) -> Result<Gradients> {
        if acts.version != self.version {
            return Err(Error::Stale {
                graph: self.version,
                acts: acts.version,
            });
        }
        let n = self.nodes.len();
        let mut adj: Vec<Option<Tensor>> = vec![None; n];
        let mut top = 0;
        for (node, g) in seeds {
            if *node >= n || !g.same_shape(&acts.values[*node]) {
                return Err(shape_err!(
                    "seed for node {} has shape {:?}",
                    node,
                    g.shape()
                ));
            }
            accumulate(&mut adj[*node], g.clone())?;
            top = top.max(*node);
        }
        let mut pgrads: Vec<Tensor> = self
            .params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        let mut input_grad: Option<Tensor> = None;

        for id in (0..=top).rev() {
            let Some(dy) = adj[id].take() else { continue };
            match self.nodes[id] {
                Op::Input => accumulate(&mut input_grad, dy)?,
                Op::Param(p) => pgrads[p].add_assign(&dy)?,
                Op::Dense { x, w, b } => {
                    let xv = &acts.values[x];
                    let wv = &acts.values[w];
                    let (bsz, din) = xv.dims2()?;
                    let (_, dout) = wv.dims2()?;
                    let mut dx = vec![0.0; bsz * din];
                    matmul_bt(dy.data(), wv.data(), bsz, dout, din, &mut dx);
                    let mut dw = vec![0.0; din * dout];
                    matmul_at(xv.data(), dy.data(), bsz, din, dout, &mut dw);
                    if let Some(b) = b {
                        let mut db = vec![0.0; dout];
                        for r in 0..bsz {
                            for (d, v) in db.iter_mut().zip(dy.row(r)) {
                                *d += v;
                            }
                        }
                        accumulate(&mut adj[b], Tensor::new(vec![dout], db)?)?;
                    }
                    accumulate(&mut adj[x], Tensor::matrix(bsz, din, dx)?)?;
                    accumulate(&mut adj[w], Tensor::matrix(din, dout, dw)?)?;
                }
                Op::Relu(a) => {
                    let g = dy.zip_map(&acts.values[a], |g, v| if v > 0.0 { g } else { 0.0 })?;
                    accumulate(&mut adj[a], g)?;
                }
                Op::Tanh(a) => {
                    let g = dy.zip_map(&acts.values[id], |g, y| g * (1.0 - y * y))?;
                    accumulate(&mut adj[a], g)?;
                }
                Op::BatchNorm { x, bn } => {
                    let st = &self.bn[bn];
                    let cache = acts.bn[id].as_ref().expect("bn cache");
                    let gamma = self.params[st.gamma].value.data();
                    let (bsz, f) = dy.dims2()?;
                    let mut dgamma = vec![0.0; f];
                    let mut dbeta = vec![0.0; f];
                    for r in 0..bsz {
                        for c in 0..f {
                            let g = dy.data()[r * f + c];
                            dgamma[c] += g * cache.xhat[r * f + c];
                            dbeta[c] += g;
                        }
                    }
                    let mut dx = vec![0.0; bsz * f];
                    if cache.used_batch_stats {
                        let nb = bsz as f64;
                        for c in 0..f {
                            // sum(dxhat) = gamma*dbeta, sum(dxhat*xhat) = gamma*dgamma
                            let k = gamma[c] * cache.inv_std[c] / nb;
                            for r in 0..bsz {
                                let i = r * f + c;
                                dx[i] =
                                    k * (nb * dy.data()[i] - dbeta[c] - cache.xhat[i] * dgamma[c]);
                            }
                        }
                    } else {
                        for r in 0..bsz {
                            for c in 0..f {
                                let i = r * f + c;
                                dx[i] = dy.data()[i] * gamma[c] * cache.inv_std[c];
                            }
                        }
                    }
                    pgrads[st.gamma].add_assign(&Tensor::new(vec![f], dgamma)?)?;
                    pgrads[st.beta].add_assign(&Tensor::new(vec![f], dbeta)?)?;
                    accumulate(&mut adj[x], Tensor::matrix(bsz, f, dx)?)?;
                }
                Op::Softmax(a) => {
                    let y = &acts.values[id];
                    let k = *y.shape().last().unwrap();
                    let mut g = vec![0.0; y.len()];
                    for r in 0..y.len() / k {
                        let yr = &y.data()[r * k..(r + 1) * k];
                        let dr = &dy.data()[r * k..(r + 1) * k];
                        let s: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            g[r * k + j] = yr[j] * (dr[j] - s);
                        }
                    }
                    accumulate(&mut adj[a], Tensor::new(y.shape().to_vec(), g)?)?;
                }
                Op::LogSoftmax(a) => {
                    let y = &acts.values[id];
                    let k = *y.shape().last().unwrap();
                    let mut g = vec![0.0; y.len()];
                    for r in 0..y.len() / k {
                        let dr = &dy.data()[r * k..(r + 1) * k];
                        let s: f64 = dr.iter().sum();
                        for j in 0..k {
                            g[r * k + j] = dr[j] - libm::exp(y.data()[r * k + j]) * s;
                        }
                    }
                    accumulate(&mut adj[a], Tensor::new(y.shape().to_vec(), g)?)?;
                }
                Op::Add(a, b) => {
                    let bv = &acts.values[b];
                    let gb = if bv.same_shape(&dy) {
                        dy.clone()
                    } else {
                        let k = bv.len();
                        let mut s = vec![0.0; k];
                        for r in 0..dy.len() / k {
                            for j in 0..k {
                                s[j] += dy.data()[r * k + j];
                            }
                        }
                        Tensor::new(bv.shape().to_vec(), s)?
                    };
                    accumulate(&mut adj[b], gb)?;
                    accumulate(&mut adj[a], dy)?;
                }
                Op::Mul(a, b) => {
                    let ga = dy.zip_map(&acts.values[b], |g, v| g * v)?;
                    let gb = dy.zip_map(&acts.values[a], |g, v| g * v)?;
                    accumulate(&mut adj[a], ga)?;
                    accumulate(&mut adj[b], gb)?;
                }
                Op::Scale(a, c) => accumulate(&mut adj[a], dy.map(|g| g * c))?,
                Op::Sum(a) => {
                    let s = dy.data()[0];
                    accumulate(&mut adj[a], Tensor::filled(acts.values[a].shape(), s))?;
                }
                Op::Mean(a) => {
                    let n = acts.values[a].len() as f64;
                    let s = dy.data()[0] / n;
                    accumulate(&mut adj[a], Tensor::filled(acts.values[a].shape(), s))?;
                }
                Op::FakeQuant { x, .. } => {
                    let g = match &acts.quant[id] {
                        Some(c) => crate::quant::ste_backward(&dy, &acts.values[x], &c.params)?,
                        None => dy,
                    };
                    accumulate(&mut adj[x], g)?;
                }
            }
        }
        Ok(Gradients {
            params: pgrads,
            input: input_grad,
        })
    }
}

#[derive(Default)]
struct StateUpdates {
    bn: Vec<(usize, Vec<f64>, Vec<f64>)>,
    observers: Vec<(usize, ActivationObserver)>,
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(t) => t.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn dense_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (bsz, din) = x.dims2()?;
    let (win, dout) = w.dims2()?;
    if win != din {
        return Err(shape_err!("dense input {} vs weight rows {}", din, win));
    }
    let mut out = vec![0.0; bsz * dout];
    matmul(x.data(), w.data(), bsz, din, dout, &mut out);
    if let Some(b) = b {
        if b.len() != dout {
            return Err(shape_err!("bias {} vs output {}", b.len(), dout));
        }
        for r in 0..bsz {
            for (o, bv) in out[r * dout..(r + 1) * dout].iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    Tensor::matrix(bsz, dout, out)
}

fn add_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.same_shape(b) {
        return a.zip_map(b, |x, y| x + y);
    }
    let k = *a.shape().last().unwrap();
    if b.rank() != 1 || b.len() != k {
        return Err(shape_err!("cannot add {:?} and {:?}", a.shape(), b.shape()));
    }
    let mut out = a.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += b.data()[i % k];
    }
    Ok(out)
}

fn bn_forward(
    x: &Tensor,
    st: &BatchNormState,
    gamma: &[f64],
    beta: &[f64],
    use_batch: bool,
) -> Result<(Tensor, BnCache)> {
    let (bsz, f) = x.dims2()?;
    if f != st.features() {
        return Err(shape_err!(
            "batch-norm over {} features got {}",
            st.features(),
            f
        ));
    }
    let nb = bsz as f64;
    let mut mean = vec![0.0; f];
    let mut var = vec![0.0; f];
    for r in 0..bsz {
        for c in 0..f {
            mean[c] += x.data()[r * f + c];
        }
    }
    mean.iter_mut().for_each(|m| *m /= nb);
    for r in 0..bsz {
        for c in 0..f {
            let d = x.data()[r * f + c] - mean[c];
            var[c] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= nb);
    let (mu, sig2) = if use_batch {
        (&mean, &var)
    } else {
        (&st.running_mean, &st.running_var)
    };
    let inv_std: Vec<f64> = sig2.iter().map(|v| 1.0 / libm::sqrt(v + st.eps)).collect();
    let mut xhat = vec![0.0; bsz * f];
    let mut out = vec![0.0; bsz * f];
    for r in 0..bsz {
        for c in 0..f {
            let i = r * f + c;
            xhat[i] = (x.data()[i] - mu[c]) * inv_std[c];
            out[i] = gamma[c] * xhat[i] + beta[c];
        }
    }
    Ok((
        Tensor::matrix(bsz, f, out)?,
        BnCache {
            batch_mean: mean,
            batch_var: var,
            xhat,
            inv_std,
            used_batch_stats: use_batch,
        },
    ))
}

/// Row-wise softmax (or log-softmax) over the last dimension.
pub fn softmax_rows(x: &Tensor, log: bool) -> Tensor {
    let k = *x.shape().last().unwrap();
    let mut out = vec![0.0; x.len()];
    for r in 0..x.len() / k {
        let row = &x.data()[r * k..(r + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| libm::exp(v - m)).sum();
        let lz = libm::log(z);
        for j in 0..k {
            out[r * k + j] = if log {
                row[j] - m - lz
            } else {
                libm::exp(row[j] - m - lz)
            };
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

/// Central differences `(L(θ+εe_i) − L(θ−εe_i)) / 2ε` for every coordinate.
pub fn finite_diff_grad<F>(mut loss: F, theta: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::Invalid(
            "finite-difference step must be positive".into(),
        ));
    }
    let mut probe = theta.clone();
    let mut g = vec![0.0; theta.len()];
    for i in 0..theta.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = loss(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = loss(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("loss at coordinate {i}")));
        }
        g[i] = (up - down) / (2.0 * eps);
    }
    Tensor::new(theta.shape().to_vec(), g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedRng;

    fn rand_tensor(r: &mut SeedRng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| r.uniform_in(-1.0, 1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_graph() {
        let mut g = Graph::new(3);
        let x = g.input();
        let acts = g
            .eval(&Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        assert_eq!(acts.get(x).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn relu_node() {
        let mut g = Graph::new(3);
        let x = g.input();
        let y = g.add_node(Op::Relu(x)).unwrap();
        let acts = g
            .eval(&Tensor::matrix(1, 3, vec![-1.0, 0.0, 2.0]).unwrap())
            .unwrap();
        assert_eq!(acts.get(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn two_layer_dense_hand_evaluated() {
        let mut g = Graph::new(2);
        let x = g.input();
        let w1 = g.param(
            "w1",
            Tensor::matrix(2, 2, vec![1.0, 2.0, -1.0, 0.5]).unwrap(),
        );
        let b1 = g.param("b1", Tensor::vector(&[0.5, -1.0]));
        let h = g.dense(x, w1, Some(b1)).unwrap();
        let w2 = g.param("w2", Tensor::matrix(2, 1, vec![3.0, -2.0]).unwrap());
        let y = g.dense(h, w2, None).unwrap();
        let acts = g
            .eval(&Tensor::matrix(1, 2, vec![2.0, 4.0]).unwrap())
            .unwrap();
        // h = [2*1 + 4*(-1) + 0.5, 2*2 + 4*0.5 - 1] = [-1.5, 5]; y = -4.5 - 10
        assert_eq!(acts.get(h).data(), &[-1.5, 5.0]);
        assert_eq!(acts.get(y).data(), &[-14.5]);
    }

    #[test]
    fn rejects_wrong_input_width() {
        let mut g = Graph::new(3);
        g.input();
        assert!(matches!(
            g.eval(&Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn rejects_forward_reference() {
        let mut g = Graph::new(1);
        g.input();
        assert!(g.add_node(Op::Relu(3)).is_err());
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new(1);
        let x = g.input();
        g.add_node(Op::Scale(x, f64::INFINITY)).unwrap();
        assert!(matches!(
            g.eval(&Tensor::matrix(1, 1, vec![1.0]).unwrap()),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut g = Graph::new(1);
        g.input();
        let t = g.param("t", Tensor::vector(&[1.0, 2.0]));
        let s = g.add_node(Op::Sum(t)).unwrap();
        let acts = g.eval(&Tensor::matrix(1, 1, vec![0.0]).unwrap()).unwrap();
        let gr = g.backward(&acts, s).unwrap();
        assert_eq!(gr.params[0].data(), &[1.0, 1.0]);

        let mut g = Graph::new(1);
        g.input();
        let t = g.param("t", Tensor::vector(&[3.0]));
        let sq = g.add_node(Op::Mul(t, t)).unwrap();
        let s = g.add_node(Op::Sum(sq)).unwrap();
        let acts = g.eval(&Tensor::matrix(1, 1, vec![0.0]).unwrap()).unwrap();
        assert_eq!(g.backward(&acts, s).unwrap().params[0].data(), &[6.0]);
    }

    #[test]
    fn unreached_params_get_zero() {
        let mut g = Graph::new(1);
        let x = g.input();
        let _unused = g.param("u", Tensor::vector(&[5.0, 5.0]));
        let s = g.add_node(Op::Sum(x)).unwrap();
        let acts = g.eval(&Tensor::matrix(1, 1, vec![2.0]).unwrap()).unwrap();
        let gr = g.backward(&acts, s).unwrap();
        assert_eq!(gr.params[0].data(), &[0.0, 0.0]);
        assert_eq!(gr.input.unwrap().data(), &[1.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new(2);
        let x = g.input();
        let w = g.param("w", Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let y = g.dense(x, w, None).unwrap();
        let s = g.add_node(Op::Sum(y)).unwrap();
        let acts = g
            .eval(&Tensor::matrix(2, 2, vec![1.0; 4]).unwrap())
            .unwrap();
        assert!(matches!(g.backward(&acts, y), Err(Error::NotScalar(_))));
        let p = g.param_by_name("w").unwrap();
        g.set_param(p, Tensor::matrix(2, 1, vec![2.0, 2.0]).unwrap())
            .unwrap();
        assert!(matches!(g.backward(&acts, s), Err(Error::Stale { .. })));
    }

    #[test]
    fn finite_diff_examples() {
        let t = Tensor::vector(&[3.0]);
        let g = finite_diff_grad(|th| Ok(th.data()[0] * th.data()[0]), &t, 1e-4).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| Ok(2.5), &Tensor::vector(&[1.0, -1.0]), 1e-4).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0]);
        assert!(finite_diff_grad(|_| Ok(f64::NAN), &t, 1e-4).is_err());
        assert!(finite_diff_grad(|_| Ok(0.0), &t, 0.0).is_err());
    }

    /// Softmax cross-entropy of a one-layer net on one sample, both gradient routes.
    #[test]
    fn softmax_ce_two_routes() {
        let mut r = SeedRng::new(21);
        let mut g = Graph::new(3);
        let x = g.input();
        let w = g.param("w", rand_tensor(&mut r, &[3, 4]));
        let b = g.param("b", rand_tensor(&mut r, &[4]));
        let z = g.dense(x, w, Some(b)).unwrap();
        let ls = g.add_node(Op::LogSoftmax(z)).unwrap();
        let onehot = g.param("y", Tensor::matrix(1, 4, vec![0.0, 0.0, 1.0, 0.0]).unwrap());
        let prod = g.add_node(Op::Mul(ls, onehot)).unwrap();
        let s = g.add_node(Op::Sum(prod)).unwrap();
        let loss = g.add_node(Op::Scale(s, -1.0)).unwrap();
        let input = rand_tensor(&mut r, &[1, 3]);
        let acts = g.eval(&input).unwrap();
        let analytic = g.backward(&acts, loss).unwrap();
        let w0 = g.param_value(0).clone();
        let fd = finite_diff_grad(
            |th| {
                let mut gg = g.clone();
                gg.set_param(0, th.clone())?;
                Ok(gg.eval(&input)?.get(loss).data()[0])
            },
            &w0,
            1e-5,
        )
        .unwrap();
        for (a, f) in analytic.params[0].data().iter().zip(fd.data()) {
            assert!((a - f).abs() <= 1e-6 * a.abs().max(1e-2), "{a} vs {f}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut r = SeedRng::new(2);
        let x = rand_tensor(&mut r, &[5, 7]).map(|v| v * 30.0);
        let p = softmax_rows(&x, false);
        for i in 0..5 {
            let s: f64 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(p.row(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn batch_norm_train_normalizes_and_updates() {
        let mut r = SeedRng::new(8);
        let mut g = Graph::new(3);
        let x = g.input();
        let y = g.batch_norm(x, 3, "bn").unwrap();
        let input = rand_tensor(&mut r, &[16, 3]).map(|v| 3.0 * v + 2.0);
        let acts = g.forward(&input, Mode::Train).unwrap();
        let out = acts.get(y);
        for c in 0..3 {
            let col: alloc::vec::Vec<f64> = (0..16).map(|i| out.get2(i, c)).collect();
            let m = col.iter().sum::<f64>() / 16.0;
            let v = col.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-6);
            // variance is 1 up to the eps term
            let raw_var = acts.bn[y].as_ref().unwrap().batch_var[c];
            assert!((v - raw_var / (raw_var + BN_EPS)).abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-4);
        }
        let st = &g.bn_states()[0];
        let c = acts.bn[y].as_ref().unwrap();
        for f in 0..3 {
            assert!((st.running_mean[f] - 0.1 * c.batch_mean[f]).abs() < 1e-12);
            assert!((st.running_var[f] - (0.9 + 0.1 * c.batch_var[f])).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_is_bit_reproducible() {
        let mut r = SeedRng::new(10);
        let mut g = Graph::new(4);
        let x = g.input();
        let w = g.param("w", rand_tensor(&mut r, &[4, 5]));
        let h = g.dense(x, w, None).unwrap();
        let h = g.batch_norm(h, 5, "bn").unwrap();
        g.add_node(Op::Softmax(h)).unwrap();
        let input = rand_tensor(&mut r, &[6, 4]);
        let a = g.eval(&input).unwrap();
        let b = g.eval(&input).unwrap();
        for (ta, tb) in a.values.iter().zip(&b.values) {
            let ba: alloc::vec::Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bb: alloc::vec::Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ba, bb);
        }
    }

    #[test]
    fn validate_flags_unused_param() {
        let mut g = Graph::new(1);
        g.input();
        g.add_param("orphan", Tensor::scalar(1.0));
        assert!(g.validate().is_err());
    }
}
