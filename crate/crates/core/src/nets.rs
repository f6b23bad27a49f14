//! Network builders: the dense+batch-norm MLP used for teacher and student, its
//! fake-quantized twin, and the conditional generator.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::checkpoint::Record;
use crate::error::{Error, Result};
use crate::gi::GiLayer;
use crate::graph::{Graph, NodeId, Op, ParamId};
use crate::quant::{ActivationObserver, QuantConfig};
use crate::rng::SeedRng;
use crate::tensor::Tensor;

/// Layer widths `input → hidden… → classes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.classes < 2 || self.hidden.contains(&0) {
            return Err(Error::Invalid(
                "layer widths must be positive with at least 2 classes".into(),
            ));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input);
        w.extend(&self.hidden);
        w.push(self.classes);
        w
    }
}

/// A graph plus the node handles the training loops need.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub graph: Graph,
    pub logits: NodeId,
    /// Inputs of each batch-norm layer, aligned with `graph.bn_states()`.
    pub bn_inputs: Vec<NodeId>,
    /// Fake-quantized weight tensors, first layer first.
    pub quant_layers: Vec<GiLayer>,
    /// Dense weight matrices, first layer first.
    pub dense_weights: Vec<ParamId>,
}

impl Network {
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let acts = self.graph.eval(x)?;
        Ok(acts.get(self.logits).clone())
    }
}

fn he_init(rng: &mut SeedRng, fan_in: usize, fan_out: usize) -> Result<Tensor> {
    let sd = libm::sqrt(2.0 / fan_in as f64);
    let data = (0..fan_in * fan_out).map(|_| sd * rng.normal()).collect();
    Tensor::matrix(fan_in, fan_out, data)
}

/// Hidden blocks are bias-free dense → batch-norm → ReLU; the head is dense with bias.
pub fn build_mlp(spec: &MlpSpec, rng: &mut SeedRng) -> Result<Network> {
    build(spec, rng, None)
}

/// Same layout as [`build_mlp`] with every dense weight fake-quantized to `w_bits`
/// and every hidden activation entering a dense layer quantized to `a_bits`.
pub fn build_quantized_mlp(
    spec: &MlpSpec,
    rng: &mut SeedRng,
    w_bits: u32,
    a_bits: u32,
) -> Result<Network> {
    build(spec, rng, Some((w_bits, a_bits)))
}

fn build(spec: &MlpSpec, rng: &mut SeedRng, quant: Option<(u32, u32)>) -> Result<Network> {
    spec.validate()?;
    let widths = spec.widths();
    let layers = widths.len() - 1;
    let mut g = Graph::new(spec.input);
    let mut h = g.input();
    let mut bn_inputs = Vec::new();
    let mut quant_layers = Vec::new();
    let mut dense_weights = Vec::new();
    for l in 0..layers {
        let (fi, fo) = (widths[l], widths[l + 1]);
        if l > 0 {
            if let Some((_, a)) = quant {
                h = g.fake_quant(h, QuantConfig::activations(a))?;
            }
        }
        let w_node = g.param(format!("l{l}.w"), he_init(rng, fi, fo)?);
        let w_id = match g.nodes()[w_node] {
            Op::Param(p) => p,
            _ => unreachable!(),
        };
        dense_weights.push(w_id);
        let w_used = match quant {
            Some((wb, _)) => {
                let cfg = QuantConfig::weights(wb);
                quant_layers.push(GiLayer {
                    param: w_id,
                    config: cfg,
                });
                g.fake_quant(w_node, cfg)?
            }
            None => w_node,
        };
        if l + 1 < layers {
            let z = g.dense(h, w_used, None)?;
            bn_inputs.push(z);
            let n = g.batch_norm(z, fo, &format!("l{l}.bn"))?;
            h = g.add_node(Op::Relu(n))?;
        } else {
            let b = g.param(format!("l{l}.b"), Tensor::zeros(&[fo]));
            h = g.dense(h, w_used, Some(b))?;
        }
    }
    g.set_output(h);
    g.validate()?;
    Ok(Network {
        graph: g,
        logits: h,
        bn_inputs,
        quant_layers,
        dense_weights,
    })
}

/// Student initialized from `teacher`: parameters and running statistics copied by
/// name, batch-norm frozen at the teacher's running statistics.
pub fn quantized_student(
    teacher: &Network,
    spec: &MlpSpec,
    w_bits: u32,
    a_bits: u32,
) -> Result<Network> {
    let mut s = build_quantized_mlp(spec, &mut SeedRng::new(0), w_bits, a_bits)?;
    copy_parameters(&teacher.graph, &mut s.graph)?;
    let tbn = teacher.graph.bn_states();
    for (i, st) in s.graph.bn_states_mut().iter_mut().enumerate() {
        st.running_mean = tbn[i].running_mean.clone();
        st.running_var = tbn[i].running_var.clone();
        st.frozen = true;
    }
    Ok(s)
}

/// Copies every parameter of `dst` from the same-named parameter of `src`.
pub fn copy_parameters(src: &Graph, dst: &mut Graph) -> Result<()> {
    for p in 0..dst.params().len() {
        let name = dst.params()[p].name.clone();
        let sp = src
            .param_by_name(&name)
            .ok_or_else(|| Error::Invalid(format!("source has no parameter {name}")))?;
        dst.set_param(p, src.param_value(sp).clone())?;
    }
    Ok(())
}

/// Conditional generator: `[noise, onehot(label)]` → two dense+BN+ReLU blocks →
/// dense → tanh → scale.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub noise_dim: usize,
    pub classes: usize,
    pub hidden: usize,
    pub output: usize,
    pub output_scale: f64,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.noise_dim == 0 || self.classes == 0 || self.hidden == 0 || self.output == 0 {
            return Err(Error::Invalid("generator widths must be positive".into()));
        }
        if !(self.output_scale > 0.0) {
            return Err(Error::Invalid(
                "generator output scale must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub fn build_generator(spec: &GeneratorSpec, rng: &mut SeedRng) -> Result<Network> {
    spec.validate()?;
    let fi = spec.noise_dim + spec.classes;
    let mut g = Graph::new(fi);
    let mut h = g.input();
    let mut bn_inputs = Vec::new();
    let mut dense_weights = Vec::new();
    let mut width = fi;
    for l in 0..2 {
        let w = g.param(format!("g{l}.w"), he_init(rng, width, spec.hidden)?);
        if let Op::Param(p) = g.nodes()[w] {
            dense_weights.push(p);
        }
        let z = g.dense(h, w, None)?;
        bn_inputs.push(z);
        let n = g.batch_norm(z, spec.hidden, &format!("g{l}.bn"))?;
        h = g.add_node(Op::Relu(n))?;
        width = spec.hidden;
    }
    let w = g.param("g2.w", he_init(rng, width, spec.output)?.map(|v| 0.5 * v));
    if let Op::Param(p) = g.nodes()[w] {
        dense_weights.push(p);
    }
    let b = g.param("g2.b", Tensor::zeros(&[spec.output]));
    let z = g.dense(h, w, Some(b))?;
    let t = g.add_node(Op::Tanh(z))?;
    let out = g.add_node(Op::Scale(t, spec.output_scale))?;
    g.validate()?;
    Ok(Network {
        graph: g,
        logits: out,
        bn_inputs,
        quant_layers: Vec::new(),
        dense_weights,
    })
}

/// Parameters, batch-norm running statistics and activation observer ranges as
/// named checkpoint records.
pub fn state_records(g: &Graph) -> Vec<Record> {
    let mut out: Vec<Record> = g
        .params()
        .iter()
        .map(|p| Record {
            name: p.name.clone(),
            tensor: p.value.clone(),
        })
        .collect();
    for (i, st) in g.bn_states().iter().enumerate() {
        out.push(Record {
            name: format!("bn{i}.running_mean"),
            tensor: Tensor::vector(&st.running_mean),
        });
        out.push(Record {
            name: format!("bn{i}.running_var"),
            tensor: Tensor::vector(&st.running_var),
        });
    }
    for (i, s) in g.quant_slots().iter().enumerate() {
        let o = s.observer;
        out.push(Record {
            name: format!("aq{i}.observer"),
            tensor: Tensor::vector(&[o.running_min, o.running_max, o.observed_batches as f64]),
        });
    }
    out
}

fn find<'a>(records: &'a [Record], name: &str) -> Result<&'a Tensor> {
    records
        .iter()
        .find(|r| r.name == name)
        .map(|r| &r.tensor)
        .ok_or_else(|| Error::Decode(format!("missing record {name}")))
}

/// Inverse of [`state_records`]; every record the graph needs must be present.
pub fn load_state(g: &mut Graph, records: &[Record]) -> Result<()> {
    for p in 0..g.params().len() {
        let name: String = g.params()[p].name.clone();
        let t = find(records, &name)?.clone();
        g.set_param(p, t)
            .map_err(|e| Error::Decode(format!("{e}")))?;
    }
    for i in 0..g.bn_states().len() {
        let f = g.bn_states()[i].features();
        let m = find(records, &format!("bn{i}.running_mean"))?;
        let v = find(records, &format!("bn{i}.running_var"))?;
        if m.len() != f || v.len() != f {
            return Err(Error::Decode(format!(
                "batch-norm {i} statistics have the wrong width"
            )));
        }
        let st = &mut g.bn_states_mut()[i];
        st.running_mean = m.data().to_vec();
        st.running_var = v.data().to_vec();
    }
    for i in 0..g.quant_slots().len() {
        let r = find(records, &format!("aq{i}.observer"))?.data();
        if r.len() != 3 {
            return Err(Error::Decode(format!(
                "observer {i} record has {} values",
                r.len()
            )));
        }
        let slot = &mut g.quant_slots_mut()[i];
        slot.observer = ActivationObserver {
            running_min: r[0],
            running_max: r[1],
            momentum: slot.observer.momentum,
            observed_batches: r[2] as u64,
        };
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mode;
    use alloc::vec;

    fn spec() -> MlpSpec {
        MlpSpec {
            input: 4,
            hidden: vec![6, 5],
            classes: 3,
        }
    }

    fn batch(r: &mut SeedRng, b: usize, w: usize) -> Tensor {
        Tensor::matrix(b, w, (0..b * w).map(|_| r.normal()).collect()).unwrap()
    }

    #[test]
    fn mlp_shapes() {
        let mut r = SeedRng::new(1);
        let n = build_mlp(&spec(), &mut r).unwrap();
        assert_eq!(n.bn_inputs.len(), 2);
        assert_eq!(n.dense_weights.len(), 3);
        assert!(n.quant_layers.is_empty());
        let x = batch(&mut r, 7, 4);
        assert_eq!(n.logits(&x).unwrap().shape(), &[7, 3]);
        // 4·6 + 6·5 + 5·3 + 3 + 2·(6 + 5)
        assert_eq!(n.graph.num_scalars(), 24 + 30 + 15 + 3 + 22);
    }

    #[test]
    fn student_copies_teacher() {
        let mut r = SeedRng::new(2);
        let mut t = build_mlp(&spec(), &mut r).unwrap();
        let x = batch(&mut r, 16, 4);
        t.graph.forward(&x, Mode::Train).unwrap();
        let s = quantized_student(&t, &spec(), 8, 8).unwrap();
        assert_eq!(s.quant_layers.len(), 3);
        assert_eq!(s.graph.flat_params(), t.graph.flat_params());
        for (a, b) in s.graph.bn_states().iter().zip(t.graph.bn_states()) {
            assert_eq!(a.running_mean, b.running_mean);
            assert!(a.frozen);
        }
        // with high precision the student tracks the teacher closely
        let mut s = s;
        s.graph.forward(&x, Mode::Train).unwrap();
        let lt = t.logits(&x).unwrap();
        let ls = s.logits(&x).unwrap();
        let err = lt
            .data()
            .iter()
            .zip(ls.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 0.2, "{err}");
    }

    #[test]
    fn generator_output_bounded() {
        let mut r = SeedRng::new(3);
        let gs = GeneratorSpec {
            noise_dim: 5,
            classes: 3,
            hidden: 8,
            output: 4,
            output_scale: 2.0,
        };
        let mut g = build_generator(&gs, &mut r).unwrap();
        let x = batch(&mut r, 10, 8);
        let a = g.graph.forward(&x, Mode::Train).unwrap();
        let out = a.get(g.logits);
        assert_eq!(out.shape(), &[10, 4]);
        assert!(out.data().iter().all(|v| v.abs() <= 2.0));
    }

    #[test]
    fn state_roundtrip() {
        let mut r = SeedRng::new(4);
        let t = build_mlp(&spec(), &mut r).unwrap();
        let mut s = quantized_student(&t, &spec(), 4, 4).unwrap();
        let x = batch(&mut r, 8, 4);
        s.graph.forward(&x, Mode::Train).unwrap();
        let recs = state_records(&s.graph);
        let mut fresh = build_quantized_mlp(&spec(), &mut SeedRng::new(9), 4, 4).unwrap();
        load_state(&mut fresh.graph, &recs).unwrap();
        assert_eq!(state_records(&fresh.graph), recs);
        assert_eq!(fresh.logits(&x).unwrap(), s.logits(&x).unwrap());
        assert!(load_state(&mut fresh.graph, &recs[1..]).is_err());
    }
}
