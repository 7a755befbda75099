use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelSpec, Step, Topology};
use crate::data::LabeledDataset;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Parameter values for one [`ModelSpec`].
#[derive(Clone, Debug)]
pub struct ModelState {
    spec: ModelSpec,
    topo: Arc<Topology>,
    params: Vec<Tensor>,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct SavedModel {
    spec: ModelSpec,
    seed: u64,
    params: Vec<(String, Tensor)>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    /// Record parameters as leaves that require grad.
    pub train_params: bool,
    /// Per-conv channel gates, multiplied onto each conv's output.
    pub gates: Option<&'a [Var]>,
}

/// Handles into a tape after [`ModelState::forward_tape`].
#[derive(Clone, Debug)]
pub struct TapeForward {
    pub params: Vec<Var>,
    /// Per conv, its output after scale/shift and activation (before any gate).
    pub feature_maps: Vec<Var>,
    pub logits: Var,
    pub probs: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// `(conv id, feature map)` in topology order.
    pub feature_maps: Vec<(String, Tensor)>,
    pub probs: Tensor,
}

impl ForwardTrace {
    pub fn feature_map(&self, conv_id: &str) -> Option<&Tensor> {
        self.feature_maps.iter().find(|(id, _)| id == conv_id).map(|(_, t)| t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    /// `[N, K]`.
    pub probs: Tensor,
    pub classes: Vec<usize>,
}

const PREDICT_BATCH: usize = 256;

impl ModelState {
    /// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases and shifts,
    /// unit scales.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let topo = spec.compile()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = topo
            .param_names
            .iter()
            .zip(&topo.param_shapes)
            .map(|(name, shape)| {
                if name.ends_with(".weight") {
                    let fan_in: usize = shape[1..].iter().product();
                    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), &mut rng)
                } else if name.ends_with(".scale") {
                    Tensor::full(shape, 1.0)
                } else {
                    Tensor::zeros(shape)
                }
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            topo: Arc::new(topo),
            params,
            seed,
        })
    }

    /// Assembles a state from explicit parameters, checking every shape.
    pub fn from_params(spec: &ModelSpec, params: Vec<Tensor>, seed: u64) -> Result<Self> {
        let topo = spec.compile()?;
        if params.len() != topo.param_shapes.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                topo.param_shapes.len(),
                params.len()
            )));
        }
        for ((p, shape), name) in params.iter().zip(&topo.param_shapes).zip(&topo.param_names) {
            if p.shape() != shape.as_slice() {
                return Err(shape_err(
                    "model parameters",
                    format!("{name} has shape {:?}, expected {shape:?}", p.shape()),
                ));
            }
        }
        Ok(Self {
            spec: spec.clone(),
            topo: Arc::new(topo),
            params,
            seed,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.topo.param_names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_names(&self) -> &[String] {
        &self.topo.param_names
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn classes(&self) -> usize {
        self.topo.classes
    }

    pub fn to_json(&self) -> Result<String> {
        let saved = SavedModel {
            spec: self.spec.clone(),
            seed: self.seed,
            params: self.topo.param_names.iter().cloned().zip(self.params.iter().cloned()).collect(),
        };
        Ok(serde_json::to_string(&saved)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let saved: SavedModel = serde_json::from_str(text)?;
        let params = saved.params.into_iter().map(|(_, t)| t).collect();
        Self::from_params(&saved.spec, params, saved.seed)
    }

    /// Records a forward pass of `batch` (`[N, C, H, W]`) onto `tape`.
    pub fn forward_tape(&self, tape: &mut Tape, batch: Tensor, opts: &ForwardOptions) -> Result<TapeForward> {
        let topo = &*self.topo;
        let [c, h, w] = self.spec.input;
        if batch.shape().len() != 4 || batch.shape()[1..] != [c, h, w] {
            return Err(shape_err(
                "forward",
                format!("batch {:?} does not match input [N,{c},{h},{w}]", batch.shape()),
            ));
        }
        if let Some(g) = opts.gates {
            if g.len() != topo.convs.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} gate vectors for {} conv layers",
                    g.len(),
                    topo.convs.len()
                )));
            }
        }
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.clone(), opts.train_params)).collect();
        let mut acts: Vec<Option<Var>> = vec![None; topo.acts.len()];
        acts[0] = Some(tape.constant(batch));
        let mut feature_maps = Vec::with_capacity(topo.convs.len());
        let get = |acts: &[Option<Var>], i: usize| acts[i].expect("activation computed before use");

        for step in &topo.steps {
            match *step {
                Step::Conv(ci) => {
                    let node = &topo.convs[ci];
                    let p = node.param_base;
                    let x = get(&acts, node.input);
                    let mut y = tape.conv2d(x, params[p], params[p + 1], node.spec.stride, node.spec.padding)?;
                    y = tape.channel_affine(y, params[p + 2], params[p + 3])?;
                    if node.spec.activation == super::Activation::Relu {
                        y = tape.relu(y);
                    }
                    feature_maps.push(y);
                    if let Some(g) = opts.gates {
                        y = tape.channel_mul(y, g[ci])?;
                    }
                    acts[node.output] = Some(y);
                }
                Step::ResidualAdd { a, b, out } => {
                    let s = tape.add(get(&acts, a), get(&acts, b))?;
                    acts[out] = Some(tape.relu(s));
                }
                Step::Pool { input, out } => {
                    acts[out] = Some(tape.global_avg_pool(get(&acts, input))?);
                }
                Step::Dense(di) => {
                    let node = &topo.denses[di];
                    let p = node.param_base;
                    let mut y = tape.linear(get(&acts, node.input), params[p], params[p + 1])?;
                    if node.relu {
                        y = tape.relu(y);
                    }
                    acts[node.output] = Some(y);
                }
            }
        }
        let logits = get(&acts, topo.logits);
        let probs = tape.softmax(logits)?;
        Ok(TapeForward {
            params,
            feature_maps,
            logits,
            probs,
        })
    }

    /// Probabilities `[N, K]`, plus the per-conv feature maps when requested.
    pub fn forward(&self, batch: &Tensor, record_trace: bool) -> Result<(Tensor, Option<ForwardTrace>)> {
        let mut tape = Tape::new();
        let f = self.forward_tape(&mut tape, batch.clone(), &ForwardOptions::default())?;
        let probs = tape.value(f.probs).clone();
        let trace = record_trace.then(|| ForwardTrace {
            feature_maps: self
                .topo
                .convs
                .iter()
                .zip(&f.feature_maps)
                .map(|(c, v)| (c.id.clone(), tape.value(*v).clone()))
                .collect(),
            probs: probs.clone(),
        });
        Ok((probs, trace))
    }

    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = self.forward_tape(&mut tape, batch.clone(), &ForwardOptions::default())?;
        Ok(tape.value(f.logits).clone())
    }

    /// Batched forward over `indices` of `data`, with argmax classes.
    pub fn predict(&self, data: &LabeledDataset, indices: &[usize]) -> Result<Predictions> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let k = self.classes();
        let mut probs = Vec::with_capacity(indices.len() * k);
        for chunk in indices.chunks(PREDICT_BATCH) {
            let (p, _) = self.forward(&data.batch(chunk)?, false)?;
            probs.extend_from_slice(p.data());
        }
        let probs = Tensor::new(vec![indices.len(), k], probs)?;
        let classes = (0..indices.len()).map(|i| argmax(probs.row(i))).collect();
        Ok(Predictions { probs, classes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConvSpec, LayerSpec};
    use rand::SeedableRng;

    fn batch(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(&[n, 1, 16, 16], 0.0, 1.0, &mut rng)
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.7, 0.3]), 0);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let spec = ModelSpec::mini_plain([1, 16, 16], 2);
        let a = ModelState::build(&spec, 7).unwrap();
        let b = ModelState::build(&spec, 7).unwrap();
        let c = ModelState::build(&spec, 8).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn analytic_count_matches_enumeration() {
        for name in crate::model::PRESETS {
            let spec = ModelSpec::preset(name, [1, 16, 16], 3).unwrap();
            let state = ModelState::build(&spec, 1).unwrap();
            assert_eq!(state.parameter_count(), spec.parameter_count().unwrap(), "{name}");
        }
    }

    #[test]
    fn forward_rows_are_distributions_and_pure() {
        let spec = ModelSpec::mini_res([1, 16, 16], 3);
        let state = ModelState::build(&spec, 3).unwrap();
        let x = batch(5, 11);
        let (p1, trace) = state.forward(&x, true).unwrap();
        let (p2, none) = state.forward(&x, false).unwrap();
        assert_eq!(p1, p2);
        assert!(none.is_none());
        let trace = trace.unwrap();
        assert_eq!(trace.feature_maps.len(), state.topology().convs.len());
        for i in 0..5 {
            let s: f64 = p1.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_last_conv_gives_constant_output() {
        let spec = ModelSpec::mini_plain([1, 16, 16], 2);
        let mut state = ModelState::build(&spec, 5).unwrap();
        let base = state.topology().convs[2].param_base;
        for off in 0..4 {
            let t = &mut state.params_mut()[base + off];
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let (pa, _) = state.forward(&batch(1, 1), false).unwrap();
        let (pb, _) = state.forward(&batch(1, 2), false).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn trace_matches_replayed_prefix() {
        let spec = ModelSpec::mini_plain([1, 16, 16], 2);
        let state = ModelState::build(&spec, 9).unwrap();
        let x = batch(3, 4);
        let (_, trace) = state.forward(&x, true).unwrap();
        let trace = trace.unwrap();

        // replay conv0 -> conv1 by hand
        let mut tape = Tape::new();
        let mut cur = tape.constant(x);
        for node in &state.topology().convs[..2] {
            let p = node.param_base;
            let w = tape.constant(state.params()[p].clone());
            let b = tape.constant(state.params()[p + 1].clone());
            let s = tape.constant(state.params()[p + 2].clone());
            let t = tape.constant(state.params()[p + 3].clone());
            let y = tape.conv2d(cur, w, b, node.spec.stride, node.spec.padding).unwrap();
            let y = tape.channel_affine(y, s, t).unwrap();
            cur = tape.relu(y);
        }
        assert_eq!(tape.value(cur), trace.feature_map("conv1").unwrap());
    }

    #[test]
    fn zero_residual_block_is_identity_on_nonnegative_input() {
        let spec = ModelSpec {
            input: [2, 6, 6],
            layers: vec![
                LayerSpec::Residual {
                    first: ConvSpec::new(3, 3, 1, 1),
                    second: ConvSpec::new(2, 3, 1, 1).linear(),
                    projection: false,
                },
                LayerSpec::GlobalAvgPool,
                LayerSpec::SoftmaxHead { classes: 2 },
            ],
        };
        let mut state = ModelState::build(&spec, 2).unwrap();
        let names: Vec<String> = state.param_names().to_vec();
        for (name, p) in names.iter().zip(state.params_mut()) {
            if name.starts_with("res0.") {
                p.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[2, 2, 6, 6], 0.0, 2.0, &mut rng);
        let mut tape = Tape::new();
        let f = state.forward_tape(&mut tape, x.clone(), &ForwardOptions::default()).unwrap();
        // the block output feeds the pool; recover it from the pre-pool act
        let pooled_expect: Vec<f64> = (0..4).map(|i| x.data()[i * 36..(i + 1) * 36].iter().sum::<f64>() / 36.0).collect();
        let head_w = state.param("head.weight").unwrap().clone();
        let head_b = state.param("head.bias").unwrap().clone();
        let logits = tape.value(f.logits);
        for n in 0..2 {
            for k in 0..2 {
                let mut z = head_b.data()[k];
                for c in 0..2 {
                    z += head_w.data()[k * 2 + c] * pooled_expect[n * 2 + c];
                }
                assert!((logits.data()[n * 2 + k] - z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn json_roundtrip() {
        let spec = ModelSpec::mini_res([1, 16, 16], 2);
        let state = ModelState::build(&spec, 4).unwrap();
        let back = ModelState::from_json(&state.to_json().unwrap()).unwrap();
        assert_eq!(state.params(), back.params());
        assert_eq!(state.spec(), back.spec());
    }
}
