//! Declarative small-CNN architectures.
//!
//! A [`ModelSpec`] is the serializable description. [`Topology`] is its
//! compiled form: every conv and dense layer gets a stable id, its input and
//! output activation, and spatial sizes. Forward execution, dependency
//! analysis, and FLOPS accounting all walk the same topology.

mod state;

pub use state::{argmax, ForwardOptions, ForwardTrace, ModelState, Predictions, TapeForward};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::conv2d_output_size;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    None,
}

fn one() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl ConvSpec {
    pub fn new(filters: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            filters,
            kernel,
            stride,
            padding,
            activation: Activation::Relu,
        }
    }

    pub fn linear(mut self) -> Self {
        self.activation = Activation::None;
        self
    }
}

/// One entry of a [`ModelSpec`].
///
/// A residual block computes `relu(second(first(x)) + skip(x))`, where the
/// skip is the identity or, with `projection`, a 1×1 conv with the stride of
/// `first`. Every conv is followed by a per-channel scale and shift.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv(ConvSpec),
    Residual {
        first: ConvSpec,
        second: ConvSpec,
        #[serde(default)]
        projection: bool,
    },
    GlobalAvgPool,
    Dense {
        units: usize,
        #[serde(default)]
        activation: Activation,
    },
    /// Linear map to `classes` logits followed by softmax.
    SoftmaxHead { classes: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// `[C, H, W]`.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

pub const PRESETS: [&str; 2] = ["mini-plain", "mini-res"];

impl ModelSpec {
    /// Three 3×3 convs with 8/16/16 filters.
    pub fn mini_plain(input: [usize; 3], classes: usize) -> Self {
        Self {
            input,
            layers: vec![
                LayerSpec::Conv(ConvSpec::new(8, 3, 1, 1)),
                LayerSpec::Conv(ConvSpec::new(16, 3, 2, 1)),
                LayerSpec::Conv(ConvSpec::new(16, 3, 1, 1)),
                LayerSpec::GlobalAvgPool,
                LayerSpec::SoftmaxHead { classes },
            ],
        }
    }

    /// A stem conv followed by a projected and an identity residual block.
    pub fn mini_res(input: [usize; 3], classes: usize) -> Self {
        Self {
            input,
            layers: vec![
                LayerSpec::Conv(ConvSpec::new(8, 3, 1, 1)),
                LayerSpec::Residual {
                    first: ConvSpec::new(16, 3, 2, 1),
                    second: ConvSpec::new(16, 3, 1, 1).linear(),
                    projection: true,
                },
                LayerSpec::Residual {
                    first: ConvSpec::new(16, 3, 1, 1),
                    second: ConvSpec::new(16, 3, 1, 1).linear(),
                    projection: false,
                },
                LayerSpec::GlobalAvgPool,
                LayerSpec::SoftmaxHead { classes },
            ],
        }
    }

    pub fn preset(name: &str, input: [usize; 3], classes: usize) -> Result<Self> {
        match name {
            "mini-plain" => Ok(Self::mini_plain(input, classes)),
            "mini-res" => Ok(Self::mini_res(input, classes)),
            other => Err(Error::Config(format!(
                "unknown model preset `{other}` (available: {})",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn classes(&self) -> Option<usize> {
        match self.layers.last() {
            Some(LayerSpec::SoftmaxHead { classes }) => Some(*classes),
            _ => None,
        }
    }

    pub fn compile(&self) -> Result<Topology> {
        Topology::build(self)
    }

    /// Parameter count derived from the layer shapes alone.
    pub fn parameter_count(&self) -> Result<usize> {
        let topo = self.compile()?;
        let conv: usize = topo
            .convs
            .iter()
            .map(|c| c.spec.filters * c.in_channels * c.spec.kernel * c.spec.kernel + 3 * c.spec.filters)
            .sum();
        let dense: usize = topo.denses.iter().map(|d| d.units * d.in_features + d.units).sum();
        Ok(conv + dense)
    }
}

pub type ActId = usize;

/// A tensor flowing between layers. Channel `c` is produced by filter `c` of
/// every conv in `producers`; `fixed` activations (the network input, dense
/// outputs) have no prunable channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActInfo {
    pub channels: usize,
    pub hw: Option<(usize, usize)>,
    pub producers: Vec<usize>,
    pub fixed: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvNode {
    pub id: String,
    pub spec: ConvSpec,
    pub in_channels: usize,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    pub input: ActId,
    pub output: ActId,
    /// Index of `weight`; bias, scale, shift follow.
    pub param_base: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenseNode {
    pub id: String,
    pub in_features: usize,
    pub units: usize,
    pub relu: bool,
    pub input: ActId,
    pub output: ActId,
    /// Index of `weight`; bias follows.
    pub param_base: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    Conv(usize),
    ResidualAdd { a: ActId, b: ActId, out: ActId },
    Pool { input: ActId, out: ActId },
    Dense(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    pub convs: Vec<ConvNode>,
    pub denses: Vec<DenseNode>,
    pub acts: Vec<ActInfo>,
    pub steps: Vec<Step>,
    pub logits: ActId,
    pub classes: usize,
    pub param_names: Vec<String>,
    pub param_shapes: Vec<Vec<usize>>,
}

impl Topology {
    fn build(spec: &ModelSpec) -> Result<Self> {
        let [c, h, w] = spec.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Spec {
                layer: "input".into(),
                reason: format!("input shape {:?} has a zero dimension", spec.input),
            });
        }
        let mut b = Builder {
            topo: Topology {
                convs: vec![],
                denses: vec![],
                acts: vec![ActInfo {
                    channels: c,
                    hw: Some((h, w)),
                    producers: vec![],
                    fixed: true,
                }],
                steps: vec![],
                logits: 0,
                classes: 0,
                param_names: vec![],
                param_shapes: vec![],
            },
        };
        let mut cur: ActId = 0;
        let n_layers = spec.layers.len();
        let mut saw_head = false;

        for (li, layer) in spec.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv(cs) => {
                    cur = b.conv(format!("conv{li}"), *cs, cur)?;
                }
                LayerSpec::Residual {
                    first,
                    second,
                    projection,
                } => {
                    let id = format!("res{li}");
                    if second.activation != Activation::None {
                        return Err(Error::Spec {
                            layer: format!("{id}.b"),
                            reason: "second conv of a residual block must have activation `none`; the block applies ReLU after the add".into(),
                        });
                    }
                    let inner = b.conv(format!("{id}.a"), *first, cur)?;
                    let main = b.conv(format!("{id}.b"), *second, inner)?;
                    let skip = if *projection {
                        let proj = ConvSpec::new(second.filters, 1, first.stride, 0).linear();
                        b.conv(format!("{id}.proj"), proj, cur)?
                    } else {
                        cur
                    };
                    let (ma, sa) = (&b.topo.acts[main], &b.topo.acts[skip]);
                    if ma.channels != sa.channels || ma.hw != sa.hw {
                        return Err(Error::Spec {
                            layer: id,
                            reason: format!(
                                "main path {}x{:?} and skip path {}x{:?} differ{}",
                                ma.channels,
                                ma.hw,
                                sa.channels,
                                sa.hw,
                                if *projection { "" } else { "; set projection = true" }
                            ),
                        });
                    }
                    let mut producers = ma.producers.clone();
                    producers.extend(sa.producers.iter().copied());
                    let out = b.act(ActInfo {
                        channels: ma.channels,
                        hw: ma.hw,
                        producers,
                        fixed: ma.fixed || sa.fixed,
                    });
                    b.topo.steps.push(Step::ResidualAdd {
                        a: main,
                        b: skip,
                        out,
                    });
                    cur = out;
                }
                LayerSpec::GlobalAvgPool => {
                    let a = b.topo.acts[cur].clone();
                    if a.hw.is_none() {
                        return Err(Error::Spec {
                            layer: format!("pool{li}"),
                            reason: "global average pooling needs a spatial input".into(),
                        });
                    }
                    let out = b.act(ActInfo { hw: None, ..a });
                    b.topo.steps.push(Step::Pool { input: cur, out });
                    cur = out;
                }
                LayerSpec::Dense { units, activation } => {
                    cur = b.dense(format!("dense{li}"), *units, *activation == Activation::Relu, cur)?;
                }
                LayerSpec::SoftmaxHead { classes } => {
                    if li + 1 != n_layers {
                        return Err(Error::Spec {
                            layer: format!("head{li}"),
                            reason: "softmax head must be the last layer".into(),
                        });
                    }
                    if *classes < 2 {
                        return Err(Error::Spec {
                            layer: "head".into(),
                            reason: format!("need at least 2 classes, got {classes}"),
                        });
                    }
                    cur = b.dense("head".into(), *classes, false, cur)?;
                    b.topo.classes = *classes;
                    saw_head = true;
                }
            }
        }
        if !saw_head {
            return Err(Error::Spec {
                layer: "head".into(),
                reason: "spec must end with exactly one softmax head".into(),
            });
        }
        b.topo.logits = cur;
        Ok(b.topo)
    }

    pub fn conv_index(&self, id: &str) -> Option<usize> {
        self.convs.iter().position(|c| c.id == id)
    }

    /// Convs and denses reading activation `act`, including through pooling.
    pub fn consumers_of(&self, act: ActId) -> Vec<Consumer> {
        let mut acts = vec![act];
        for s in &self.steps {
            if let Step::Pool { input, out } = s {
                if acts.contains(input) {
                    acts.push(*out);
                }
            }
        }
        let mut out = vec![];
        for (i, c) in self.convs.iter().enumerate() {
            if acts.contains(&c.input) {
                out.push(Consumer::Conv(i));
            }
        }
        for (i, d) in self.denses.iter().enumerate() {
            if acts.contains(&d.input) {
                out.push(Consumer::Dense(i));
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Consumer {
    Conv(usize),
    Dense(usize),
}

struct Builder {
    topo: Topology,
}

impl Builder {
    fn act(&mut self, a: ActInfo) -> ActId {
        self.topo.acts.push(a);
        self.topo.acts.len() - 1
    }

    fn param(&mut self, name: String, shape: Vec<usize>) -> usize {
        self.topo.param_names.push(name);
        self.topo.param_shapes.push(shape);
        self.topo.param_names.len() - 1
    }

    fn conv(&mut self, id: String, spec: ConvSpec, input: ActId) -> Result<ActId> {
        let a = self.topo.acts[input].clone();
        let Some((h, w)) = a.hw else {
            return Err(Error::Spec {
                layer: id,
                reason: "conv after global pooling".into(),
            });
        };
        if spec.filters == 0 || spec.kernel == 0 || spec.stride == 0 {
            return Err(Error::Spec {
                layer: id,
                reason: "filters, kernel and stride must be positive".into(),
            });
        }
        let (Some(ho), Some(wo)) = (
            conv2d_output_size(h, spec.kernel, spec.stride, spec.padding),
            conv2d_output_size(w, spec.kernel, spec.stride, spec.padding),
        ) else {
            return Err(Error::Spec {
                layer: id,
                reason: format!("kernel {} does not fit {h}x{w} input", spec.kernel),
            });
        };
        let k = spec.kernel;
        let base = self.param(format!("{id}.weight"), vec![spec.filters, a.channels, k, k]);
        self.param(format!("{id}.bias"), vec![spec.filters]);
        self.param(format!("{id}.scale"), vec![spec.filters]);
        self.param(format!("{id}.shift"), vec![spec.filters]);
        let idx = self.topo.convs.len();
        let output = self.act(ActInfo {
            channels: spec.filters,
            hw: Some((ho, wo)),
            producers: vec![idx],
            fixed: false,
        });
        self.topo.convs.push(ConvNode {
            id,
            spec,
            in_channels: a.channels,
            in_hw: (h, w),
            out_hw: (ho, wo),
            input,
            output,
            param_base: base,
        });
        self.topo.steps.push(Step::Conv(idx));
        Ok(output)
    }

    fn dense(&mut self, id: String, units: usize, relu: bool, input: ActId) -> Result<ActId> {
        let a = self.topo.acts[input].clone();
        if a.hw.is_some() {
            return Err(Error::Spec {
                layer: id,
                reason: "dense layer needs pooled features; add global_avg_pool first".into(),
            });
        }
        if units == 0 {
            return Err(Error::Spec {
                layer: id,
                reason: "units must be positive".into(),
            });
        }
        let base = self.param(format!("{id}.weight"), vec![units, a.channels]);
        self.param(format!("{id}.bias"), vec![units]);
        let output = self.act(ActInfo {
            channels: units,
            hw: None,
            producers: vec![],
            fixed: true,
        });
        self.topo.denses.push(DenseNode {
            id,
            in_features: a.channels,
            units,
            relu,
            input,
            output,
            param_base: base,
        });
        self.topo.steps.push(Step::Dense(self.topo.denses.len() - 1));
        Ok(output)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_layer_parameter_count() {
        let spec = ModelSpec {
            input: [1, 16, 16],
            layers: vec![
                LayerSpec::Conv(ConvSpec::new(8, 3, 1, 1)),
                LayerSpec::GlobalAvgPool,
                LayerSpec::SoftmaxHead { classes: 2 },
            ],
        };
        let topo = spec.compile().unwrap();
        assert_eq!(topo.param_shapes[0], vec![8, 1, 3, 3]);
        // 72 weights + 8 biases, plus the per-channel scale and shift
        let conv = &topo.convs[0];
        assert_eq!(conv.spec.filters * conv.in_channels * 9 + conv.spec.filters, 80);
        assert_eq!(spec.parameter_count().unwrap(), 80 + 16 + 2 * 8 + 2);
    }

    #[test]
    fn presets_compile() {
        for name in PRESETS {
            let spec = ModelSpec::preset(name, [1, 16, 16], 2).unwrap();
            let topo = spec.compile().unwrap();
            assert_eq!(topo.classes, 2);
        }
        assert!(ModelSpec::preset("vgg", [1, 16, 16], 2).is_err());
    }

    #[test]
    fn head_must_be_last() {
        let spec = ModelSpec {
            input: [1, 8, 8],
            layers: vec![
                LayerSpec::GlobalAvgPool,
                LayerSpec::SoftmaxHead { classes: 2 },
                LayerSpec::Dense {
                    units: 3,
                    activation: Activation::Relu,
                },
            ],
        };
        let err = spec.compile().unwrap_err();
        assert!(matches!(err, Error::Spec { .. }), "{err}");
    }

    #[test]
    fn bad_chain_names_layer() {
        let spec = ModelSpec {
            input: [1, 4, 4],
            layers: vec![
                LayerSpec::Conv(ConvSpec::new(4, 3, 1, 0)),
                LayerSpec::Conv(ConvSpec::new(4, 5, 1, 0)),
                LayerSpec::GlobalAvgPool,
                LayerSpec::SoftmaxHead { classes: 2 },
            ],
        };
        match spec.compile().unwrap_err() {
            Error::Spec { layer, .. } => assert_eq!(layer, "conv1"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn identity_residual_needs_matching_channels() {
        let spec = ModelSpec {
            input: [1, 8, 8],
            layers: vec![
                LayerSpec::Conv(ConvSpec::new(4, 3, 1, 1)),
                LayerSpec::Residual {
                    first: ConvSpec::new(4, 3, 1, 1),
                    second: ConvSpec::new(6, 3, 1, 1).linear(),
                    projection: false,
                },
                LayerSpec::GlobalAvgPool,
                LayerSpec::SoftmaxHead { classes: 2 },
            ],
        };
        assert!(matches!(spec.compile(), Err(Error::Spec { .. })));
    }

    #[test]
    fn spec_roundtrips_through_toml() {
        let spec = ModelSpec::mini_res([1, 16, 16], 3);
        let text = toml::to_string(&spec).unwrap();
        let back: ModelSpec = toml::from_str(&text).unwrap();
        assert_eq!(spec, back);
    }
}
