//! Trainable sigmoid gates on coupled filter groups.
//!
//! Model weights stay frozen. The gate logits minimize
//! `data loss + β·max(0, F(g)/T − 1)² + γ·mean(g(1 − g))`, where `F(g)` is
//! the MAC count with every channel weighted by its gate. The FLOPs and
//! binarization terms are differentiated analytically, outside the tape.

use serde::{Deserialize, Serialize};

use super::{masked_flops, original_flops, remove_in_order, stuck, BatchStream, PruneLogRow, PruneOutcome};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::fair_loss::LossProvider;
use crate::model::{ForwardOptions, ModelState};
use crate::prune::{check_reachable, DependencyGraph, PruneMask};
use crate::tensor::{Tape, Tensor};
use crate::train::{AdamWConfig, OptimizerState};

/// Initial gate value for every prunable group.
pub const GATE_INIT: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoBotConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Weight of the FLOPs-target hinge.
    pub beta: f64,
    /// Weight of the binarization term.
    pub gamma: f64,
}

impl Default for AutoBotConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            batch_size: 64,
            iterations: 200,
            beta: 2.7,
            gamma: 0.1,
        }
    }
}

impl AutoBotConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.iterations == 0 || !(self.beta > 0.0) || !(self.gamma > 0.0) {
            return Err(Error::Config(format!("autobot parameters must all be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Channels {
    Fixed(f64),
    /// Group id per channel.
    Gated(Vec<usize>),
}

impl Channels {
    fn value(&self, g: &[f64]) -> f64 {
        match self {
            Channels::Fixed(c) => *c,
            Channels::Gated(ids) => ids.iter().map(|&i| g[i]).sum(),
        }
    }

    fn add_grad(&self, scale: f64, out: &mut [f64]) {
        if let Channels::Gated(ids) = self {
            for &i in ids {
                out[i] += scale;
            }
        }
    }
}

/// Gate-interpolated MAC count: each layer's MACs with its input and output
/// channel counts replaced by sums of gate values.
#[derive(Clone, Debug)]
pub struct SoftFlops {
    layers: Vec<(f64, Channels, Channels)>,
    groups: usize,
}

impl SoftFlops {
    pub fn new(graph: &DependencyGraph) -> Self {
        let topo = graph.topology();
        let channels = |act: usize| match topo.acts[act].producers.first() {
            Some(_) => Channels::Gated(
                (0..topo.acts[act].channels)
                    .map(|c| graph.group_of_channel(act, c).expect("has producers"))
                    .collect(),
            ),
            None => Channels::Fixed(topo.acts[act].channels as f64),
        };
        let mut layers = vec![];
        for c in &topo.convs {
            let coeff = (c.spec.kernel * c.spec.kernel * c.out_hw.0 * c.out_hw.1) as f64;
            layers.push((coeff, channels(c.input), channels(c.output)));
        }
        for d in &topo.denses {
            layers.push((d.units as f64, channels(d.input), Channels::Fixed(1.0)));
        }
        Self {
            layers,
            groups: graph.groups.len(),
        }
    }

    /// `F(g)` and `dF/dg` for one gate value per group.
    pub fn value_and_grad(&self, g: &[f64]) -> (f64, Vec<f64>) {
        assert_eq!(g.len(), self.groups, "one gate per group");
        let mut total = 0.0;
        let mut grad = vec![0.0; self.groups];
        for (coeff, cin, cout) in &self.layers {
            let (i, o) = (cin.value(g), cout.value(g));
            total += coeff * i * o;
            cin.add_grad(coeff * o, &mut grad);
            cout.add_grad(coeff * i, &mut grad);
        }
        (total, grad)
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// FLOPs hinge plus binarization penalty and its gradient in `g`.
fn penalty(soft: &SoftFlops, g: &[f64], prunable: &[bool], target: f64, cfg: &AutoBotConfig) -> (f64, f64, Vec<f64>) {
    let (f, df) = soft.value_and_grad(g);
    let excess = (f / target - 1.0).max(0.0);
    let n = prunable.iter().filter(|&&p| p).count().max(1) as f64;
    let mut value = cfg.beta * excess * excess;
    let mut grad: Vec<f64> = df.iter().map(|d| cfg.beta * 2.0 * excess / target * d).collect();
    for (j, &p) in prunable.iter().enumerate() {
        if p {
            value += cfg.gamma * g[j] * (1.0 - g[j]) / n;
            grad[j] += cfg.gamma * (1.0 - 2.0 * g[j]) / n;
        }
    }
    (value, f, grad)
}

#[allow(clippy::too_many_arguments)]
/// Trains gates on `train_idx`, then removes the lowest-gate groups until
/// the masked FLOPs reach `target_flops`.
pub fn autobot_prune(
    state: &ModelState,
    graph: &DependencyGraph,
    data: &LabeledDataset,
    train_idx: &[usize],
    loss: &LossProvider,
    config: &AutoBotConfig,
    target_flops: u64,
    seed: u64,
) -> Result<PruneOutcome> {
    config.validate()?;
    let mut mask = PruneMask::all_keep(graph);
    if original_flops(graph)? <= target_flops {
        return Ok(PruneOutcome {
            mask,
            log: vec![],
            state: None,
            batches: 0,
        });
    }
    check_reachable(graph, target_flops)?;
    let soft = SoftFlops::new(graph);
    let prunable: Vec<bool> = graph.groups.iter().map(|g| g.prunable).collect();
    let init = (GATE_INIT / (1.0 - GATE_INIT)).ln();
    let mut logits = vec![Tensor::from_vec(vec![init; prunable.len()])?];
    let mut opt = OptimizerState::new(&logits, AdamWConfig::new(config.lr, 0.0));
    let mut stream = BatchStream::new(train_idx, config.batch_size, seed)?;
    let conv_groups: Vec<Vec<usize>> = (0..graph.conv_count()).map(|c| graph.groups_of_conv(c).to_vec()).collect();
    let gates_of = |z: &[f64]| -> Vec<f64> {
        z.iter()
            .zip(&prunable)
            .map(|(&z, &p)| if p { sigmoid(z) } else { 1.0 })
            .collect()
    };
    let mut log = vec![];
    for it in 0..config.iterations {
        let g = gates_of(logits[0].data());
        let batch = stream.next_batch();
        let mut tape = Tape::new();
        let gv = tape.leaf(Tensor::from_vec(g.clone())?, true);
        let per_conv = conv_groups
            .iter()
            .map(|ids| tape.gather(gv, ids.clone()))
            .collect::<Result<Vec<_>>>()?;
        let f = state.forward_tape(
            &mut tape,
            data.batch(&batch)?,
            &ForwardOptions {
                train_params: false,
                gates: Some(&per_conv),
            },
        )?;
        let l = loss.loss(&mut tape, f.probs, &batch)?;
        let data_loss = tape.value(l).data()[0];
        let dl = tape.backward(l)?.take(gv).unwrap_or_else(|| Tensor::zeros(&[g.len()]));
        let (pen, soft_f, dp) = penalty(&soft, &g, &prunable, target_flops as f64, config);
        let grad: Vec<f64> = (0..g.len())
            .map(|j| if prunable[j] { (dl.data()[j] + dp[j]) * g[j] * (1.0 - g[j]) } else { 0.0 })
            .collect();
        opt.step(&mut logits, &[Tensor::from_vec(grad)?], config.lr, None)?;
        log.push(PruneLogRow {
            iteration: it,
            loss: data_loss + pen,
            flops: soft_f,
            removed_groups: vec![],
        });
    }
    let g = gates_of(logits[0].data());
    let mut order: Vec<usize> = (0..g.len()).filter(|&j| prunable[j]).collect();
    order.sort_by(|&a, &b| g[a].total_cmp(&g[b]).then(a.cmp(&b)));
    let removed = remove_in_order(graph, &mut mask, &order, target_flops, usize::MAX)?;
    let achieved = masked_flops(graph, &mask)?;
    if achieved > target_flops {
        return Err(stuck(graph, &mask, target_flops));
    }
    log.push(PruneLogRow {
        iteration: config.iterations,
        loss: f64::NAN,
        flops: achieved as f64,
        removed_groups: removed,
    });
    mask.validate(graph)?;
    Ok(PruneOutcome {
        mask,
        log,
        state: None,
        batches: config.iterations,
    })
}
