use serde::{Deserialize, Serialize};

use super::{masked_flops, original_flops, remove_in_order, stuck, BatchStream, PruneLogRow, PruneOutcome};
use crate::data::LabeledDataset;
use crate::error::{shape_err, Error, Result};
use crate::fair_loss::LossProvider;
use crate::model::{ForwardOptions, ForwardTrace, ModelState};
use crate::prune::{check_reachable, pseudo_prune, DependencyGraph, PruneMask};
use crate::tensor::{Tape, Tensor};
use crate::train::{AdamWConfig, OptimizerState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaylorConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Training batches between prune steps.
    pub prune_frequency: usize,
    /// Groups removed per prune step.
    pub filters_per_prune: usize,
    pub weight_decay: f64,
    /// Divide each layer's scores by their L2 norm.
    pub normalize: bool,
}

impl Default for TaylorConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            prune_frequency: 5,
            filters_per_prune: 1,
            weight_decay: 0.0,
            normalize: true,
        }
    }
}

impl TaylorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prune_frequency == 0 || self.filters_per_prune == 0 || self.batch_size == 0 || !(self.lr >= 0.0) {
            return Err(Error::Config(format!(
                "taylor needs prune_frequency, filters_per_prune, batch_size >= 1 and lr >= 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// One batch's loss with gradients for every parameter and every conv
/// feature map.
#[derive(Clone, Debug)]
pub struct FeatureMapGrads {
    pub loss: f64,
    pub trace: ForwardTrace,
    pub fm_grads: Vec<Tensor>,
    pub param_grads: Vec<Tensor>,
}

pub fn feature_map_gradients(state: &ModelState, data: &LabeledDataset, indices: &[usize], loss: &LossProvider) -> Result<FeatureMapGrads> {
    let mut tape = Tape::new();
    let f = state.forward_tape(
        &mut tape,
        data.batch(indices)?,
        &ForwardOptions {
            train_params: true,
            gates: None,
        },
    )?;
    let l = loss.loss(&mut tape, f.probs, indices)?;
    let value = tape.value(l).data()[0];
    let trace = ForwardTrace {
        feature_maps: state
            .topology()
            .convs
            .iter()
            .zip(&f.feature_maps)
            .map(|(c, v)| (c.id.clone(), tape.value(*v).clone()))
            .collect(),
        probs: tape.value(f.probs).clone(),
    };
    let mut g = tape.backward(l)?;
    let fm_grads = f
        .feature_maps
        .iter()
        .zip(&trace.feature_maps)
        .map(|(v, (_, fm))| g.take(*v).unwrap_or_else(|| Tensor::zeros(fm.shape())))
        .collect();
    let param_grads = f
        .params
        .iter()
        .zip(state.params())
        .map(|(v, p)| g.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok(FeatureMapGrads {
        loss: value,
        trace,
        fm_grads,
        param_grads,
    })
}

/// Per conv, per filter: `|Σ_{n,h,w} grad · activation|`.
pub fn raw_filter_scores(feature_maps: &[Tensor], grads: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    if feature_maps.len() != grads.len() {
        return Err(shape_err(
            "taylor_importance",
            format!("{} feature maps, {} gradients", feature_maps.len(), grads.len()),
        ));
    }
    feature_maps
        .iter()
        .zip(grads)
        .map(|(a, g)| {
            if a.shape() != g.shape() || a.shape().len() != 4 {
                return Err(shape_err(
                    "taylor_importance",
                    format!("feature map {:?} vs gradient {:?}", a.shape(), g.shape()),
                ));
            }
            let (n, c, hw) = (a.shape()[0], a.shape()[1], a.shape()[2] * a.shape()[3]);
            let mut s = vec![0.0; c];
            for b in 0..n {
                for (ch, acc) in s.iter_mut().enumerate() {
                    let o = (b * c + ch) * hw;
                    *acc += a.data()[o..o + hw].iter().zip(&g.data()[o..o + hw]).map(|(x, y)| x * y).sum::<f64>();
                }
            }
            Ok(s.into_iter().map(f64::abs).collect())
        })
        .collect()
}

/// Optionally L2-normalizes each conv's scores, then sums them per group.
pub fn group_scores(raw: &[Vec<f64>], graph: &DependencyGraph, normalize: bool) -> Result<Vec<f64>> {
    if raw.len() != graph.conv_count() || raw.iter().enumerate().any(|(c, r)| r.len() != graph.filters(c)) {
        return Err(shape_err("taylor_importance", "scores do not match the dependency graph"));
    }
    let mut out = vec![0.0; graph.groups.len()];
    for (c, scores) in raw.iter().enumerate() {
        let norm = scores.iter().map(|s| s * s).sum::<f64>().sqrt();
        for (f, &s) in scores.iter().enumerate() {
            let v = if !normalize {
                s
            } else if norm > 0.0 {
                s / norm
            } else {
                0.0
            };
            out[graph.group_of(c, f)] += v;
        }
    }
    Ok(out)
}

/// Group importance from one traced batch and its feature-map gradients.
pub fn taylor_importance(trace: &ForwardTrace, fm_grads: &[Tensor], graph: &DependencyGraph, normalize: bool) -> Result<Vec<f64>> {
    let fms: Vec<Tensor> = trace.feature_maps.iter().map(|(_, t)| t.clone()).collect();
    group_scores(&raw_filter_scores(&fms, fm_grads)?, graph, normalize)
}

#[allow(clippy::too_many_arguments)]
/// Alternates `prune_frequency` training batches with removal of the
/// `filters_per_prune` lowest-scoring groups until the masked FLOPs reach
/// `target_flops`. Removed filters stay zeroed during training.
pub fn taylor_prune(
    state: &ModelState,
    graph: &DependencyGraph,
    data: &LabeledDataset,
    train_idx: &[usize],
    loss: &LossProvider,
    config: &TaylorConfig,
    target_flops: u64,
    seed: u64,
) -> Result<PruneOutcome> {
    config.validate()?;
    let mut mask = PruneMask::all_keep(graph);
    let mut current = state.clone();
    if original_flops(graph)? <= target_flops {
        return Ok(PruneOutcome {
            mask,
            log: vec![],
            state: Some(current),
            batches: 0,
        });
    }
    check_reachable(graph, target_flops)?;
    let mut opt = OptimizerState::new(current.params(), AdamWConfig::new(config.lr, config.weight_decay));
    let mut stream = BatchStream::new(train_idx, config.batch_size, seed)?;
    let mut batches = 0;
    let mut log = vec![];
    let mut step = 0;
    while masked_flops(graph, &mask)? > target_flops {
        let mut raw: Vec<Vec<f64>> = (0..graph.conv_count()).map(|c| vec![0.0; graph.filters(c)]).collect();
        let mut total = 0.0;
        for _ in 0..config.prune_frequency {
            let batch = stream.next_batch();
            let fg = feature_map_gradients(&current, data, &batch, loss)?;
            let fms: Vec<Tensor> = fg.trace.feature_maps.into_iter().map(|(_, t)| t).collect();
            for (acc, s) in raw.iter_mut().zip(raw_filter_scores(&fms, &fg.fm_grads)?) {
                acc.iter_mut().zip(s).for_each(|(a, v)| *a += v);
            }
            total += fg.loss;
            opt.step(current.params_mut(), &fg.param_grads, config.lr, None)?;
            current = pseudo_prune(&current, graph, &mask)?;
            batches += 1;
        }
        let scores = group_scores(&raw, graph, config.normalize)?;
        let mut order: Vec<usize> = (0..scores.len()).filter(|&g| mask.can_remove(graph, g)).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        let removed = remove_in_order(graph, &mut mask, &order, target_flops, config.filters_per_prune)?;
        if removed.is_empty() {
            return Err(stuck(graph, &mask, target_flops));
        }
        current = pseudo_prune(&current, graph, &mask)?;
        log.push(PruneLogRow {
            iteration: step,
            loss: total / config.prune_frequency as f64,
            flops: masked_flops(graph, &mask)? as f64,
            removed_groups: removed,
        });
        step += 1;
    }
    mask.validate(graph)?;
    Ok(PruneOutcome {
        mask,
        log,
        state: Some(current),
        batches,
    })
}
