//! Mask-producing pruning methods: trainable gates, first-order Taylor
//! importance, and uniform random selection.

mod autobot;
mod random;
mod taylor;

pub use autobot::{autobot_prune, AutoBotConfig, SoftFlops};
pub use random::random_prune;
pub use taylor::{feature_map_gradients, group_scores, raw_filter_scores, taylor_importance, taylor_prune, FeatureMapGrads, TaylorConfig};

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::prune::{count_flops_topo, DependencyGraph, PruneMask, MIN_KEEP};
use crate::train::epoch_batches;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneLogRow {
    pub iteration: usize,
    pub loss: f64,
    /// Masked MACs, or the gate-interpolated estimate while gates train.
    pub flops: f64,
    pub removed_groups: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct PruneOutcome {
    pub mask: PruneMask,
    pub log: Vec<PruneLogRow>,
    /// Weights trained during pruning, for methods that train.
    pub state: Option<ModelState>,
    /// Training batches consumed.
    pub batches: usize,
}

/// Writes `iteration,loss,flops,removed_groups` (groups joined by `;`).
pub fn write_prune_log(log: &[PruneLogRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "loss", "flops", "removed_groups"])?;
    for r in log {
        let groups: Vec<String> = r.removed_groups.iter().map(usize::to_string).collect();
        w.write_record([r.iteration.to_string(), r.loss.to_string(), r.flops.to_string(), groups.join(";")])?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn masked_flops(graph: &DependencyGraph, mask: &PruneMask) -> Result<u64> {
    Ok(count_flops_topo(graph.topology(), Some(mask))?.total)
}

pub(crate) fn original_flops(graph: &DependencyGraph) -> Result<u64> {
    Ok(count_flops_topo(graph.topology(), None)?.total)
}

/// Error for a removal loop that ran out of eligible groups above `target`.
pub(crate) fn stuck(graph: &DependencyGraph, mask: &PruneMask, target: u64) -> Error {
    let floor = masked_flops(graph, mask).unwrap_or(u64::MAX);
    let layers: Vec<String> = (0..graph.conv_count())
        .map(|c| graph.conv_id(c).to_string())
        .filter(|id| mask.kept_count(id) == MIN_KEEP)
        .collect();
    Error::UnreachableTarget {
        target,
        floor,
        layers: layers.join(", "),
    }
}

/// Removes groups from `order` (skipping ineligible ones) until the masked
/// FLOPs reach `target` or `limit` groups are gone. Returns the removed ids.
pub(crate) fn remove_in_order(graph: &DependencyGraph, mask: &mut PruneMask, order: &[usize], target: u64, limit: usize) -> Result<Vec<usize>> {
    let mut removed = vec![];
    for &g in order {
        if removed.len() >= limit || masked_flops(graph, mask)? <= target {
            break;
        }
        if mask.can_remove(graph, g) {
            mask.remove_group(graph, g);
            removed.push(g);
        }
    }
    Ok(removed)
}

/// Endless shuffled mini-batches over `indices`, one epoch after another.
pub(crate) struct BatchStream {
    indices: Vec<usize>,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    queue: VecDeque<Vec<usize>>,
}

impl BatchStream {
    pub(crate) fn new(indices: &[usize], batch_size: usize, seed: u64) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(Self {
            indices: indices.to_vec(),
            batch_size,
            seed,
            epoch: 0,
            queue: VecDeque::new(),
        })
    }

    pub(crate) fn next_batch(&mut self) -> Vec<usize> {
        if self.queue.is_empty() {
            self.queue = epoch_batches(&self.indices, self.batch_size, self.seed, self.epoch).into();
            self.epoch += 1;
        }
        self.queue.pop_front().expect("non-empty epoch")
    }
}

#[cfg(test)]
mod tests;
