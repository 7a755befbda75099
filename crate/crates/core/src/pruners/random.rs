use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{masked_flops, stuck, PruneLogRow, PruneOutcome};
use crate::error::Result;
use crate::prune::{check_reachable, DependencyGraph, PruneMask};

/// Removes uniformly drawn eligible groups until the masked FLOPs reach
/// `target_flops`.
pub fn random_prune(graph: &DependencyGraph, target_flops: u64, seed: u64) -> Result<PruneOutcome> {
    let mut mask = PruneMask::all_keep(graph);
    let mut log = vec![];
    if masked_flops(graph, &mask)? > target_flops {
        check_reachable(graph, target_flops)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut iteration = 0;
    while masked_flops(graph, &mask)? > target_flops {
        let eligible: Vec<usize> = (0..graph.groups.len()).filter(|&g| mask.can_remove(graph, g)).collect();
        if eligible.is_empty() {
            return Err(stuck(graph, &mask, target_flops));
        }
        let g = eligible[rng.random_range(0..eligible.len())];
        mask.remove_group(graph, g);
        log.push(PruneLogRow {
            iteration,
            loss: f64::NAN,
            flops: masked_flops(graph, &mask)? as f64,
            removed_groups: vec![g],
        });
        iteration += 1;
    }
    mask.validate(graph)?;
    Ok(PruneOutcome {
        mask,
        log,
        state: None,
        batches: 0,
    })
}
