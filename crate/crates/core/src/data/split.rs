use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Stratify {
    #[default]
    None,
    Class,
    ClassGroup,
}

/// Largest-remainder apportionment of `n` items over `fractions`; ties in the
/// remainder go to the earlier split.
fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = n - sizes.iter().sum::<usize>().min(n);
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if fractions[i] > 0.0 {
            sizes[i] += 1;
            left -= 1;
        }
    }
    sizes
}

/// Partitions `pool` (or every sample when `pool` is `None`) into the named
/// splits. Existing splits outside the pool are kept.
pub fn split(
    dataset: &LabeledDataset,
    pool: Option<&[usize]>,
    fractions: &[(&str, f64)],
    seed: u64,
    stratify: Stratify,
) -> Result<LabeledDataset> {
    let total: f64 = fractions.iter().map(|(_, f)| f).sum();
    if (total - 1.0).abs() > 1e-9 || fractions.iter().any(|(_, f)| !(*f >= 0.0)) {
        return Err(Error::Data(format!("split fractions must be >= 0 and sum to 1, got {total}")));
    }
    let pool: Vec<usize> = match pool {
        Some(p) => p.to_vec(),
        None => dataset.all_indices(),
    };
    let fr: Vec<f64> = fractions.iter().map(|(_, f)| *f).collect();
    let active = fr.iter().filter(|&&f| f > 0.0).count();

    let mut strata: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for &i in &pool {
        let key = match stratify {
            Stratify::None => (0, 0),
            Stratify::Class => (dataset.label(i), 0),
            Stratify::ClassGroup => (dataset.label(i), dataset.group_index(i)),
        };
        strata.entry(key).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: Vec<Vec<usize>> = vec![vec![]; fractions.len()];
    for (key, mut members) in strata {
        if stratify != Stratify::None && members.len() < active {
            return Err(Error::Data(format!(
                "stratum (class {}, group {}) has {} samples, fewer than {active} splits",
                key.0,
                dataset.group_names()[key.1],
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let sizes = apportion(members.len(), &fr);
        let mut start = 0;
        for (part, size) in parts.iter_mut().zip(sizes) {
            part.extend_from_slice(&members[start..start + size]);
            start += size;
        }
    }

    let mut splits: BTreeMap<String, Vec<usize>> = dataset
        .splits()
        .iter()
        .map(|(k, v)| (k.clone(), v.iter().copied().filter(|i| !pool.contains(i)).collect::<Vec<_>>()))
        .filter(|(_, v)| !v.is_empty())
        .collect();
    for ((name, _), mut part) in fractions.iter().zip(parts) {
        part.sort_unstable();
        splits.insert(name.to_string(), part);
    }
    dataset.clone().with_splits(splits)
}
