use std::collections::BTreeMap;

use super::config::{DataSource, SynthData, SynthPreset};
use crate::data::{generate, load_manifest, split, LabeledDataset, Stratify, SynthConfig};
use crate::error::{Error, Result};

/// A dataset with `train`, `test` and usually `val` splits, plus
/// descriptive metadata.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub dataset: LabeledDataset,
    pub metadata: BTreeMap<String, String>,
}

impl PreparedData {
    pub fn train(&self) -> &[usize] {
        self.dataset.split_indices("train").expect("prepared data has a train split")
    }

    pub fn val(&self) -> Option<&[usize]> {
        self.dataset.split_indices("val").ok().filter(|v| !v.is_empty())
    }

    pub fn test(&self) -> &[usize] {
        self.dataset.split_indices("test").expect("prepared data has a test split")
    }
}

fn synth_config(s: &SynthData, cells: &[(usize, usize)], seed: u64) -> SynthConfig {
    SynthConfig {
        height: s.size,
        width: s.size,
        amplitude: s.amplitude,
        noise_std: s.noise_std,
        shift: s.shift,
        background: s.background,
        ..SynthConfig::with_cells(cells, seed)
    }
}

/// Per-class `(group A, group B)` counts of the training pool.
pub fn pool_cells(s: &SynthData, preset: SynthPreset) -> Vec<(usize, usize)> {
    let n = s.subset_n;
    (0..s.classes)
        .map(|c| match preset {
            SynthPreset::Biased => (s.majority_per_class, s.minority_per_class),
            SynthPreset::Balanced => (n, n),
            SynthPreset::GroupImbalanced => (5 * n, n),
            SynthPreset::ClassImbalanced => {
                if c == 0 {
                    (5 * n, 5 * n)
                } else {
                    (n, n)
                }
            }
        })
        .collect()
}

/// Builds a synthetic preset: the pool is split into train/val stratified by
/// class × group; the test split is a separately drawn balanced set shared
/// by all presets with the same seed.
pub fn synthetic(s: &SynthData, preset: SynthPreset) -> Result<PreparedData> {
    let cells = pool_cells(s, preset);
    let pool = generate(&synth_config(s, &cells, s.seed))?;
    let fractions: Vec<(&str, f64)> = if s.val_fraction > 0.0 {
        vec![("train", 1.0 - s.val_fraction), ("val", s.val_fraction)]
    } else {
        vec![("train", 1.0)]
    };
    let pool = split(&pool, None, &fractions, s.seed, Stratify::ClassGroup)?;
    let test_cells = vec![(s.test_per_cell, s.test_per_cell); s.classes];
    let test = generate(&synth_config(s, &test_cells, s.seed.wrapping_add(1)))?;
    let mut splits = BTreeMap::new();
    splits.insert("test".to_string(), test.all_indices());
    let dataset = pool.concat(&test.with_splits(splits)?)?;

    let mut metadata = BTreeMap::new();
    metadata.insert("provenance".into(), dataset.provenance().to_string());
    let (a, b): (usize, usize) = cells.iter().fold((0, 0), |acc, c| (acc.0 + c.0, acc.1 + c.1));
    metadata.insert("minority_share".into(), (b as f64 / (a + b) as f64).to_string());
    match preset {
        SynthPreset::GroupImbalanced => {
            metadata.insert("realized_ratio".into(), (a as f64 / b as f64).to_string());
        }
        SynthPreset::ClassImbalanced => {
            let c0 = cells[0].0 + cells[0].1;
            let c1 = cells[1].0 + cells[1].1;
            metadata.insert("realized_ratio".into(), (c0 as f64 / c1 as f64).to_string());
        }
        _ => {}
    }
    Ok(PreparedData { dataset, metadata })
}

/// Loads the configured source. Manifests without a `train` split are split
/// 80/10/10 by class × group.
pub fn prepare(source: &DataSource) -> Result<PreparedData> {
    match source {
        DataSource::Synthetic(s) => synthetic(s, s.preset),
        DataSource::Manifest { path } => {
            let load = load_manifest(path)?;
            for s in &load.skipped {
                log::warn!("manifest line {} skipped ({}): {}", s.line, s.path, s.reason);
            }
            let mut d = load.dataset;
            if d.split_indices("train").is_err() {
                d = split(&d, None, &[("train", 0.8), ("val", 0.1), ("test", 0.1)], 0, Stratify::ClassGroup)?;
            }
            if d.split_indices("test").is_err() {
                return Err(Error::Data("manifest has a train split but no test split".into()));
            }
            let mut metadata = BTreeMap::new();
            metadata.insert("provenance".into(), d.provenance().to_string());
            metadata.insert("skipped_rows".into(), load.skipped.len().to_string());
            Ok(PreparedData { dataset: d, metadata })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn biased_preset_composition() {
        let s = SynthData {
            majority_per_class: 95,
            minority_per_class: 5,
            test_per_cell: 10,
            ..Default::default()
        };
        let p = synthetic(&s, SynthPreset::Biased).unwrap();
        let pool: Vec<usize> = p.train().iter().chain(p.val().unwrap()).copied().collect();
        let counts = p.dataset.cell_counts(&pool);
        assert_eq!(counts[&(0, "A".to_string())], 95);
        assert_eq!(counts[&(1, "B".to_string())], 5);
        assert_eq!(p.metadata["minority_share"], "0.05");
        let t = p.dataset.cell_counts(p.test());
        assert!(t.values().all(|&v| v == 10));
    }

    #[test]
    fn subset_presets() {
        let s = SynthData {
            subset_n: 10,
            test_per_cell: 5,
            ..Default::default()
        };
        let bal = synthetic(&s, SynthPreset::Balanced).unwrap();
        let pool: Vec<usize> = bal.train().iter().chain(bal.val().unwrap()).copied().collect();
        assert!(bal.dataset.cell_counts(&pool).values().all(|&v| v == 10));
        for preset in [SynthPreset::GroupImbalanced, SynthPreset::ClassImbalanced] {
            let p = synthetic(&s, preset).unwrap();
            assert_eq!(p.metadata["realized_ratio"], "5");
            // the test split is shared
            assert_eq!(p.dataset.batch(p.test()).unwrap(), bal.dataset.batch(bal.test()).unwrap());
        }
    }
}
