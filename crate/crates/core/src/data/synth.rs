//! Synthetic images with a planted subgroup rendering shift.
//!
//! Every class has a fixed motif; the motifs are orthogonalized so no class
//! pattern is a linear mix of another. Groups flagged `shifted` render the
//! motif translated down-right by `shift` pixels with inverted contrast, so
//! both groups carry the class signal but through different features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{fnv1a, LabeledDataset};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub name: String,
    #[serde(default)]
    pub shifted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellCount {
    pub class: usize,
    pub group: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    #[serde(default = "default_size")]
    pub height: usize,
    #[serde(default = "default_size")]
    pub width: usize,
    pub classes: usize,
    pub groups: Vec<GroupSpec>,
    pub counts: Vec<CellCount>,
    pub amplitude: f64,
    pub noise_std: f64,
    #[serde(default = "default_shift")]
    pub shift: usize,
    #[serde(default = "default_background")]
    pub background: f64,
    pub seed: u64,
}

fn default_size() -> usize {
    16
}
fn default_shift() -> usize {
    4
}
fn default_background() -> f64 {
    0.5
}

impl SynthConfig {
    /// Two classes, majority group `A` and shifted minority group `B`, with
    /// the given per-class cell counts.
    pub fn two_group(count_a: usize, count_b: usize, seed: u64) -> Self {
        Self::with_cells(&[(count_a, count_b), (count_a, count_b)], seed)
    }

    /// `cells[class] = (count in A, count in B)`.
    pub fn with_cells(cells: &[(usize, usize)], seed: u64) -> Self {
        let mut counts = vec![];
        for (class, &(a, b)) in cells.iter().enumerate() {
            counts.push(CellCount {
                class,
                group: "A".into(),
                count: a,
            });
            counts.push(CellCount {
                class,
                group: "B".into(),
                count: b,
            });
        }
        Self {
            height: 16,
            width: 16,
            classes: cells.len(),
            groups: vec![
                GroupSpec {
                    name: "A".into(),
                    shifted: false,
                },
                GroupSpec {
                    name: "B".into(),
                    shifted: true,
                },
            ],
            counts,
            amplitude: 0.3,
            noise_std: 0.3,
            shift: 4,
            background: 0.5,
            seed,
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().map(|c| c.count).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Data(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.classes > 4 {
            return Err(Error::Data("the synthetic generator has motifs for at most 4 classes".into()));
        }
        if self.groups.is_empty() {
            return Err(Error::Data("at least one group is required".into()));
        }
        if self.height < 12 || self.width < 12 || self.shift + 10 > self.height.min(self.width) {
            return Err(Error::Data(format!(
                "image {}x{} too small for motifs shifted by {}",
                self.height, self.width, self.shift
            )));
        }
        if !(self.noise_std >= 0.0) || !self.amplitude.is_finite() {
            return Err(Error::Data("noise_std must be >= 0 and amplitude finite".into()));
        }
        for c in &self.counts {
            if c.class >= self.classes {
                return Err(Error::Data(format!("count for class {} out of range", c.class)));
            }
            if !self.groups.iter().any(|g| g.name == c.group) {
                return Err(Error::Data(format!("count for unknown group `{}`", c.group)));
            }
        }
        if self.total() == 0 {
            return Err(Error::Data("synthetic config has zero total samples".into()));
        }
        Ok(())
    }
}

/// Unit-max motif per class, Gram–Schmidt orthogonalized, in a `h×w` frame.
pub(crate) fn class_patterns(classes: usize, h: usize, w: usize) -> Vec<Vec<f64>> {
    let mut raw = vec![vec![0.0; h * w]; classes];
    let set = |p: &mut Vec<f64>, r: usize, c: usize| p[r * w + c] = 1.0;
    for (k, p) in raw.iter_mut().enumerate() {
        match k {
            // horizontal bar
            0 => {
                for r in 5..7 {
                    for c in 2..10 {
                        set(p, r, c);
                    }
                }
            }
            // vertical bar
            1 => {
                for r in 2..10 {
                    for c in 5..7 {
                        set(p, r, c);
                    }
                }
            }
            // diagonal
            2 => {
                for i in 2..10 {
                    set(p, i, i);
                    if i + 1 < 10 {
                        set(p, i, i + 1);
                    }
                }
            }
            // hollow square
            _ => {
                for i in 2..10 {
                    set(p, 2, i);
                    set(p, 9, i);
                    set(p, i, 2);
                    set(p, i, 9);
                }
            }
        }
    }
    let mut basis: Vec<Vec<f64>> = vec![];
    for p in raw {
        let mut v = p.clone();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            let nn: f64 = b.iter().map(|x| x * x).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot / nn * y;
            }
        }
        basis.push(v);
    }
    for v in &mut basis {
        let m = v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        v.iter_mut().for_each(|x| *x /= m);
    }
    basis
}

fn shifted(p: &[f64], h: usize, w: usize, s: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for r in 0..h - s {
        for c in 0..w - s {
            out[(r + s) * w + c + s] = p[r * w + c];
        }
    }
    out
}

/// Renders `config` into a dataset. Samples appear cell by cell in the order
/// of `config.counts`; pixel values are clamped to `[0, 1]`.
pub fn generate(config: &SynthConfig) -> Result<LabeledDataset> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let patterns = class_patterns(config.classes, h, w);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = (config.noise_std > 0.0).then(|| Normal::new(0.0, config.noise_std).expect("valid std"));

    let total = config.total();
    let mut images = Vec::with_capacity(total * h * w);
    let mut labels = Vec::with_capacity(total);
    let mut groups = Vec::with_capacity(total);
    for cell in &config.counts {
        let gi = config.groups.iter().position(|g| g.name == cell.group).expect("validated");
        let motif = if config.groups[gi].shifted {
            shifted(&patterns[cell.class], h, w, config.shift)
                .into_iter()
                .map(|v| -v)
                .collect()
        } else {
            patterns[cell.class].clone()
        };
        for _ in 0..cell.count {
            for &m in &motif {
                let mut v = config.background + config.amplitude * m;
                if let Some(n) = &noise {
                    v += n.sample(&mut rng);
                }
                images.push(v.clamp(0.0, 1.0));
            }
            labels.push(cell.class);
            groups.push(gi);
        }
    }
    let tag = serde_json::to_string(config)?;
    LabeledDataset::new(
        [1, h, w],
        images,
        labels,
        groups,
        config.groups.iter().map(|g| g.name.clone()).collect(),
        config.classes,
        format!("synthetic:{:016x}", fnv1a(tag.as_bytes())),
    )
}
