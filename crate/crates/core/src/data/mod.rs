//! Labeled image datasets with subgroup tags.

mod manifest;
mod split;
mod synth;

pub use manifest::{export_manifest, load_manifest, ManifestLoad, SkippedRow};
pub use split::{split, Stratify};
pub use synth::{generate, CellCount, GroupSpec, SynthConfig};

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images, labels, and one group tag per sample, plus named index splits.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    image_shape: [usize; 3],
    images: Arc<Vec<f64>>,
    labels: Vec<usize>,
    groups: Vec<usize>,
    group_names: Vec<String>,
    classes: usize,
    provenance: String,
    splits: BTreeMap<String, Vec<usize>>,
}

impl LabeledDataset {
    pub fn new(
        image_shape: [usize; 3],
        images: Vec<f64>,
        labels: Vec<usize>,
        groups: Vec<usize>,
        group_names: Vec<String>,
        classes: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let n = labels.len();
        let per: usize = image_shape.iter().product();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if images.len() != n * per || groups.len() != n {
            return Err(Error::Data(format!(
                "{n} labels but {} image values ({per} per image) and {} group tags",
                images.len(),
                groups.len()
            )));
        }
        if classes < 2 {
            return Err(Error::Data(format!("need at least 2 classes, got {classes}")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
        }
        if let Some(&bad) = groups.iter().find(|&&g| g >= group_names.len()) {
            return Err(Error::Data(format!("group index {bad} has no name")));
        }
        Ok(Self {
            image_shape,
            images: Arc::new(images),
            labels,
            groups,
            group_names,
            classes,
            provenance: provenance.into(),
            splits: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let per: usize = self.image_shape.iter().product();
        &self.images[i * per..(i + 1) * per]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn group_index(&self, i: usize) -> usize {
        self.groups[i]
    }

    pub fn group(&self, i: usize) -> &str {
        &self.group_names[self.groups[i]]
    }

    pub fn group_names(&self) -> &[String] {
        &self.group_names
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    /// Stacks the given samples into `[N, C, H, W]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let per: usize = self.image_shape.iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Data(format!("sample index {i} out of range")));
            }
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.image_shape;
        Tensor::new(vec![indices.len(), c, h, w], data)
    }

    pub fn splits(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.splits
    }

    pub fn split_indices(&self, name: &str) -> Result<&[usize]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Data(format!("dataset has no `{name}` split")))
    }

    /// Replaces the split table. Splits must be disjoint and in range.
    pub fn with_splits(mut self, splits: BTreeMap<String, Vec<usize>>) -> Result<Self> {
        let mut seen = vec![false; self.len()];
        for (name, idx) in &splits {
            for &i in idx {
                if i >= self.len() {
                    return Err(Error::Data(format!("split `{name}` index {i} out of range")));
                }
                if seen[i] {
                    return Err(Error::Data(format!("sample {i} appears in more than one split")));
                }
                seen[i] = true;
            }
        }
        self.splits = splits;
        Ok(self)
    }

    /// Appends `other`'s samples; its splits are carried over with offset
    /// indices. Group names are merged by name.
    pub fn concat(&self, other: &LabeledDataset) -> Result<Self> {
        if self.image_shape != other.image_shape {
            return Err(Error::Data("cannot concatenate datasets with different image shapes".into()));
        }
        let mut names = self.group_names.clone();
        let remap: Vec<usize> = other
            .group_names
            .iter()
            .map(|g| match names.iter().position(|n| n == g) {
                Some(i) => i,
                None => {
                    names.push(g.clone());
                    names.len() - 1
                }
            })
            .collect();
        let mut images = (*self.images).clone();
        images.extend_from_slice(&other.images);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let mut groups = self.groups.clone();
        groups.extend(other.groups.iter().map(|&g| remap[g]));
        let mut out = Self::new(
            self.image_shape,
            images,
            labels,
            groups,
            names,
            self.classes.max(other.classes),
            format!("{}+{}", self.provenance, other.provenance),
        )?;
        let off = self.len();
        let mut splits = self.splits.clone();
        for (name, idx) in &other.splits {
            splits.entry(name.clone()).or_default().extend(idx.iter().map(|i| i + off));
        }
        out = out.with_splits(splits)?;
        Ok(out)
    }

    /// Sample counts per `(class, group name)`.
    pub fn cell_counts(&self, indices: &[usize]) -> BTreeMap<(usize, String), usize> {
        let mut m = BTreeMap::new();
        for &i in indices {
            *m.entry((self.label(i), self.group(i).to_string())).or_insert(0) += 1;
        }
        m
    }
}

/// 64-bit FNV-1a, used for provenance tags.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> LabeledDataset {
        LabeledDataset::new(
            [1, 1, 2],
            vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
            vec![0, 1, 1],
            vec![0, 0, 1],
            vec!["A".into(), "B".into()],
            2,
            "test",
        )
        .unwrap()
    }

    #[test]
    fn batch_stacks_images() {
        let d = tiny();
        let b = d.batch(&[2, 0]).unwrap();
        assert_eq!(b.shape(), &[2, 1, 1, 2]);
        assert_eq!(b.data(), &[4.0, 5.0, 0.0, 1.0]);
        assert!(d.batch(&[]).is_err());
    }

    #[test]
    fn overlapping_splits_rejected() {
        let d = tiny();
        let mut s = BTreeMap::new();
        s.insert("train".to_string(), vec![0, 1]);
        s.insert("test".to_string(), vec![1]);
        assert!(d.with_splits(s).is_err());
    }

    #[test]
    fn concat_offsets_splits_and_merges_groups() {
        let mut s = BTreeMap::new();
        s.insert("test".to_string(), vec![0]);
        let a = tiny();
        let b = tiny().with_splits(s).unwrap();
        let c = a.concat(&b).unwrap();
        assert_eq!(c.len(), 6);
        assert_eq!(c.split_indices("test").unwrap(), &[3]);
        assert_eq!(c.group_names().len(), 2);
    }

    #[test]
    fn invalid_label_rejected() {
        let err = LabeledDataset::new([1, 1, 1], vec![0.0], vec![2], vec![0], vec!["A".into()], 2, "x");
        assert!(err.is_err());
    }
}
