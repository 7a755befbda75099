//! Accuracy and ROC-AUC, overall and per subgroup.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::tensor::Tensor;

/// Mann–Whitney AUC via average ranks; ties count one half.
pub fn roc_auc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} labels",
            scores.len(),
            positive.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc(format!("{n_pos} positives and {n_neg} negatives")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OvoAuc {
    pub auc: f64,
    /// Ordered pairs skipped because a class had no samples.
    pub skipped_pairs: Vec<(usize, usize)>,
}

/// Mean over ordered class pairs `(j, k)` of the binary AUC on samples of
/// classes `j` and `k`, scoring `p_j / (p_j + p_k)`.
pub fn roc_auc_ovo(probs: &Tensor, labels: &[usize]) -> Result<OvoAuc> {
    let s = probs.shape();
    if s.len() != 2 || s[0] != labels.len() || s[1] < 2 {
        return Err(Error::InvalidArgument(format!(
            "probabilities {s:?} for {} labels",
            labels.len()
        )));
    }
    let k = s[1];
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!("label {l} out of range for {k} classes")));
    }
    let mut present = vec![false; k];
    labels.iter().for_each(|&l| present[l] = true);
    let mut total = 0.0;
    let mut pairs = 0usize;
    let mut skipped = vec![];
    for a in 0..k {
        for b in 0..k {
            if a == b {
                continue;
            }
            if !present[a] || !present[b] {
                skipped.push((a, b));
                continue;
            }
            let mut scores = vec![];
            let mut pos = vec![];
            for (i, &l) in labels.iter().enumerate() {
                if l == a || l == b {
                    let (pa, pb) = (probs.row(i)[a], probs.row(i)[b]);
                    let d = pa + pb;
                    scores.push(if d > 0.0 { pa / d } else { 0.5 });
                    pos.push(l == a);
                }
            }
            total += roc_auc_binary(&scores, &pos)?;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::UndefinedAuc("no class pair has samples of both classes".into()));
    }
    Ok(OvoAuc {
        auc: total / pairs as f64,
        skipped_pairs: skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    /// `None` when the group holds a single class.
    pub auc: Option<f64>,
    pub count: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub groups: BTreeMap<String, GroupReport>,
    /// Every sample got the same predicted class.
    pub degenerate: bool,
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

fn auc_or_none(probs: &Tensor, labels: &[usize]) -> Result<Option<f64>> {
    match roc_auc_ovo(probs, labels) {
        Ok(a) => Ok(Some(a.auc)),
        Err(Error::UndefinedAuc(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Overall and per-group accuracy and one-vs-one AUC on `indices`.
pub fn evaluate(state: &ModelState, data: &LabeledDataset, indices: &[usize]) -> Result<EvalReport> {
    let preds = state.predict(data, indices)?;
    let labels: Vec<usize> = indices.iter().map(|&i| data.label(i)).collect();
    let k = state.classes();
    let mut by_group: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (row, &i) in indices.iter().enumerate() {
        by_group.entry(data.group(i).to_string()).or_default().push(row);
    }
    let mut groups = BTreeMap::new();
    for (name, rows) in by_group {
        let gl: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
        let gp: Vec<usize> = rows.iter().map(|&r| preds.classes[r]).collect();
        let probs = Tensor::new(
            vec![rows.len(), k],
            rows.iter().flat_map(|&r| preds.probs.row(r).to_vec()).collect(),
        )?;
        groups.insert(
            name,
            GroupReport {
                auc: auc_or_none(&probs, &gl)?,
                count: rows.len(),
                accuracy: accuracy(&gp, &gl),
            },
        );
    }
    Ok(EvalReport {
        count: indices.len(),
        accuracy: accuracy(&preds.classes, &labels),
        auc: auc_or_none(&preds.probs, &labels)?,
        groups,
        degenerate: preds.classes.iter().all(|&c| c == preds.classes[0]),
    })
}
