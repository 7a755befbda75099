//! Performance-weighted cross-entropy.
//!
//! Every sample gets a weight `θ + (1 − ŷ)^γ`, where `ŷ` is the unpruned
//! model's probability for the true class, and a corrected soft label: the
//! unpruned model's output when its prediction is right, the one-hot truth
//! otherwise. Both are computed once and never change afterwards.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{argmax, ModelState};
use crate::tensor::{Tape, Tensor, Var};

/// Added inside the log of every cross-entropy term.
pub const LOG_EPS: f64 = 1e-12;

const PROB_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    /// Divides by the batch size.
    Mean,
    /// Divides by the sum of the per-sample coefficients.
    WeightedMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Weights and corrected soft labels.
    #[default]
    Full,
    /// Weights with the base target.
    WeightsOnly,
    /// Corrected soft labels with unit weights.
    SoftLabelsOnly,
    /// Unit weights with the base target.
    PlainCe,
}

impl Variant {
    pub fn uses_weights(self) -> bool {
        matches!(self, Variant::Full | Variant::WeightsOnly)
    }

    pub fn uses_soft_labels(self) -> bool {
        matches!(self, Variant::Full | Variant::SoftLabelsOnly)
    }
}

/// Target used whenever the variant does not substitute corrected soft labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BaseTarget {
    /// One-hot true labels.
    #[default]
    TrueLabels,
    /// The unpruned model's probabilities.
    OriginalOutputs,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PwConfig {
    pub theta: f64,
    pub gamma: f64,
    #[serde(default)]
    pub reduction: Reduction,
    #[serde(default)]
    pub variant: Variant,
}

impl Default for PwConfig {
    fn default() -> Self {
        Self {
            theta: 0.3,
            gamma: 1.0,
            reduction: Reduction::Sum,
            variant: Variant::Full,
        }
    }
}

impl PwConfig {
    pub fn validate(&self) -> Result<()> {
        check_theta_gamma(self.theta, self.gamma)
    }
}

fn check_theta_gamma(theta: f64, gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::InvalidArgument(format!("theta must lie in [0, 1], got {theta}")));
    }
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidArgument(format!("gamma must be finite and >= 0, got {gamma}")));
    }
    Ok(())
}

/// `θ + (1 − ŷ)^γ`, with `0^0 = 1`.
pub fn compute_weight(prob_true_class: f64, theta: f64, gamma: f64) -> Result<f64> {
    check_theta_gamma(theta, gamma)?;
    if !(0.0..=1.0).contains(&prob_true_class) {
        return Err(Error::InvalidArgument(format!(
            "probability must lie in [0, 1], got {prob_true_class}"
        )));
    }
    let base = 1.0 - prob_true_class;
    let term = if gamma == 0.0 { 1.0 } else { base.powf(gamma) };
    Ok(theta + term)
}

fn check_probability_row(row: &[f64]) -> Result<()> {
    let sum: f64 = row.iter().sum();
    if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > PROB_TOL {
        return Err(Error::InvalidArgument(format!(
            "not a probability vector (sum {sum}): {row:?}"
        )));
    }
    Ok(())
}

/// `orig_probs` when its argmax (lowest index on ties) is `label`, else the
/// one-hot of `label`.
pub fn correct_soft_label(orig_probs: &[f64], label: usize) -> Result<Vec<f64>> {
    check_probability_row(orig_probs)?;
    if label >= orig_probs.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            orig_probs.len()
        )));
    }
    if argmax(orig_probs) == label {
        Ok(orig_probs.to_vec())
    } else {
        let mut v = vec![0.0; orig_probs.len()];
        v[label] = 1.0;
        Ok(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleAnnotation {
    pub orig_probs: Vec<f64>,
    pub true_label: usize,
    pub predicted_class: usize,
    pub prob_true_class: f64,
    pub weight: f64,
    pub corrected_soft_label: Vec<f64>,
}

impl SampleAnnotation {
    pub fn new(orig_probs: Vec<f64>, true_label: usize, theta: f64, gamma: f64) -> Result<Self> {
        let corrected_soft_label = correct_soft_label(&orig_probs, true_label)?;
        let prob_true_class = orig_probs[true_label];
        Ok(Self {
            predicted_class: argmax(&orig_probs),
            weight: compute_weight(prob_true_class.clamp(0.0, 1.0), theta, gamma)?,
            orig_probs,
            true_label,
            prob_true_class,
            corrected_soft_label,
        })
    }

    pub fn correct(&self) -> bool {
        self.predicted_class == self.true_label
    }

    fn one_hot(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.orig_probs.len()];
        v[self.true_label] = 1.0;
        v
    }
}

/// Frozen per-sample annotations, indexed like the dataset they were made
/// from.
#[derive(Clone, Debug, PartialEq)]
pub struct Annotations {
    theta: f64,
    gamma: f64,
    samples: Arc<Vec<SampleAnnotation>>,
}

impl Annotations {
    pub fn from_samples(samples: Vec<SampleAnnotation>, theta: f64, gamma: f64) -> Result<Self> {
        check_theta_gamma(theta, gamma)?;
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self {
            theta,
            gamma,
            samples: Arc::new(samples),
        })
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, i: usize) -> &SampleAnnotation {
        &self.samples[i]
    }

    pub fn samples(&self) -> &[SampleAnnotation] {
        &self.samples
    }

    /// Writes `sample_id,prob_true_class,weight,correct_flag`.
    pub fn export_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["sample_id", "prob_true_class", "weight", "correct_flag"])?;
        for (i, s) in self.samples.iter().enumerate() {
            w.write_record([
                i.to_string(),
                s.prob_true_class.to_string(),
                s.weight.to_string(),
                (s.correct() as u8).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Annotates every sample of `dataset` with the unpruned model `original`.
pub fn annotate(original: &ModelState, dataset: &LabeledDataset, theta: f64, gamma: f64) -> Result<Annotations> {
    check_theta_gamma(theta, gamma)?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if original.classes() != dataset.classes() {
        return Err(Error::InvalidArgument(format!(
            "model has {} classes, dataset has {}",
            original.classes(),
            dataset.classes()
        )));
    }
    let preds = original.predict(dataset, &dataset.all_indices())?;
    let samples = (0..dataset.len())
        .map(|i| SampleAnnotation::new(preds.probs.row(i).to_vec(), dataset.label(i), theta, gamma))
        .collect::<Result<Vec<_>>>()?;
    Annotations::from_samples(samples, theta, gamma)
}

/// Weighted cross-entropy of `probs` (`[N, K]`) against per-sample targets
/// chosen by `variant` and `base`.
pub fn weighted_ce(
    tape: &mut Tape,
    batch: &[&SampleAnnotation],
    probs: Var,
    variant: Variant,
    base: BaseTarget,
    reduction: Reduction,
) -> Result<Var> {
    let shape = tape.value(probs).shape().to_vec();
    if shape.len() != 2 || shape[0] != batch.len() {
        return Err(Error::InvalidArgument(format!(
            "{} annotations for probability rows of shape {shape:?}",
            batch.len()
        )));
    }
    let k = shape[1];
    for row in tape.value(probs).data().chunks_exact(k) {
        check_probability_row(row)?;
    }
    let mut targets = Vec::with_capacity(batch.len() * k);
    let mut coeffs = Vec::with_capacity(batch.len());
    for a in batch {
        if a.orig_probs.len() != k {
            return Err(Error::InvalidArgument(format!(
                "annotation has {} classes, rows have {k}",
                a.orig_probs.len()
            )));
        }
        if variant.uses_soft_labels() {
            targets.extend_from_slice(&a.corrected_soft_label);
        } else {
            match base {
                BaseTarget::TrueLabels => targets.extend(a.one_hot()),
                BaseTarget::OriginalOutputs => targets.extend_from_slice(&a.orig_probs),
            }
        }
        coeffs.push(if variant.uses_weights() { a.weight } else { 1.0 });
    }
    let denom = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => batch.len() as f64,
        Reduction::WeightedMean => {
            // relative to the largest weight, so constant weights give exactly 1/N
            let max = coeffs.iter().cloned().fold(0.0, f64::max);
            if max > 0.0 {
                coeffs.iter_mut().for_each(|c| *c /= max);
            }
            coeffs.iter().sum()
        }
    };
    if denom != 1.0 {
        if !(denom > 0.0) {
            return Err(Error::InvalidArgument("weighted mean over zero total weight".into()));
        }
        coeffs.iter_mut().for_each(|c| *c /= denom);
    }
    tape.soft_cross_entropy(probs, Tensor::new(vec![batch.len(), k], targets)?, coeffs, LOG_EPS)
}

/// PW loss against one-hot truth as the base target.
pub fn pw_loss(tape: &mut Tape, batch: &[&SampleAnnotation], probs: Var, config: &PwConfig) -> Result<Var> {
    config.validate()?;
    weighted_ce(tape, batch, probs, config.variant, BaseTarget::TrueLabels, config.reduction)
}

/// The loss a pruner or trainer minimizes: a variant, a base target and a
/// reduction over shared frozen annotations.
#[derive(Clone, Debug)]
pub struct LossProvider {
    pub annotations: Annotations,
    pub variant: Variant,
    pub base: BaseTarget,
    pub reduction: Reduction,
}

impl LossProvider {
    /// Cross-entropy against the true labels of `dataset`, needing no
    /// reference model.
    pub fn cross_entropy(dataset: &LabeledDataset, reduction: Reduction) -> Result<Self> {
        let k = dataset.classes();
        let samples = (0..dataset.len())
            .map(|i| {
                let mut p = vec![0.0; k];
                p[dataset.label(i)] = 1.0;
                SampleAnnotation::new(p, dataset.label(i), 0.0, 0.0)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::plain(Annotations::from_samples(samples, 0.0, 0.0)?, BaseTarget::TrueLabels, reduction))
    }

    /// Plain cross-entropy against `base`.
    pub fn plain(annotations: Annotations, base: BaseTarget, reduction: Reduction) -> Self {
        Self {
            annotations,
            variant: Variant::PlainCe,
            base,
            reduction,
        }
    }

    pub fn with_reduction(&self, reduction: Reduction) -> Self {
        Self {
            reduction,
            ..self.clone()
        }
    }

    pub fn is_weighted_or_soft(&self) -> bool {
        self.variant != Variant::PlainCe
    }

    /// Loss for dataset samples `indices` whose predicted rows are `probs`.
    pub fn loss(&self, tape: &mut Tape, probs: Var, indices: &[usize]) -> Result<Var> {
        let batch: Vec<&SampleAnnotation> = indices
            .iter()
            .map(|&i| {
                (i < self.annotations.len())
                    .then(|| self.annotations.get(i))
                    .ok_or_else(|| Error::InvalidArgument(format!("no annotation for sample {i}")))
            })
            .collect::<Result<_>>()?;
        weighted_ce(tape, &batch, probs, self.variant, self.base, self.reduction)
    }

    /// Loss value without gradients.
    pub fn value(&self, probs: &Tensor, indices: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let p = tape.constant(probs.clone());
        let l = self.loss(&mut tape, p, indices)?;
        Ok(tape.value(l).data()[0])
    }
}
