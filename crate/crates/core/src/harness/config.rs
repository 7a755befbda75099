use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fair_loss::{Reduction, Variant};
use crate::model::PRESETS;
use crate::pruners::{AutoBotConfig, TaylorConfig};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Autobot,
    Taylor,
    Random,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Autobot => "autobot",
            Method::Taylor => "taylor",
            Method::Random => "random",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Ce,
    Pw,
    PwWeightsOnly,
    PwSoftLabelsOnly,
}

impl LossVariant {
    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Ce => "ce",
            LossVariant::Pw => "pw",
            LossVariant::PwWeightsOnly => "pw_weights_only",
            LossVariant::PwSoftLabelsOnly => "pw_soft_labels_only",
        }
    }

    pub fn loss_variant(self) -> Variant {
        match self {
            LossVariant::Ce => Variant::PlainCe,
            LossVariant::Pw => Variant::Full,
            LossVariant::PwWeightsOnly => Variant::WeightsOnly,
            LossVariant::PwSoftLabelsOnly => Variant::SoftLabelsOnly,
        }
    }
}

/// Which phases use the PW variant; the others use plain cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    PruningOnly,
    #[default]
    PruningAndRetraining,
}

impl Scope {
    pub fn name(self) -> &'static str {
        match self {
            Scope::PruningOnly => "pruning_only",
            Scope::PruningAndRetraining => "pruning_and_retraining",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SynthPreset {
    /// Minority group `B` is a small share of every class.
    #[default]
    Biased,
    Balanced,
    GroupImbalanced,
    ClassImbalanced,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthData {
    pub preset: SynthPreset,
    pub classes: usize,
    /// Per class, biased preset.
    pub majority_per_class: usize,
    /// Per class, biased preset.
    pub minority_per_class: usize,
    /// Smallest cell of the subset presets.
    pub subset_n: usize,
    /// Per (class, group) cell of the balanced test set.
    pub test_per_cell: usize,
    pub val_fraction: f64,
    pub size: usize,
    pub amplitude: f64,
    pub noise_std: f64,
    pub shift: usize,
    pub background: f64,
    pub seed: u64,
}

impl Default for SynthData {
    fn default() -> Self {
        Self {
            preset: SynthPreset::Biased,
            classes: 2,
            majority_per_class: 760,
            minority_per_class: 40,
            subset_n: 60,
            test_per_cell: 200,
            val_fraction: 0.1,
            size: 16,
            amplitude: 0.3,
            noise_std: 0.3,
            shift: 4,
            background: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SynthData),
    /// CSV manifest; relative paths resolve against the config file.
    Manifest { path: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SynthData::default())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaGamma {
    pub theta: f64,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PwSettings {
    pub theta: f64,
    pub gamma: f64,
    pub reduction: Reduction,
    /// Overrides for pruning with the gate method.
    pub autobot: Option<ThetaGamma>,
    /// Overrides for pruning with the Taylor method.
    pub taylor: Option<ThetaGamma>,
}

impl Default for PwSettings {
    fn default() -> Self {
        Self {
            theta: 0.3,
            gamma: 1.0,
            reduction: Reduction::Sum,
            autobot: None,
            taylor: None,
        }
    }
}

impl PwSettings {
    pub fn for_method(&self, m: Method) -> ThetaGamma {
        let o = match m {
            Method::Autobot => self.autobot,
            Method::Taylor => self.taylor,
            Method::Random => None,
        };
        o.unwrap_or(ThetaGamma {
            theta: self.theta,
            gamma: self.gamma,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaylorSettings {
    #[serde(flatten)]
    pub config: TaylorConfig,
    /// Retrain from the weights trained during pruning instead of the
    /// original weights.
    pub keep_prune_time_training: bool,
}

impl Default for TaylorSettings {
    fn default() -> Self {
        Self {
            config: TaylorConfig::default(),
            keep_prune_time_training: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSettings {
    pub method: Method,
    pub variants: Vec<LossVariant>,
    pub scopes: Vec<Scope>,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self {
            method: Method::Autobot,
            variants: vec![LossVariant::PwWeightsOnly, LossVariant::PwSoftLabelsOnly],
            scopes: vec![Scope::PruningOnly, Scope::PruningAndRetraining],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub trials: usize,
    pub model: String,
    pub methods: Vec<Method>,
    pub variants: Vec<LossVariant>,
    pub speedups: Vec<f64>,
    pub apply_pw_to: Scope,
    pub data: DataSource,
    pub pw: PwSettings,
    pub autobot: AutoBotConfig,
    pub taylor: TaylorSettings,
    pub original: TrainConfig,
    pub retrain: TrainConfig,
    pub ablation: AblationSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            out_dir: "results".into(),
            seed: 0,
            trials: 3,
            model: "mini-plain".into(),
            methods: vec![Method::Autobot, Method::Taylor, Method::Random],
            variants: vec![LossVariant::Ce, LossVariant::Pw],
            speedups: vec![2.0, 4.0, 8.0],
            apply_pw_to: Scope::PruningAndRetraining,
            data: DataSource::default(),
            pw: PwSettings {
                autobot: Some(ThetaGamma { theta: 0.3, gamma: 1.0 }),
                taylor: Some(ThetaGamma { theta: 0.8, gamma: 0.5 }),
                ..Default::default()
            },
            autobot: AutoBotConfig::default(),
            taylor: TaylorSettings::default(),
            original: TrainConfig {
                lr: 0.003,
                epochs: 40,
                ..Default::default()
            },
            retrain: TrainConfig {
                lr: 0.003,
                epochs: 8,
                ..Default::default()
            },
            ablation: AblationSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Loads a config file; a relative manifest path resolves against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut c = Self::from_toml(&text)?;
        if let DataSource::Manifest { path: m } = &mut c.data {
            if m.is_relative() {
                *m = path.parent().unwrap_or(Path::new(".")).join(&*m);
            }
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.trials == 0 {
            return bad("trials must be >= 1".into());
        }
        if self.methods.is_empty() || self.variants.is_empty() || self.speedups.is_empty() {
            return bad("methods, variants and speedups must be non-empty".into());
        }
        if let Some(s) = self.speedups.iter().find(|s| !(**s > 1.0) || !s.is_finite()) {
            return bad(format!("speedups must be finite and > 1, got {s}"));
        }
        if !PRESETS.contains(&self.model.as_str()) {
            return bad(format!("unknown model preset `{}`; expected one of {PRESETS:?}", self.model));
        }
        for m in [Method::Autobot, Method::Taylor, Method::Random] {
            let tg = self.pw.for_method(m);
            crate::fair_loss::PwConfig {
                theta: tg.theta,
                gamma: tg.gamma,
                ..Default::default()
            }
            .validate()
            .map_err(|e| Error::Config(format!("pw settings for {}: {e}", m.name())))?;
        }
        self.autobot.validate()?;
        self.taylor.config.validate()?;
        self.original.validate()?;
        self.retrain.validate()?;
        if let DataSource::Synthetic(s) = &self.data {
            if !(0.0..1.0).contains(&s.val_fraction) {
                return bad(format!("val_fraction must lie in [0, 1), got {}", s.val_fraction));
            }
        }
        if self.ablation.variants.is_empty() || self.ablation.scopes.is_empty() {
            return bad("ablation variants and scopes must be non-empty".into());
        }
        Ok(())
    }
}
