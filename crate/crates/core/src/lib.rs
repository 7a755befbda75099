//! Fairness-aware structured filter pruning for small convolutional
//! classifiers.
//!
//! The crate bundles a tiny reverse-mode autodiff engine ([`tensor`]),
//! declarative CNNs ([`model`]), dependency-aware filter pruning
//! ([`prune`]), the performance-weighted loss ([`fair_loss`]), three pruning
//! methods ([`pruners`]), training and subgroup evaluation ([`train`],
//! [`metrics`]), synthetic biased data ([`data`]), and the experiment
//! harness ([`harness`]).

pub mod data;
pub mod error;
pub mod fair_loss;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod prune;
pub mod pruners;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
