//! Knowledge distillation with inverse-probability weighting at desk scale.
//!
//! The crate trains a teacher and a dual-head student MLP with explicitly
//! coded backpropagation, estimates a per-sample machine-domain propensity
//! score from the two heads, reweights the distillation loss by the inverse
//! propensity, and reports the diagnostic metrics (group recall, teacher
//! prediction profiles, ECE, AURC) that motivate the weighting.
//!
//! Module map:
//! - [`mathcore`]: temperature softmax, cross-entropy, KD divergence,
//!   standard-deviation logit normalization.
//! - [`net`]: the MLP with shared backbone and KD/CLS heads, SGD with
//!   momentum, binary checkpoints.
//! - [`weighting`]: propensity estimation and inverse-probability weights.
//! - [`losses`]: batch objectives (CE, KD, IPWD) and their logit gradients.
//! - [`data`]: synthetic context-imbalanced datasets and CSV ingestion.
//! - [`metrics`]: accuracy, per-group recall, teacher profiles, ECE, AURC.
//! - [`trainer`]: teacher pretraining, two-stage distillation, one-stage
//!   progressive self-distillation, evaluation, run-directory outputs.
//! - [`config`]: the run configuration document and shipped presets.

pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod mathcore;
pub mod metrics;
pub mod net;
pub mod trainer;
pub mod weighting;

pub use error::{Error, Result};
