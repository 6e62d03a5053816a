//! Per-sample machine-domain propensity scores and their inverse-probability
//! weights.
//!
//! The estimate compares a classification-trained reference output against
//! the KD-trained output on the ground-truth class: samples where the KD head
//! is relatively less confident are under-represented in the machine domain
//! and receive a large weight. With `h_cls` and `h_kd` the two cross-entropy
//! values,
//!
//! ```text
//! z_x    = ln(h_cls / h_kd)
//! p_hat  = h_cls / (h_cls + h_kd)      (= sigmoid(z_x))
//! w_hat  = 1 / p_hat = 1 + h_kd / h_cls
//! ```
//!
//! Weights are treated as constants during backpropagation; no gradient ever
//! flows through this module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathcore::{
    cross_entropy_onehot, softmax, std_normalized_probs, LogitVector, OneHotLabel,
};
use crate::net::DualHeadOutput;

/// Ablation switches and guards for the weight estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightingConfig {
    /// Use the student's extra CLS head as the classification-aware
    /// reference. When false, the teacher's logits take its place.
    pub use_cls_head: bool,
    /// Divide each logit vector by its own standard deviation before the
    /// softmax that feeds the cross-entropies.
    pub normalize_logits: bool,
    /// Lower floor applied to both cross-entropy values.
    pub epsilon_floor: f64,
    /// Optional hard cap on `w_hat`.
    pub weight_cap: Option<f64>,
    /// Rescale each batch's weights to mean 1 before use.
    pub mean_one_renorm: bool,
}

impl Default for WeightingConfig {
    fn default() -> Self {
        WeightingConfig {
            use_cls_head: true,
            normalize_logits: true,
            epsilon_floor: 1e-6,
            weight_cap: None,
            mean_one_renorm: false,
        }
    }
}

impl WeightingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_floor > 0.0 && self.epsilon_floor <= 1e-3) {
            return Err(Error::Config(format!(
                "epsilon_floor must be in (0, 1e-3], got {}",
                self.epsilon_floor
            )));
        }
        if let Some(cap) = self.weight_cap {
            if !(cap > 1.0) {
                return Err(Error::Config(format!(
                    "weight_cap must be > 1, got {cap}"
                )));
            }
        }
        Ok(())
    }
}

/// Degenerate-case markers attached to a [`PropensityRecord`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FallbackFlags {
    /// h_cls hit the epsilon floor.
    pub h_cls_floored: bool,
    /// h_kd hit the epsilon floor.
    pub h_kd_floored: bool,
    /// KD logits were near-constant; normalization fell back to uniform.
    pub kd_norm_degenerate: bool,
    /// Reference logits were near-constant; normalization fell back to uniform.
    pub cls_norm_degenerate: bool,
    /// The weight cap was applied.
    pub weight_capped: bool,
}

impl FallbackFlags {
    pub fn any(&self) -> bool {
        self.h_cls_floored
            || self.h_kd_floored
            || self.kd_norm_degenerate
            || self.cls_norm_degenerate
            || self.weight_capped
    }
}

/// Per-sample propensity estimate with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityRecord {
    /// Cross-entropy of the (normalized) reference output against the label.
    pub h_cls: f64,
    /// Cross-entropy of the (normalized) KD output against the label.
    pub h_kd: f64,
    /// Log-ratio logit ln(h_cls / h_kd).
    pub z_x: f64,
    /// Estimated machine-domain propensity, in (0, 1).
    pub p_hat: f64,
    /// Inverse-propensity weight, > 1.
    pub w_hat: f64,
    pub fallback_flags: FallbackFlags,
}

/// Estimates the propensity record for one sample.
///
/// `teacher_logits` is required when `cfg.use_cls_head` is false (the teacher
/// substitutes for the CLS head as the classification-aware reference).
pub fn estimate_propensity(
    out: &DualHeadOutput,
    label: OneHotLabel,
    teacher_logits: Option<&LogitVector>,
    cfg: &WeightingConfig,
) -> Result<PropensityRecord> {
    cfg.validate()?;
    let reference: &LogitVector = if cfg.use_cls_head {
        out.z_cls.as_ref().ok_or_else(|| {
            Error::Config("weighting uses the CLS head, but the network has none".into())
        })?
    } else {
        teacher_logits.ok_or_else(|| {
            Error::Config(
                "weighting without a CLS head requires teacher logits as reference".into(),
            )
        })?
    };

    let mut flags = FallbackFlags::default();
    let (kd_probs, cls_probs) = if cfg.normalize_logits {
        let kd = std_normalized_probs(&out.z_kd)?;
        let cls = std_normalized_probs(reference)?;
        flags.kd_norm_degenerate = kd.degenerate_fallback;
        flags.cls_norm_degenerate = cls.degenerate_fallback;
        (kd.probs, cls.probs)
    } else {
        (softmax(&out.z_kd, 1.0)?, softmax(reference, 1.0)?)
    };

    let h_kd_raw = cross_entropy_onehot(&kd_probs, label)?;
    let h_cls_raw = cross_entropy_onehot(&cls_probs, label)?;
    let mut h_kd = h_kd_raw.max(cfg.epsilon_floor);
    let h_cls = h_cls_raw.max(cfg.epsilon_floor);
    flags.h_kd_floored = h_kd_raw < cfg.epsilon_floor;
    flags.h_cls_floored = h_cls_raw < cfg.epsilon_floor;

    // Cross-entropies within the weight's rounding resolution are exact
    // ties; this keeps `w_hat > 2 iff h_kd > h_cls` an exact equivalence.
    if 1.0 + h_kd / h_cls == 2.0 {
        h_kd = h_cls;
    }

    let z_x = (h_cls / h_kd).ln();
    let mut p_hat = h_cls / (h_cls + h_kd);
    let mut w_hat = 1.0 + h_kd / h_cls;
    if let Some(cap) = cfg.weight_cap {
        if w_hat > cap {
            // Keep p_hat * w_hat = 1 exact under the cap.
            w_hat = cap;
            p_hat = 1.0 / cap;
            flags.weight_capped = true;
        }
    }

    Ok(PropensityRecord {
        h_cls,
        h_kd,
        z_x,
        p_hat,
        w_hat,
        fallback_flags: flags,
    })
}

/// A batch's extracted weights plus the summary statistics that go into the
/// per-epoch weight log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchWeights {
    pub weights: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub max: f64,
    /// Fraction of weights above 2 (equivalently, samples with h_kd > h_cls).
    pub frac_gt_2: f64,
}

/// Extracts the weights of a batch in order and computes summary statistics
/// for variance monitoring.
pub fn batch_weights(records: &[PropensityRecord]) -> Result<BatchWeights> {
    if records.is_empty() {
        return Err(Error::InvalidArgument(
            "batch_weights needs a non-empty record list".into(),
        ));
    }
    let weights: Vec<f64> = records.iter().map(|r| r.w_hat).collect();
    Ok(summarize(weights))
}

fn summarize(weights: Vec<f64>) -> BatchWeights {
    let n = weights.len() as f64;
    let mean = weights.iter().sum::<f64>() / n;
    let var = weights.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / n;
    let max = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let frac_gt_2 = weights.iter().filter(|w| **w > 2.0).count() as f64 / n;
    BatchWeights {
        weights,
        mean,
        std: var.sqrt(),
        max,
        frac_gt_2,
    }
}

impl BatchWeights {
    /// Rescales the weights to mean 1 and recomputes the statistics.
    pub fn renormalized_mean_one(self) -> BatchWeights {
        let scale = 1.0 / self.mean;
        summarize(self.weights.into_iter().map(|w| w * scale).collect())
    }
}
