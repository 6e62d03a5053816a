//! Batch training objectives and their gradients at the logit level.
//!
//! Three compositions are exposed: plain cross-entropy, the classic
//! soft-target objective `alpha * L_cls + beta * L_dist`, and the
//! inverse-probability-weighted objective `L_cls + alpha * L_ipw_dist`.
//! All of them reduce to one shared weighted-composite engine so that
//! equivalent configurations produce bitwise-identical gradients.
//!
//! Gradient of the distillation term: with `s = softmax(z/tau)` and the
//! soft target `t`, the per-sample term is
//! `tau^2 * [H(s, t) - H(t, t)]` and
//! `d/dz_k H(softmax(z/tau), t) = (s_k - t_k) / tau`,
//! so the tau^2 factor leaves `tau * (s_k - t_k)`. Because `s - t` shrinks
//! like 1/tau as tau grows, this keeps the gradient magnitude comparable
//! across temperatures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathcore::{cross_entropy, softmax, OneHotLabel, ProbVector, LOG_FLOOR};
use crate::net::{DualHeadOutput, LogitGradients};

/// Which objective a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    CeOnly,
    Kd,
    Ipwd,
}

/// Loss hyperparameters. In `Kd` mode the total is
/// `alpha * L_cls + beta * L_dist`; in `Ipwd` mode it is
/// `L_cls + alpha * L_ipw_dist` (beta unused).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub mode: LossMode,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("loss alpha and beta must be >= 0".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("loss tau must be > 0".into()));
        }
        Ok(())
    }
}

/// Soft targets produced by a teacher at a specific temperature. Carrying the
/// temperature lets the losses reject a mismatched configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTargets {
    pub probs: Vec<ProbVector>,
    pub tau: f64,
}

/// The additive pieces of one batch's objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Mean cross-entropy of the KD head against the hard labels.
    pub l_cls: f64,
    /// Mean unweighted distillation term.
    pub l_dist: f64,
    /// Mean weighted distillation term, when weighting is active.
    pub l_ipw_dist: Option<f64>,
    /// Mean cross-entropy of the auxiliary CLS head (tracked separately,
    /// never part of `total`).
    pub l_cls_aux: Option<f64>,
    /// The composed objective actually optimized.
    pub total: f64,
    pub per_sample_weights: Vec<f64>,
}

/// Loss values plus per-sample gradients at the head logits.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub breakdown: LossBreakdown,
    pub grads: LogitGradients,
}

/// Mean cross-entropy of the KD head over a batch, with its logit gradients
/// `(softmax(z) - onehot) / batch_size`.
pub fn batch_cls_loss(
    outputs: &[DualHeadOutput],
    labels: &[OneHotLabel],
) -> Result<(f64, Vec<Vec<f64>>)> {
    check_batch(outputs, labels)?;
    let n = outputs.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(outputs.len());
    for (out, label) in outputs.iter().zip(labels) {
        let (loss, grad) = ce_loss_and_grad(&out.z_kd.values(), label, n)?;
        total += loss;
        grads.push(grad);
    }
    Ok((total / n, grads))
}

/// Classic soft-target objective `alpha * L_cls + beta * L_dist`.
pub fn batch_kd_loss(
    outputs: &[DualHeadOutput],
    teacher: &SoftTargets,
    labels: &[OneHotLabel],
    cfg: &LossConfig,
) -> Result<BatchLoss> {
    cfg.validate()?;
    weighted_composite(outputs, Some(teacher), labels, None, cfg.alpha, cfg.beta, cfg.tau)
}

/// Inverse-probability-weighted objective `L_cls + alpha * L_ipw_dist`.
/// The CLS head, when present, always trains with plain cross-entropy; its
/// gradient is returned alongside and routed by the caller's head mask.
pub fn batch_ipwd_loss(
    outputs: &[DualHeadOutput],
    teacher: &SoftTargets,
    labels: &[OneHotLabel],
    weights: &[f64],
    cfg: &LossConfig,
) -> Result<BatchLoss> {
    cfg.validate()?;
    if weights.len() != outputs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} outputs",
            weights.len(),
            outputs.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::InvalidArgument(
            "sample weights must be strictly positive and finite".into(),
        ));
    }
    weighted_composite(outputs, Some(teacher), labels, Some(weights), 1.0, cfg.alpha, cfg.tau)
}

/// The shared engine behind every composition:
/// `cls_coeff * L_cls + dist_coeff * mean(w_i * l_dist_i)`, with all-one
/// weights when `weights` is `None`. Sample weights enter the gradients as
/// constants; nothing differentiates through them.
///
/// The progressive self-distillation schedules call this directly with
/// `cls_coeff = 1 - alpha_t`, `dist_coeff = alpha_t`.
pub fn weighted_composite(
    outputs: &[DualHeadOutput],
    teacher: Option<&SoftTargets>,
    labels: &[OneHotLabel],
    weights: Option<&[f64]>,
    cls_coeff: f64,
    dist_coeff: f64,
    tau: f64,
) -> Result<BatchLoss> {
    check_batch(outputs, labels)?;
    let n = outputs.len();
    let nf = n as f64;
    if let Some(t) = teacher {
        if t.probs.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{} soft targets for {} outputs",
                t.probs.len(),
                n
            )));
        }
        if t.tau != tau {
            return Err(Error::Config(format!(
                "soft targets were generated at tau {} but the loss uses tau {tau}",
                t.tau
            )));
        }
    }

    let mut l_cls_sum = 0.0;
    let mut l_dist_sum = 0.0;
    let mut l_weighted_sum = 0.0;
    let mut l_aux_sum = 0.0;
    let mut has_aux = false;
    let mut kd_grads: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut cls_grads: Vec<Vec<f64>> = Vec::with_capacity(n);

    for (i, (out, label)) in outputs.iter().zip(labels).enumerate() {
        let w = weights.map_or(1.0, |ws| ws[i]);

        // Hard-label term on the KD head.
        let (ce, ce_grad) = ce_loss_and_grad(out.z_kd.values(), label, nf)?;
        l_cls_sum += ce;
        let mut grad: Vec<f64> = ce_grad.iter().map(|g| g * cls_coeff).collect();

        // Distillation term.
        if let Some(t) = teacher {
            let target = &t.probs[i];
            if target.len() != out.z_kd.len() {
                return Err(Error::InvalidArgument(
                    "soft target length differs from the logit length".into(),
                ));
            }
            let s_tau = softmax(&out.z_kd, tau)?;
            let h_st = cross_entropy(&s_tau, target)?;
            let h_tt = cross_entropy(target, target)?;
            let l_dist = (tau * tau * (h_st - h_tt)).max(0.0);
            l_dist_sum += l_dist;
            l_weighted_sum += w * l_dist;
            if dist_coeff != 0.0 {
                let scale = dist_coeff * w * tau / nf;
                for ((g, s), t) in grad.iter_mut().zip(s_tau.values()).zip(target.values()) {
                    *g += scale * (s - t);
                }
            }
        }
        kd_grads.push(grad);

        // Auxiliary CLS head: plain cross-entropy, weight-free by design.
        if let Some(z_cls) = &out.z_cls {
            has_aux = true;
            let (aux, aux_grad) = ce_loss_and_grad(z_cls.values(), label, nf)?;
            l_aux_sum += aux;
            cls_grads.push(aux_grad);
        }
    }

    let l_cls = l_cls_sum / nf;
    let l_dist = l_dist_sum / nf;
    let l_weighted = l_weighted_sum / nf;
    let weighted_active = weights.is_some();
    let total = if teacher.is_some() {
        cls_coeff * l_cls + dist_coeff * (if weighted_active { l_weighted } else { l_dist })
    } else {
        cls_coeff * l_cls
    };

    Ok(BatchLoss {
        breakdown: LossBreakdown {
            l_cls,
            l_dist,
            l_ipw_dist: weighted_active.then_some(l_weighted),
            l_cls_aux: has_aux.then_some(l_aux_sum / nf),
            total,
            per_sample_weights: match weights {
                Some(ws) => ws.to_vec(),
                None => vec![1.0; n],
            },
        },
        grads: LogitGradients {
            kd: kd_grads,
            cls: has_aux.then_some(cls_grads),
        },
    })
}

fn check_batch(outputs: &[DualHeadOutput], labels: &[OneHotLabel]) -> Result<()> {
    if outputs.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if outputs.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} outputs for {} labels",
            outputs.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Per-sample cross-entropy at temperature 1 and its logit gradient already
/// divided by the batch size.
fn ce_loss_and_grad(z: &[f64], label: &OneHotLabel, batch_size: f64) -> Result<(f64, Vec<f64>)> {
    if label.index() >= z.len() {
        return Err(Error::InvalidArgument(format!(
            "label {} out of range for {} classes",
            label.index(),
            z.len()
        )));
    }
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let p_label = exps[label.index()] / sum;
    let loss = -p_label.max(LOG_FLOOR).ln();
    let grad = exps
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let p = e / sum;
            let target = if k == label.index() { 1.0 } else { 0.0 };
            (p - target) / batch_size
        })
        .collect();
    Ok((loss, grad))
}
