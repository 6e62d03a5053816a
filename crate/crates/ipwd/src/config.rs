//! The run configuration document: one JSON file drives a whole run, and the
//! resolved document is echoed into the run directory so that every effective
//! hyperparameter is on disk.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossMode};
use crate::net::OptimizerConfig;
use crate::weighting::WeightingConfig;

/// Training regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Single-head network trained with plain cross-entropy.
    Teacher,
    /// Frozen pretrained teacher distilled into a fresh student.
    TwoStage,
    /// Progressive self-distillation: the teacher at epoch t is the model's
    /// own snapshot from the end of epoch t-1.
    OneStage,
}

/// Where the data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Csv {
        train: PathBuf,
        test: PathBuf,
        num_classes: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    /// Backbone widths for teacher pretraining.
    pub layer_dims: Vec<usize>,
    /// Pretrained checkpoint consumed by two-stage distillation.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    pub layer_dims: Vec<usize>,
    pub dual_head: bool,
    /// Ablation switch: let CLS-head gradients flow into the shared backbone.
    pub cls_head_to_backbone: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// k for the top-k accuracy report (clamped below the class count).
    pub topk: usize,
    pub ece_bins: usize,
    /// Temperatures for teacher-profile reports.
    pub report_taus: Vec<f64>,
    /// Save a checkpoint every this many epochs (0 = final only).
    pub checkpoint_cadence: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            topk: 5,
            ece_bins: 10,
            report_taus: vec![1.0, 2.0, 4.0, 10.0],
            checkpoint_cadence: 0,
        }
    }
}

/// Everything a run needs; serializes to the config.json echoed per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub regime: Regime,
    /// Master seed: network init and per-epoch shuffles derive from it. The
    /// dataset carries its own seed in the data source.
    pub seed: u64,
    /// Total epochs T.
    pub epochs: usize,
    /// Final self-distillation mixing weight alpha_T; the epoch-t weight is
    /// alpha_T * t / T.
    pub alpha_final: f64,
    /// First epoch (1-based) at which inverse-probability weighting is
    /// active. Values above `epochs` disable it entirely.
    pub ipwd_start_epoch: usize,
    /// Extra multiplier on the weighted distillation coefficient in the
    /// one-stage schedule (1.0 = the schedule weight alone).
    pub pskd_ipw_alpha_multiplier: f64,
    pub dataset: DataSource,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub loss: LossConfig,
    pub weighting: WeightingConfig,
    pub optimizer: OptimizerConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 && self.regime != Regime::Teacher {
            // Zero-epoch teacher runs are allowed: checkpoint == init.
            return Err(Error::Config("distillation needs at least one epoch".into()));
        }
        self.loss.validate()?;
        self.weighting.validate()?;
        self.optimizer.validate()?;
        if self.regime == Regime::OneStage && !(self.alpha_final > 0.0 && self.alpha_final < 1.0) {
            return Err(Error::Config(format!(
                "alpha_final must be in (0, 1), got {}",
                self.alpha_final
            )));
        }
        if self.ipwd_start_epoch == 0 {
            return Err(Error::Config("ipwd_start_epoch is 1-based".into()));
        }
        if self.loss.mode == LossMode::Ipwd && self.weighting.use_cls_head && !self.student.dual_head
        {
            return Err(Error::Config(
                "weighting via the CLS head requires a dual-head student".into(),
            ));
        }
        Ok(())
    }

    pub fn to_pretty_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad config JSON: {e}")))
    }
}

/// First epoch of the last quarter of a run: a T-epoch schedule activates
/// weighting for exactly the final T/4 epochs.
pub fn late_quarter_start(total_epochs: usize) -> usize {
    total_epochs - total_epochs / 4 + 1
}

/// The self-distillation mixing weight at a 1-based epoch.
pub fn pskd_alpha_at(alpha_final: f64, epoch: usize, total_epochs: usize) -> f64 {
    alpha_final * epoch as f64 / total_epochs as f64
}

fn desk_dataset() -> DataSource {
    DataSource::Synthetic(SyntheticSpec::default())
}

fn desk_optimizer() -> OptimizerConfig {
    OptimizerConfig {
        learning_rate: 0.1,
        decay_epochs: vec![30],
        decay_factor: 0.1,
        momentum: 0.9,
        weight_decay: 1e-4,
        batch_size: 64,
    }
}

fn desk_teacher() -> TeacherConfig {
    TeacherConfig {
        layer_dims: vec![16, 64, 32],
        checkpoint: None,
    }
}

fn desk_student(dual_head: bool) -> StudentConfig {
    StudentConfig {
        layer_dims: vec![16, 32, 16],
        dual_head,
        cls_head_to_backbone: false,
    }
}

/// Named run presets. `None` for an unknown name.
pub fn preset(name: &str) -> Option<RunConfig> {
    let epochs = 40;
    let base = RunConfig {
        regime: Regime::Teacher,
        seed: 1,
        epochs,
        alpha_final: 0.8,
        ipwd_start_epoch: 1,
        pskd_ipw_alpha_multiplier: 1.0,
        dataset: desk_dataset(),
        teacher: desk_teacher(),
        student: desk_student(true),
        loss: LossConfig {
            mode: LossMode::CeOnly,
            alpha: 1.0,
            beta: 0.0,
            tau: 2.0,
        },
        weighting: WeightingConfig::default(),
        optimizer: desk_optimizer(),
        eval: EvalConfig::default(),
    };
    let cfg = match name {
        "synthetic-teacher" => base,
        "synthetic-kd" => RunConfig {
            regime: Regime::TwoStage,
            student: desk_student(false),
            loss: LossConfig {
                mode: LossMode::Kd,
                alpha: 1.0,
                beta: 2.0,
                tau: 2.0,
            },
            ..base
        },
        "synthetic-ipwd" => RunConfig {
            regime: Regime::TwoStage,
            loss: LossConfig {
                mode: LossMode::Ipwd,
                alpha: 1.0,
                beta: 0.0,
                tau: 2.0,
            },
            ..base
        },
        "synthetic-pskd" => RunConfig {
            regime: Regime::OneStage,
            ipwd_start_epoch: epochs + 1,
            loss: LossConfig {
                mode: LossMode::Kd,
                alpha: 1.0,
                beta: 0.0,
                tau: 1.0,
            },
            ..base
        },
        "synthetic-pskd-ipwd" => RunConfig {
            regime: Regime::OneStage,
            ipwd_start_epoch: late_quarter_start(epochs),
            loss: LossConfig {
                mode: LossMode::Ipwd,
                alpha: 1.0,
                beta: 0.0,
                tau: 1.0,
            },
            ..base
        },
        _ => return None,
    };
    Some(cfg)
}

pub const PRESET_NAMES: [&str; 5] = [
    "synthetic-teacher",
    "synthetic-kd",
    "synthetic-ipwd",
    "synthetic-pskd",
    "synthetic-pskd-ipwd",
];

/// Named hyperparameter profiles: the two standard (tau, alpha) pairs for
/// two-stage distillation at small-image and large-corpus scale.
pub fn apply_profile(cfg: &mut RunConfig, name: &str) -> Result<()> {
    match name {
        "small-image-scale" => {
            cfg.loss.tau = 10.0;
            cfg.loss.alpha = 5.0;
            Ok(())
        }
        "large-scale" => {
            cfg.loss.tau = 2.0;
            cfg.loss.alpha = 2.5;
            Ok(())
        }
        other => Err(Error::Config(format!("unknown profile '{other}'"))),
    }
}

pub const PROFILE_NAMES: [&str; 2] = ["small-image-scale", "large-scale"];

/// Applies one `path.to.key=value` override onto the config's JSON form.
/// Values parse as JSON first, falling back to a raw string.
pub fn apply_override(cfg: &RunConfig, dotted: &str) -> Result<RunConfig> {
    let (path, raw_value) = dotted.split_once('=').ok_or_else(|| {
        Error::Config(format!("override '{dotted}' is not of the form key=value"))
    })?;
    let value: serde_json::Value = serde_json::from_str(raw_value)
        .unwrap_or_else(|_| serde_json::Value::String(raw_value.to_string()));
    let mut doc = serde_json::to_value(cfg).expect("config serializes");
    let segments: Vec<&str> = path.split('.').collect();

    // Resolve the concrete key path first. Externally tagged enums (like the
    // data source) appear as one-key objects; step into them transparently.
    let mut resolved: Vec<String> = Vec::new();
    {
        let mut cur: &serde_json::Value = &doc;
        for (i, seg) in segments.iter().enumerate() {
            loop {
                let obj = cur.as_object().ok_or_else(|| {
                    Error::Config(format!("override path '{path}' does not address an object"))
                })?;
                if obj.contains_key(*seg) {
                    break;
                }
                if obj.len() == 1 {
                    let inner_key = obj.keys().next().unwrap().clone();
                    cur = &obj[&inner_key];
                    resolved.push(inner_key);
                    continue;
                }
                return Err(Error::Config(format!(
                    "unknown config key '{seg}' in override '{dotted}'"
                )));
            }
            resolved.push(seg.to_string());
            if i + 1 < segments.len() {
                cur = &cur.as_object().unwrap()[*seg];
            }
        }
    }

    // Walk the resolved path mutably and set the value.
    let (last_key, parents) = resolved.split_last().unwrap();
    let mut cursor = &mut doc;
    for key in parents {
        cursor = cursor
            .as_object_mut()
            .unwrap()
            .get_mut(key)
            .expect("resolved path exists");
    }
    cursor
        .as_object_mut()
        .unwrap()
        .insert(last_key.clone(), value);
    serde_json::from_value(doc)
        .map_err(|e| Error::Config(format!("override '{dotted}' produced an invalid config: {e}")))
}
