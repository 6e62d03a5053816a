//! Training orchestration: teacher pretraining, two-stage distillation with a
//! frozen teacher, one-stage progressive self-distillation, evaluation, and
//! the run-directory outputs (config echo, metrics/weights logs, checkpoints,
//! prediction dumps, final report).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{pskd_alpha_at, DataSource, Regime, RunConfig};
use crate::data::{batches, generate_synthetic, load_csv, CsvSchema, Dataset};
use crate::error::{Error, Result};
use crate::losses::{weighted_composite, LossMode, SoftTargets};
use crate::mathcore::{softmax, LogitVector, OneHotLabel};
use crate::metrics::{
    aurc, aurc_scaled, ece, group_recall, macro_recall, per_class_recall, topk_accuracy, Grouping,
    PredictionDump,
};
use crate::net::{
    backward_and_step, init_network, load_checkpoint, save_checkpoint, HeadMask, NetworkState,
};
use crate::weighting::{batch_weights, estimate_propensity, BatchWeights};

/// How a teacher snapshot came to be.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    PretrainedFile,
    PreviousEpochSelf,
}

/// A frozen teacher: immutable parameters plus the temperature used for its
/// soft targets.
#[derive(Debug, Clone)]
pub struct TeacherSnapshot {
    net: NetworkState,
    pub tau: f64,
    pub provenance: Provenance,
}

impl TeacherSnapshot {
    pub fn from_checkpoint(path: &Path, tau: f64) -> Result<Self> {
        Ok(TeacherSnapshot {
            net: load_checkpoint(path)?,
            tau,
            provenance: Provenance::PretrainedFile,
        })
    }

    pub fn from_net(net: NetworkState, tau: f64, provenance: Provenance) -> Self {
        TeacherSnapshot {
            net,
            tau,
            provenance,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.net.num_classes
    }

    pub fn checksum(&self) -> u64 {
        self.net.params_checksum()
    }

    pub fn network(&self) -> &NetworkState {
        &self.net
    }

    /// Raw logits for a batch of inputs.
    pub fn forward_logits(&self, inputs: &[&[f64]]) -> Result<Vec<LogitVector>> {
        inputs
            .iter()
            .map(|x| self.net.forward(x).map(|o| o.z_kd))
            .collect()
    }

    /// Soft targets at this snapshot's temperature.
    pub fn soft_targets(&self, logits: &[LogitVector]) -> Result<SoftTargets> {
        Ok(SoftTargets {
            probs: logits
                .iter()
                .map(|z| softmax(z, self.tau))
                .collect::<Result<Vec<_>>>()?,
            tau: self.tau,
        })
    }
}

/// Final evaluation bundle written to report.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub n: usize,
    pub top1: f64,
    pub topk_k: usize,
    pub topk: f64,
    pub macro_recall: f64,
    pub per_class_recall: Vec<f64>,
    pub ece_bins: usize,
    pub ece: f64,
    pub aurc: f64,
    pub aurc_e3: f64,
    pub context_group_recall: Option<crate::metrics::GroupReport>,
}

/// Everything a completed run hands back to callers and tests.
#[derive(Debug, Clone)]
pub struct TrainedArtifacts {
    pub net: NetworkState,
    pub checkpoint: PathBuf,
    pub report: MetricBundle,
    pub dump: PredictionDump,
    /// Checksum of the teacher used at each distillation epoch.
    pub teacher_checksums: Vec<(usize, u64)>,
    /// Largest inverse-propensity weight observed over the run.
    pub max_weight_seen: f64,
    /// Mean weight per context over all weighting-active epochs (evaluation
    /// diagnostic; contexts come from the dataset, never from training paths).
    pub context_weight_means: Option<Vec<(u32, f64)>>,
}

/// Loads or generates the (train, test) pair for a run.
pub fn resolve_dataset(source: &DataSource) -> Result<(Dataset, Dataset)> {
    match source {
        DataSource::Synthetic(spec) => generate_synthetic(spec),
        DataSource::Csv {
            train,
            test,
            num_classes,
        } => {
            let schema = CsvSchema {
                feature_dim: None,
                num_classes: *num_classes,
            };
            let train_ds = load_csv(train, &schema)?;
            let schema = CsvSchema {
                feature_dim: Some(train_ds.feature_dim),
                num_classes: Some(train_ds.num_classes),
            };
            let test_ds = load_csv(test, &schema)?;
            Ok((train_ds, test_ds))
        }
    }
}

/// Dispatches a config to its regime. For two-stage runs the teacher
/// checkpoint must be present in the config.
pub fn run(cfg: &RunConfig, out_dir: &Path) -> Result<TrainedArtifacts> {
    match cfg.regime {
        Regime::Teacher => train_teacher(cfg, out_dir),
        Regime::TwoStage => {
            let ckpt = cfg.teacher.checkpoint.clone().ok_or_else(|| {
                Error::Config("two-stage distillation needs teacher.checkpoint".into())
            })?;
            distill_two_stage(cfg, &ckpt, out_dir)
        }
        Regime::OneStage => selfdistill_one_stage(cfg, out_dir),
    }
}

/// Trains a single-head network with plain cross-entropy.
pub fn train_teacher(cfg: &RunConfig, out_dir: &Path) -> Result<TrainedArtifacts> {
    cfg.validate()?;
    let (train, test) = resolve_dataset(&cfg.dataset)?;
    let net = init_network(
        &cfg.teacher.layer_dims,
        train.num_classes,
        false,
        cfg.seed,
    )?;
    let loop_cfg = LoopConfig {
        teacher: TeacherSource::None,
        mask: HeadMask::kd_only(),
    };
    run_training(cfg, out_dir, net, &train, &test, loop_cfg)
}

/// Distills a frozen pretrained teacher into a fresh student.
pub fn distill_two_stage(
    cfg: &RunConfig,
    teacher_ckpt: &Path,
    out_dir: &Path,
) -> Result<TrainedArtifacts> {
    cfg.validate()?;
    let (train, test) = resolve_dataset(&cfg.dataset)?;
    let teacher = TeacherSnapshot::from_checkpoint(teacher_ckpt, cfg.loss.tau)?;
    if teacher.num_classes() != train.num_classes {
        return Err(Error::Config(format!(
            "teacher has {} classes, dataset has {}",
            teacher.num_classes(),
            train.num_classes
        )));
    }
    let net = init_network(
        &cfg.student.layer_dims,
        train.num_classes,
        cfg.student.dual_head,
        cfg.seed,
    )?;
    let loop_cfg = LoopConfig {
        teacher: TeacherSource::Frozen(teacher),
        mask: HeadMask {
            cls_to_backbone: cfg.student.cls_head_to_backbone,
        },
    };
    run_training(cfg, out_dir, net, &train, &test, loop_cfg)
}

/// One-stage progressive self-distillation: epoch 1 is pure cross-entropy,
/// afterwards the teacher is the previous epoch's snapshot.
pub fn selfdistill_one_stage(cfg: &RunConfig, out_dir: &Path) -> Result<TrainedArtifacts> {
    cfg.validate()?;
    let (train, test) = resolve_dataset(&cfg.dataset)?;
    let net = init_network(
        &cfg.student.layer_dims,
        train.num_classes,
        cfg.student.dual_head,
        cfg.seed,
    )?;
    let loop_cfg = LoopConfig {
        teacher: TeacherSource::PreviousEpoch,
        mask: HeadMask {
            cls_to_backbone: cfg.student.cls_head_to_backbone,
        },
    };
    run_training(cfg, out_dir, net, &train, &test, loop_cfg)
}

enum TeacherSource {
    None,
    Frozen(TeacherSnapshot),
    PreviousEpoch,
}

struct LoopConfig {
    teacher: TeacherSource,
    mask: HeadMask,
}

struct RunDir {
    root: PathBuf,
    metrics_rows: String,
    weights_rows: String,
    context_rows: String,
}

impl RunDir {
    fn create(root: &Path, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(root.join("checkpoints")).map_err(|e| Error::io(root, e))?;
        // The resolved config is echoed before any work happens.
        fs::write(root.join("config.json"), cfg.to_pretty_json())
            .map_err(|e| Error::io(root.join("config.json"), e))?;
        Ok(RunDir {
            root: root.to_path_buf(),
            metrics_rows: String::from("epoch,l_cls,l_dist_or_ipw,total\n"),
            weights_rows: String::from("epoch,w_mean,w_std,w_max,frac_w_gt_2\n"),
            context_rows: String::from("epoch,context_id,mean_w,count\n"),
        })
    }

    fn log_epoch(&mut self, epoch: usize, l_cls: f64, l_dist_or_ipw: f64, total: f64) {
        let _ = writeln!(
            self.metrics_rows,
            "{epoch},{l_cls},{l_dist_or_ipw},{total}"
        );
    }

    fn log_weights(&mut self, epoch: usize, w: &EpochWeightStats) {
        let _ = writeln!(
            self.weights_rows,
            "{epoch},{},{},{},{}",
            w.mean, w.std, w.max, w.frac_gt_2
        );
    }

    fn log_context(&mut self, epoch: usize, context: u32, mean_w: f64, count: usize) {
        let _ = writeln!(self.context_rows, "{epoch},{context},{mean_w},{count}");
    }

    fn flush(&self) -> Result<()> {
        fs::write(self.root.join("metrics.csv"), &self.metrics_rows)
            .map_err(|e| Error::io(self.root.join("metrics.csv"), e))?;
        fs::write(self.root.join("weights.csv"), &self.weights_rows)
            .map_err(|e| Error::io(self.root.join("weights.csv"), e))?;
        fs::write(self.root.join("context_weights.csv"), &self.context_rows)
            .map_err(|e| Error::io(self.root.join("context_weights.csv"), e))?;
        Ok(())
    }
}

struct EpochWeightStats {
    mean: f64,
    std: f64,
    max: f64,
    frac_gt_2: f64,
}

fn summarize_epoch_weights(weights: &[f64]) -> EpochWeightStats {
    let n = weights.len() as f64;
    let mean = weights.iter().sum::<f64>() / n;
    let var = weights.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / n;
    EpochWeightStats {
        mean,
        std: var.sqrt(),
        max: weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        frac_gt_2: weights.iter().filter(|w| **w > 2.0).count() as f64 / n,
    }
}

fn run_training(
    cfg: &RunConfig,
    out_dir: &Path,
    mut net: NetworkState,
    train: &Dataset,
    test: &Dataset,
    loop_cfg: LoopConfig,
) -> Result<TrainedArtifacts> {
    let mut dir = RunDir::create(out_dir, cfg)?;
    let mut teacher_checksums = Vec::new();
    let mut max_weight_seen: f64 = 0.0;
    // Per-context running sums over all weighting-active epochs.
    let mut ctx_sum: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    let mut self_teacher: Option<TeacherSnapshot> = None;
    let weighting_possible = cfg.loss.mode == LossMode::Ipwd;

    for epoch in 1..=cfg.epochs {
        let lr = cfg.optimizer.learning_rate_at(epoch);
        let teacher: Option<&TeacherSnapshot> = match &loop_cfg.teacher {
            TeacherSource::None => None,
            TeacherSource::Frozen(t) => Some(t),
            TeacherSource::PreviousEpoch => self_teacher.as_ref(),
        };
        let (cls_coeff, dist_coeff) = match (&loop_cfg.teacher, teacher) {
            (TeacherSource::None, _) | (_, None) => (1.0, 0.0),
            (TeacherSource::Frozen(_), Some(_)) => match cfg.loss.mode {
                LossMode::CeOnly => (1.0, 0.0),
                LossMode::Kd => (cfg.loss.alpha, cfg.loss.beta),
                LossMode::Ipwd => (1.0, cfg.loss.alpha),
            },
            (TeacherSource::PreviousEpoch, Some(_)) => {
                let alpha_t = pskd_alpha_at(cfg.alpha_final, epoch, cfg.epochs);
                (1.0 - alpha_t, alpha_t)
            }
        };
        let weighted = weighting_possible && teacher.is_some() && epoch >= cfg.ipwd_start_epoch;
        let dist_coeff = if weighted && matches!(loop_cfg.teacher, TeacherSource::PreviousEpoch) {
            dist_coeff * cfg.pskd_ipw_alpha_multiplier
        } else {
            dist_coeff
        };
        if let Some(t) = teacher {
            teacher_checksums.push((epoch, t.checksum()));
        }

        let mut sum_cls = 0.0;
        let mut sum_dist = 0.0;
        let mut sum_total = 0.0;
        let mut epoch_weights: Vec<f64> = Vec::new();
        let mut epoch_weight_indices: Vec<usize> = Vec::new();

        for (batch_idx, batch) in batches(train.len(), cfg.optimizer.batch_size, cfg.seed, epoch)
            .into_iter()
            .enumerate()
        {
            let items: Vec<_> = batch.iter().map(|i| train.train_item(*i)).collect();
            let inputs: Vec<&[f64]> = items.iter().map(|it| it.features).collect();
            let labels: Vec<OneHotLabel> = items.iter().map(|it| it.label).collect();
            let outputs = net.forward_batch(&inputs).map_err(|e| divergence_guard(
                e,
                epoch,
                batch_idx,
                &net,
            ))?;

            let batch_loss = match teacher {
                None => weighted_composite(
                    &outputs,
                    None,
                    &labels,
                    None,
                    cls_coeff,
                    dist_coeff,
                    cfg.loss.tau,
                )?,
                Some(t) => {
                    let t_logits = t.forward_logits(&inputs)?;
                    let targets = t.soft_targets(&t_logits)?;
                    if weighted {
                        let mut records = Vec::with_capacity(outputs.len());
                        for (i, out) in outputs.iter().enumerate() {
                            let reference = (!cfg.weighting.use_cls_head).then(|| &t_logits[i]);
                            records.push(estimate_propensity(
                                out,
                                labels[i],
                                reference,
                                &cfg.weighting,
                            )?);
                        }
                        let mut bw: BatchWeights = batch_weights(&records)?;
                        if cfg.weighting.mean_one_renorm {
                            bw = bw.renormalized_mean_one();
                        }
                        epoch_weights.extend_from_slice(&bw.weights);
                        epoch_weight_indices.extend_from_slice(&batch);
                        weighted_composite(
                            &outputs,
                            Some(&targets),
                            &labels,
                            Some(&bw.weights),
                            cls_coeff,
                            dist_coeff,
                            cfg.loss.tau,
                        )?
                    } else {
                        weighted_composite(
                            &outputs,
                            Some(&targets),
                            &labels,
                            None,
                            cls_coeff,
                            dist_coeff,
                            cfg.loss.tau,
                        )?
                    }
                }
            };

            if !batch_loss.breakdown.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    detail: format!("non-finite loss {}", batch_loss.breakdown.total),
                });
            }
            let bsz = batch.len() as f64;
            sum_cls += batch_loss.breakdown.l_cls * bsz;
            sum_dist += batch_loss
                .breakdown
                .l_ipw_dist
                .unwrap_or(batch_loss.breakdown.l_dist)
                * bsz;
            sum_total += batch_loss.breakdown.total * bsz;

            backward_and_step(
                &mut net,
                &inputs,
                &batch_loss.grads,
                &cfg.optimizer,
                lr,
                loop_cfg.mask,
                epoch,
                batch_idx,
            )?;
            if !net.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    detail: "non-finite parameters after the update".into(),
                });
            }
        }

        let n = train.len() as f64;
        dir.log_epoch(epoch, sum_cls / n, sum_dist / n, sum_total / n);

        if !epoch_weights.is_empty() {
            let stats = summarize_epoch_weights(&epoch_weights);
            max_weight_seen = max_weight_seen.max(stats.max);
            dir.log_weights(epoch, &stats);
            // Evaluation-side join of weights with the hidden contexts.
            if train.has_contexts() {
                let mut per_ctx: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
                for (w, idx) in epoch_weights.iter().zip(&epoch_weight_indices) {
                    let ctx = train.sample(*idx).context_id.unwrap();
                    let e = per_ctx.entry(ctx).or_insert((0.0, 0));
                    e.0 += w;
                    e.1 += 1;
                }
                for (ctx, (sum, count)) in per_ctx {
                    dir.log_context(epoch, ctx, sum / count as f64, count);
                    let e = ctx_sum.entry(ctx).or_insert((0.0, 0));
                    e.0 += sum;
                    e.1 += count;
                }
            }
        }

        if cfg.eval.checkpoint_cadence > 0 && epoch % cfg.eval.checkpoint_cadence == 0 {
            save_checkpoint(
                &net,
                &dir.root.join("checkpoints").join(format!("epoch_{epoch}.ckpt")),
            )?;
        }

        if matches!(loop_cfg.teacher, TeacherSource::PreviousEpoch) {
            self_teacher = Some(TeacherSnapshot::from_net(
                net.clone(),
                cfg.loss.tau,
                Provenance::PreviousEpochSelf,
            ));
        }
    }

    let checkpoint = dir.root.join("checkpoints").join("final.ckpt");
    save_checkpoint(&net, &checkpoint)?;

    let (report, dump) = evaluate(&net, test, &cfg.eval)?;
    dump.save_csv(&dir.root.join("predictions_test.csv"))?;
    let mut report_json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Config(format!("report serialization failed: {e}")))?;
    report_json.push('\n');
    fs::write(dir.root.join("report.json"), report_json)
        .map_err(|e| Error::io(dir.root.join("report.json"), e))?;
    dir.flush()?;

    let context_weight_means = if ctx_sum.is_empty() {
        None
    } else {
        Some(
            ctx_sum
                .into_iter()
                .map(|(ctx, (sum, count))| (ctx, sum / count as f64))
                .collect(),
        )
    };

    Ok(TrainedArtifacts {
        net,
        checkpoint,
        report,
        dump,
        teacher_checksums,
        max_weight_seen,
        context_weight_means,
    })
}

/// Maps errors caused by non-finite parameters to a divergence diagnosis.
fn divergence_guard(e: Error, epoch: usize, batch: usize, net: &NetworkState) -> Error {
    if net.is_finite() {
        e
    } else {
        Error::Diverged {
            epoch,
            batch,
            detail: "non-finite parameters".into(),
        }
    }
}

impl NetworkState {
    /// True when every parameter is finite.
    pub fn is_finite(&self) -> bool {
        self.params.flatten().iter().all(|v| v.is_finite())
    }
}

/// Evaluates a network on a dataset: builds the prediction dump at
/// temperature 1 and computes the metric bundle.
pub fn evaluate(
    net: &NetworkState,
    dataset: &Dataset,
    eval: &crate::config::EvalConfig,
) -> Result<(MetricBundle, PredictionDump)> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("evaluate on an empty dataset".into()));
    }
    let mut rows = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let s = dataset.sample(i);
        let out = net.forward(&s.features)?;
        let probs = softmax(&out.z_kd, 1.0)?;
        rows.push(PredictionDump::row_from_probs(
            i,
            s.label.index(),
            probs.values().to_vec(),
            s.context_id,
        ));
    }
    let dump = PredictionDump::new(dataset.num_classes, rows)?;
    let k = eval.topk.clamp(1, dataset.num_classes - 1);
    let context_group_recall = if dataset.has_contexts() {
        Some(group_recall(&dump, &Grouping::Context, None)?)
    } else {
        None
    };
    let bundle = MetricBundle {
        n: dump.len(),
        top1: topk_accuracy(&dump, 1)?,
        topk_k: k,
        topk: topk_accuracy(&dump, k)?,
        macro_recall: macro_recall(&dump),
        per_class_recall: per_class_recall(&dump),
        ece_bins: eval.ece_bins,
        ece: ece(&dump, eval.ece_bins)?,
        aurc: aurc(&dump)?,
        aurc_e3: aurc_scaled(&dump)?,
        context_group_recall,
    };
    Ok((bundle, dump))
}

#[allow(clippy::too_many_arguments)]
fn _signature_anchor() {}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;
    use crate::data::SyntheticSpec;

    fn tiny_teacher_cfg(out_seed: u64) -> RunConfig {
        let mut cfg = preset("synthetic-teacher").unwrap();
        cfg.seed = out_seed;
        cfg.epochs = 8;
        cfg.optimizer.decay_epochs = vec![6];
        cfg.dataset = DataSource::Synthetic(SyntheticSpec {
            num_classes: 3,
            contexts_per_class: 2,
            feature_dim: 4,
            train_per_class: 60,
            test_per_class: 20,
            class_separation: 3.0,
            context_separation: 1.0,
            noise_std: 0.8,
            mixing_ratio: 0.3,
            seed: 5,
            ..SyntheticSpec::default()
        });
        cfg.teacher.layer_dims = vec![4, 16, 8];
        cfg.student.layer_dims = vec![4, 12, 6];
        cfg
    }

    #[test]
    fn linearly_separable_data_reaches_high_accuracy() {
        // Two well-separated classes: the teacher should be essentially
        // perfect within 50 epochs.
        let mut cfg = tiny_teacher_cfg(7);
        cfg.epochs = 50;
        cfg.optimizer.decay_epochs = vec![40];
        cfg.dataset = DataSource::Synthetic(SyntheticSpec {
            num_classes: 2,
            contexts_per_class: 1,
            feature_dim: 4,
            train_per_class: 100,
            test_per_class: 40,
            class_separation: 6.0,
            context_separation: 0.0,
            noise_std: 0.5,
            mixing_ratio: 1.0,
            seed: 11,
            ..SyntheticSpec::default()
        });
        let dir = tempfile::tempdir().unwrap();
        let arts = train_teacher(&cfg, dir.path()).unwrap();
        let (train, _) = resolve_dataset(&cfg.dataset).unwrap();
        let (train_metrics, _) = evaluate(&arts.net, &train, &cfg.eval).unwrap();
        assert!(
            train_metrics.top1 >= 0.99,
            "train accuracy {}",
            train_metrics.top1
        );
    }

    #[test]
    fn zero_epochs_checkpoint_equals_initialization() {
        let mut cfg = tiny_teacher_cfg(3);
        cfg.epochs = 0;
        let dir = tempfile::tempdir().unwrap();
        let arts = train_teacher(&cfg, dir.path()).unwrap();
        let (train, _) = resolve_dataset(&cfg.dataset).unwrap();
        let fresh = init_network(&cfg.teacher.layer_dims, train.num_classes, false, cfg.seed)
            .unwrap();
        assert!(arts.net.params_bits_equal(&fresh));
        let loaded = load_checkpoint(&arts.checkpoint).unwrap();
        assert!(loaded.params_bits_equal(&fresh));
    }

    #[test]
    fn fixed_seed_reproduces_the_final_loss_bit_for_bit() {
        let cfg = tiny_teacher_cfg(21);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = train_teacher(&cfg, d1.path()).unwrap();
        let b = train_teacher(&cfg, d2.path()).unwrap();
        assert!(a.net.params_bits_equal(&b.net));
        let m1 = fs::read(d1.path().join("metrics.csv")).unwrap();
        let m2 = fs::read(d2.path().join("metrics.csv")).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn frozen_teacher_is_untouched_by_distillation() {
        let tdir = tempfile::tempdir().unwrap();
        let teacher_cfg = tiny_teacher_cfg(2);
        let teacher = train_teacher(&teacher_cfg, tdir.path()).unwrap();
        let before = teacher.net.params_checksum();

        let mut cfg = preset("synthetic-ipwd").unwrap();
        cfg.seed = 9;
        cfg.epochs = 4;
        cfg.dataset = teacher_cfg.dataset.clone();
        cfg.student.layer_dims = vec![4, 12, 6];
        cfg.teacher.layer_dims = teacher_cfg.teacher.layer_dims.clone();
        let sdir = tempfile::tempdir().unwrap();
        let arts = distill_two_stage(&cfg, &teacher.checkpoint, sdir.path()).unwrap();
        // Every epoch used the same frozen teacher.
        assert!(!arts.teacher_checksums.is_empty());
        for (_, ck) in &arts.teacher_checksums {
            assert_eq!(*ck, before);
        }
        let reloaded = load_checkpoint(&teacher.checkpoint).unwrap();
        assert_eq!(reloaded.params_checksum(), before);
    }

    #[test]
    fn class_count_mismatch_is_a_configuration_error() {
        let tdir = tempfile::tempdir().unwrap();
        let teacher_cfg = tiny_teacher_cfg(2);
        let teacher = train_teacher(&teacher_cfg, tdir.path()).unwrap();

        let mut cfg = preset("synthetic-ipwd").unwrap();
        cfg.epochs = 2;
        cfg.dataset = DataSource::Synthetic(SyntheticSpec {
            num_classes: 4,
            contexts_per_class: 2,
            feature_dim: 4,
            train_per_class: 20,
            test_per_class: 10,
            class_separation: 2.0,
            context_separation: 1.0,
            noise_std: 0.8,
            mixing_ratio: 0.3,
            seed: 5,
            ..SyntheticSpec::default()
        });
        cfg.student.layer_dims = vec![4, 12, 6];
        let sdir = tempfile::tempdir().unwrap();
        assert!(matches!(
            distill_two_stage(&cfg, &teacher.checkpoint, sdir.path()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn self_distillation_uses_the_previous_epoch_snapshot() {
        let mut cfg = preset("synthetic-pskd").unwrap();
        cfg.seed = 13;
        cfg.epochs = 3;
        cfg.optimizer.decay_epochs = vec![];
        cfg.dataset = tiny_teacher_cfg(0).dataset;
        cfg.student.layer_dims = vec![4, 12, 6];
        cfg.ipwd_start_epoch = cfg.epochs + 1;
        cfg.eval.checkpoint_cadence = 1;
        let dir = tempfile::tempdir().unwrap();
        let arts = selfdistill_one_stage(&cfg, dir.path()).unwrap();
        // Epoch 1 has no teacher; epochs 2 and 3 use the snapshots from the
        // ends of epochs 1 and 2, which the cadence wrote to disk.
        assert_eq!(arts.teacher_checksums.len(), 2);
        for (epoch, ck) in &arts.teacher_checksums {
            let snap = load_checkpoint(
                &dir.path()
                    .join("checkpoints")
                    .join(format!("epoch_{}.ckpt", epoch - 1)),
            )
            .unwrap();
            assert_eq!(snap.params_checksum(), *ck);
        }
    }

    #[test]
    fn teacher_soft_targets_are_reproducible() {
        let cfg = tiny_teacher_cfg(31);
        let dir = tempfile::tempdir().unwrap();
        let arts = train_teacher(&cfg, dir.path()).unwrap();
        let (train, _) = resolve_dataset(&cfg.dataset).unwrap();
        let teacher = TeacherSnapshot::from_checkpoint(&arts.checkpoint, 2.0).unwrap();
        let inputs: Vec<&[f64]> = (0..8).map(|i| train.train_item(i).features).collect();
        let a = teacher
            .soft_targets(&teacher.forward_logits(&inputs).unwrap())
            .unwrap();
        let b = teacher
            .soft_targets(&teacher.forward_logits(&inputs).unwrap())
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn evaluate_rejects_empty_datasets_and_scores_perfection() {
        let cfg = tiny_teacher_cfg(1);
        let (train, _) = resolve_dataset(&cfg.dataset).unwrap();
        let net = init_network(&[4, 8, 4], 3, false, 0).unwrap();
        let empty = Dataset::new(3, 4, vec![]).unwrap();
        assert!(evaluate(&net, &empty, &cfg.eval).is_err());
        drop(train);

        // A constant predictor on single-class data: accuracy 1, AURC 0.
        let ds = Dataset::new(
            2,
            4,
            (0..10)
                .map(|_| crate::data::Sample {
                    features: vec![5.0, 5.0, 5.0, 5.0],
                    label: OneHotLabel::new(0, 2).unwrap(),
                    context_id: None,
                })
                .collect(),
        )
        .unwrap();
        // Bias the network strongly toward class 0 regardless of input.
        let mut net = init_network(&[4, 4, 4], 2, false, 0).unwrap();
        let mut flat = vec![0.0; net.params.param_count()];
        net.params.assign_from_flat(&flat).unwrap();
        // kd head bias for class 0 lives at the end of the flat layout,
        // bias slots are the last 2 entries.
        let n = flat.len();
        flat[n - 2] = 10.0;
        net.params.assign_from_flat(&flat).unwrap();
        let (m, _) = evaluate(&net, &ds, &cfg.eval).unwrap();
        assert_eq!(m.top1, 1.0);
        assert_eq!(m.aurc, 0.0);
        assert_eq!(m.aurc_e3, 0.0);
    }
}
