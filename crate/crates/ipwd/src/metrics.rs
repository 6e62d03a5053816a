//! Evaluation metrics over immutable prediction dumps: top-k accuracy,
//! per-group macro recall, teacher prediction profiles, expected calibration
//! error, and the area under the risk-coverage curve.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mathcore::softmax;
use crate::net::NetworkState;

/// One evaluated sample: the full probability vector plus its derived fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub sample_id: usize,
    pub true_class: usize,
    pub predicted: usize,
    /// Max probability; ties in the argmax resolve to the lowest class index.
    pub confidence: f64,
    pub probs: Vec<f64>,
    pub context_id: Option<u32>,
}

/// An immutable set of per-sample predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionDump {
    pub num_classes: usize,
    rows: Vec<PredictionRow>,
}

impl PredictionDump {
    pub fn new(num_classes: usize, rows: Vec<PredictionRow>) -> Result<Self> {
        for r in &rows {
            if r.probs.len() != num_classes {
                return Err(Error::InvalidArgument(format!(
                    "sample {} has {} probabilities for {num_classes} classes",
                    r.sample_id,
                    r.probs.len()
                )));
            }
            let am = argmax_lowest(&r.probs);
            if r.predicted != am || (r.confidence - r.probs[am]).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "sample {}: predicted/confidence fields disagree with the probabilities",
                    r.sample_id
                )));
            }
            if r.true_class >= num_classes {
                return Err(Error::InvalidArgument(format!(
                    "sample {}: true class {} out of range",
                    r.sample_id, r.true_class
                )));
            }
        }
        Ok(PredictionDump { num_classes, rows })
    }

    /// Builds a row from raw probabilities, deriving prediction and confidence.
    pub fn row_from_probs(
        sample_id: usize,
        true_class: usize,
        probs: Vec<f64>,
        context_id: Option<u32>,
    ) -> PredictionRow {
        let predicted = argmax_lowest(&probs);
        let confidence = probs[predicted];
        PredictionRow {
            sample_id,
            true_class,
            predicted,
            confidence,
            probs,
            context_id,
        }
    }

    pub fn rows(&self) -> &[PredictionRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// CSV schema: sample_id,true,pred,conf,p_0..p_{C-1},context.
    /// The context cell is blank when unknown.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("sample_id,true,pred,conf");
        for i in 0..self.num_classes {
            let _ = write!(out, ",p_{i}");
        }
        out.push_str(",context\n");
        for r in &self.rows {
            let _ = write!(
                out,
                "{},{},{},{}",
                r.sample_id, r.true_class, r.predicted, r.confidence
            );
            for p in &r.probs {
                let _ = write!(out, ",{p}");
            }
            match r.context_id {
                Some(c) => {
                    let _ = write!(out, ",{c}");
                }
                None => out.push(','),
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: &Path) -> Result<PredictionDump> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let fail = |line: usize, detail: String| Error::CsvParse {
            path: path.to_path_buf(),
            line,
            detail,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| fail(1, "empty file".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 6 || cols[..4] != ["sample_id", "true", "pred", "conf"] {
            return Err(fail(1, "unexpected prediction dump header".into()));
        }
        let num_classes = cols.len() - 5;
        let mut rows = Vec::new();
        for (idx, line) in lines {
            let lineno = idx + 1;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(fail(lineno, "ragged row".into()));
            }
            let parse_usize = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| fail(lineno, format!("non-integer field '{s}'")))
            };
            let sample_id = parse_usize(fields[0])?;
            let true_class = parse_usize(fields[1])?;
            let predicted = parse_usize(fields[2])?;
            let confidence: f64 = fields[3]
                .parse()
                .map_err(|_| fail(lineno, "non-numeric confidence".into()))?;
            let probs = fields[4..4 + num_classes]
                .iter()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| fail(lineno, format!("non-numeric probability '{s}'")))
                })
                .collect::<Result<Vec<f64>>>()?;
            let ctx_field = fields[4 + num_classes];
            let context_id = if ctx_field.is_empty() {
                None
            } else {
                Some(
                    ctx_field
                        .parse::<u32>()
                        .map_err(|_| fail(lineno, "non-integer context".into()))?,
                )
            };
            rows.push(PredictionRow {
                sample_id,
                true_class,
                predicted,
                confidence,
                probs,
                context_id,
            });
        }
        PredictionDump::new(num_classes, rows)
    }
}

fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Fraction of samples whose true class ranks among the k most probable.
/// Equal probabilities rank the lower class index first.
pub fn topk_accuracy(dump: &PredictionDump, k: usize) -> Result<f64> {
    if dump.is_empty() {
        return Err(Error::InvalidArgument(
            "top-k accuracy of an empty dump".into(),
        ));
    }
    if k == 0 || k >= dump.num_classes {
        return Err(Error::InvalidArgument(format!(
            "k must be in [1, {}), got {k}",
            dump.num_classes
        )));
    }
    let hits = dump
        .rows()
        .iter()
        .filter(|r| {
            let t = r.true_class;
            let pt = r.probs[t];
            // Rank of the true class under the tie-break rule.
            let rank = r
                .probs
                .iter()
                .enumerate()
                .filter(|(j, p)| **p > pt || (**p == pt && *j < t))
                .count();
            rank < k
        })
        .count();
    Ok(hits as f64 / dump.len() as f64)
}

/// Per-class recall (correct / total), NaN-free: classes absent from the dump
/// report recall 0.
pub fn per_class_recall(dump: &PredictionDump) -> Vec<f64> {
    let mut correct = vec![0usize; dump.num_classes];
    let mut total = vec![0usize; dump.num_classes];
    for r in dump.rows() {
        total[r.true_class] += 1;
        if r.predicted == r.true_class {
            correct[r.true_class] += 1;
        }
    }
    correct
        .iter()
        .zip(&total)
        .map(|(c, t)| if *t == 0 { 0.0 } else { *c as f64 / *t as f64 })
        .collect()
}

/// Unweighted mean of the per-class recalls.
pub fn macro_recall(dump: &PredictionDump) -> f64 {
    let r = per_class_recall(dump);
    r.iter().sum::<f64>() / r.len() as f64
}

/// One temperature's teacher prediction profile: per-class mean soft
/// probability, sorted descending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileCurve {
    pub tau: f64,
    /// Class indices ordered by descending mean probability.
    pub class_order: Vec<usize>,
    /// Mean probabilities in the same order.
    pub sorted_mean_probs: Vec<f64>,
    /// Max over min of the class means.
    pub imbalance_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherProfile {
    pub curves: Vec<ProfileCurve>,
}

/// Mean softened prediction per class over a dataset, per temperature.
pub fn teacher_profile(
    teacher: &NetworkState,
    dataset: &Dataset,
    taus: &[f64],
) -> Result<TeacherProfile> {
    if taus.is_empty() {
        return Err(Error::InvalidArgument(
            "teacher_profile needs at least one temperature".into(),
        ));
    }
    if dataset.is_empty() {
        return Err(Error::InvalidArgument(
            "teacher_profile over an empty dataset".into(),
        ));
    }
    let logits: Vec<_> = (0..dataset.len())
        .map(|i| teacher.forward(dataset.train_item(i).features).map(|o| o.z_kd))
        .collect::<Result<Vec<_>>>()?;
    let c = dataset.num_classes;
    let mut curves = Vec::with_capacity(taus.len());
    for &tau in taus {
        let mut mean = vec![0.0f64; c];
        for z in &logits {
            let p = softmax(z, tau)?;
            for (m, v) in mean.iter_mut().zip(p.values()) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= dataset.len() as f64;
        }
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|a, b| mean[*b].partial_cmp(&mean[*a]).unwrap().then(a.cmp(b)));
        let sorted: Vec<f64> = order.iter().map(|i| mean[*i]).collect();
        let max = sorted[0];
        let min = *sorted.last().unwrap();
        curves.push(ProfileCurve {
            tau,
            class_order: order,
            sorted_mean_probs: sorted,
            imbalance_ratio: if min > 0.0 { max / min } else { f64::INFINITY },
        });
    }
    Ok(TeacherProfile { curves })
}

/// The grouping key for [`group_recall`].
#[derive(Debug, Clone, PartialEq)]
pub enum Grouping {
    /// Classes ranked by a teacher profile curve and split into quartiles
    /// (sizes as equal as possible, remainder to the leading groups).
    TeacherRankQuartiles { class_order: Vec<usize> },
    /// Groups are the hidden context ids.
    Context,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    pub label: String,
    /// Member class indices (rank grouping) or the context id (context
    /// grouping, single entry).
    pub members: Vec<usize>,
    /// Unweighted mean of the member per-class recalls.
    pub recall: f64,
    /// Recall minus the baseline's recall for the same group, when a baseline
    /// dump was supplied.
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub grouping: String,
    pub groups: Vec<GroupStat>,
}

/// Macro-average recall per group, optionally with deltas against a baseline
/// dump evaluated over the same grouping.
pub fn group_recall(
    dump: &PredictionDump,
    grouping: &Grouping,
    baseline: Option<&PredictionDump>,
) -> Result<GroupReport> {
    let mut report = group_recall_inner(dump, grouping)?;
    if let Some(base) = baseline {
        let base_report = group_recall_inner(base, grouping)?;
        if base_report.groups.len() != report.groups.len() {
            return Err(Error::Config(
                "baseline dump produced a different group structure".into(),
            ));
        }
        for (g, b) in report.groups.iter_mut().zip(&base_report.groups) {
            g.delta = Some(g.recall - b.recall);
        }
    }
    Ok(report)
}

fn group_recall_inner(dump: &PredictionDump, grouping: &Grouping) -> Result<GroupReport> {
    match grouping {
        Grouping::TeacherRankQuartiles { class_order } => {
            if class_order.len() != dump.num_classes {
                return Err(Error::Config(format!(
                    "class ranking covers {} classes, dump has {}",
                    class_order.len(),
                    dump.num_classes
                )));
            }
            let recalls = per_class_recall(dump);
            let n_groups = 4.min(dump.num_classes);
            let base = dump.num_classes / n_groups;
            let rem = dump.num_classes % n_groups;
            let mut groups = Vec::with_capacity(n_groups);
            let mut start = 0usize;
            for g in 0..n_groups {
                let size = base + (g < rem) as usize;
                let members: Vec<usize> = class_order[start..start + size].to_vec();
                let recall =
                    members.iter().map(|c| recalls[*c]).sum::<f64>() / members.len() as f64;
                groups.push(GroupStat {
                    label: format!("rank {}-{}", start + 1, start + size),
                    members,
                    recall,
                    delta: None,
                });
                start += size;
            }
            Ok(GroupReport {
                grouping: "teacher-rank-quartiles".into(),
                groups,
            })
        }
        Grouping::Context => {
            let mut contexts: Vec<u32> = dump
                .rows()
                .iter()
                .map(|r| {
                    r.context_id.ok_or_else(|| {
                        Error::Config("context grouping requires context ids in the dump".into())
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            contexts.sort_unstable();
            contexts.dedup();
            let mut groups = Vec::with_capacity(contexts.len());
            for ctx in contexts {
                // Macro recall within the context: average the per-class
                // recalls over classes that appear in this context.
                let mut correct = vec![0usize; dump.num_classes];
                let mut total = vec![0usize; dump.num_classes];
                for r in dump.rows().iter().filter(|r| r.context_id == Some(ctx)) {
                    total[r.true_class] += 1;
                    if r.predicted == r.true_class {
                        correct[r.true_class] += 1;
                    }
                }
                let present: Vec<usize> =
                    (0..dump.num_classes).filter(|c| total[*c] > 0).collect();
                let recall = if present.is_empty() {
                    0.0
                } else {
                    present
                        .iter()
                        .map(|c| correct[*c] as f64 / total[*c] as f64)
                        .sum::<f64>()
                        / present.len() as f64
                };
                groups.push(GroupStat {
                    label: format!("context {ctx}"),
                    members: vec![ctx as usize],
                    recall,
                    delta: None,
                });
            }
            Ok(GroupReport {
                grouping: "context".into(),
                groups,
            })
        }
    }
}

/// Expected calibration error over `m` right-closed confidence bins of (0, 1].
/// Confidence exactly 0 lands in bin 1; empty bins contribute nothing.
pub fn ece(dump: &PredictionDump, num_bins: usize) -> Result<f64> {
    if num_bins == 0 {
        return Err(Error::InvalidArgument("ece needs at least one bin".into()));
    }
    if dump.is_empty() {
        return Err(Error::InvalidArgument("ece of an empty dump".into()));
    }
    let m = num_bins as f64;
    let mut count = vec![0usize; num_bins];
    let mut conf_sum = vec![0.0f64; num_bins];
    let mut correct = vec![0usize; num_bins];
    for r in dump.rows() {
        // Right-closed bins ((b-1)/M, b/M]; ceil maps conf to its bin.
        let bin = if r.confidence <= 0.0 {
            0
        } else {
            ((r.confidence * m).ceil() as usize).clamp(1, num_bins) - 1
        };
        count[bin] += 1;
        conf_sum[bin] += r.confidence;
        correct[bin] += (r.predicted == r.true_class) as usize;
    }
    let n = dump.len() as f64;
    let mut total = 0.0;
    for b in 0..num_bins {
        if count[b] == 0 {
            continue;
        }
        let acc = correct[b] as f64 / count[b] as f64;
        let conf = conf_sum[b] / count[b] as f64;
        total += count[b] as f64 * (acc - conf).abs();
    }
    Ok(total / n)
}

/// Area under the discrete risk-coverage curve: samples ordered by descending
/// confidence (ties by sample order), `risk_k` = error rate among the top k,
/// and the area is the mean of `risk_k` over all N coverage points.
pub fn aurc(dump: &PredictionDump) -> Result<f64> {
    if dump.is_empty() {
        return Err(Error::InvalidArgument("aurc of an empty dump".into()));
    }
    let mut order: Vec<usize> = (0..dump.len()).collect();
    order.sort_by(|a, b| {
        dump.rows()[*b]
            .confidence
            .partial_cmp(&dump.rows()[*a].confidence)
            .unwrap()
            .then(a.cmp(b))
    });
    let mut errors = 0usize;
    let mut risk_sum = 0.0;
    for (k, idx) in order.iter().enumerate() {
        let r = &dump.rows()[*idx];
        errors += (r.predicted != r.true_class) as usize;
        risk_sum += errors as f64 / (k + 1) as f64;
    }
    Ok(risk_sum / dump.len() as f64)
}

/// AURC scaled by 10^3, the conventional reporting unit.
pub fn aurc_scaled(dump: &PredictionDump) -> Result<f64> {
    Ok(1000.0 * aurc(dump)?)
}
