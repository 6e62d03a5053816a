//! Datasets: a synthetic class-balanced but context-imbalanced Gaussian
//! mixture generator, CSV ingestion/export, and seeded epoch batching.
//!
//! Each class is a mixture of `contexts_per_class` Gaussian clusters whose
//! mixing proportions follow a geometric series, so the class label is
//! balanced by construction while the hidden context is long-tailed. The
//! context id is carried for evaluation only; batches expose features and
//! labels, never the context.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathcore::OneHotLabel;

/// One labelled sample. `context_id` identifies the hidden generating
/// subcluster and must never reach a loss or weight computation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: OneHotLabel,
    pub context_id: Option<u32>,
}

/// An immutable dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub feature_dim: usize,
    samples: Vec<Sample>,
}

/// The training-path view of one sample: features and hard label only.
#[derive(Debug, Clone, Copy)]
pub struct TrainItem<'a> {
    pub features: &'a [f64],
    pub label: OneHotLabel,
}

impl Dataset {
    pub fn new(num_classes: usize, feature_dim: usize, samples: Vec<Sample>) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != feature_dim {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} has {} features, expected {feature_dim}",
                    s.features.len()
                )));
            }
            if s.label.index() >= num_classes {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} labelled {} with only {num_classes} classes",
                    s.label.index()
                )));
            }
        }
        Ok(Dataset {
            num_classes,
            feature_dim,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Context-free view for training paths.
    pub fn train_item(&self, index: usize) -> TrainItem<'_> {
        let s = &self.samples[index];
        TrainItem {
            features: &s.features,
            label: s.label,
        }
    }

    /// Full sample access for evaluation and diagnostics.
    pub fn sample(&self, index: usize) -> &Sample {
        &self.samples[index]
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn has_contexts(&self) -> bool {
        self.samples.iter().all(|s| s.context_id.is_some()) && !self.samples.is_empty()
    }

    pub fn per_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for s in &self.samples {
            counts[s.label.index()] += 1;
        }
        counts
    }
}

/// Generator parameters for the synthetic context-imbalanced set.
///
/// Cluster geometry is derived deterministically from the seed: class centers
/// and per-context offsets are Gaussian draws scaled by the separation knobs,
/// and every cluster has isotropic covariance `noise_std^2 * I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub contexts_per_class: usize,
    pub feature_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Geometric mixing ratio r: context k of every class has proportion
    /// proportional to r^k. r < 1 makes context 0 the head context.
    pub mixing_ratio: f64,
    pub class_separation: f64,
    pub context_separation: f64,
    /// Radius multiplier for the first class relative to the last. Values
    /// below 1 pull leading classes toward the origin, making them hubs that
    /// absorb confusion mass; 1 keeps all classes at the same radius.
    pub class_radius_ramp: f64,
    /// Per-context offset growth: context k's offset is scaled by
    /// 1 + growth * k, pushing rarer contexts farther from the class core.
    pub context_radius_growth: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 10,
            contexts_per_class: 3,
            feature_dim: 16,
            train_per_class: 500,
            test_per_class: 200,
            mixing_ratio: 0.15,
            class_separation: 3.0,
            context_separation: 3.5,
            class_radius_ramp: 0.35,
            context_radius_growth: 0.5,
            noise_std: 1.4,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    /// Normalized geometric mixing proportions, one per context.
    pub fn mixing_proportions(&self) -> Vec<f64> {
        let raw: Vec<f64> = (0..self.contexts_per_class)
            .map(|k| self.mixing_ratio.powi(k as i32))
            .collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|p| p / sum).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("num_classes must be >= 2".into()));
        }
        if self.contexts_per_class < 1 {
            return Err(Error::InvalidArgument(
                "contexts_per_class must be >= 1".into(),
            ));
        }
        if self.feature_dim < 2 {
            return Err(Error::InvalidArgument("feature_dim must be >= 2".into()));
        }
        if !(self.noise_std > 0.0) {
            return Err(Error::InvalidArgument(
                "degenerate covariance: noise_std must be > 0".into(),
            ));
        }
        if !(self.mixing_ratio > 0.0 && self.mixing_ratio <= 1.0) {
            return Err(Error::InvalidArgument(
                "mixing_ratio must be in (0, 1]".into(),
            ));
        }
        if !(self.class_radius_ramp > 0.0 && self.class_radius_ramp <= 1.0) {
            return Err(Error::InvalidArgument(
                "class_radius_ramp must be in (0, 1]".into(),
            ));
        }
        if self.context_radius_growth < 0.0 {
            return Err(Error::InvalidArgument(
                "context_radius_growth must be >= 0".into(),
            ));
        }
        if self.train_per_class == 0 {
            return Err(Error::InvalidArgument("train_per_class must be >= 1".into()));
        }
        Ok(())
    }
}

/// Generates a class-balanced train/test pair. Both splits draw context
/// assignments from the same mixing proportions, so they are IID.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.feature_dim;

    // Cluster geometry first, so it is shared by both splits.
    let mut means = vec![vec![vec![0.0f64; d]; spec.contexts_per_class]; spec.num_classes];
    for (class, class_means) in means.iter_mut().enumerate() {
        // Leading classes sit closer to the origin (radius ramped from
        // class_radius_ramp up to 1), making them intrinsically harder.
        let ramp = if spec.num_classes > 1 {
            spec.class_radius_ramp
                + (1.0 - spec.class_radius_ramp) * class as f64 / (spec.num_classes - 1) as f64
        } else {
            1.0
        };
        let center: Vec<f64> = (0..d)
            .map(|_| ramp * spec.class_separation * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for (k, ctx_mean) in class_means.iter_mut().enumerate() {
            // Rarer contexts drift farther from the class core.
            let stretch = 1.0 + spec.context_radius_growth * k as f64;
            for (m, c) in ctx_mean.iter_mut().zip(&center) {
                *m = c + stretch * spec.context_separation * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }

    let proportions = spec.mixing_proportions();
    let mut draw_split = |per_class: usize| -> Result<Dataset> {
        let mut samples = Vec::with_capacity(per_class * spec.num_classes);
        for class in 0..spec.num_classes {
            for _ in 0..per_class {
                let context = categorical(&proportions, &mut rng);
                let mean = &means[class][context];
                let features: Vec<f64> = mean
                    .iter()
                    .map(|m| m + spec.noise_std * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                samples.push(Sample {
                    features,
                    label: OneHotLabel::new(class, spec.num_classes)?,
                    context_id: Some(context as u32),
                });
            }
        }
        Dataset::new(spec.num_classes, d, samples)
    };

    let train = draw_split(spec.train_per_class)?;
    let test = draw_split(spec.test_per_class)?;
    Ok((train, test))
}

fn categorical(proportions: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in proportions.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    proportions.len() - 1
}

/// Epoch batching: a fresh permutation keyed by (seed, epoch), full coverage,
/// final short batch kept.
pub fn batches(dataset_len: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut indices: Vec<usize> = (0..dataset_len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    indices.shuffle(&mut rng);
    indices.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Writes the dataset in the CSV schema `f0,...,f{d-1},label[,context]`.
/// Floats use shortest round-trip formatting, so a write-read cycle is exact.
pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let with_context = dataset.has_contexts();
    let mut out = String::new();
    for i in 0..dataset.feature_dim {
        let _ = write!(out, "f{i},");
    }
    out.push_str("label");
    if with_context {
        out.push_str(",context");
    }
    out.push('\n');
    for s in dataset.samples() {
        for f in &s.features {
            let _ = write!(out, "{f},");
        }
        let _ = write!(out, "{}", s.label.index());
        if with_context {
            let _ = write!(out, ",{}", s.context_id.unwrap_or(0));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Optional expectations for [`load_csv`]; anything left `None` is inferred.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub feature_dim: Option<usize>,
    pub num_classes: Option<usize>,
}

/// Loads a dataset from the CSV schema above. Row order is preserved; errors
/// carry the 1-based line number.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let fail = |line: usize, detail: String| Error::CsvParse {
        path: path.to_path_buf(),
        line,
        detail,
    };

    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| fail(1, "empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let label_pos = cols
        .iter()
        .position(|c| *c == "label")
        .ok_or_else(|| fail(1, "header is missing the 'label' column".into()))?;
    let feature_dim = label_pos;
    for (i, c) in cols[..feature_dim].iter().enumerate() {
        if *c != format!("f{i}") {
            return Err(fail(1, format!("expected column 'f{i}', found '{c}'")));
        }
    }
    let has_context = match cols.len() - label_pos {
        1 => false,
        2 if cols[label_pos + 1] == "context" => true,
        _ => {
            return Err(fail(
                1,
                "columns after 'label' must be nothing or 'context'".into(),
            ))
        }
    };
    if let Some(expected) = schema.feature_dim {
        if feature_dim != expected {
            return Err(fail(
                1,
                format!("file has {feature_dim} features, expected {expected}"),
            ));
        }
    }

    let expected_cols = feature_dim + 1 + has_context as usize;
    let mut raw_rows: Vec<(Vec<f64>, usize, Option<u32>)> = Vec::new();
    let mut max_label = 0usize;
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected_cols {
            return Err(fail(
                lineno,
                format!("ragged row: {} fields, expected {expected_cols}", fields.len()),
            ));
        }
        let mut features = Vec::with_capacity(feature_dim);
        for (i, f) in fields[..feature_dim].iter().enumerate() {
            let v: f64 = f
                .parse()
                .map_err(|_| fail(lineno, format!("non-numeric cell in column f{i}: '{f}'")))?;
            if !v.is_finite() {
                return Err(fail(lineno, format!("non-finite value in column f{i}")));
            }
            features.push(v);
        }
        let label: usize = fields[feature_dim]
            .parse()
            .map_err(|_| fail(lineno, format!("non-integer label '{}'", fields[feature_dim])))?;
        if let Some(c) = schema.num_classes {
            if label >= c {
                return Err(fail(
                    lineno,
                    format!("label {label} out of range for {c} classes"),
                ));
            }
        }
        max_label = max_label.max(label);
        let context = if has_context {
            Some(fields[feature_dim + 1].parse::<u32>().map_err(|_| {
                fail(
                    lineno,
                    format!("non-integer context '{}'", fields[feature_dim + 1]),
                )
            })?)
        } else {
            None
        };
        raw_rows.push((features, label, context));
    }

    let num_classes = schema.num_classes.unwrap_or(max_label + 1).max(2);
    let samples = raw_rows
        .into_iter()
        .map(|(features, label, context_id)| {
            Ok(Sample {
                features,
                label: OneHotLabel::new(label, num_classes)?,
                context_id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(num_classes, feature_dim, samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_sets_are_class_balanced() {
        let spec = SyntheticSpec {
            num_classes: 4,
            train_per_class: 1000,
            test_per_class: 50,
            ..SyntheticSpec::default()
        };
        let (train, test) = generate_synthetic(&spec).unwrap();
        assert_eq!(train.per_class_counts(), vec![1000; 4]);
        assert_eq!(test.per_class_counts(), vec![50; 4]);
        assert!(train.has_contexts());
    }

    #[test]
    fn single_context_is_the_balanced_control() {
        let spec = SyntheticSpec {
            contexts_per_class: 1,
            train_per_class: 20,
            test_per_class: 10,
            ..SyntheticSpec::default()
        };
        let (train, _) = generate_synthetic(&spec).unwrap();
        assert!(train.samples().iter().all(|s| s.context_id == Some(0)));
        assert_eq!(spec.mixing_proportions(), vec![1.0]);
    }

    #[test]
    fn generator_is_deterministic_in_the_seed() {
        let spec = SyntheticSpec::default();
        let (a, _) = generate_synthetic(&spec).unwrap();
        let (b, _) = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        let (c, _) = generate_synthetic(&SyntheticSpec {
            seed: 2,
            ..spec
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_covariance_is_rejected() {
        let spec = SyntheticSpec {
            noise_std: 0.0,
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic(&spec).is_err());
    }

    #[test]
    fn context_frequencies_match_the_multinomial_oracle() {
        // Pool draws over 20 seeds; the pooled frequency of each context must
        // sit within 3 sigma of its proportion.
        let base = SyntheticSpec {
            num_classes: 4,
            train_per_class: 250,
            test_per_class: 10,
            ..SyntheticSpec::default()
        };
        let proportions = base.mixing_proportions();
        let mut counts = vec![0usize; base.contexts_per_class];
        let mut total = 0usize;
        for seed in 0..20 {
            let (train, _) = generate_synthetic(&SyntheticSpec {
                seed,
                ..base.clone()
            })
            .unwrap();
            for s in train.samples() {
                counts[s.context_id.unwrap() as usize] += 1;
                total += 1;
            }
        }
        for (k, p) in proportions.iter().enumerate() {
            let freq = counts[k] as f64 / total as f64;
            let sigma = (p * (1.0 - p) / total as f64).sqrt();
            assert!(
                (freq - p).abs() < 3.0 * sigma,
                "context {k}: freq {freq} vs proportion {p} (sigma {sigma})"
            );
        }
    }

    #[test]
    fn batches_partition_the_index_set() {
        let chunks = batches(103, 10, 7, 3);
        assert_eq!(chunks.len(), 11);
        assert_eq!(chunks.last().unwrap().len(), 3);
        let mut seen: Vec<usize> = chunks.into_iter().flatten().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..103).collect::<Vec<_>>());
    }

    #[test]
    fn single_batch_covers_everything_shuffled() {
        let chunks = batches(50, 50, 1, 1);
        assert_eq!(chunks.len(), 1);
        assert_ne!(chunks[0], (0..50).collect::<Vec<usize>>());
    }

    #[test]
    fn shuffle_is_keyed_by_seed_and_epoch() {
        let a = batches(64, 8, 7, 3);
        let b = batches(64, 8, 7, 3);
        assert_eq!(a, b);
        assert_ne!(a, batches(64, 8, 7, 4));
        assert_ne!(a, batches(64, 8, 8, 3));
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let spec = SyntheticSpec {
            num_classes: 3,
            train_per_class: 40,
            test_per_class: 5,
            ..SyntheticSpec::default()
        };
        let (train, _) = generate_synthetic(&spec).unwrap();
        save_csv(&train, &path).unwrap();
        let loaded = load_csv(
            &path,
            &CsvSchema {
                feature_dim: Some(train.feature_dim),
                num_classes: Some(train.num_classes),
            },
        )
        .unwrap();
        assert_eq!(train, loaded);
    }

    #[test]
    fn hand_written_csv_loads_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.csv");
        fs::write(&path, "f0,f1,label\n0.5,-1.25,0\n2,3,1\n-0.75,0.125,1\n").unwrap();
        let ds = load_csv(&path, &CsvSchema::default()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.feature_dim, 2);
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds.sample(0).features, vec![0.5, -1.25]);
        assert_eq!(ds.sample(2).features, vec![-0.75, 0.125]);
        assert_eq!(ds.sample(1).label.index(), 1);
        assert_eq!(ds.sample(0).context_id, None);
    }

    #[test]
    fn missing_label_column_is_named_in_the_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "f0,f1,target\n1,2,0\n").unwrap();
        match load_csv(&path, &CsvSchema::default()).unwrap_err() {
            Error::CsvParse { line, detail, .. } => {
                assert_eq!(line, 1);
                assert!(detail.contains("label"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn ragged_and_non_numeric_rows_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "f0,f1,label\n1,2,0\n1,2\n").unwrap();
        match load_csv(&path, &CsvSchema::default()).unwrap_err() {
            Error::CsvParse { line, detail, .. } => {
                assert_eq!(line, 3);
                assert!(detail.contains("ragged"));
            }
            other => panic!("unexpected error {other:?}"),
        }

        fs::write(&path, "f0,f1,label\n1,x,0\n").unwrap();
        match load_csv(&path, &CsvSchema::default()).unwrap_err() {
            Error::CsvParse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }

        fs::write(&path, "f0,f1,label\n1,2,9\n").unwrap();
        let schema = CsvSchema {
            feature_dim: None,
            num_classes: Some(3),
        };
        match load_csv(&path, &schema).unwrap_err() {
            Error::CsvParse { line, detail, .. } => {
                assert_eq!(line, 2);
                assert!(detail.contains("out of range"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }
}
