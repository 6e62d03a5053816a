//! Numerically stable scalar/vector primitives shared by every loss:
//! temperature softmax, cross-entropy, the KD divergence term, and
//! standard-deviation logit normalization.
//!
//! All arithmetic is f64. Every function here is pure and safe to call
//! concurrently.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Log floor inside cross-entropy: prevents -inf from one-hot-adjacent
/// predictions without measurably perturbing losses.
pub const LOG_FLOOR: f64 = 1e-12;

/// Standard deviations below this are treated as degenerate (constant logits).
pub const STD_DEGENERATE_EPS: f64 = 1e-8;

/// Raw class scores. Invariant: all entries finite, at least two classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "logit vector needs at least 2 classes, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "logit vector contains a non-finite entry".into(),
            ));
        }
        Ok(LogitVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// A point on the probability simplex. Invariant: entries nonnegative and
/// summing to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "probability vector needs at least 2 classes, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "probability vector entries must be finite and nonnegative".into(),
            ));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "probability vector sums to {sum}, not 1"
            )));
        }
        Ok(ProbVector(values))
    }

    /// Constructor for values already normalized by this module.
    fn from_normalized(values: Vec<f64>) -> Self {
        debug_assert!((values.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        ProbVector(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Ground-truth hard target: a class index validated against the class count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OneHotLabel(usize);

impl OneHotLabel {
    pub fn new(class_index: usize, num_classes: usize) -> Result<Self> {
        if class_index >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "label {class_index} out of range for {num_classes} classes"
            )));
        }
        Ok(OneHotLabel(class_index))
    }

    pub fn index(&self) -> usize {
        self.0
    }

    pub fn to_prob_vector(&self, num_classes: usize) -> Result<ProbVector> {
        if self.0 >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "label {} out of range for {num_classes} classes",
                self.0
            )));
        }
        let mut values = vec![0.0; num_classes];
        values[self.0] = 1.0;
        Ok(ProbVector(values))
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Temperature softmax with max-subtraction for stability.
///
/// Order-preserving: the argmax of the input logits is the argmax of the
/// output probabilities.
pub fn softmax(z: &LogitVector, tau: f64) -> Result<ProbVector> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "softmax temperature must be a positive finite real, got {tau}"
        )));
    }
    let scaled: Vec<f64> = z.values().iter().map(|v| v / tau).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(ProbVector::from_normalized(
        exps.into_iter().map(|e| e / sum).collect(),
    ))
}

/// Cross-entropy `H(p, q) = sum_i -q_i * ln(max(p_i, LOG_FLOOR))`.
///
/// Argument order matters: `p` is the prediction (inside the log), `q` is the
/// weighting distribution. `H(p, p)` is the entropy of `p`.
pub fn cross_entropy(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::InvalidArgument(format!(
            "cross_entropy length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(p.values()
        .iter()
        .zip(q.values())
        .map(|(pi, qi)| -qi * pi.max(LOG_FLOOR).ln())
        .sum())
}

/// Cross-entropy of a prediction against a hard one-hot target:
/// `-ln(max(p[label], LOG_FLOOR))`.
pub fn cross_entropy_onehot(p: &ProbVector, label: OneHotLabel) -> Result<f64> {
    if label.index() >= p.len() {
        return Err(Error::InvalidArgument(format!(
            "label {} out of range for {} classes",
            label.index(),
            p.len()
        )));
    }
    Ok(-p.values()[label.index()].max(LOG_FLOOR).ln())
}

/// Per-sample distillation loss
/// `tau^2 * [H(softmax(z_s/tau), softmax(z_t/tau)) - H(softmax(z_t/tau), softmax(z_t/tau))]`,
/// which equals `tau^2 * KL(teacher_tau || student_tau)`. Nonnegative, zero
/// iff the softened distributions coincide.
pub fn kd_divergence_loss(z_s: &LogitVector, z_t: &LogitVector, tau: f64) -> Result<f64> {
    if z_s.len() != z_t.len() {
        return Err(Error::InvalidArgument(format!(
            "kd_divergence_loss length mismatch: {} vs {}",
            z_s.len(),
            z_t.len()
        )));
    }
    let s = softmax(z_s, tau)?;
    let t = softmax(z_t, tau)?;
    let ce_st = cross_entropy(&s, &t)?;
    let ce_tt = cross_entropy(&t, &t)?;
    // Rounding can leave a tiny negative residue when the distributions match.
    Ok((tau * tau * (ce_st - ce_tt)).max(0.0))
}

/// Result of [`std_normalized_probs`]: the probabilities plus a flag marking
/// the zero-variance fallback.
#[derive(Debug, Clone, PartialEq)]
pub struct StdNormalized {
    pub probs: ProbVector,
    /// True when the logits were near-constant and the output fell back to a
    /// plain temperature-1 softmax (uniform in that case).
    pub degenerate_fallback: bool,
}

/// Softmax of the logits divided by their own standard deviation.
///
/// Sigma is the population standard deviation over the class dimension
/// (divide by C), computed about the mean; the mean itself is not subtracted
/// from the logits because softmax is shift-invariant, so subtracting it
/// would not change the output. Scaled logits have unit standard deviation,
/// which makes the result invariant to positive rescaling of the input.
pub fn std_normalized_probs(z: &LogitVector) -> Result<StdNormalized> {
    let n = z.len() as f64;
    let mean = z.values().iter().sum::<f64>() / n;
    let var = z.values().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sigma = var.sqrt();
    if sigma < STD_DEGENERATE_EPS {
        // Near-constant logits: the quotient is undefined; uniform is the
        // unique scale-free limit.
        return Ok(StdNormalized {
            probs: softmax(z, 1.0)?,
            degenerate_fallback: true,
        });
    }
    let scaled = LogitVector::new(z.values().iter().map(|v| v / sigma).collect())?;
    Ok(StdNormalized {
        probs: softmax(&scaled, 1.0)?,
        degenerate_fallback: false,
    })
}
