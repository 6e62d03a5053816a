//! Shared oracles for the integration suites: central finite differences
//! over the flat parameter vector, an independent nested-loop forward pass,
//! and batch builders with a ReLU-kink guard.

#![allow(dead_code)]

use ipwd::mathcore::OneHotLabel;
use ipwd::net::{init_network, NetworkState};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Central finite differences of a scalar objective over every parameter.
pub fn fd_gradient(net: &NetworkState, f: impl Fn(&NetworkState) -> f64, h: f64) -> Vec<f64> {
    let base = net.params.flatten();
    let mut probe = net.clone();
    let mut grad = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        probe.params.assign_from_flat(&plus).unwrap();
        let f_plus = f(&probe);
        let mut minus = base.clone();
        minus[i] -= h;
        probe.params.assign_from_flat(&minus).unwrap();
        let f_minus = f(&probe);
        grad.push((f_plus - f_minus) / (2.0 * h));
    }
    grad
}

/// Relative error with an absolute floor: |a - b| / max(1, |a|, |b|).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs())
}

pub fn assert_grads_close(analytic: &[f64], fd: &[f64], tol: f64, what: &str) {
    assert_eq!(analytic.len(), fd.len(), "{what}: length mismatch");
    for (i, (a, b)) in analytic.iter().zip(fd).enumerate() {
        let e = rel_err(*a, *b);
        assert!(
            e <= tol,
            "{what}: param {i}: analytic {a} vs fd {b} (rel err {e:.3e})"
        );
    }
}

/// Independent forward pass (nested loops over the public parameter layout)
/// returning every backbone pre-activation plus both heads' logits.
pub fn oracle_forward(net: &NetworkState, x: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>, Option<Vec<f64>>) {
    let mut preacts = Vec::new();
    let mut cur = x.to_vec();
    for layer in &net.params.backbone {
        let mut pre = vec![0.0; layer.rows];
        for r in 0..layer.rows {
            let mut acc = layer.bias[r];
            for c in 0..layer.cols {
                acc += layer.weights[r * layer.cols + c] * cur[c];
            }
            pre[r] = acc;
        }
        preacts.push(pre.clone());
        cur = pre.into_iter().map(|v| v.max(0.0)).collect();
    }
    let head = |l: &ipwd::net::Layer| {
        let mut z = vec![0.0; l.rows];
        for r in 0..l.rows {
            let mut acc = l.bias[r];
            for c in 0..l.cols {
                acc += l.weights[r * l.cols + c] * cur[c];
            }
            z[r] = acc;
        }
        z
    };
    let z_kd = head(&net.params.kd_head);
    let z_cls = net.params.cls_head.as_ref().map(head);
    (preacts, z_kd, z_cls)
}

/// Smallest |pre-activation| across a batch: finite differences are only
/// trustworthy when no ReLU unit sits near its kink.
pub fn min_abs_preact(net: &NetworkState, inputs: &[Vec<f64>]) -> f64 {
    let mut min = f64::INFINITY;
    for x in inputs {
        let (preacts, _, _) = oracle_forward(net, x);
        for layer in preacts {
            for v in layer {
                min = min.min(v.abs());
            }
        }
    }
    min
}

pub struct FdCase {
    pub net: NetworkState,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<OneHotLabel>,
    pub teacher_logits: Vec<Vec<f64>>,
}

/// Draws a dual-head 2-16-8-3 network and a 4-sample batch from a seed,
/// rejecting draws whose pre-activations sit within the kink guard.
pub fn fd_case(seed: u64) -> Option<FdCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = init_network(&[2, 16, 8], 3, true, rng.random()).unwrap();
    let inputs: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..2).map(|_| rng.random_range(-1.5..=1.5)).collect())
        .collect();
    let labels: Vec<OneHotLabel> = (0..4)
        .map(|_| OneHotLabel::new(rng.random_range(0..3), 3).unwrap())
        .collect();
    let teacher_logits: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..3).map(|_| rng.random_range(-2.0..=2.0)).collect())
        .collect();
    if min_abs_preact(&net, &inputs) < 1e-3 {
        return None;
    }
    Some(FdCase {
        net,
        inputs,
        labels,
        teacher_logits,
    })
}

/// First `n` seeds (from an incrementing stream) that pass the kink guard.
pub fn fd_cases(n: usize) -> Vec<FdCase> {
    (0u64..).filter_map(fd_case).take(n).collect()
}

/// Flat-index range of the CLS-head parameters (they are last in the layout).
pub fn cls_param_range(net: &NetworkState) -> Option<std::ops::Range<usize>> {
    let cls = net.params.cls_head.as_ref()?;
    let total = net.params.param_count();
    let count = cls.weights.len() + cls.bias.len();
    Some(total - count..total)
}
