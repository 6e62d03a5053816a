//! A from-scratch MLP with a shared ReLU backbone and two linear classifier
//! heads (the delivered KD head and the auxiliary CLS head), trained by
//! explicitly coded backpropagation and SGD with momentum.
//!
//! Forward passes are pure; parameter updates require exclusive access.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathcore::LogitVector;

const CHECKPOINT_MAGIC: &[u8; 8] = b"IPWDCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// One dense layer: `rows x cols` weights in row-major order plus a bias per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(rows: usize, cols: usize) -> Self {
        Layer {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    /// Symmetric fan-in-scaled uniform init: U(-sqrt(6/cols), +sqrt(6/cols)).
    fn fan_in_uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / cols as f64).sqrt();
        let weights = (0..rows * cols)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Layer {
            rows,
            cols,
            weights,
            bias: vec![0.0; rows],
        }
    }

    /// y = W x + b
    fn affine(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.weights[r * self.cols..(r + 1) * self.cols];
            let mut acc = self.bias[r];
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            *o = acc;
        }
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// All trainable tensors of a network, also used as the gradient and
/// momentum containers (same shapes).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub backbone: Vec<Layer>,
    pub kd_head: Layer,
    pub cls_head: Option<Layer>,
}

impl ParamSet {
    fn zeros_like(other: &ParamSet) -> Self {
        ParamSet {
            backbone: other
                .backbone
                .iter()
                .map(|l| Layer::zeros(l.rows, l.cols))
                .collect(),
            kd_head: Layer::zeros(other.kd_head.rows, other.kd_head.cols),
            cls_head: other
                .cls_head
                .as_ref()
                .map(|l| Layer::zeros(l.rows, l.cols)),
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.backbone
            .iter()
            .chain(std::iter::once(&self.kd_head))
            .chain(self.cls_head.iter())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.backbone
            .iter_mut()
            .chain(std::iter::once(&mut self.kd_head))
            .chain(self.cls_head.iter_mut())
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(Layer::param_count).sum()
    }

    /// Flat copy of every parameter, in checkpoint order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.layers() {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Overwrites every parameter from a flat vector in checkpoint order.
    pub fn assign_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::InvalidArgument(format!(
                "flat parameter vector has {} entries, network has {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for l in self.layers_mut() {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    fn l2_norm(&self) -> f64 {
        self.layers()
            .map(|l| {
                l.weights.iter().map(|w| w * w).sum::<f64>()
                    + l.bias.iter().map(|b| b * b).sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }

    fn all_finite(&self) -> bool {
        self.layers().all(|l| {
            l.weights.iter().all(|w| w.is_finite()) && l.bias.iter().all(|b| b.is_finite())
        })
    }
}

/// The full trainable state: architecture, parameters, optimizer momenta,
/// and the seed the parameters were drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    /// Backbone widths: input dim, hidden dims..., feature dim.
    pub layer_dims: Vec<usize>,
    pub num_classes: usize,
    pub dual_head: bool,
    pub params: ParamSet,
    /// Momentum buffers, zero-initialized, same shapes as `params`.
    pub velocity: ParamSet,
    pub seed: u64,
}

/// Student output for one sample: KD-head logits, CLS-head logits when the
/// network has the extra head, and the shared backbone features.
#[derive(Debug, Clone, PartialEq)]
pub struct DualHeadOutput {
    pub z_kd: LogitVector,
    pub z_cls: Option<LogitVector>,
    pub features: Vec<f64>,
}

/// Piecewise-constant learning-rate schedule plus the SGD hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Epochs (1-based) at which the rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.decay_factor > 0.0) {
            return Err(Error::Config("decay_factor must be > 0".into()));
        }
        Ok(())
    }

    /// Learning rate in effect at a 1-based epoch.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let hits = self.decay_epochs.iter().filter(|e| **e <= epoch).count();
        self.learning_rate * self.decay_factor.powi(hits as i32)
    }
}

/// Which heads' logit gradients are allowed to flow into the shared backbone.
/// The KD head always flows; the CLS head is gated (its own parameters are
/// always updated by its gradients either way).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadMask {
    pub cls_to_backbone: bool,
}

impl HeadMask {
    pub fn kd_only() -> Self {
        HeadMask {
            cls_to_backbone: false,
        }
    }
}

/// Per-sample gradients of the batch loss with respect to the head logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitGradients {
    pub kd: Vec<Vec<f64>>,
    pub cls: Option<Vec<Vec<f64>>>,
}

/// Scalar diagnostics from one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// L2 norm of the full analytic gradient (before weight decay).
    pub grad_norm: f64,
}

/// Activations cached by a forward pass, consumed by backprop.
pub struct ForwardTrace {
    /// Post-activation output of every backbone layer (ReLU applied).
    activations: Vec<Vec<f64>>,
}

pub fn init_network(
    layer_dims: &[usize],
    num_classes: usize,
    dual_head: bool,
    seed: u64,
) -> Result<NetworkState> {
    if layer_dims.len() < 2 {
        return Err(Error::InvalidArgument(
            "layer_dims needs at least an input and a feature dimension".into(),
        ));
    }
    if layer_dims.iter().any(|d| *d == 0) {
        return Err(Error::InvalidArgument("zero-width layer".into()));
    }
    if num_classes < 2 {
        return Err(Error::InvalidArgument("num_classes must be >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backbone: Vec<Layer> = layer_dims
        .windows(2)
        .map(|w| Layer::fan_in_uniform(w[1], w[0], &mut rng))
        .collect();
    let feature_dim = *layer_dims.last().unwrap();
    let kd_head = Layer::fan_in_uniform(num_classes, feature_dim, &mut rng);
    let cls_head = dual_head.then(|| Layer::fan_in_uniform(num_classes, feature_dim, &mut rng));
    let params = ParamSet {
        backbone,
        kd_head,
        cls_head,
    };
    let velocity = ParamSet::zeros_like(&params);
    Ok(NetworkState {
        layer_dims: layer_dims.to_vec(),
        num_classes,
        dual_head,
        params,
        velocity,
        seed,
    })
}

impl NetworkState {
    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn forward(&self, x: &[f64]) -> Result<DualHeadOutput> {
        Ok(self.forward_cached(x)?.0)
    }

    /// Forward pass that also returns the cached activations for backprop.
    pub fn forward_cached(&self, x: &[f64]) -> Result<(DualHeadOutput, ForwardTrace)> {
        if x.len() != self.input_dim() {
            return Err(Error::InvalidArgument(format!(
                "input has {} features, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(self.params.backbone.len());
        let mut cur = x;
        for layer in &self.params.backbone {
            let mut out = vec![0.0; layer.rows];
            layer.affine(cur, &mut out);
            for v in &mut out {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            activations.push(out);
            cur = activations.last().unwrap();
        }
        let features = activations.last().unwrap().clone();
        let mut z_kd = vec![0.0; self.num_classes];
        self.params.kd_head.affine(&features, &mut z_kd);
        let z_cls = match &self.params.cls_head {
            Some(head) => {
                let mut z = vec![0.0; self.num_classes];
                head.affine(&features, &mut z);
                Some(LogitVector::new(z)?)
            }
            None => None,
        };
        Ok((
            DualHeadOutput {
                z_kd: LogitVector::new(z_kd)?,
                z_cls,
                features,
            },
            ForwardTrace { activations },
        ))
    }

    pub fn forward_batch(&self, inputs: &[&[f64]]) -> Result<Vec<DualHeadOutput>> {
        inputs.iter().map(|x| self.forward(x)).collect()
    }

    /// Order-insensitive checksum-free equality helper: exact bit equality of
    /// all parameters.
    pub fn params_bits_equal(&self, other: &NetworkState) -> bool {
        let a = self.params.flatten();
        let b = other.params.flatten();
        a.len() == b.len()
            && a.iter()
                .zip(&b)
                .all(|(x, y)| x.to_bits() == y.to_bits())
    }

    /// FNV-1a hash over the parameter bit patterns, for frozen-teacher checks.
    pub fn params_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for v in self.params.flatten() {
            for byte in v.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

/// Accumulates analytic parameter gradients for a batch from per-sample logit
/// gradients. The reduction order over samples is fixed (batch order), so the
/// result is deterministic.
pub fn backward(
    net: &NetworkState,
    inputs: &[&[f64]],
    grads: &LogitGradients,
    mask: HeadMask,
) -> Result<ParamSet> {
    if grads.kd.len() != inputs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} kd logit gradients for {} inputs",
            grads.kd.len(),
            inputs.len()
        )));
    }
    if let Some(cls) = &grads.cls {
        if net.params.cls_head.is_none() {
            return Err(Error::InvalidArgument(
                "cls logit gradients supplied for a single-head network".into(),
            ));
        }
        if cls.len() != inputs.len() {
            return Err(Error::InvalidArgument(format!(
                "{} cls logit gradients for {} inputs",
                cls.len(),
                inputs.len()
            )));
        }
    }

    let mut grad = ParamSet::zeros_like(&net.params);
    let n_backbone = net.params.backbone.len();

    for (i, x) in inputs.iter().enumerate() {
        let (_, trace) = net.forward_cached(x)?;
        let features = trace.activations.last().unwrap();

        // Head parameter gradients and the feature-level gradient.
        let mut d_features = vec![0.0; features.len()];
        accumulate_head(
            &net.params.kd_head,
            &mut grad.kd_head,
            features,
            &grads.kd[i],
            Some(&mut d_features),
        );
        if let (Some(head), Some(ghead), Some(cls_grads)) = (
            net.params.cls_head.as_ref(),
            grad.cls_head.as_mut(),
            grads.cls.as_ref(),
        ) {
            let feed = mask.cls_to_backbone.then_some(&mut d_features);
            accumulate_head(head, ghead, features, &cls_grads[i], feed);
        }

        // Backbone layers, last to first, through the ReLU gates.
        let mut delta = d_features;
        for l in (0..n_backbone).rev() {
            let layer = &net.params.backbone[l];
            let act = &trace.activations[l];
            // ReLU gate: the cached activation is zero exactly where the
            // pre-activation was clipped.
            for (d, a) in delta.iter_mut().zip(act) {
                if *a <= 0.0 {
                    *d = 0.0;
                }
            }
            let below: &[f64] = if l == 0 { x } else { &trace.activations[l - 1] };
            let glayer = &mut grad.backbone[l];
            for (r, dr) in delta.iter().enumerate() {
                let row = &mut glayer.weights[r * layer.cols..(r + 1) * layer.cols];
                for (w, b) in row.iter_mut().zip(below) {
                    *w += dr * b;
                }
                glayer.bias[r] += dr;
            }
            if l > 0 {
                let mut next = vec![0.0; layer.cols];
                for (r, dr) in delta.iter().enumerate() {
                    let row = &layer.weights[r * layer.cols..(r + 1) * layer.cols];
                    for (n, w) in next.iter_mut().zip(row) {
                        *n += dr * w;
                    }
                }
                delta = next;
            }
        }
    }
    Ok(grad)
}

fn accumulate_head(
    head: &Layer,
    grad: &mut Layer,
    features: &[f64],
    d_logits: &[f64],
    d_features: Option<&mut Vec<f64>>,
) {
    for (r, dz) in d_logits.iter().enumerate() {
        let row = &mut grad.weights[r * head.cols..(r + 1) * head.cols];
        for (w, f) in row.iter_mut().zip(features) {
            *w += dz * f;
        }
        grad.bias[r] += dz;
    }
    if let Some(df) = d_features {
        for (r, dz) in d_logits.iter().enumerate() {
            let row = &head.weights[r * head.cols..(r + 1) * head.cols];
            for (d, w) in df.iter_mut().zip(row) {
                *d += dz * w;
            }
        }
    }
}

/// Momentum SGD with weight decay:
/// `g = grad + wd * theta; v = mu * v + g; theta -= lr * v`.
pub fn sgd_step(net: &mut NetworkState, grad: &ParamSet, lr: f64, opt: &OptimizerConfig) {
    let mu = opt.momentum;
    let wd = opt.weight_decay;
    let apply = |theta: &mut [f64], v: &mut [f64], g: &[f64]| {
        for ((t, vel), gi) in theta.iter_mut().zip(v.iter_mut()).zip(g) {
            let g_eff = gi + wd * *t;
            *vel = mu * *vel + g_eff;
            *t -= lr * *vel;
        }
    };
    for ((layer, vel), g) in net
        .params
        .layers_mut()
        .zip(net.velocity.layers_mut())
        .zip(grad.layers())
    {
        apply(&mut layer.weights, &mut vel.weights, &g.weights);
        apply(&mut layer.bias, &mut vel.bias, &g.bias);
    }
}

/// Backprop + optimizer update in one call. `batch_index` only labels the
/// divergence diagnostic.
pub fn backward_and_step(
    net: &mut NetworkState,
    inputs: &[&[f64]],
    grads: &LogitGradients,
    opt: &OptimizerConfig,
    lr: f64,
    mask: HeadMask,
    epoch: usize,
    batch_index: usize,
) -> Result<StepReport> {
    let grad = backward(net, inputs, grads, mask)?;
    if !grad.all_finite() {
        return Err(Error::Diverged {
            epoch,
            batch: batch_index,
            detail: "non-finite parameter gradient".into(),
        });
    }
    let grad_norm = grad.l2_norm();
    sgd_step(net, &grad, lr, opt);
    Ok(StepReport { grad_norm })
}

/// Binary checkpoint, little-endian:
/// magic "IPWDCKPT", version u32, num_layers u32, per-layer (rows u32,
/// cols u32), dual_head u8, seed u64, then all parameters as f64 in layer
/// order (weights row-major, then biases), backbone first, KD head before
/// CLS head. Momenta are not persisted.
pub fn save_checkpoint(net: &NetworkState, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let layers: Vec<&Layer> = net.params.layers().collect();
    buf.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for l in &layers {
        buf.extend_from_slice(&(l.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(l.cols as u32).to_le_bytes());
    }
    buf.push(net.dual_head as u8);
    buf.extend_from_slice(&net.seed.to_le_bytes());
    for l in &layers {
        for w in &l.weights {
            buf.extend_from_slice(&w.to_le_bytes());
        }
        for b in &l.bias {
            buf.extend_from_slice(&b.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkState> {
    let bad = |detail: &str| Error::CheckpointFormat {
        path: path.to_path_buf(),
        detail: detail.into(),
    };
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    file.read_to_end(&mut data).map_err(|e| Error::io(path, e))?;

    let mut off = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if off + n > data.len() {
            return Err(bad("truncated checkpoint"));
        }
        let s = &data[off..off + n];
        off += n;
        Ok(s)
    };

    if take(8)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let num_layers = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    if num_layers < 2 {
        return Err(bad("checkpoint must contain a backbone layer and a head"));
    }
    let mut shapes = Vec::with_capacity(num_layers);
    for _ in 0..num_layers {
        let rows = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        if rows == 0 || cols == 0 {
            return Err(bad("zero-sized layer"));
        }
        shapes.push((rows, cols));
    }
    let dual_head = match take(1)?[0] {
        0 => false,
        1 => true,
        other => return Err(bad(&format!("bad dual_head flag {other}"))),
    };
    let seed = u64::from_le_bytes(take(8)?.try_into().unwrap());

    let n_heads = if dual_head { 2 } else { 1 };
    if num_layers <= n_heads {
        return Err(bad("no backbone layers"));
    }
    let n_backbone = num_layers - n_heads;

    // Shape chain: each backbone layer consumes the previous one's rows.
    let mut layer_dims = vec![shapes[0].1];
    for i in 0..n_backbone {
        if i > 0 && shapes[i].1 != shapes[i - 1].0 {
            return Err(bad("backbone layer shapes do not chain"));
        }
        layer_dims.push(shapes[i].0);
    }
    let feature_dim = *layer_dims.last().unwrap();
    let (kd_rows, kd_cols) = shapes[n_backbone];
    if kd_cols != feature_dim {
        return Err(bad("kd head does not match the feature dimension"));
    }
    if dual_head && shapes[n_backbone + 1] != (kd_rows, kd_cols) {
        return Err(bad("cls head shape differs from kd head"));
    }
    let num_classes = kd_rows;
    if num_classes < 2 {
        return Err(bad("head has fewer than 2 classes"));
    }

    let mut read_layer = |rows: usize, cols: usize| -> Result<Layer> {
        let mut l = Layer::zeros(rows, cols);
        for w in l.weights.iter_mut() {
            *w = f64::from_le_bytes(take(8)?.try_into().unwrap());
        }
        for b in l.bias.iter_mut() {
            *b = f64::from_le_bytes(take(8)?.try_into().unwrap());
        }
        Ok(l)
    };
    let mut backbone = Vec::with_capacity(n_backbone);
    for &(r, c) in &shapes[..n_backbone] {
        backbone.push(read_layer(r, c)?);
    }
    let kd_head = read_layer(kd_rows, kd_cols)?;
    let cls_head = if dual_head {
        Some(read_layer(kd_rows, kd_cols)?)
    } else {
        None
    };
    if off != data.len() {
        return Err(bad("trailing bytes after parameters"));
    }

    let params = ParamSet {
        backbone,
        kd_head,
        cls_head,
    };
    let velocity = ParamSet::zeros_like(&params);
    Ok(NetworkState {
        layer_dims,
        num_classes,
        dual_head,
        params,
        velocity,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_net(dual: bool) -> NetworkState {
        init_network(&[2, 4, 3], 3, dual, 11).unwrap()
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = init_network(&[4, 8, 5], 6, true, 42).unwrap();
        let b = init_network(&[4, 8, 5], 6, true, 42).unwrap();
        assert!(a.params_bits_equal(&b));
        assert_eq!(a.params_checksum(), b.params_checksum());
        let c = init_network(&[4, 8, 5], 6, true, 43).unwrap();
        assert_ne!(a.params_checksum(), c.params_checksum());
    }

    #[test]
    fn single_head_has_no_cls_parameters() {
        let net = small_net(false);
        assert!(net.params.cls_head.is_none());
        let out = net.forward(&[0.5, -0.5]).unwrap();
        assert!(out.z_cls.is_none());
    }

    #[test]
    fn init_rejects_degenerate_architectures() {
        assert!(init_network(&[4], 3, false, 0).is_err());
        assert!(init_network(&[4, 0, 3], 3, false, 0).is_err());
        assert!(init_network(&[4, 3], 1, false, 0).is_err());
    }

    #[test]
    fn init_weight_mean_is_statistically_zero() {
        // One wide layer gives ~1e5 draws from U(-limit, limit); the mean of
        // n draws has standard deviation limit/sqrt(3 n).
        let net = init_network(&[334, 300], 2, false, 7).unwrap();
        let w = &net.params.backbone[0].weights;
        assert_eq!(w.len(), 300 * 334);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let limit = (6.0f64 / 334.0).sqrt();
        let sigma_mean = limit / (3.0 * w.len() as f64).sqrt();
        assert!(
            mean.abs() < 3.0 * sigma_mean,
            "mean {mean} vs 3 sigma {}",
            3.0 * sigma_mean
        );
    }

    #[test]
    fn zero_parameters_give_zero_logits() {
        let mut net = small_net(true);
        let flat = vec![0.0; net.params.param_count()];
        net.params.assign_from_flat(&flat).unwrap();
        let out = net.forward(&[1.0, 2.0]).unwrap();
        assert!(out.z_kd.values().iter().all(|v| *v == 0.0));
        assert!(out
            .z_cls
            .unwrap()
            .values()
            .iter()
            .all(|v| *v == 0.0));
    }

    #[test]
    fn identity_like_single_layer_reproduces_input() {
        // Backbone 2 -> 2 with identity weights, head 2 -> 2 identity: the
        // logits equal the (nonnegative) input.
        let mut net = init_network(&[2, 2], 2, false, 0).unwrap();
        let ident = vec![1.0, 0.0, 0.0, 1.0];
        net.params.backbone[0].weights = ident.clone();
        net.params.backbone[0].bias = vec![0.0, 0.0];
        net.params.kd_head.weights = ident;
        net.params.kd_head.bias = vec![0.0, 0.0];
        let out = net.forward(&[0.25, 1.5]).unwrap();
        assert_eq!(out.z_kd.values(), &[0.25, 1.5]);
    }

    #[test]
    fn forward_is_batch_order_independent() {
        let net = small_net(true);
        let a = [0.1, 0.2];
        let b = [-0.4, 0.9];
        let single_a = net.forward(&a).unwrap();
        let single_b = net.forward(&b).unwrap();
        let batch = net.forward_batch(&[&b, &a]).unwrap();
        assert_eq!(batch[1], single_a);
        assert_eq!(batch[0], single_b);
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let net = small_net(false);
        assert!(net.forward(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn zero_gradients_leave_only_weight_decay_shrinkage() {
        let mut net = small_net(true);
        let before = net.params.flatten();
        let opt = OptimizerConfig {
            learning_rate: 0.5,
            decay_epochs: vec![],
            decay_factor: 0.1,
            momentum: 0.0,
            weight_decay: 0.01,
            batch_size: 1,
        };
        let grads = LogitGradients {
            kd: vec![vec![0.0; 3]],
            cls: Some(vec![vec![0.0; 3]]),
        };
        let x = [0.3, -0.3];
        backward_and_step(
            &mut net,
            &[&x],
            &grads,
            &opt,
            opt.learning_rate,
            HeadMask::kd_only(),
            1,
            0,
        )
        .unwrap();
        let after = net.params.flatten();
        for (b, a) in before.iter().zip(&after) {
            // theta' = theta - lr * wd * theta
            let expected = b - 0.5 * 0.01 * b;
            assert!((a - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_definition_on_single_parameter() {
        // One 1x1-ish network: check theta -= lr * (grad + wd*theta).
        let mut net = init_network(&[2, 2], 2, false, 3).unwrap();
        let mut flat = vec![0.0; net.params.param_count()];
        flat[0] = 1.0;
        net.params.assign_from_flat(&flat).unwrap();
        let grad_flat: Vec<f64> = flat.iter().map(|_| 0.0).collect();
        let mut grad = ParamSet::zeros_like(&net.params);
        let mut g = grad_flat.clone();
        g[0] = 1.0;
        grad.assign_from_flat(&g).unwrap();
        let opt = OptimizerConfig {
            learning_rate: 0.1,
            decay_epochs: vec![],
            decay_factor: 1.0,
            momentum: 0.0,
            weight_decay: 0.0,
            batch_size: 1,
        };
        sgd_step(&mut net, &grad, 0.1, &opt);
        let after = net.params.flatten();
        assert!((after[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates_across_steps() {
        let mut net = init_network(&[2, 2], 2, false, 3).unwrap();
        net.params
            .assign_from_flat(&vec![0.0; net.params.param_count()])
            .unwrap();
        let mut grad = ParamSet::zeros_like(&net.params);
        let mut g = vec![0.0; net.params.param_count()];
        g[0] = 1.0;
        grad.assign_from_flat(&g).unwrap();
        let opt = OptimizerConfig {
            learning_rate: 1.0,
            decay_epochs: vec![],
            decay_factor: 1.0,
            momentum: 0.5,
            weight_decay: 0.0,
            batch_size: 1,
        };
        sgd_step(&mut net, &grad, 1.0, &opt);
        sgd_step(&mut net, &grad, 1.0, &opt);
        // v1 = 1, theta1 = -1; v2 = 1.5, theta2 = -2.5
        assert!((net.params.flatten()[0] + 2.5).abs() < 1e-15);
    }

    #[test]
    fn learning_rate_schedule_decays_at_epochs() {
        let opt = OptimizerConfig {
            learning_rate: 0.1,
            decay_epochs: vec![10, 20],
            decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 8,
        };
        assert!((opt.learning_rate_at(1) - 0.1).abs() < 1e-15);
        assert!((opt.learning_rate_at(10) - 0.01).abs() < 1e-15);
        assert!((opt.learning_rate_at(19) - 0.01).abs() < 1e-15);
        assert!((opt.learning_rate_at(25) - 0.001).abs() < 1e-16);
    }

    /// A dual-head net with uniformly positive parameters, so positive
    /// inputs keep every ReLU unit alive.
    fn live_net() -> NetworkState {
        let mut net = small_net(true);
        let flat = vec![0.1; net.params.param_count()];
        net.params.assign_from_flat(&flat).unwrap();
        net
    }

    #[test]
    fn head_isolation_cls_gradients_do_not_touch_backbone() {
        let net = live_net();
        let x = [0.7, 0.1];
        let kd = vec![vec![0.2, -0.1, 0.3]];
        let cls = vec![vec![1.0, -2.0, 0.5]];
        let with_cls = backward(
            &net,
            &[&x],
            &LogitGradients {
                kd: kd.clone(),
                cls: Some(cls),
            },
            HeadMask::kd_only(),
        )
        .unwrap();
        let without_cls = backward(
            &net,
            &[&x],
            &LogitGradients {
                kd,
                cls: Some(vec![vec![0.0, 0.0, 0.0]]),
            },
            HeadMask::kd_only(),
        )
        .unwrap();
        // Backbone gradients identical whether or not cls gradients are present.
        for (a, b) in with_cls.backbone.iter().zip(&without_cls.backbone) {
            assert_eq!(a.weights, b.weights);
            assert_eq!(a.bias, b.bias);
        }
        // But the cls head itself received them.
        assert!(with_cls
            .cls_head
            .as_ref()
            .unwrap()
            .weights
            .iter()
            .any(|w| *w != 0.0));
        assert!(without_cls
            .cls_head
            .as_ref()
            .unwrap()
            .weights
            .iter()
            .all(|w| *w == 0.0));
    }

    #[test]
    fn cls_to_backbone_mask_feeds_backbone_when_enabled() {
        let net = live_net();
        let x = [0.7, 0.1];
        let kd = vec![vec![0.0, 0.0, 0.0]];
        let cls = vec![vec![1.0, -2.0, 0.5]];
        let gated = backward(
            &net,
            &[&x],
            &LogitGradients {
                kd: kd.clone(),
                cls: Some(cls.clone()),
            },
            HeadMask {
                cls_to_backbone: true,
            },
        )
        .unwrap();
        assert!(gated
            .backbone
            .iter()
            .any(|l| l.weights.iter().any(|w| *w != 0.0)));
    }

    #[test]
    fn non_finite_logit_gradient_reports_divergence() {
        let mut net = small_net(false);
        let x = [0.5, 0.5];
        let opt = OptimizerConfig {
            learning_rate: 0.1,
            decay_epochs: vec![],
            decay_factor: 1.0,
            momentum: 0.0,
            weight_decay: 0.0,
            batch_size: 1,
        };
        let grads = LogitGradients {
            kd: vec![vec![f64::NAN, 0.0, 0.0]],
            cls: None,
        };
        let err = backward_and_step(
            &mut net,
            &[&x],
            &grads,
            &opt,
            0.1,
            HeadMask::kd_only(),
            3,
            17,
        )
        .unwrap_err();
        match err {
            Error::Diverged { epoch, batch, .. } => {
                assert_eq!(epoch, 3);
                assert_eq!(batch, 17);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_forward_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = init_network(&[3, 8, 4], 5, true, 99).unwrap();
        save_checkpoint(&net, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(net.params_bits_equal(&loaded));
        assert_eq!(loaded.layer_dims, vec![3, 8, 4]);
        assert_eq!(loaded.seed, 99);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            assert_eq!(net.forward(&x).unwrap(), loaded.forward(&x).unwrap());
        }
    }

    #[test]
    fn checkpoint_size_is_header_plus_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        // 2-16-8-3 dual head: layers (16x2)(8x16)(3x8)(3x8).
        let net = init_network(&[2, 16, 8], 3, true, 1).unwrap();
        save_checkpoint(&net, &path).unwrap();
        let size = std::fs::metadata(&path).unwrap().len() as usize;
        let num_layers = 4;
        let header = 8 + 4 + 4 + num_layers * 8 + 1 + 8;
        let params = (16 * 2 + 16) + (8 * 16 + 8) + (3 * 8 + 3) + (3 * 8 + 3);
        assert_eq!(net.params.param_count(), params);
        assert_eq!(size, header + 8 * params);
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = small_net(false);
        save_checkpoint(&net, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path).unwrap_err() {
            Error::CheckpointFormat { .. } => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_checkpoint_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = small_net(true);
        save_checkpoint(&net, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        match load_checkpoint(&path).unwrap_err() {
            Error::CheckpointFormat { detail, .. } => {
                assert!(detail.contains("truncated"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
