//! Trainers: layer-local Forward-Forward, softmax heads, PEPITA, and a backprop baseline.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabelMagnitude};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Normalization};
use crate::network::DenseLayer;

mod bp;
mod ff;
mod heads;
mod pepita;

pub use bp::{bp_gradients, bp_step, train_bp, train_bp_with, BpGradients};
pub use ff::{ff_layer_gradients, ff_layer_step, ff_step, train_ff, train_ff_with, FfStepOutput};
pub use heads::{head_gradients, train_heads, train_heads_with, train_pt_readouts};
pub use pepita::{init_pepita, pepita_step, train_pepita, train_pepita_with, PepitaStep};

/// Loss magnitude treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// How Forward-Forward sweeps its layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LayerSchedule {
    /// Every minibatch updates all layers in one sweep.
    #[default]
    Simultaneous,
    /// Layer `l` is trained for all epochs before layer `l + 1` starts.
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// FF margin per neuron; the layer threshold is `theta_factor * width`.
    pub theta_factor: f32,
    pub label_magnitude: LabelMagnitude,
    pub normalize: Normalization,
    pub goodness_from_layer: usize,
    pub schedule: LayerSchedule,
    /// Heavy-ball coefficient; 0 is plain SGD.
    pub momentum: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 100,
            epochs: 100,
            seed: 0,
            theta_factor: 0.03,
            label_magnitude: LabelMagnitude::SampleMax,
            normalize: Normalization::Unit,
            goodness_from_layer: 0,
            schedule: LayerSchedule::Simultaneous,
            momentum: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.normalize.validate()?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.theta_factor.is_finite() && self.theta_factor >= 0.0) {
            return Err(Error::Config("theta_factor must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Goodness threshold for a layer of the given width.
    pub fn theta_for(&self, width: usize) -> f32 {
        self.theta_factor * width as f32
    }
}

/// Per-epoch progress record passed to training callbacks.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean minibatch loss per trained unit (layer or head).
    pub losses: Vec<f64>,
}

pub(crate) fn check_arch(arch: &[usize]) -> Result<()> {
    if arch.is_empty() || arch.contains(&0) {
        return Err(Error::Config(format!(
            "architecture must be non-empty with positive widths, got {arch:?}"
        )));
    }
    Ok(())
}

pub(crate) fn check_loss(stage: impl FnOnce() -> String, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss.abs() > DIVERGENCE_LIMIT {
        return Err(Error::TrainingDiverged { stage: stage(), loss });
    }
    Ok(())
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Minibatch index lists for one epoch.
pub(crate) fn batches(order: &[usize], batch_size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(batch_size)
}

/// Stacks raw sample features for the given indices.
pub(crate) fn gather(data: &Dataset, idx: &[usize]) -> Matrix {
    let d = data.dim();
    let mut m = Matrix::zeros(idx.len(), d);
    for (row, &i) in m.row_iter_mut().zip(idx) {
        row.copy_from_slice(&data.samples()[i].features);
    }
    m
}

pub(crate) fn gather_labels(data: &Dataset, idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| data.samples()[i].label).collect()
}

pub(crate) fn normalize_rows(x: &mut Matrix, norm: Normalization) {
    if norm.is_on() {
        for row in x.row_iter_mut() {
            norm.apply(row);
        }
    }
}

/// Pre-activation `X Wᵀ + b` for a batch (uninstrumented).
pub(crate) fn affine_batch(layer: &DenseLayer, x: &Matrix) -> Matrix {
    let mut z = linalg::gemm_nt(x, &layer.weights);
    for row in z.row_iter_mut() {
        for (v, b) in row.iter_mut().zip(&layer.bias) {
            *v += b;
        }
    }
    z
}

/// Layer inputs (post-normalization where applicable) and activities for a batch.
pub(crate) struct BatchTrace {
    pub inputs: Vec<Matrix>,
    pub activities: Vec<Matrix>,
}

pub(crate) fn forward_batch(layers: &[DenseLayer], x: &Matrix, norm: Normalization) -> BatchTrace {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut activities: Vec<Matrix> = Vec::with_capacity(layers.len());
    for (l, layer) in layers.iter().enumerate() {
        let mut input = if l == 0 { x.clone() } else { activities[l - 1].clone() };
        normalize_rows(&mut input, norm.for_layer(l));
        let mut a = affine_batch(layer, &input);
        linalg::relu_in_place(a.as_mut_slice());
        inputs.push(input);
        activities.push(a);
    }
    BatchTrace { inputs, activities }
}

/// Row-wise concatenation of `acts[0..=upto]`.
pub(crate) fn concat_rows(acts: &[Matrix], upto: usize) -> Matrix {
    let rows = acts[0].rows();
    let width: usize = acts[..=upto].iter().map(Matrix::cols).sum();
    let mut out = Matrix::zeros(rows, width);
    for r in 0..rows {
        let mut off = 0;
        let dst = out.row_mut(r);
        for a in &acts[..=upto] {
            dst[off..off + a.cols()].copy_from_slice(a.row(r));
            off += a.cols();
        }
    }
    out
}

/// Column sums scaled by `alpha`, accumulated into `acc`.
pub(crate) fn col_sums_acc(m: &Matrix, alpha: f32, acc: &mut [f32]) {
    for row in m.row_iter() {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += alpha * v;
        }
    }
}

/// Parameter gradient of one dense or softmax layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Matrix,
    pub bias: Vec<f32>,
}

impl LayerGrad {
    pub(crate) fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            weights: Matrix::zeros(rows, cols),
            bias: vec![0.0; rows],
        }
    }

    /// Accumulates `alpha * Dᵀ X` and `alpha * colsum(D)`.
    pub(crate) fn accumulate(&mut self, delta: &Matrix, input: &Matrix, alpha: f32) {
        linalg::gemm_tn_acc(delta, input, alpha, &mut self.weights);
        col_sums_acc(delta, alpha, &mut self.bias);
    }
}

/// Optimizer state for one weight/bias pair: `v = μ·v + g`, `p -= lr·v`.
#[derive(Debug, Clone)]
pub(crate) struct Velocity {
    momentum: f32,
    v: Option<LayerGrad>,
}

impl Velocity {
    pub(crate) fn new(momentum: f32) -> Self {
        Self { momentum, v: None }
    }

    pub(crate) fn for_layers(n: usize, momentum: f32) -> Vec<Self> {
        vec![Self::new(momentum); n]
    }

    pub(crate) fn step(&mut self, weights: &mut Matrix, bias: &mut [f32], grad: &LayerGrad, lr: f32) {
        if self.momentum == 0.0 {
            apply_grad(weights, bias, grad, lr);
            return;
        }
        let v = match &mut self.v {
            Some(v) => {
                for (a, g) in v.weights.as_mut_slice().iter_mut().zip(grad.weights.as_slice()) {
                    *a = self.momentum * *a + g;
                }
                for (a, g) in v.bias.iter_mut().zip(&grad.bias) {
                    *a = self.momentum * *a + g;
                }
                v
            }
            None => self.v.insert(grad.clone()),
        };
        apply_grad(weights, bias, v, lr);
    }
}

pub(crate) fn apply_grad(weights: &mut Matrix, bias: &mut [f32], grad: &LayerGrad, lr: f32) {
    if lr == 0.0 {
        return;
    }
    weights.sub_scaled(&grad.weights, lr);
    for (b, g) in bias.iter_mut().zip(&grad.bias) {
        *b -= lr * g;
    }
}

/// Mean cross-entropy and `dL/dlogits = (softmax - onehot) / B`, in place on `logits`.
pub(crate) fn softmax_xent_backward(logits: &mut Matrix, labels: &[usize]) -> f64 {
    let b = logits.rows() as f64;
    let mut loss = 0.0;
    for (row, &y) in logits.row_iter_mut().zip(labels) {
        linalg::softmax_in_place(row);
        loss -= f64::from(row[y]).max(1e-30).ln();
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v = (f64::from(*v) / b) as f32;
        }
    }
    loss / b
}
