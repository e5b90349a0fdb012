//! PEPITA: a clean forward pass, then a second pass on the input shifted by a
//! fixed random projection of the output error. Hidden layers learn from the
//! activity difference between the two passes; the output layer learns from
//! the error directly.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    affine_batch, batches, check_arch, check_loss, concat_rows, forward_batch, gather, gather_labels,
    softmax_xent_backward, EpochStats, LayerGrad, TrainConfig, Velocity,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::network::{DenseLayer, PTNetwork, SoftmaxHead, PEPITA_MAX_DEPTH};

/// Half-width of the uniform feedback distribution is `FEEDBACK_SCALE / sqrt(input_dim)`.
pub const FEEDBACK_SCALE: f32 = 0.05;

#[derive(Debug, Clone)]
pub struct PepitaStep {
    /// Cross-entropy of the clean pass.
    pub loss: f64,
    /// `(a_l - a_l^mod) (x_l^mod)ᵀ / B` per hidden layer.
    pub hidden_updates: Vec<LayerGrad>,
    /// `e hᵀ / B` for the output layer (the cross-entropy gradient).
    pub output_grad: LayerGrad,
}

/// Fresh PEPITA network: uniform fan-in layers, uniform fan-in output layer over
/// the concatenated hidden activities, and the fixed feedback projection.
pub fn init_pepita(input_dim: usize, arch: &[usize], num_classes: usize, cfg: &TrainConfig) -> Result<PTNetwork> {
    check_arch(arch)?;
    if arch.len() > PEPITA_MAX_DEPTH {
        return Err(Error::UnsupportedDepth(arch.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dims = vec![input_dim];
    dims.extend_from_slice(arch);
    let layers: Vec<DenseLayer> = dims
        .windows(2)
        .map(|w| DenseLayer::init(w[0], w[1], &mut rng))
        .collect();
    let total: usize = arch.iter().sum();
    let out = DenseLayer::init(total, num_classes, &mut rng);
    let bound = FEEDBACK_SCALE / (input_dim as f32).sqrt();
    let feedback = Matrix::from_fn(input_dim, num_classes, |_, _| rng.random_range(-bound..=bound));
    let net = PTNetwork {
        layers,
        readouts: Vec::new(),
        output: SoftmaxHead {
            weights: out.weights,
            bias: out.bias,
        },
        feedback,
        gates: Vec::new(),
        num_classes,
        normalize: cfg.normalize,
    };
    net.validate()?;
    Ok(net)
}

/// Computes one PEPITA update on a minibatch and applies it with step `lr`.
pub fn pepita_step(net: &mut PTNetwork, x: &Matrix, labels: &[usize], lr: f32) -> Result<PepitaStep> {
    let mut velocity = Velocity::for_layers(net.depth() + 1, 0.0);
    pepita_update(net, x, labels, lr, &mut velocity)
}

fn pepita_update(
    net: &mut PTNetwork,
    x: &Matrix,
    labels: &[usize],
    lr: f32,
    velocity: &mut [Velocity],
) -> Result<PepitaStep> {
    if x.cols() != net.input_dim() || x.rows() != labels.len() {
        return Err(Error::shape("pepita_step", net.input_dim(), x.cols()));
    }
    let b = x.rows() as f32;
    let n = net.depth();
    let clean = forward_batch(&net.layers, x, net.normalize);
    let h = concat_rows(&clean.activities, n - 1);
    let output_layer = DenseLayer {
        weights: net.output.weights.clone(),
        bias: net.output.bias.clone(),
    };
    let mut err = affine_batch(&output_layer, &h);
    let loss = softmax_xent_backward(&mut err, labels);
    // softmax_xent_backward leaves (ŷ - y) / B; recover e = ŷ - y.
    for v in err.as_mut_slice() {
        *v *= b;
    }

    let mut x_mod = linalg::gemm_nt(&err, &net.feedback);
    for (m, v) in x_mod.as_mut_slice().iter_mut().zip(x.as_slice()) {
        *m += v;
    }
    let modulated = forward_batch(&net.layers, &x_mod, net.normalize);

    let mut hidden_updates = Vec::with_capacity(n);
    for l in 0..n {
        let mut diff = clean.activities[l].clone();
        for (d, m) in diff.as_mut_slice().iter_mut().zip(modulated.activities[l].as_slice()) {
            *d -= m;
        }
        let layer = &net.layers[l];
        let mut g = LayerGrad::zeros(layer.out_dim(), layer.in_dim());
        g.accumulate(&diff, &modulated.inputs[l], 1.0 / b);
        hidden_updates.push(g);
    }
    let mut output_grad = LayerGrad::zeros(net.num_classes, h.cols());
    output_grad.accumulate(&err, &h, 1.0 / b);

    let (hidden_v, out_v) = velocity.split_at_mut(n);
    for ((layer, g), v) in net.layers.iter_mut().zip(&hidden_updates).zip(hidden_v) {
        v.step(&mut layer.weights, &mut layer.bias, g, lr);
    }
    out_v[0].step(&mut net.output.weights, &mut net.output.bias, &output_grad, lr);
    Ok(PepitaStep {
        loss,
        hidden_updates,
        output_grad,
    })
}

pub fn train_pepita(train: &Dataset, arch: &[usize], cfg: &TrainConfig) -> Result<PTNetwork> {
    train_pepita_with(train, arch, cfg, &mut |_| {})
}

pub fn train_pepita_with(
    train: &Dataset,
    arch: &[usize],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<PTNetwork> {
    cfg.validate()?;
    let mut net = init_pepita(train.dim(), arch, train.num_classes(), cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut velocity = Velocity::for_layers(net.depth() + 1, cfg.momentum);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0usize;
        for idx in batches(&order, cfg.batch_size) {
            let x = gather(train, idx);
            let labels = gather_labels(train, idx);
            let step = pepita_update(&mut net, &x, &labels, cfg.learning_rate, &mut velocity)?;
            check_loss(|| "pepita".into(), step.loss)?;
            sum += step.loss;
            count += 1;
        }
        on_epoch(&EpochStats {
            epoch,
            losses: vec![sum / count.max(1) as f64],
        });
    }
    if net.layers.iter().any(|l| !l.is_finite()) || !net.output.is_finite() {
        return Err(Error::TrainingDiverged {
            stage: "pepita parameters".into(),
            loss: f64::NAN,
        });
    }
    Ok(net)
}
