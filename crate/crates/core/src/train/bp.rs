use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    affine_batch, batches, check_arch, check_loss, concat_rows, forward_batch, gather, gather_labels,
    softmax_xent_backward, EpochStats, LayerGrad, TrainConfig, Velocity,
};
use crate::data::{Dataset, LabelMagnitude};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Normalization};
use crate::network::{Algorithm, DenseLayer, FFNetwork, SoftmaxHead};

#[derive(Debug, Clone)]
pub struct BpGradients {
    pub loss: f64,
    pub layers: Vec<LayerGrad>,
    pub head: LayerGrad,
}

/// Mean cross-entropy of the final head and its gradient w.r.t. every parameter.
pub fn bp_gradients(net: &FFNetwork, x: &Matrix, labels: &[usize]) -> Result<BpGradients> {
    let head = net.final_head.as_ref().ok_or(Error::MissingHeads("final head"))?;
    if x.cols() != net.input_dim() || x.rows() != labels.len() {
        return Err(Error::shape("bp_gradients", net.input_dim(), x.cols()));
    }
    if net.normalize.is_on() {
        return Err(Error::Config(
            "backprop baseline does not differentiate through normalization".into(),
        ));
    }
    let n = net.depth();
    let trace = forward_batch(&net.layers, x, Normalization::Off);
    let h = concat_rows(&trace.activities, n - 1);
    let head_layer = DenseLayer {
        weights: head.weights.clone(),
        bias: head.bias.clone(),
    };
    let mut delta = affine_batch(&head_layer, &h);
    let loss = softmax_xent_backward(&mut delta, labels);
    let mut head_grad = LayerGrad::zeros(head.num_classes(), head.input_width());
    head_grad.accumulate(&delta, &h, 1.0);
    let dh = linalg::gemm_nn(&delta, &head.weights);

    let widths = net.widths();
    let offsets: Vec<usize> = widths
        .iter()
        .scan(0, |acc, w| {
            let o = *acc;
            *acc += w;
            Some(o)
        })
        .collect();
    let mut grads: Vec<LayerGrad> = net
        .layers
        .iter()
        .map(|l| LayerGrad::zeros(l.out_dim(), l.in_dim()))
        .collect();
    let mut upstream: Option<Matrix> = None;
    for l in (0..n).rev() {
        let a = &trace.activities[l];
        let mut dz = Matrix::zeros(a.rows(), a.cols());
        for r in 0..a.rows() {
            let from_head = &dh.row(r)[offsets[l]..offsets[l] + widths[l]];
            let from_above = upstream.as_ref().map(|u| u.row(r));
            let dst = dz.row_mut(r);
            for j in 0..widths[l] {
                let g = from_head[j] + from_above.map_or(0.0, |u| u[j]);
                dst[j] = if a.get(r, j) > 0.0 { g } else { 0.0 };
            }
        }
        grads[l].accumulate(&dz, &trace.inputs[l], 1.0);
        if l > 0 {
            upstream = Some(linalg::gemm_nn(&dz, &net.layers[l].weights));
        }
    }
    Ok(BpGradients {
        loss,
        layers: grads,
        head: head_grad,
    })
}

/// One SGD step of backprop; returns the batch loss.
pub fn bp_step(net: &mut FFNetwork, x: &Matrix, labels: &[usize], lr: f32) -> Result<f64> {
    let mut velocity = Velocity::for_layers(net.depth() + 1, 0.0);
    bp_update(net, x, labels, lr, &mut velocity)
}

fn bp_update(net: &mut FFNetwork, x: &Matrix, labels: &[usize], lr: f32, velocity: &mut [Velocity]) -> Result<f64> {
    let g = bp_gradients(net, x, labels)?;
    check_loss(|| "backprop".into(), g.loss)?;
    let (hidden_v, head_v) = velocity.split_at_mut(net.layers.len());
    for ((layer, lg), v) in net.layers.iter_mut().zip(&g.layers).zip(hidden_v) {
        v.step(&mut layer.weights, &mut layer.bias, lg, lr);
    }
    let head = net.final_head.as_mut().expect("checked in bp_gradients");
    head_v[0].step(&mut head.weights, &mut head.bias, &g.head, lr);
    Ok(g.loss)
}

pub fn train_bp(train: &Dataset, arch: &[usize], cfg: &TrainConfig) -> Result<FFNetwork> {
    train_bp_with(train, arch, cfg, &mut |_| {})
}

/// Cross-entropy backprop through all layers and a final head on the
/// concatenated activities. Inputs are raw and layers are not normalized.
pub fn train_bp_with(
    train: &Dataset,
    arch: &[usize],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<FFNetwork> {
    cfg.validate()?;
    check_arch(arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dims = vec![train.dim()];
    dims.extend_from_slice(arch);
    let layers: Vec<DenseLayer> = dims
        .windows(2)
        .map(|w| DenseLayer::init(w[0], w[1], &mut rng))
        .collect();
    let head = DenseLayer::init(arch.iter().sum(), train.num_classes(), &mut rng);
    let mut net = FFNetwork {
        algorithm: Algorithm::Bp,
        layers,
        heads: Vec::new(),
        final_head: Some(SoftmaxHead {
            weights: head.weights,
            bias: head.bias,
        }),
        gates: Vec::new(),
        num_classes: train.num_classes(),
        goodness_from_layer: 0,
        normalize: Normalization::Off,
        label_magnitude: LabelMagnitude::default(),
    };
    net.validate()?;
    let mut velocity = Velocity::for_layers(arch.len() + 1, cfg.momentum);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0usize;
        for idx in batches(&order, cfg.batch_size) {
            let x = gather(train, idx);
            let labels = gather_labels(train, idx);
            sum += bp_update(&mut net, &x, &labels, cfg.learning_rate, &mut velocity)?;
            count += 1;
        }
        on_epoch(&EpochStats {
            epoch,
            losses: vec![sum / count.max(1) as f64],
        });
    }
    if net.layers.iter().any(|l| !l.is_finite()) {
        return Err(Error::TrainingDiverged {
            stage: "backprop parameters".into(),
            loss: f64::NAN,
        });
    }
    Ok(net)
}
