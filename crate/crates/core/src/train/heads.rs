use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    affine_batch, batches, check_loss, concat_rows, forward_batch, gather, gather_labels, softmax_xent_backward,
    EpochStats, LayerGrad, TrainConfig, Velocity,
};
use crate::data::{write_neutral, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Normalization};
use crate::network::{Algorithm, DenseLayer, FFNetwork, PTNetwork, SoftmaxHead};

const HEAD_SEED_SALT: u64 = 0x6865_6164_7321;

/// Mean cross-entropy of `head` on rows `h` and its parameter gradient.
pub fn head_gradients(head: &SoftmaxHead, h: &Matrix, labels: &[usize]) -> Result<(f64, LayerGrad)> {
    if h.cols() != head.input_width() {
        return Err(Error::shape("head_gradients", head.input_width(), h.cols()));
    }
    if h.rows() != labels.len() {
        return Err(Error::shape("head_gradients labels", h.rows(), labels.len()));
    }
    let mut delta = affine_batch(
        &DenseLayer {
            weights: head.weights.clone(),
            bias: head.bias.clone(),
        },
        h,
    );
    let loss = softmax_xent_backward(&mut delta, labels);
    let mut grad = LayerGrad::zeros(head.num_classes(), head.input_width());
    grad.accumulate(&delta, h, 1.0);
    Ok((loss, grad))
}

/// Cross-entropy SGD on frozen hidden layers for the heads at `targets`
/// (each reads the concatenated activities of layers `0..=target`).
fn fit_heads(
    layers: &[DenseLayer],
    normalize: Normalization,
    neutral_classes: Option<usize>,
    train: &Dataset,
    cfg: &TrainConfig,
    targets: &[usize],
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<Vec<SoftmaxHead>> {
    cfg.validate()?;
    let m = train.num_classes();
    let widths: Vec<usize> = layers.iter().map(DenseLayer::out_dim).collect();
    let mut heads: Vec<SoftmaxHead> = targets
        .iter()
        .map(|&t| SoftmaxHead::zeros(m, widths[..=t].iter().sum()))
        .collect();
    let mut velocity = Velocity::for_layers(heads.len(), cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ HEAD_SEED_SALT);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = vec![0.0; heads.len()];
        let mut count = 0usize;
        for idx in batches(&order, cfg.batch_size) {
            let mut x = gather(train, idx);
            if let Some(classes) = neutral_classes {
                for row in x.row_iter_mut() {
                    write_neutral(row, classes);
                }
            }
            let labels = gather_labels(train, idx);
            let trace = forward_batch(layers, &x, normalize);
            for (((head, &t), sum), v) in heads
                .iter_mut()
                .zip(targets)
                .zip(sums.iter_mut())
                .zip(velocity.iter_mut())
            {
                let h = concat_rows(&trace.activities, t);
                let (loss, grad) = head_gradients(head, &h, &labels)?;
                check_loss(|| format!("softmax head {}", t + 1), loss)?;
                v.step(&mut head.weights, &mut head.bias, &grad, cfg.learning_rate);
                *sum += loss;
            }
            count += 1;
        }
        on_epoch(&EpochStats {
            epoch,
            losses: sums.iter().map(|s| s / count.max(1) as f64).collect(),
        });
    }
    if heads.iter().any(|h| !h.is_finite()) {
        return Err(Error::TrainingDiverged {
            stage: "softmax heads".into(),
            loss: f64::NAN,
        });
    }
    Ok(heads)
}

pub fn train_heads(net: &FFNetwork, train: &Dataset, cfg: &TrainConfig, per_layer: bool) -> Result<FFNetwork> {
    train_heads_with(net, train, cfg, per_layer, &mut |_| {})
}

/// Trains softmax heads on a frozen network.
///
/// With `per_layer`, one head per layer is trained (`heads[l]` reads layers
/// `0..=l`); an existing `final_head` is reused as the deepest head, otherwise
/// the deepest head is trained and also installed as `final_head`. Without
/// `per_layer`, only `final_head` is trained. FF networks see neutral-label
/// inputs, backprop networks see raw inputs.
pub fn train_heads_with(
    net: &FFNetwork,
    train: &Dataset,
    cfg: &TrainConfig,
    per_layer: bool,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<FFNetwork> {
    if train.num_classes() != net.num_classes || train.dim() != net.input_dim() {
        return Err(Error::Dataset(format!(
            "training data ({} classes, dim {}) does not match network ({} classes, dim {})",
            train.num_classes(),
            train.dim(),
            net.num_classes,
            net.input_dim()
        )));
    }
    let n = net.depth();
    let neutral = (net.algorithm == Algorithm::Ff).then_some(net.num_classes);
    let targets: Vec<usize> = match (per_layer, &net.final_head) {
        (false, _) => vec![n - 1],
        (true, Some(_)) => (0..n - 1).collect(),
        (true, None) => (0..n).collect(),
    };
    let mut out = net.clone();
    let trained = if targets.is_empty() {
        Vec::new()
    } else {
        fit_heads(&net.layers, net.normalize, neutral, train, cfg, &targets, on_epoch)?
    };
    if per_layer {
        let mut heads = trained;
        if let Some(final_head) = &net.final_head {
            heads.push(final_head.clone());
        }
        out.final_head = heads.last().cloned();
        out.heads = heads;
    } else {
        let head = trained.into_iter().next().expect("one target");
        if out.heads.len() == n {
            out.heads[n - 1] = head.clone();
        }
        out.final_head = Some(head);
    }
    out.validate()?;
    Ok(out)
}

/// Per-layer readouts for early-exit inference on a PEPITA network.
/// The deepest readout is the PEPITA-trained output layer.
pub fn train_pt_readouts(net: &PTNetwork, train: &Dataset, cfg: &TrainConfig) -> Result<PTNetwork> {
    if train.num_classes() != net.num_classes || train.dim() != net.input_dim() {
        return Err(Error::Dataset("training data does not match the PEPITA network".into()));
    }
    let n = net.depth();
    let targets: Vec<usize> = (0..n - 1).collect();
    let mut readouts = if targets.is_empty() {
        Vec::new()
    } else {
        fit_heads(&net.layers, net.normalize, None, train, cfg, &targets, &mut |_| {})?
    };
    readouts.push(net.output.clone());
    let mut out = net.clone();
    out.readouts = readouts;
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;
    use crate::train::train_ff;

    fn small_net() -> (Dataset, FFNetwork) {
        let data = make_synthetic(40, 3, 10, 6.0, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 20,
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        let net = train_ff(&data, &[8, 6, 5], &cfg).unwrap();
        (data, net)
    }

    #[test]
    fn hidden_weights_frozen_and_head_widths_chain() {
        let (data, net) = small_net();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 20,
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        let out = train_heads(&net, &data, &cfg, true).unwrap();
        assert_eq!(out.layers, net.layers);
        let widths: Vec<usize> = out.heads.iter().map(SoftmaxHead::input_width).collect();
        assert_eq!(widths, vec![8, 14, 19]);
        assert_eq!(out.final_head.as_ref(), out.heads.last());

        let single = train_heads(&net, &data, &cfg, false).unwrap();
        assert!(single.heads.is_empty());
        assert_eq!(single.final_head.as_ref().unwrap().input_width(), 19);
        assert_eq!(single.layers, net.layers);
    }

    #[test]
    fn per_layer_reuses_existing_final_head() {
        let (data, net) = small_net();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 20,
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        let with_final = train_heads(&net, &data, &cfg, false).unwrap();
        let per_layer = train_heads(&with_final, &data, &cfg, true).unwrap();
        assert_eq!(per_layer.final_head, with_final.final_head);
        assert_eq!(per_layer.heads.last(), with_final.final_head.as_ref());
    }

    #[test]
    fn head_gradient_rejects_bad_shapes() {
        let head = SoftmaxHead::zeros(3, 4);
        assert!(head_gradients(&head, &Matrix::zeros(2, 5), &[0, 1]).is_err());
        assert!(head_gradients(&head, &Matrix::zeros(2, 4), &[0]).is_err());
        let (loss, _) = head_gradients(&head, &Matrix::zeros(2, 4), &[0, 2]).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-6);
    }
}
