use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    batches, check_arch, check_loss, forward_batch, gather, normalize_rows, sigmoid, softplus, EpochStats, LayerGrad,
    LayerSchedule, TrainConfig, Velocity,
};
use crate::data::{write_label, wrong_label, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::network::{Algorithm, DenseLayer, FFNetwork};

/// Result of evaluating the FF objective on one layer for one minibatch.
#[derive(Debug, Clone)]
pub struct FfStepOutput {
    /// `mean softplus(θ - g⁺) + mean softplus(g⁻ - θ)`.
    pub loss: f64,
    pub grad: LayerGrad,
    /// Activities computed with the pre-update parameters.
    pub positive_activity: Matrix,
    pub negative_activity: Matrix,
    pub mean_positive_goodness: f64,
    pub mean_negative_goodness: f64,
}

/// Loss and parameter gradient of the FF objective for one layer.
pub fn ff_layer_gradients(
    layer: &DenseLayer,
    positives: &Matrix,
    negatives: &Matrix,
    theta: f32,
) -> Result<FfStepOutput> {
    if positives.rows() == 0 || negatives.rows() == 0 {
        return Err(Error::Config(
            "FF step needs non-empty positive and negative batches".into(),
        ));
    }
    for m in [positives, negatives] {
        if m.cols() != layer.in_dim() {
            return Err(Error::shape("ff_layer_step", layer.in_dim(), m.cols()));
        }
    }
    let theta = f64::from(theta);
    let mut grad = LayerGrad::zeros(layer.out_dim(), layer.in_dim());
    let mut loss = 0.0;
    let mut means = [0.0f64; 2];
    let mut acts = Vec::with_capacity(2);
    for (k, (x, sign)) in [(positives, 1.0f64), (negatives, -1.0)].into_iter().enumerate() {
        let mut a = super::affine_batch(layer, x);
        linalg::relu_in_place(a.as_mut_slice());
        let b = x.rows() as f64;
        let mut delta = a.clone();
        for row in delta.row_iter_mut() {
            let g = f64::from(linalg::sum_squares(row));
            means[k] += g / b;
            // positives: softplus(θ - g); negatives: softplus(g - θ)
            let margin = sign * (theta - g);
            loss += softplus(margin) / b;
            let dl_dg = -sign * sigmoid(margin) / b;
            let scale = (2.0 * dl_dg) as f32;
            for v in row.iter_mut() {
                *v *= scale;
            }
        }
        grad.accumulate(&delta, x, 1.0);
        acts.push(a);
    }
    let negative_activity = acts.pop().expect("two batches");
    let positive_activity = acts.pop().expect("two batches");
    Ok(FfStepOutput {
        loss,
        grad,
        positive_activity,
        negative_activity,
        mean_positive_goodness: means[0],
        mean_negative_goodness: means[1],
    })
}

/// One SGD step of the FF objective on a single layer; returns the batch loss.
pub fn ff_layer_step(layer: &mut DenseLayer, positives: &Matrix, negatives: &Matrix, cfg: &TrainConfig) -> Result<f64> {
    layer_step(layer, &mut Velocity::new(0.0), positives, negatives, cfg)
}

fn layer_step(
    layer: &mut DenseLayer,
    velocity: &mut Velocity,
    positives: &Matrix,
    negatives: &Matrix,
    cfg: &TrainConfig,
) -> Result<f64> {
    let out = ff_layer_gradients(layer, positives, negatives, cfg.theta_for(layer.out_dim()))?;
    check_loss(|| "ff layer".into(), out.loss)?;
    velocity.step(&mut layer.weights, &mut layer.bias, &out.grad, cfg.learning_rate);
    Ok(out.loss)
}

/// One minibatch sweep over all layers. Each layer's input is the
/// (normalized) pre-update activity of the layer below; no gradient crosses
/// a layer boundary. Returns per-layer losses.
pub fn ff_step(
    layers: &mut [DenseLayer],
    positives: &Matrix,
    negatives: &Matrix,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let mut velocity = Velocity::for_layers(layers.len(), 0.0);
    sweep(layers, &mut velocity, positives, negatives, cfg)
}

fn sweep(
    layers: &mut [DenseLayer],
    velocity: &mut [Velocity],
    positives: &Matrix,
    negatives: &Matrix,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(layers.len());
    let mut pos = positives.clone();
    let mut neg = negatives.clone();
    for (l, (layer, vel)) in layers.iter_mut().zip(velocity.iter_mut()).enumerate() {
        normalize_rows(&mut pos, cfg.normalize.for_layer(l));
        normalize_rows(&mut neg, cfg.normalize.for_layer(l));
        let out = ff_layer_gradients(layer, &pos, &neg, cfg.theta_for(layer.out_dim()))?;
        check_loss(|| format!("ff layer {}", l + 1), out.loss)?;
        vel.step(&mut layer.weights, &mut layer.bias, &out.grad, cfg.learning_rate);
        losses.push(out.loss);
        pos = out.positive_activity;
        neg = out.negative_activity;
    }
    Ok(losses)
}

pub fn train_ff(train: &Dataset, arch: &[usize], cfg: &TrainConfig) -> Result<FFNetwork> {
    train_ff_with(train, arch, cfg, &mut |_| {})
}

/// Layer-local Forward-Forward training, deterministic in `cfg.seed`.
pub fn train_ff_with(
    train: &Dataset,
    arch: &[usize],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<FFNetwork> {
    cfg.validate()?;
    check_arch(arch)?;
    let m = train.num_classes();
    if m < 2 {
        return Err(Error::Config("Forward-Forward needs at least 2 classes".into()));
    }
    if train.dim() < m {
        return Err(Error::Config(format!(
            "input dimension {} cannot hold a {m}-class label code",
            train.dim()
        )));
    }
    if cfg.goodness_from_layer >= arch.len() {
        return Err(Error::Config("goodness_from_layer must index an existing layer".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dims = vec![train.dim()];
    dims.extend_from_slice(arch);
    let mut layers: Vec<DenseLayer> = dims
        .windows(2)
        .map(|w| DenseLayer::init(w[0], w[1], &mut rng))
        .collect();

    let mut order: Vec<usize> = (0..train.len()).collect();
    let make_batch = |idx: &[usize], rng: &mut ChaCha8Rng| {
        let mut pos = gather(train, idx);
        let mut neg = pos.clone();
        for (r, &i) in idx.iter().enumerate() {
            let s = &train.samples()[i];
            let mag = cfg.label_magnitude.resolve(&s.features);
            write_label(pos.row_mut(r), s.label, m, mag);
            write_label(neg.row_mut(r), wrong_label(s.label, m, rng), m, mag);
        }
        (pos, neg)
    };

    let mut velocity = Velocity::for_layers(layers.len(), cfg.momentum);
    match cfg.schedule {
        LayerSchedule::Simultaneous => {
            for epoch in 0..cfg.epochs {
                order.shuffle(&mut rng);
                let mut sums = vec![0.0; layers.len()];
                let mut count = 0usize;
                for idx in batches(&order, cfg.batch_size) {
                    let (pos, neg) = make_batch(idx, &mut rng);
                    let losses = sweep(&mut layers, &mut velocity, &pos, &neg, cfg)?;
                    for (s, l) in sums.iter_mut().zip(losses) {
                        *s += l;
                    }
                    count += 1;
                }
                on_epoch(&EpochStats {
                    epoch,
                    losses: sums.iter().map(|s| s / count.max(1) as f64).collect(),
                });
            }
        }
        LayerSchedule::Greedy => {
            for l in 0..layers.len() {
                for epoch in 0..cfg.epochs {
                    order.shuffle(&mut rng);
                    let mut sum = 0.0;
                    let mut count = 0usize;
                    for idx in batches(&order, cfg.batch_size) {
                        let (pos, neg) = make_batch(idx, &mut rng);
                        let (frozen, rest) = layers.split_at_mut(l);
                        let mut p = pos;
                        let mut n = neg;
                        if l > 0 {
                            p = forward_batch(frozen, &p, cfg.normalize)
                                .activities
                                .pop()
                                .expect("frozen layers");
                            n = forward_batch(frozen, &n, cfg.normalize)
                                .activities
                                .pop()
                                .expect("frozen layers");
                            normalize_rows(&mut p, cfg.normalize);
                            normalize_rows(&mut n, cfg.normalize);
                        }
                        sum += layer_step(&mut rest[0], &mut velocity[l], &p, &n, cfg)?;
                        count += 1;
                    }
                    let mut losses = vec![f64::NAN; layers.len()];
                    losses[l] = sum / count.max(1) as f64;
                    on_epoch(&EpochStats { epoch, losses });
                }
            }
        }
    }

    if layers.iter().any(|l| !l.is_finite()) {
        return Err(Error::TrainingDiverged {
            stage: "ff parameters".into(),
            loss: f64::NAN,
        });
    }
    let net = FFNetwork {
        algorithm: Algorithm::Ff,
        layers,
        heads: Vec::new(),
        final_head: None,
        gates: Vec::new(),
        num_classes: m,
        goodness_from_layer: cfg.goodness_from_layer,
        normalize: cfg.normalize,
        label_magnitude: cfg.label_magnitude,
    };
    net.validate()?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;

    fn toy_layer() -> DenseLayer {
        DenseLayer {
            weights: Matrix::from_fn(4, 3, |i, j| ((i * 3 + j) as f32 * 0.37).sin()),
            bias: vec![0.1, -0.05, 0.2, 0.0],
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut layer = toy_layer();
        let before = layer.clone();
        let pos = Matrix::from_fn(2, 3, |i, j| (i + j) as f32 * 0.5);
        let neg = Matrix::from_fn(2, 3, |i, j| (i as f32 - j as f32) * 0.5);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let loss = ff_layer_step(&mut layer, &pos, &neg, &cfg).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(layer, before);
    }

    #[test]
    fn input_width_mismatch_rejected() {
        let layer = toy_layer();
        let ok = Matrix::zeros(1, 3);
        let wrong = Matrix::zeros(1, 2);
        assert!(ff_layer_gradients(&layer, &ok, &ok, 1.0).is_ok());
        assert!(matches!(
            ff_layer_gradients(&layer, &wrong, &ok, 1.0),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn diverging_loss_is_reported() {
        let mut layer = DenseLayer {
            weights: Matrix::from_fn(2, 2, |_, _| 1e4),
            bias: vec![0.0; 2],
        };
        let x = Matrix::from_fn(1, 2, |_, _| 100.0);
        let err = ff_layer_step(&mut layer, &x, &x, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::TrainingDiverged { .. }));
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let data = make_synthetic(10, 2, 8, 5.0, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            seed: 9,
            ..TrainConfig::default()
        };
        let net = train_ff(&data, &[6, 5], &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let l0 = DenseLayer::init(8, 6, &mut rng);
        let l1 = DenseLayer::init(6, 5, &mut rng);
        assert_eq!(net.layers, vec![l0, l1]);
    }

    #[test]
    fn training_is_deterministic() {
        let data = make_synthetic(30, 2, 8, 5.0, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            learning_rate: 0.01,
            seed: 4,
            ..TrainConfig::default()
        };
        let a = train_ff(&data, &[8, 8], &cfg).unwrap();
        let b = train_ff(&data, &[8, 8], &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn greedy_schedule_trains_every_layer() {
        let data = make_synthetic(20, 2, 8, 5.0, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 10,
            learning_rate: 0.01,
            schedule: LayerSchedule::Greedy,
            ..TrainConfig::default()
        };
        let init = train_ff(
            &data,
            &[6, 6],
            &TrainConfig {
                epochs: 0,
                ..cfg.clone()
            },
        )
        .unwrap();
        let mut seen = Vec::new();
        let net = train_ff_with(&data, &[6, 6], &cfg, &mut |s| seen.push(s.clone())).unwrap();
        assert_eq!(seen.len(), 4);
        assert!(net.layers.iter().zip(&init.layers).all(|(a, b)| a != b));
    }
}
