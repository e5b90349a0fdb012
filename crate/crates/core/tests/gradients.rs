//! Analytic gradients against central finite differences of independent f64 losses.

use lightff::linalg::Normalization;
use lightff::network::{Algorithm, DenseLayer, FFNetwork, SoftmaxHead};
use lightff::train::{
    bp_gradients, ff_layer_gradients, head_gradients, init_pepita, pepita_step, LayerGrad, TrainConfig,
};
use lightff::{Matrix, Model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Parameters as f64 row-major `W` followed by `b`.
#[derive(Clone)]
struct Affine {
    rows: usize,
    cols: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Affine {
    fn from_parts(w: &Matrix, b: &[f32]) -> Self {
        Self {
            rows: w.rows(),
            cols: w.cols(),
            w: w.as_slice().iter().map(|&v| f64::from(v)).collect(),
            b: b.iter().map(|&v| f64::from(v)).collect(),
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|i| self.b[i] + (0..self.cols).map(|j| self.w[i * self.cols + j] * x[j]).sum::<f64>())
            .collect()
    }

    fn len(&self) -> usize {
        self.w.len() + self.b.len()
    }

    fn param_mut(&mut self, k: usize) -> &mut f64 {
        if k < self.w.len() {
            &mut self.w[k]
        } else {
            &mut self.b[k - self.w.len()]
        }
    }
}

fn rows_f64(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter()
        .map(|r| r.iter().map(|&v| f64::from(v)).collect())
        .collect()
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|z| z.max(0.0)).collect()
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn cross_entropy(logits: &[f64], y: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::MIN, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[y]
}

fn flatten(g: &LayerGrad) -> Vec<f64> {
    g.weights
        .as_slice()
        .iter()
        .chain(&g.bias)
        .map(|&v| f64::from(v))
        .collect()
}

/// Central differences of `loss` over every parameter of `params[which]`.
fn numeric_grad(params: &[Affine], which: usize, loss: &dyn Fn(&[Affine]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..params[which].len())
        .map(|k| {
            let orig = *p[which].param_mut(k);
            *p[which].param_mut(k) = orig + STEP;
            let up = loss(&p);
            *p[which].param_mut(k) = orig - STEP;
            let down = loss(&p);
            *p[which].param_mut(k) = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

/// Keeps every ReLU pre-activation away from its kink so differences stay smooth.
fn away_from_kinks(layers: &[Affine], inputs: &[Vec<f64>]) -> bool {
    inputs.iter().all(|x| {
        let mut cur = x.clone();
        layers.iter().all(|l| {
            let z = l.apply(&cur);
            let ok = z.iter().all(|v| v.abs() > 1e-3);
            cur = relu(z);
            ok
        })
    })
}

#[test]
pub fn ff_layer_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    for trial in 0..8 {
        let (inp, out) = (6, 5);
        let layer = DenseLayer {
            weights: random_matrix(&mut rng, out, inp, 0.8),
            bias: (0..out).map(|_| rng.random_range(-0.2..0.2)).collect(),
        };
        let pos = random_matrix(&mut rng, 4, inp, 1.0);
        let neg = random_matrix(&mut rng, 3, inp, 1.0);
        let theta = 0.03 * out as f32 + trial as f32 * 0.4;
        let params = vec![Affine::from_parts(&layer.weights, &layer.bias)];
        let (p_rows, n_rows) = (rows_f64(&pos), rows_f64(&neg));
        let all: Vec<Vec<f64>> = p_rows.iter().chain(&n_rows).cloned().collect();
        if !away_from_kinks(&params, &all) {
            continue;
        }
        let th = f64::from(theta);
        let loss = |p: &[Affine]| -> f64 {
            let g = |x: &Vec<f64>| relu(p[0].apply(x)).iter().map(|a| a * a).sum::<f64>();
            let lp = p_rows.iter().map(|x| softplus(th - g(x))).sum::<f64>() / p_rows.len() as f64;
            let ln = n_rows.iter().map(|x| softplus(g(x) - th)).sum::<f64>() / n_rows.len() as f64;
            lp + ln
        };
        let out = ff_layer_gradients(&layer, &pos, &neg, theta).unwrap();
        assert!((out.loss - loss(&params)).abs() < 1e-5);
        let err = relative_error(&flatten(&out.grad), &numeric_grad(&params, 0, &loss));
        assert!(err <= TOL, "trial {trial}: relative error {err}");
        checked += 1;
    }
    assert!(checked >= 3, "only {checked} trials were away from ReLU kinks");
}

#[test]
pub fn head_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let head = SoftmaxHead {
        weights: random_matrix(&mut rng, 4, 7, 0.6),
        bias: vec![0.1, -0.2, 0.05, 0.0],
    };
    let h = random_matrix(&mut rng, 5, 7, 1.5);
    let labels = [0, 3, 1, 1, 2];
    let rows = rows_f64(&h);
    let params = vec![Affine::from_parts(&head.weights, &head.bias)];
    let loss = |p: &[Affine]| -> f64 {
        rows.iter()
            .zip(&labels)
            .map(|(x, &y)| cross_entropy(&p[0].apply(x), y))
            .sum::<f64>()
            / rows.len() as f64
    };
    let (l, grad) = head_gradients(&head, &h, &labels).unwrap();
    assert!((l - loss(&params)).abs() < 1e-5);
    let err = relative_error(&flatten(&grad), &numeric_grad(&params, 0, &loss));
    assert!(err <= TOL, "relative error {err}");
}

#[test]
pub fn pepita_output_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let labels = [2, 0, 1, 2];
    // Hidden activities of the clean pass with unit-length normalization of
    // every layer input after the first; `None` when a pre-activation sits near a ReLU kink.
    let clean_pass = |layers: &[Affine], x: &[f64]| -> Option<Vec<f64>> {
        let mut cur = x.to_vec();
        let mut concat = Vec::new();
        for (l, layer) in layers.iter().enumerate() {
            if l > 0 {
                let n = cur.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 1e-12 {
                    cur.iter_mut().for_each(|v| *v /= n);
                }
            }
            let z = layer.apply(&cur);
            if z.iter().any(|v| v.abs() < 1e-3) {
                return None;
            }
            cur = relu(z);
            concat.extend_from_slice(&cur);
        }
        Some(concat)
    };
    let (mut net, x, hidden) = (0..50)
        .find_map(|seed| {
            let cfg = TrainConfig {
                seed,
                ..TrainConfig::default()
            };
            let mut net = init_pepita(6, &[5, 4], 3, &cfg).unwrap();
            assert_eq!(net.normalize, Normalization::Unit);
            net.output.weights = random_matrix(&mut rng, 3, 9, 0.7);
            let x = random_matrix(&mut rng, 4, 6, 1.0);
            let layers: Vec<Affine> = net
                .layers
                .iter()
                .map(|l| Affine::from_parts(&l.weights, &l.bias))
                .collect();
            let hidden: Option<Vec<Vec<f64>>> = rows_f64(&x).iter().map(|r| clean_pass(&layers, r)).collect();
            hidden.map(|h| (net, x, h))
        })
        .expect("no initialization away from ReLU kinks");
    let params = vec![Affine::from_parts(&net.output.weights, &net.output.bias)];
    let loss = |p: &[Affine]| -> f64 {
        hidden
            .iter()
            .zip(&labels)
            .map(|(h, &y)| cross_entropy(&p[0].apply(h), y))
            .sum::<f64>()
            / hidden.len() as f64
    };
    let step = pepita_step(&mut net, &x, &labels, 0.0).unwrap();
    assert!((step.loss - loss(&params)).abs() < 1e-5);
    let err = relative_error(&flatten(&step.output_grad), &numeric_grad(&params, 0, &loss));
    assert!(err <= TOL, "relative error {err}");
}

#[test]
pub fn backprop_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (inp, w1, w2, m) = (5, 6, 4, 3);
    let net = FFNetwork {
        algorithm: Algorithm::Bp,
        layers: vec![
            DenseLayer {
                weights: random_matrix(&mut rng, w1, inp, 0.9),
                bias: (0..w1).map(|_| rng.random_range(-0.1..0.1)).collect(),
            },
            DenseLayer {
                weights: random_matrix(&mut rng, w2, w1, 0.9),
                bias: (0..w2).map(|_| rng.random_range(-0.1..0.1)).collect(),
            },
        ],
        heads: Vec::new(),
        final_head: Some(SoftmaxHead {
            weights: random_matrix(&mut rng, m, w1 + w2, 0.8),
            bias: vec![0.0, 0.1, -0.1],
        }),
        gates: Vec::new(),
        num_classes: m,
        goodness_from_layer: 0,
        normalize: Normalization::Off,
        label_magnitude: Default::default(),
    };
    Model::Forward(net.clone()).validate().unwrap();
    let x = random_matrix(&mut rng, 6, inp, 1.2);
    let labels = [0, 1, 2, 2, 1, 0];
    let inputs = rows_f64(&x);
    let head = net.final_head.as_ref().unwrap();
    let params = vec![
        Affine::from_parts(&net.layers[0].weights, &net.layers[0].bias),
        Affine::from_parts(&net.layers[1].weights, &net.layers[1].bias),
        Affine::from_parts(&head.weights, &head.bias),
    ];
    assert!(away_from_kinks(&params[..2], &inputs));
    let loss = |p: &[Affine]| -> f64 {
        inputs
            .iter()
            .zip(&labels)
            .map(|(x, &y)| {
                let a1 = relu(p[0].apply(x));
                let a2 = relu(p[1].apply(&a1));
                let h: Vec<f64> = a1.iter().chain(&a2).copied().collect();
                cross_entropy(&p[2].apply(&h), y)
            })
            .sum::<f64>()
            / inputs.len() as f64
    };
    let g = bp_gradients(&net, &x, &labels).unwrap();
    assert!((g.loss - loss(&params)).abs() < 1e-5);
    let analytic = [flatten(&g.layers[0]), flatten(&g.layers[1]), flatten(&g.head)];
    for (which, a) in analytic.iter().enumerate() {
        let err = relative_error(a, &numeric_grad(&params, which, &loss));
        assert!(err <= TOL, "parameter block {which}: relative error {err}");
    }
}
