//! Per-layer confidence gates learned from validation data.
//!
//! A gate is a single sigmoid neuron `σ(w·s + b)` on a scalar layer score `s`:
//! the max-over-labels accumulated goodness for multi-pass networks, or the
//! maximum logit of the layer's softmax head for one-pass networks. A sample
//! exits when `σ(w·s + b) >= 0.5`, i.e. `w·s + b >= 0`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::infer;
use crate::network::{Algorithm, Model};
use crate::train::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Accumulated goodness of the winning label (multi-pass).
    Goodness,
    /// Maximum logit of the layer's softmax head (one-pass, PEPITA, backprop).
    MaxLogit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CalibMethod {
    /// Threshold at `mean + k·std` of the validation scores.
    #[default]
    Stat,
    /// Logistic regression of per-sample correctness on the score.
    Bce,
}

impl std::str::FromStr for CalibMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stat" => Ok(Self::Stat),
            "bce" => Ok(Self::Bce),
            other => Err(Error::Config(format!(
                "unknown calibration method {other:?} (expected stat|bce)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceGate {
    /// 1-based layer after which the gate is evaluated.
    pub layer: usize,
    pub mode: GateMode,
    #[serde(rename = "w")]
    pub weight: f64,
    #[serde(rename = "b")]
    pub bias: f64,
    pub method: CalibMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
}

impl ConfidenceGate {
    #[inline]
    pub fn is_confident(&self, score: f64) -> bool {
        self.weight * score + self.bias >= 0.0
    }

    pub fn probability(&self, score: f64) -> f64 {
        sigmoid(self.weight * score + self.bias)
    }

    /// Gate that accepts every sample.
    pub fn always(layer: usize, mode: GateMode) -> Self {
        Self {
            layer,
            mode,
            weight: 0.0,
            bias: 1.0,
            method: CalibMethod::Stat,
            k: None,
        }
    }

    /// Gate that rejects every sample.
    pub fn never(layer: usize, mode: GateMode) -> Self {
        Self {
            bias: -1.0,
            ..Self::always(layer, mode)
        }
    }
}

/// Validation scores of one layer with per-sample correctness of that layer's prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerScores {
    pub layer: usize,
    pub mode: GateMode,
    pub scores: Vec<f64>,
    pub correct: Vec<bool>,
}

impl LayerScores {
    pub fn new(layer: usize, mode: GateMode, scores: Vec<f64>, correct: Vec<bool>) -> Result<Self> {
        if scores.len() != correct.len() {
            return Err(Error::shape("LayerScores", scores.len(), correct.len()));
        }
        Ok(Self {
            layer,
            mode,
            scores,
            correct,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Population mean and standard deviation.
    pub fn mean_std(&self) -> (f64, f64) {
        let n = self.scores.len() as f64;
        let mean = self.scores.iter().sum::<f64>() / n;
        let var = self.scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibConfig {
    pub method: CalibMethod,
    /// Offset in standard deviations for the `stat` method.
    pub k: f64,
    /// Damping of the Newton steps used by the `bce` method.
    pub bce_learning_rate: f64,
    pub bce_epochs: usize,
    pub b_max: f64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            method: CalibMethod::Stat,
            k: -1.0,
            bce_learning_rate: 1.0,
            bce_epochs: 100,
            b_max: 50.0,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.b_max > 0.0) {
            return Err(Error::Config("b_max must be positive".into()));
        }
        if !self.k.is_finite() {
            return Err(Error::Config("k must be finite".into()));
        }
        if !(self.bce_learning_rate > 0.0) {
            return Err(Error::Config("bce_learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// `w = 1`, `b = -(mean + k·std)` with the population standard deviation.
pub fn fit_stat(scores: &LayerScores, k: f64) -> Result<ConfidenceGate> {
    if scores.is_empty() {
        return Err(Error::Dataset(format!(
            "no validation scores for layer {}",
            scores.layer
        )));
    }
    let (mean, std) = scores.mean_std();
    Ok(ConfidenceGate {
        layer: scores.layer,
        mode: scores.mode,
        weight: 1.0,
        bias: -(mean + k * std),
        method: CalibMethod::Stat,
        k: Some(k),
    })
}

/// Logistic regression of correctness on the layer score.
///
/// Goodness gates keep `w = 1` and fit only the bias; max-logit gates fit both.
/// Degenerate label sets yield a constant gate (`w = 0`, `b = ±b_max`).
pub fn fit_bce(scores: &LayerScores, cfg: &CalibConfig) -> Result<ConfidenceGate> {
    if scores.is_empty() {
        return Err(Error::Dataset(format!(
            "no validation scores for layer {}",
            scores.layer
        )));
    }
    let mut gate = ConfidenceGate {
        layer: scores.layer,
        mode: scores.mode,
        weight: 0.0,
        bias: 0.0,
        method: CalibMethod::Bce,
        k: None,
    };
    let n_correct = scores.correct.iter().filter(|&&c| c).count();
    if n_correct == scores.len() || n_correct == 0 {
        gate.bias = if n_correct == 0 { -cfg.b_max } else { cfg.b_max };
        return Ok(gate);
    }
    let y: Vec<f64> = scores.correct.iter().map(|&c| f64::from(u8::from(c))).collect();
    let n = y.len() as f64;
    let (mean, std) = scores.mean_std();
    let lr = cfg.bce_learning_rate;

    match scores.mode {
        GateMode::Goodness => {
            let max_step = std.max(1.0);
            let mut b = -mean;
            for _ in 0..cfg.bce_epochs {
                let (mut g, mut h) = (0.0, 0.0);
                for (s, yi) in scores.scores.iter().zip(&y) {
                    let p = sigmoid(s + b);
                    g += (p - yi) / n;
                    h += p * (1.0 - p) / n;
                }
                let step = (g / h.max(1e-12)).clamp(-max_step, max_step);
                b -= lr * step;
                if step.abs() < 1e-12 {
                    break;
                }
            }
            gate.weight = 1.0;
            gate.bias = b;
        }
        GateMode::MaxLogit => {
            // Newton on standardized scores z = (s - mean) / std.
            let scale = if std > 0.0 { std } else { 1.0 };
            let z: Vec<f64> = scores.scores.iter().map(|s| (s - mean) / scale).collect();
            let (mut w, mut b) = (0.0f64, 0.0f64);
            for _ in 0..cfg.bce_epochs {
                let (mut gw, mut gb, mut hww, mut hwb, mut hbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (zi, yi) in z.iter().zip(&y) {
                    let p = sigmoid(w * zi + b);
                    let r = p - yi;
                    let c = p * (1.0 - p);
                    gw += r * zi / n;
                    gb += r / n;
                    hww += c * zi * zi / n;
                    hwb += c * zi / n;
                    hbb += c / n;
                }
                let ridge = 1e-9;
                hww += ridge;
                hbb += ridge;
                let det = hww * hbb - hwb * hwb;
                let (mut dw, mut db) = if det > 1e-18 {
                    ((hbb * gw - hwb * gb) / det, (hww * gb - hwb * gw) / det)
                } else {
                    (gw, gb)
                };
                let norm = (dw * dw + db * db).sqrt();
                if norm > 5.0 {
                    dw *= 5.0 / norm;
                    db *= 5.0 / norm;
                }
                w -= lr * dw;
                b -= lr * db;
                if norm < 1e-12 {
                    break;
                }
            }
            gate.weight = w / scale;
            gate.bias = b - w * mean / scale;
        }
    }
    gate.bias = gate.bias.clamp(-cfg.b_max, cfg.b_max);
    Ok(gate)
}

pub fn fit_gate(scores: &LayerScores, cfg: &CalibConfig) -> Result<ConfidenceGate> {
    match cfg.method {
        CalibMethod::Stat => fit_stat(scores, cfg.k),
        CalibMethod::Bce => fit_bce(scores, cfg),
    }
}

/// Default gate mode for a model: goodness for FF multi-pass, max-logit otherwise.
pub fn check_mode(model: &Model, mode: GateMode) -> Result<()> {
    match (model, mode) {
        (Model::Forward(n), GateMode::Goodness) if n.algorithm != Algorithm::Ff => Err(Error::ModeMismatch(
            "goodness gates need a Forward-Forward network".into(),
        )),
        (Model::Pepita(_), GateMode::Goodness) => Err(Error::ModeMismatch(
            "goodness gates need a Forward-Forward network".into(),
        )),
        (m, GateMode::MaxLogit) if m.layer_heads().len() != m.depth() => {
            Err(Error::MissingHeads("per-layer softmax heads"))
        }
        _ => Ok(()),
    }
}

/// Scores and correctness for every layer on a validation set (one full pass per sample).
pub fn collect_all_scores(model: &Model, val: &Dataset, mode: GateMode) -> Result<Vec<LayerScores>> {
    check_mode(model, mode)?;
    if val.is_empty() {
        return Err(Error::Dataset("empty validation set".into()));
    }
    if val.dim() != model.input_dim() {
        return Err(Error::shape("validation data", model.input_dim(), val.dim()));
    }
    let traces: Vec<infer::LayerTrace> = val
        .samples()
        .par_iter()
        .map(|s| infer::layer_trace(model, mode, &s.features))
        .collect::<Result<_>>()?;
    let depth = model.depth();
    (0..depth)
        .map(|l| {
            let scores = traces.iter().map(|t| t.scores[l]).collect();
            let correct = traces
                .iter()
                .zip(val.samples())
                .map(|(t, s)| t.predictions[l] == s.label)
                .collect();
            LayerScores::new(l + 1, mode, scores, correct)
        })
        .collect()
}

/// Scores for a single 1-based layer.
pub fn collect_scores(model: &Model, val: &Dataset, layer: usize, mode: GateMode) -> Result<LayerScores> {
    if layer == 0 || layer > model.depth() {
        return Err(Error::Config(format!("layer {layer} outside 1..={}", model.depth())));
    }
    Ok(collect_all_scores(model, val, mode)?.swap_remove(layer - 1))
}

/// Fits gates for layers `1..N-1` from precomputed scores.
pub fn gates_from_scores(all: &[LayerScores], cfg: &CalibConfig) -> Result<Vec<ConfidenceGate>> {
    cfg.validate()?;
    let gated = all.len().saturating_sub(1);
    all[..gated].iter().map(|s| fit_gate(s, cfg)).collect()
}

/// Installs one gate per layer except the last.
pub fn calibrate_network(model: &mut Model, val: &Dataset, cfg: &CalibConfig, mode: GateMode) -> Result<()> {
    cfg.validate()?;
    let all = collect_all_scores(model, val, mode)?;
    let gates = gates_from_scores(&all, cfg)?;
    model.set_gates(gates);
    Ok(())
}
