//! Network containers shared by the trainers, the calibrator and the inference engine.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::calibrate::{ConfidenceGate, GateMode};
use crate::data::LabelMagnitude;
use crate::error::{Error, Result};
use crate::linalg::{self, MacCounter, Matrix, Normalization, Vector};

/// Fully connected ReLU layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f32>,
}

impl DenseLayer {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero bias.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f32).sqrt();
        let weights = Matrix::from_fn(out_dim, in_dim, |_, _| rng.random_range(-bound..bound));
        Self {
            weights,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weights: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.is_finite() && self.bias.iter().all(|v| v.is_finite())
    }
}

/// `a = relu(W x + b)`, where `x` is first normalized by `norm`.
pub fn forward_layer(
    layer: &DenseLayer,
    input: &[f32],
    norm: Normalization,
    counter: &mut MacCounter,
) -> Result<Vector> {
    let mut y = if norm.is_on() {
        let mut x = input.to_vec();
        norm.apply(&mut x);
        linalg::matvec(&layer.weights, &x, counter)?
    } else {
        linalg::matvec(&layer.weights, input, counter)?
    };
    linalg::add_bias(&mut y, &layer.bias, counter)?;
    linalg::relu_in_place(&mut y);
    Ok(y)
}

/// Linear softmax classifier over a concatenation of hidden activities.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxHead {
    pub weights: Matrix,
    pub bias: Vec<f32>,
}

impl SoftmaxHead {
    pub fn zeros(num_classes: usize, input_width: usize) -> Self {
        Self {
            weights: Matrix::zeros(num_classes, input_width),
            bias: vec![0.0; num_classes],
        }
    }

    pub fn input_width(&self) -> usize {
        self.weights.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn logits(&self, h: &[f32], counter: &mut MacCounter) -> Result<Vector> {
        let mut z = linalg::matvec(&self.weights, h, counter)?;
        linalg::add_bias(&mut z, &self.bias, counter)?;
        Ok(z)
    }

    pub fn is_finite(&self) -> bool {
        self.weights.is_finite() && self.bias.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Ff,
    Pepita,
    Bp,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ff => "ff",
            Self::Pepita => "pepita",
            Self::Bp => "bp",
        }
    }
}

/// Layered network trained with Forward-Forward (or the backprop baseline).
#[derive(Debug, Clone, PartialEq)]
pub struct FFNetwork {
    /// `Ff` networks see label-embedded inputs; `Bp` networks see raw inputs.
    pub algorithm: Algorithm,
    pub layers: Vec<DenseLayer>,
    /// Either empty or one head per layer; `heads[l]` reads layers `0..=l`.
    pub heads: Vec<SoftmaxHead>,
    /// Head reading all layers, used by one-pass inference.
    pub final_head: Option<SoftmaxHead>,
    /// Either empty or one gate per layer except the last.
    pub gates: Vec<ConfidenceGate>,
    pub num_classes: usize,
    /// First (0-based) layer whose goodness is accumulated for label selection.
    pub goodness_from_layer: usize,
    /// Length normalization of the input of every layer after the first.
    pub normalize: Normalization,
    pub label_magnitude: LabelMagnitude,
}

impl FFNetwork {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(DenseLayer::out_dim).collect()
    }

    pub fn validate(&self) -> Result<()> {
        validate_stack(&self.layers, &self.heads, self.final_head.as_ref(), self.num_classes)?;
        if self.goodness_from_layer >= self.depth() {
            return Err(Error::Config(format!(
                "goodness_from_layer {} must be below depth {}",
                self.goodness_from_layer,
                self.depth()
            )));
        }
        if self.algorithm == Algorithm::Ff && self.input_dim() < self.num_classes {
            return Err(Error::Config("input dimension smaller than the label code".into()));
        }
        validate_gates(&self.gates, self.depth())
    }

    /// Input as seen by one-pass inference (neutral label code for FF, raw for BP).
    pub fn one_pass_input(&self, x: &[f32]) -> Vector {
        let mut v = x.to_vec();
        if self.algorithm == Algorithm::Ff {
            crate::data::write_neutral(&mut v, self.num_classes);
        }
        v.into()
    }

    pub fn gate_mode(&self) -> Option<GateMode> {
        self.gates.first().map(|g| g.mode)
    }
}

/// Network trained with PEPITA.
#[derive(Debug, Clone, PartialEq)]
pub struct PTNetwork {
    pub layers: Vec<DenseLayer>,
    /// Either empty or one readout per layer; `readouts[l]` reads layers `0..=l`
    /// and the last one is a copy of `output`.
    pub readouts: Vec<SoftmaxHead>,
    /// Output layer trained by PEPITA, reading all hidden layers.
    pub output: SoftmaxHead,
    /// Fixed input-error projection, `input_dim × M`.
    pub feedback: Matrix,
    pub gates: Vec<ConfidenceGate>,
    pub num_classes: usize,
    pub normalize: Normalization,
}

pub const PEPITA_MAX_DEPTH: usize = 3;

impl PTNetwork {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(DenseLayer::out_dim).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth() > PEPITA_MAX_DEPTH {
            return Err(Error::UnsupportedDepth(self.depth()));
        }
        validate_stack(&self.layers, &self.readouts, Some(&self.output), self.num_classes)?;
        if (self.feedback.rows(), self.feedback.cols()) != (self.input_dim(), self.num_classes) {
            return Err(Error::shape(
                "PTNetwork feedback",
                format!("{}x{}", self.input_dim(), self.num_classes),
                format!("{}x{}", self.feedback.rows(), self.feedback.cols()),
            ));
        }
        validate_gates(&self.gates, self.depth())
    }
}

fn validate_stack(
    layers: &[DenseLayer],
    heads: &[SoftmaxHead],
    final_head: Option<&SoftmaxHead>,
    num_classes: usize,
) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::Config("network needs at least one layer".into()));
    }
    for (i, pair) in layers.windows(2).enumerate() {
        if pair[0].out_dim() != pair[1].in_dim() {
            return Err(Error::shape(
                "layer chain",
                format!("layer {} input {}", i + 1, pair[0].out_dim()),
                pair[1].in_dim(),
            ));
        }
    }
    if !heads.is_empty() && heads.len() != layers.len() {
        return Err(Error::shape("heads", layers.len(), heads.len()));
    }
    let mut width = 0;
    for (l, (layer, head)) in layers
        .iter()
        .zip(heads.iter().map(Some).chain(std::iter::repeat(None)))
        .enumerate()
    {
        width += layer.out_dim();
        if let Some(h) = head {
            if h.input_width() != width || h.num_classes() != num_classes {
                return Err(Error::shape(
                    "head",
                    format!("head {l}: {num_classes}x{width}"),
                    format!("{}x{}", h.num_classes(), h.input_width()),
                ));
            }
        }
    }
    if let Some(h) = final_head {
        if h.input_width() != width || h.num_classes() != num_classes {
            return Err(Error::shape(
                "final head",
                format!("{num_classes}x{width}"),
                format!("{}x{}", h.num_classes(), h.input_width()),
            ));
        }
    }
    Ok(())
}

fn validate_gates(gates: &[ConfidenceGate], depth: usize) -> Result<()> {
    if gates.is_empty() {
        return Ok(());
    }
    if gates.len() != depth - 1 {
        return Err(Error::shape("gates", depth - 1, gates.len()));
    }
    if gates.windows(2).any(|w| w[0].mode != w[1].mode) {
        return Err(Error::Config("gates mix confidence modes".into()));
    }
    Ok(())
}

/// Any trained artifact the engine can calibrate, evaluate, or persist.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Forward(FFNetwork),
    Pepita(PTNetwork),
}

impl Model {
    pub fn algorithm(&self) -> Algorithm {
        match self {
            Self::Forward(n) => n.algorithm,
            Self::Pepita(_) => Algorithm::Pepita,
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Self::Forward(n) => n.depth(),
            Self::Pepita(n) => n.depth(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Self::Forward(n) => n.num_classes,
            Self::Pepita(n) => n.num_classes,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Self::Forward(n) => n.input_dim(),
            Self::Pepita(n) => n.input_dim(),
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        match self {
            Self::Forward(n) => n.widths(),
            Self::Pepita(n) => n.widths(),
        }
    }

    pub fn layers(&self) -> &[DenseLayer] {
        match self {
            Self::Forward(n) => &n.layers,
            Self::Pepita(n) => &n.layers,
        }
    }

    pub fn gates(&self) -> &[ConfidenceGate] {
        match self {
            Self::Forward(n) => &n.gates,
            Self::Pepita(n) => &n.gates,
        }
    }

    pub fn set_gates(&mut self, gates: Vec<ConfidenceGate>) {
        match self {
            Self::Forward(n) => n.gates = gates,
            Self::Pepita(n) => n.gates = gates,
        }
    }

    /// Per-layer heads used by one-pass early exit, if trained.
    pub fn layer_heads(&self) -> &[SoftmaxHead] {
        match self {
            Self::Forward(n) => &n.heads,
            Self::Pepita(n) => &n.readouts,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Forward(n) => n.validate(),
            Self::Pepita(n) => n.validate(),
        }
    }
}
