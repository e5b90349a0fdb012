//! Inference engines with MAC accounting and optional early exit.
//!
//! Multi-pass inference runs the `M` label-embedded copies of a sample in
//! lock-step, one layer at a time, so an early exit skips the remaining layers
//! for every label at once. One-pass inference runs a single neutral (FF) or
//! raw (PEPITA, backprop) input and reads softmax heads over the concatenated
//! activities.

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{ConfidenceGate, GateMode};
use crate::data::{write_label, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{self, MacCounter, Matrix, Normalization};
use crate::network::{Algorithm, DenseLayer, FFNetwork, Model, PTNetwork, SoftmaxHead};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub label: usize,
    /// 1-based index of the layer whose prediction was returned.
    pub exit_layer: usize,
    pub core_macs: u64,
    pub overhead_macs: u64,
    /// Confidence score observed after each evaluated layer (empty when no layer has a score).
    pub per_layer_scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceMode {
    Mp,
    LightMp,
    Op,
    LightOp,
    Pt,
    LightPt,
}

impl InferenceMode {
    pub const ALL: [Self; 6] = [
        Self::Mp,
        Self::LightMp,
        Self::Op,
        Self::LightOp,
        Self::Pt,
        Self::LightPt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mp => "mp",
            Self::LightMp => "light-mp",
            Self::Op => "op",
            Self::LightOp => "light-op",
            Self::Pt => "pt",
            Self::LightPt => "light-pt",
        }
    }

    pub fn is_light(self) -> bool {
        matches!(self, Self::LightMp | Self::LightOp | Self::LightPt)
    }

    /// The same engine without early exit.
    pub fn full(self) -> Self {
        match self {
            Self::LightMp => Self::Mp,
            Self::LightOp => Self::Op,
            Self::LightPt => Self::Pt,
            m => m,
        }
    }

    /// The same engine with early exit.
    pub fn light(self) -> Self {
        match self {
            Self::Mp => Self::LightMp,
            Self::Op => Self::LightOp,
            Self::Pt => Self::LightPt,
            m => m,
        }
    }

    pub fn gate_mode(self) -> GateMode {
        match self {
            Self::Mp | Self::LightMp => GateMode::Goodness,
            _ => GateMode::MaxLogit,
        }
    }
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown inference mode {s:?}")))
    }
}

/// Per-layer predictions and scores of a full (ungated) pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub predictions: Vec<usize>,
    pub scores: Vec<f64>,
}

struct Pass {
    label: usize,
    exit_layer: usize,
    trace: LayerTrace,
}

fn check_input(expected: usize, x: &[f32]) -> Result<()> {
    if x.len() != expected {
        return Err(Error::shape("inference input", expected, x.len()));
    }
    Ok(())
}

fn argmax_f64(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in v.iter().enumerate().skip(1) {
        if s > v[best] {
            best = i;
        }
    }
    best
}

/// Lock-step multi-pass engine. With `gates`, stops after layer `l < N` once
/// the gate on the best accumulated goodness fires.
fn multi_pass(net: &FFNetwork, x: &[f32], gates: Option<&[ConfidenceGate]>, counter: &mut MacCounter) -> Result<Pass> {
    check_input(net.input_dim(), x)?;
    let m = net.num_classes;
    let n = net.depth();
    let magnitude = net.label_magnitude.resolve(x);
    let mut rows = Matrix::from_fn(m, x.len(), |_, j| x[j]);
    for c in 0..m {
        write_label(rows.row_mut(c), c, m, magnitude);
    }
    let mut acc = vec![0.0f64; m];
    let mut trace = LayerTrace {
        predictions: Vec::with_capacity(n),
        scores: Vec::with_capacity(n),
    };
    for (l, layer) in net.layers.iter().enumerate() {
        let norm = net.normalize.for_layer(l);
        if norm.is_on() {
            for row in rows.row_iter_mut() {
                norm.apply(row);
            }
        }
        let mut act = linalg::matmul_nt(&rows, &layer.weights, counter)?;
        for (c, row) in act.row_iter_mut().enumerate() {
            linalg::add_bias(row, &layer.bias, counter)?;
            linalg::relu_in_place(row);
            let g = linalg::goodness(row, counter);
            if l >= net.goodness_from_layer {
                acc[c] += f64::from(g);
            }
        }
        let best = argmax_f64(&acc);
        trace.predictions.push(best);
        trace.scores.push(acc[best]);
        if let Some(gates) = gates {
            if l + 1 < n {
                counter.add_overhead(1);
                if gates[l].is_confident(acc[best]) {
                    return Ok(Pass {
                        label: best,
                        exit_layer: l + 1,
                        trace,
                    });
                }
            }
        }
        rows = act;
    }
    let label = *trace.predictions.last().expect("at least one layer");
    Ok(Pass {
        label,
        exit_layer: n,
        trace,
    })
}

/// One-pass engine. `heads` is either one head per layer (`per_layer`) or a
/// single head over all layers; gates apply only in the per-layer case.
fn one_pass(
    layers: &[DenseLayer],
    normalize: Normalization,
    heads: &[SoftmaxHead],
    per_layer: bool,
    input: &[f32],
    gates: Option<&[ConfidenceGate]>,
    counter: &mut MacCounter,
) -> Result<Pass> {
    let n = layers.len();
    let total: usize = layers.iter().map(DenseLayer::out_dim).sum();
    let mut concat: Vec<f32> = Vec::with_capacity(total);
    let mut trace = LayerTrace {
        predictions: Vec::with_capacity(n),
        scores: Vec::with_capacity(n),
    };
    let mut cur = input.to_vec();
    for (l, layer) in layers.iter().enumerate() {
        let a = crate::network::forward_layer(layer, &cur, normalize.for_layer(l), counter)?;
        concat.extend_from_slice(&a);
        if per_layer {
            let z = heads[l].logits(&concat, counter)?;
            let pred = linalg::argmax(&z);
            trace.predictions.push(pred);
            trace.scores.push(f64::from(z[pred]));
            if let Some(gates) = gates {
                if l + 1 < n {
                    counter.add_overhead(1);
                    if gates[l].is_confident(f64::from(z[pred])) {
                        return Ok(Pass {
                            label: pred,
                            exit_layer: l + 1,
                            trace,
                        });
                    }
                }
            }
        }
        cur = a.into_vec();
    }
    if !per_layer {
        let z = heads[0].logits(&concat, counter)?;
        let pred = linalg::argmax(&z);
        trace.predictions.push(pred);
        trace.scores.push(f64::from(z[pred]));
    }
    let label = *trace.predictions.last().expect("at least one prediction");
    Ok(Pass {
        label,
        exit_layer: n,
        trace,
    })
}

fn finish(pass: Pass, counter: &MacCounter) -> InferenceResult {
    InferenceResult {
        label: pass.label,
        exit_layer: pass.exit_layer,
        core_macs: counter.core_macs(),
        overhead_macs: counter.overhead_macs(),
        per_layer_scores: pass.trace.scores,
    }
}

fn require_gates(gates: &[ConfidenceGate], depth: usize, mode: GateMode) -> Result<&[ConfidenceGate]> {
    if depth > 1 && gates.len() != depth - 1 {
        return Err(Error::MissingGates("calibrated confidence gates"));
    }
    if let Some(g) = gates.iter().find(|g| g.mode != mode) {
        return Err(Error::ModeMismatch(format!(
            "gate for layer {} scores {:?}, engine needs {:?}",
            g.layer, g.mode, mode
        )));
    }
    Ok(gates)
}

fn require_ff(net: &FFNetwork, what: &str) -> Result<()> {
    if net.algorithm != Algorithm::Ff {
        return Err(Error::ModeMismatch(format!("{what} needs a Forward-Forward network")));
    }
    Ok(())
}

pub fn infer_mp(net: &FFNetwork, x: &[f32], counter: &mut MacCounter) -> Result<InferenceResult> {
    require_ff(net, "multi-pass inference")?;
    let pass = multi_pass(net, x, None, counter)?;
    Ok(finish(pass, counter))
}

pub fn infer_light_mp(net: &FFNetwork, x: &[f32], counter: &mut MacCounter) -> Result<InferenceResult> {
    require_ff(net, "multi-pass inference")?;
    let gates = require_gates(&net.gates, net.depth(), GateMode::Goodness)?;
    let pass = multi_pass(net, x, Some(gates), counter)?;
    Ok(finish(pass, counter))
}

pub fn infer_op(net: &FFNetwork, x: &[f32], counter: &mut MacCounter) -> Result<InferenceResult> {
    check_input(net.input_dim(), x)?;
    let head = net
        .final_head
        .as_ref()
        .ok_or(Error::MissingHeads("final softmax head"))?;
    let input = net.one_pass_input(x);
    let pass = one_pass(
        &net.layers,
        net.normalize,
        std::slice::from_ref(head),
        false,
        &input,
        None,
        counter,
    )?;
    Ok(finish(pass, counter))
}

pub fn infer_light_op(net: &FFNetwork, x: &[f32], counter: &mut MacCounter) -> Result<InferenceResult> {
    check_input(net.input_dim(), x)?;
    if net.heads.len() != net.depth() {
        return Err(Error::MissingHeads("per-layer softmax heads"));
    }
    let gates = require_gates(&net.gates, net.depth(), GateMode::MaxLogit)?;
    let input = net.one_pass_input(x);
    let pass = one_pass(
        &net.layers,
        net.normalize,
        &net.heads,
        true,
        &input,
        Some(gates),
        counter,
    )?;
    Ok(finish(pass, counter))
}

pub fn infer_pt(net: &PTNetwork, x: &[f32], counter: &mut MacCounter) -> Result<InferenceResult> {
    check_input(net.input_dim(), x)?;
    let pass = one_pass(
        &net.layers,
        net.normalize,
        std::slice::from_ref(&net.output),
        false,
        x,
        None,
        counter,
    )?;
    Ok(finish(pass, counter))
}

pub fn infer_light_pt(net: &PTNetwork, x: &[f32], counter: &mut MacCounter) -> Result<InferenceResult> {
    check_input(net.input_dim(), x)?;
    if net.readouts.len() != net.depth() {
        return Err(Error::MissingHeads("per-layer PEPITA readouts"));
    }
    let gates = require_gates(&net.gates, net.depth(), GateMode::MaxLogit)?;
    let pass = one_pass(&net.layers, net.normalize, &net.readouts, true, x, Some(gates), counter)?;
    Ok(finish(pass, counter))
}

/// Dispatches `mode` on `model`, using a fresh bias-counting MAC counter.
pub fn infer(model: &Model, mode: InferenceMode, x: &[f32]) -> Result<InferenceResult> {
    infer_with(model, mode, x, &mut MacCounter::new())
}

pub fn infer_with(model: &Model, mode: InferenceMode, x: &[f32], counter: &mut MacCounter) -> Result<InferenceResult> {
    match (model, mode) {
        (Model::Forward(n), InferenceMode::Mp) => infer_mp(n, x, counter),
        (Model::Forward(n), InferenceMode::LightMp) => infer_light_mp(n, x, counter),
        (Model::Forward(n), InferenceMode::Op) => infer_op(n, x, counter),
        (Model::Forward(n), InferenceMode::LightOp) => infer_light_op(n, x, counter),
        (Model::Pepita(n), InferenceMode::Pt) => infer_pt(n, x, counter),
        (Model::Pepita(n), InferenceMode::LightPt) => infer_light_pt(n, x, counter),
        (m, mode) => Err(Error::ModeMismatch(format!(
            "{} inference is not available for a {} network",
            mode,
            m.algorithm().as_str()
        ))),
    }
}

/// Full ungated pass recording every layer's prediction and confidence score.
pub fn layer_trace(model: &Model, mode: GateMode, x: &[f32]) -> Result<LayerTrace> {
    let mut counter = MacCounter::new();
    let pass = match (model, mode) {
        (Model::Forward(n), GateMode::Goodness) => {
            require_ff(n, "goodness scores")?;
            multi_pass(n, x, None, &mut counter)?
        }
        (Model::Forward(n), GateMode::MaxLogit) => {
            check_input(n.input_dim(), x)?;
            if n.heads.len() != n.depth() {
                return Err(Error::MissingHeads("per-layer softmax heads"));
            }
            one_pass(
                &n.layers,
                n.normalize,
                &n.heads,
                true,
                &n.one_pass_input(x),
                None,
                &mut counter,
            )?
        }
        (Model::Pepita(n), GateMode::MaxLogit) => {
            check_input(n.input_dim(), x)?;
            if n.readouts.len() != n.depth() {
                return Err(Error::MissingHeads("per-layer PEPITA readouts"));
            }
            one_pass(&n.layers, n.normalize, &n.readouts, true, x, None, &mut counter)?
        }
        (Model::Pepita(_), GateMode::Goodness) => {
            return Err(Error::ModeMismatch(
                "goodness scores need a Forward-Forward network".into(),
            ))
        }
    };
    Ok(pass.trace)
}

/// Goodness accumulated over layers `goodness_from_layer..=l` for `x` overlaid
/// with each of `labels`; indexed `[l][row]`.
pub fn accumulated_goodness(net: &FFNetwork, x: &[f32], labels: &[usize]) -> Result<Vec<Vec<f64>>> {
    check_input(net.input_dim(), x)?;
    let m = net.num_classes;
    if let Some(&bad) = labels.iter().find(|&&c| c >= m) {
        return Err(Error::Dataset(format!("label {bad} out of range for {m} classes")));
    }
    let magnitude = net.label_magnitude.resolve(x);
    let mut rows = Matrix::from_fn(labels.len(), x.len(), |_, j| x[j]);
    for (r, &c) in labels.iter().enumerate() {
        write_label(rows.row_mut(r), c, m, magnitude);
    }
    let mut counter = MacCounter::new();
    let mut acc = vec![0.0f64; labels.len()];
    let mut out = Vec::with_capacity(net.depth());
    for (l, layer) in net.layers.iter().enumerate() {
        let norm = net.normalize.for_layer(l);
        for row in rows.row_iter_mut() {
            norm.apply(row);
        }
        let mut act = linalg::matmul_nt(&rows, &layer.weights, &mut counter)?;
        for (r, row) in act.row_iter_mut().enumerate() {
            linalg::add_bias(row, &layer.bias, &mut counter)?;
            linalg::relu_in_place(row);
            if l >= net.goodness_from_layer {
                acc[r] += f64::from(linalg::goodness(row, &mut counter));
            }
        }
        out.push(acc.clone());
        rows = act;
    }
    Ok(out)
}

/// Per-layer mean accumulated goodness of positive and negative overlays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoodnessSeparation {
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

impl GoodnessSeparation {
    /// Whether positives score strictly higher than negatives at every layer.
    pub fn is_separated(&self) -> bool {
        self.positive.iter().zip(&self.negative).all(|(p, n)| p > n)
    }
}

/// Positives carry the true label, negatives one wrong label drawn uniformly
/// with `seed`.
pub fn goodness_separation(net: &FFNetwork, data: &Dataset, seed: u64) -> Result<GoodnessSeparation> {
    if data.is_empty() {
        return Err(Error::Dataset("goodness separation needs at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wrong: Vec<usize> = data
        .samples()
        .iter()
        .map(|s| crate::data::wrong_label(s.label, net.num_classes, &mut rng))
        .collect();
    let per_sample: Vec<Vec<Vec<f64>>> = data
        .samples()
        .par_iter()
        .zip(&wrong)
        .map(|(s, &w)| accumulated_goodness(net, &s.features, &[s.label, w]))
        .collect::<Result<_>>()?;
    let n = net.depth();
    let count = data.len() as f64;
    let mean = |row: usize, l: usize| per_sample.iter().map(|g| g[l][row]).sum::<f64>() / count;
    Ok(GoodnessSeparation {
        positive: (0..n).map(|l| mean(0, l)).collect(),
        negative: (0..n).map(|l| mean(1, l)).collect(),
    })
}

/// Aggregate of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset: String,
    pub algorithm: String,
    pub mode: InferenceMode,
    pub layers: usize,
    pub samples: usize,
    pub errors: usize,
    pub error: f64,
    pub mean_layers: f64,
    pub avg_core_macs: f64,
    pub avg_overhead_macs: f64,
    pub total_core_macs: u64,
    pub total_overhead_macs: u64,
    /// `exit_histogram[l]` counts samples that exited after layer `l + 1`.
    pub exit_histogram: Vec<u64>,
    pub counts_bias: bool,
    pub wall_time_s: f64,
    pub wall_ms_per_sample: f64,
}

pub const CSV_HEADER: &str = "dataset,algo,layers,error,mean_layers,avg_core_macs,avg_overhead_macs,wall_ms";

impl RunReport {
    /// Name used in tables: backprop one-pass runs are labelled `bp` / `light-bp`.
    pub fn algo_label(&self) -> String {
        match (self.algorithm.as_str(), self.mode) {
            ("bp", InferenceMode::Op) => "bp".into(),
            ("bp", InferenceMode::LightOp) => "light-bp".into(),
            (_, mode) => mode.as_str().into(),
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.3},{:.3},{:.6}",
            self.dataset,
            self.algo_label(),
            self.layers,
            self.error,
            self.mean_layers,
            self.avg_core_macs,
            self.avg_overhead_macs,
            self.wall_ms_per_sample
        )
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    /// Appends a CSV row, writing the header first if the file is new or empty.
    pub fn append_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "{CSV_HEADER}")?;
        }
        writeln!(f, "{}", self.csv_row())?;
        Ok(())
    }
}

/// Runs `mode` over every test sample. `threads == 0` uses rayon's global pool.
pub fn evaluate(model: &Model, test: &Dataset, mode: InferenceMode, threads: usize) -> Result<RunReport> {
    evaluate_with(model, test, mode, threads, true)
}

pub fn evaluate_with(
    model: &Model,
    test: &Dataset,
    mode: InferenceMode,
    threads: usize,
    count_bias: bool,
) -> Result<RunReport> {
    if test.is_empty() {
        return Err(Error::Dataset("empty test set".into()));
    }
    if test.dim() != model.input_dim() {
        return Err(Error::shape("test data", model.input_dim(), test.dim()));
    }
    let start = Instant::now();
    let run = || -> Result<Vec<InferenceResult>> {
        test.samples()
            .par_iter()
            .map(|s| {
                let mut counter = if count_bias {
                    MacCounter::new()
                } else {
                    MacCounter::without_bias()
                };
                infer_with(model, mode, &s.features, &mut counter)
            })
            .collect()
    };
    let results = if threads == 0 {
        run()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run)?
    };
    let wall = start.elapsed().as_secs_f64();

    let n = results.len();
    let depth = model.depth();
    let mut hist = vec![0u64; depth];
    let mut errors = 0;
    let (mut core, mut overhead) = (0u64, 0u64);
    for (r, s) in results.iter().zip(test.samples()) {
        hist[r.exit_layer - 1] += 1;
        errors += usize::from(r.label != s.label);
        core += r.core_macs;
        overhead += r.overhead_macs;
    }
    let layer_sum: u64 = hist.iter().enumerate().map(|(l, &c)| (l as u64 + 1) * c).sum();
    Ok(RunReport {
        dataset: "unnamed".into(),
        algorithm: model.algorithm().as_str().into(),
        mode,
        layers: depth,
        samples: n,
        errors,
        error: errors as f64 / n as f64,
        mean_layers: layer_sum as f64 / n as f64,
        avg_core_macs: core as f64 / n as f64,
        avg_overhead_macs: overhead as f64 / n as f64,
        total_core_macs: core,
        total_overhead_macs: overhead,
        exit_histogram: hist,
        counts_bias: count_bias,
        wall_time_s: wall,
        wall_ms_per_sample: wall * 1e3 / n as f64,
    })
}
