//! Analytic MAC costs of full and early-exit inference, and their reconciliation
//! with the counters measured by the inference engine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{InferenceMode, RunReport};

/// Per-layer MAC costs. `ca`: layer activity, `cg`: goodness, `cs`: softmax
/// head over the concatenation of layers `1..=i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCosts {
    pub ca: Vec<u64>,
    pub cg: Vec<u64>,
    pub cs: Vec<u64>,
    pub num_classes: usize,
}

impl LayerCosts {
    pub fn new(ca: Vec<u64>, cg: Vec<u64>, cs: Vec<u64>, num_classes: usize) -> Result<Self> {
        if ca.is_empty() || ca.len() != cg.len() || ca.len() != cs.len() {
            return Err(Error::shape(
                "LayerCosts",
                format!("three non-empty lists of length {}", ca.len()),
                format!("{}/{}/{}", ca.len(), cg.len(), cs.len()),
            ));
        }
        Ok(Self {
            ca,
            cg,
            cs,
            num_classes,
        })
    }

    pub fn depth(&self) -> usize {
        self.ca.len()
    }

    /// Cost of a multi-pass exit after layer `exit` (1-based): `M·Σ_{j≤exit}(Ca_j + Cg_j)`.
    pub fn mp_cost_at_exit(&self, exit: usize) -> u64 {
        self.num_classes as u64 * (0..exit).map(|j| self.ca[j] + self.cg[j]).sum::<u64>()
    }

    /// Cost of a one-pass exit after layer `exit` with per-layer heads: `Σ_{j≤exit}(Ca_j + Cs_j)`.
    pub fn op_cost_at_exit(&self, exit: usize) -> u64 {
        (0..exit).map(|j| self.ca[j] + self.cs[j]).sum()
    }

    /// Full multi-pass cost `C_MP = M·Σ(Ca + Cg)`.
    pub fn c_mp(&self) -> u64 {
        self.mp_cost_at_exit(self.depth())
    }

    /// Full one-pass cost `C_OP = ΣCa + Cs_N` (one head over all layers).
    pub fn c_op(&self) -> u64 {
        self.ca.iter().sum::<u64>() + self.cs[self.depth() - 1]
    }

    /// Upper bound of early-exit one-pass cost, `Σ(Ca + Cs)`.
    pub fn op_worst_case(&self) -> u64 {
        self.op_cost_at_exit(self.depth())
    }
}

pub fn layer_costs_for(arch: &[usize], input_dim: usize, num_classes: usize, with_bias: bool) -> LayerCosts {
    let b = u64::from(with_bias);
    let m = num_classes as u64;
    let mut ca = Vec::with_capacity(arch.len());
    let mut cs = Vec::with_capacity(arch.len());
    let mut fan_in = input_dim as u64;
    let mut width_sum = 0u64;
    for &w in arch {
        let w = w as u64;
        ca.push(fan_in * w + b * w);
        width_sum += w;
        cs.push(m * width_sum + b * m);
        fan_in = w;
    }
    let cg = arch.iter().map(|&w| w as u64).collect();
    LayerCosts {
        ca,
        cg,
        cs,
        num_classes,
    }
}

/// Probability `p[i]` that a sample exits after layer `i + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitDistribution {
    p: Vec<f64>,
}

impl ExitDistribution {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::InvalidDistribution("empty".into()));
        }
        if let Some(v) = p.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidDistribution(format!("entry {v} is not a probability")));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDistribution(format!("entries sum to {sum}")));
        }
        Ok(Self { p })
    }

    /// Empirical distribution of an exit histogram.
    pub fn from_histogram(hist: &[u64]) -> Result<Self> {
        let n: u64 = hist.iter().sum();
        if n == 0 {
            return Err(Error::InvalidDistribution("histogram has no samples".into()));
        }
        Self::new(hist.iter().map(|&c| c as f64 / n as f64).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.p
    }

    /// `1 - Σ_{i<j} p_i` for each layer `j`.
    pub fn survival(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.p.len());
        let mut exited = 0.0;
        for &p in &self.p {
            out.push(1.0 - exited);
            exited += p;
        }
        out
    }
}

fn check_depth(costs: &LayerCosts, p: &ExitDistribution) -> Result<()> {
    if costs.depth() != p.p.len() {
        return Err(Error::InvalidDistribution(format!(
            "{} exit probabilities for {} layers",
            p.p.len(),
            costs.depth()
        )));
    }
    Ok(())
}

/// Expected multi-pass cost with early exit, survivor-weighted form:
/// `M·Σ_j (Ca_j + Cg_j)·(1 − Σ_{i<j} p_i)`.
pub fn expected_cost_mp(costs: &LayerCosts, p: &ExitDistribution) -> Result<f64> {
    check_depth(costs, p)?;
    let m = costs.num_classes as f64;
    Ok(m * p
        .survival()
        .iter()
        .enumerate()
        .map(|(j, s)| (costs.ca[j] + costs.cg[j]) as f64 * s)
        .sum::<f64>())
}

/// Same expectation, per-exit-depth form: `Σ_i p_i · M·Σ_{j≤i}(Ca_j + Cg_j)`.
pub fn expected_cost_mp_by_exit(costs: &LayerCosts, p: &ExitDistribution) -> Result<f64> {
    check_depth(costs, p)?;
    Ok(p.p
        .iter()
        .enumerate()
        .map(|(i, pi)| pi * costs.mp_cost_at_exit(i + 1) as f64)
        .sum())
}

/// Expected one-pass cost with per-layer heads: `Σ_j (Ca_j + Cs_j)·(1 − Σ_{i<j} p_i)`.
pub fn expected_cost_op(costs: &LayerCosts, p: &ExitDistribution) -> Result<f64> {
    check_depth(costs, p)?;
    Ok(p.survival()
        .iter()
        .enumerate()
        .map(|(j, s)| (costs.ca[j] + costs.cs[j]) as f64 * s)
        .sum())
}

pub fn expected_cost_op_by_exit(costs: &LayerCosts, p: &ExitDistribution) -> Result<f64> {
    check_depth(costs, p)?;
    Ok(p.p
        .iter()
        .enumerate()
        .map(|(i, pi)| pi * costs.op_cost_at_exit(i + 1) as f64)
        .sum())
}

/// Expected number of gate evaluations: one per layer reached, except the last.
pub fn expected_gate_evaluations(p: &ExitDistribution) -> f64 {
    let s = p.survival();
    s[..s.len() - 1].iter().sum()
}

/// Total core MACs predicted for an exit histogram, as an exact integer.
pub fn histogram_cost(costs: &LayerCosts, hist: &[u64], mode: InferenceMode) -> Result<u64> {
    if hist.len() != costs.depth() {
        return Err(Error::shape("exit histogram", costs.depth(), hist.len()));
    }
    let per_exit = |i: usize| -> Result<u64> {
        Ok(match mode {
            InferenceMode::LightMp => costs.mp_cost_at_exit(i),
            InferenceMode::LightOp | InferenceMode::LightPt => costs.op_cost_at_exit(i),
            InferenceMode::Mp => costs.c_mp(),
            InferenceMode::Op | InferenceMode::Pt => costs.c_op(),
        })
    };
    hist.iter().enumerate().map(|(i, &c)| Ok(c * per_exit(i + 1)?)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconciliation {
    /// Cost formula evaluated at the empirical exit distribution.
    pub formula: f64,
    pub measured: f64,
    pub residual: f64,
}

/// Compares a run's measured average core MACs with the analytic expectation at
/// its own exit histogram. Totals are compared as integers, so a residual of
/// exactly zero means the counters agree with the formula sample for sample.
pub fn reconcile(report: &RunReport, costs: &LayerCosts, mode: InferenceMode) -> Result<Reconciliation> {
    if report.mode != mode {
        return Err(Error::ModeMismatch(format!(
            "report was produced by {} inference, not {}",
            report.mode, mode
        )));
    }
    let expected_total = histogram_cost(costs, &report.exit_histogram, mode)?;
    let n = report.samples as f64;
    let diff = expected_total.abs_diff(report.total_core_macs);
    Ok(Reconciliation {
        formula: expected_total as f64 / n,
        measured: report.total_core_macs as f64 / n,
        residual: diff as f64 / n,
    })
}
