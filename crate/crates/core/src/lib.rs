//! Forward-only training of fully connected networks (Forward-Forward and
//! PEPITA, with a backprop baseline) and early-exit inference driven by
//! per-layer confidence gates, with exact multiply-accumulate accounting.

pub mod calibrate;
pub mod cost;
pub mod data;
pub mod error;
pub mod infer;
pub mod linalg;
pub mod network;
pub mod persist;
pub mod train;

pub use calibrate::{CalibConfig, CalibMethod, ConfidenceGate, GateMode, LayerScores};
pub use cost::{ExitDistribution, LayerCosts};
pub use data::{Dataset, Sample, SplitTag};
pub use error::{Error, Result};
pub use infer::{GoodnessSeparation, InferenceMode, InferenceResult, RunReport};
pub use linalg::{MacCounter, Matrix, Normalization, Vector};
pub use network::{Algorithm, DenseLayer, FFNetwork, Model, PTNetwork, SoftmaxHead};
pub use train::TrainConfig;
