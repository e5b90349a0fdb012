//! Experiment configuration: defaults < preset < `--config` file < flags.

use std::path::{Path, PathBuf};

use lightff::data::{self, Dataset, SplitTag};
use lightff::network::PEPITA_MAX_DEPTH;
use lightff::{CalibConfig, InferenceMode, Normalization, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::CliError;

/// Environment variable naming the directory with the four MNIST IDX files.
pub const MNIST_DIR_ENV: &str = "LIGHTFF_MNIST_DIR";
pub const DEFAULT_MNIST_DIR: &str = "data/mnist";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlgorithmChoice {
    /// Forward-Forward with multi-pass (goodness) inference.
    FfMp,
    /// Forward-Forward with softmax heads for one-pass inference.
    FfOp,
    Pepita,
    /// Backprop baseline with one-pass heads.
    Bp,
}

impl AlgorithmChoice {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::FfMp => "ff-mp",
            Self::FfOp => "ff-op",
            Self::Pepita => "pepita",
            Self::Bp => "bp",
        }
    }

    pub fn allows(self, mode: InferenceMode) -> bool {
        use InferenceMode::*;
        match self {
            Self::FfMp => matches!(mode, Mp | LightMp),
            // Heads are extra: the network can still run multi-pass.
            Self::FfOp => matches!(mode, Mp | LightMp | Op | LightOp),
            Self::Bp => matches!(mode, Op | LightOp),
            Self::Pepita => matches!(mode, Pt | LightPt),
        }
    }

    pub fn default_mode(self) -> InferenceMode {
        match self {
            Self::FfMp => InferenceMode::LightMp,
            Self::FfOp | Self::Bp => InferenceMode::LightOp,
            Self::Pepita => InferenceMode::LightPt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    MnistDesk,
    PaperDefault,
}

impl std::str::FromStr for Preset {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "mnist-desk" => Ok(Self::MnistDesk),
            "paper-default" => Ok(Self::PaperDefault),
            other => Err(CliError::config(format!(
                "unknown preset `{other}` (expected mnist-desk or paper-default)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Gaussian blobs; split by `fractions` after a seeded shuffle.
    Synthetic {
        n_per_class: usize,
        num_classes: usize,
        dim: usize,
        separation: f32,
        #[serde(default = "default_fractions")]
        fractions: [f64; 3],
    },
    /// Train and validation come from the 60k training file (validation starts
    /// at `val_offset`), test from the 10k test file.
    /// Missing sizes default to the standard 50k / 10k / 10k split.
    Mnist {
        #[serde(default = "default_mnist_dir")]
        dir: PathBuf,
        #[serde(default = "default_mnist_train")]
        train: usize,
        #[serde(default = "default_mnist_held_out")]
        val: usize,
        #[serde(default = "default_mnist_train")]
        val_offset: usize,
        #[serde(default = "default_mnist_held_out")]
        test: usize,
    },
    /// `label,f1,...,fd` rows split by `fractions` after a seeded shuffle.
    Csv {
        path: PathBuf,
        num_classes: usize,
        #[serde(default = "default_fractions")]
        fractions: [f64; 3],
    },
}

pub(crate) fn default_fractions() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

fn default_mnist_train() -> usize {
    50_000
}

fn default_mnist_held_out() -> usize {
    10_000
}

impl DatasetSpec {
    pub fn name(&self) -> String {
        match self {
            Self::Synthetic { .. } => "synthetic".into(),
            Self::Mnist { .. } => "mnist".into(),
            Self::Csv { path, .. } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "csv".into()),
        }
    }

    pub fn load(&self, seed: u64) -> Result<Splits, CliError> {
        let (train, val, test) = match self {
            Self::Synthetic {
                n_per_class,
                num_classes,
                dim,
                separation,
                fractions,
            } => {
                let all = data::make_synthetic(*n_per_class, *num_classes, *dim, *separation, seed)?;
                data::split(&all, (fractions[0], fractions[1], fractions[2]), seed)?
            }
            Self::Mnist {
                dir,
                train,
                val,
                val_offset,
                test,
            } => {
                let full = data::load_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))
                    .map_err(|e| mnist_hint(e, dir))?;
                let t10k = data::load_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))
                    .map_err(|e| mnist_hint(e, dir))?;
                if *train > *val_offset {
                    return Err(CliError::config(format!(
                        "mnist train size {train} overlaps the validation range starting at {val_offset}"
                    )));
                }
                (
                    full.slice(0, *train, SplitTag::Train)?,
                    full.slice(*val_offset, val_offset + val, SplitTag::Validation)?,
                    t10k.slice(0, *test, SplitTag::Test)?,
                )
            }
            Self::Csv {
                path,
                num_classes,
                fractions,
            } => {
                let all = data::load_csv(path, *num_classes)?;
                data::split(&all, (fractions[0], fractions[1], fractions[2]), seed)?
            }
        };
        Ok(Splits {
            name: self.name(),
            train,
            val,
            test,
        })
    }

    pub fn mnist(dir: PathBuf, train: usize, val: usize, test: usize) -> Self {
        Self::Mnist {
            dir,
            train,
            val,
            val_offset: default_mnist_train(),
            test,
        }
    }
}

fn mnist_hint(e: lightff::Error, dir: &Path) -> CliError {
    let mut err = CliError::from(e);
    err.message.push_str(&format!(
        " (expected MNIST IDX files in {}; see scripts/fetch_mnist.sh)",
        dir.display()
    ));
    err
}

pub fn default_mnist_dir() -> PathBuf {
    std::env::var_os(MNIST_DIR_ENV).map_or_else(|| PathBuf::from(DEFAULT_MNIST_DIR), PathBuf::from)
}

pub struct Splits {
    pub name: String,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Optimizer settings for softmax heads and PEPITA readouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub momentum: f32,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 100,
            epochs: 10,
            momentum: 0.9,
        }
    }
}

impl HeadConfig {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            momentum: self.momentum,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub algorithm: AlgorithmChoice,
    pub arch: Vec<usize>,
    pub train: TrainConfig,
    pub heads: HeadConfig,
    /// Train one head per layer (needed by light-op); otherwise only the final head.
    pub per_layer_heads: bool,
    pub calibration: CalibConfig,
    /// Inference mode used by eval and sweep; defaults to the algorithm's light mode.
    pub mode: Option<InferenceMode>,
    pub out: PathBuf,
    /// Seeds data generation and splitting, initialization and batching.
    pub seed: u64,
    /// Evaluation worker threads; 0 uses all available cores.
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::Synthetic {
                n_per_class: 500,
                num_classes: 2,
                dim: 20,
                separation: 10.0,
                fractions: default_fractions(),
            },
            algorithm: AlgorithmChoice::FfMp,
            arch: vec![32, 32],
            train: TrainConfig {
                epochs: 20,
                learning_rate: 0.01,
                momentum: 0.9,
                ..TrainConfig::default()
            },
            heads: HeadConfig::default(),
            per_layer_heads: true,
            calibration: CalibConfig::default(),
            mode: None,
            out: PathBuf::from("runs/model"),
            seed: 0,
            threads: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn mode(&self) -> InferenceMode {
        self.mode.unwrap_or_else(|| {
            if self.algorithm == AlgorithmChoice::FfOp && !self.per_layer_heads {
                InferenceMode::Op
            } else {
                self.algorithm.default_mode()
            }
        })
    }

    pub fn head_train_config(&self) -> TrainConfig {
        self.heads.train_config(self.seed)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.arch.is_empty() || self.arch.contains(&0) {
            return Err(CliError::config("arch must list at least one positive layer width"));
        }
        if self.algorithm == AlgorithmChoice::Pepita && self.arch.len() > PEPITA_MAX_DEPTH {
            return Err(CliError::config(format!(
                "pepita supports at most {PEPITA_MAX_DEPTH} hidden layers, arch has {}",
                self.arch.len()
            )));
        }
        if self.algorithm == AlgorithmChoice::Bp && self.train.normalize.is_on() {
            return Err(CliError::config(
                "the backprop baseline trains without normalization; set train.normalize to \"off\"",
            ));
        }
        let mode = self.mode();
        if !self.algorithm.allows(mode) {
            return Err(CliError::config(format!(
                "mode {mode} is not available for algorithm {}",
                self.algorithm.as_str()
            )));
        }
        if mode == InferenceMode::LightOp && !self.per_layer_heads {
            return Err(CliError::config("light-op needs per_layer_heads = true"));
        }
        self.train.validate()?;
        self.head_train_config().validate()?;
        self.calibration.validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn from_json(value: Value) -> Result<Self, CliError> {
        let mut cfg: Self =
            serde_json::from_value(value).map_err(|e| CliError::config(format!("invalid configuration: {e}")))?;
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }
}

/// Preset values as a JSON overlay. PEPITA gets the 3-layer architecture.
pub fn preset_overlay(preset: Preset, algorithm: AlgorithmChoice) -> Value {
    let pepita = algorithm == AlgorithmChoice::Pepita;
    let bp = algorithm == AlgorithmChoice::Bp;
    let dir = default_mnist_dir();
    match preset {
        Preset::MnistDesk => {
            let arch = if pepita { vec![500; 3] } else { vec![500; 4] };
            let normalize = if bp {
                Normalization::Off
            } else {
                Normalization::Rms(0.4)
            };
            json!({
                "dataset": DatasetSpec::mnist(dir, 10_000, 5_000, 5_000),
                "arch": arch,
                "seed": 7,
                "train": {
                    "epochs": 20,
                    "batch_size": 100,
                    "learning_rate": 0.003,
                    "momentum": 0.95,
                    "normalize": normalize,
                },
                "heads": { "epochs": 10, "batch_size": 100, "learning_rate": 0.01, "momentum": 0.9 },
            })
        }
        Preset::PaperDefault => {
            let arch = if pepita { vec![1024; 3] } else { vec![2000; 4] };
            let normalize = if bp { Normalization::Off } else { Normalization::Unit };
            json!({
                "dataset": DatasetSpec::mnist(dir, 50_000, 10_000, 10_000),
                "arch": arch,
                "train": {
                    "epochs": 100,
                    "batch_size": 100,
                    "learning_rate": 0.001,
                    "momentum": if pepita { 0.9 } else { 0.0 },
                    "normalize": normalize,
                },
            })
        }
    }
}

/// Recursive JSON merge. Objects merge key by key, except tagged objects whose
/// `kind` changes, which are replaced whole; anything else is replaced.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            let kind_changes = matches!((b.get("kind"), o.get("kind")), (Some(x), Some(y)) if x != y);
            if kind_changes {
                *b = o;
                return;
            }
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets `path` (dot-separated) in `target`, creating objects along the way.
pub fn set_path(target: &mut Value, path: &str, value: Value) -> Result<(), CliError> {
    let mut cur = target;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(format!("invalid key `{path}`")));
    }
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            *cur = json!({});
        }
        let obj = cur.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        cur = obj.entry((*part).to_string()).or_insert_with(|| json!({}));
    }
    Ok(())
}

/// Parses `key=value`; the value is JSON when it parses as such, else a string.
pub fn parse_assignment(s: &str) -> Result<(String, Value), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("expected key=value, got `{s}`")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

pub fn read_config_file(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("config {} is not valid JSON: {e}", path.display())))
}

/// Resolves `base < preset < file < flags`. The preset is chosen after the
/// algorithm is known so PEPITA gets its own architecture.
pub fn resolve(
    base: Value,
    preset: Option<Preset>,
    file: Option<Value>,
    flags: Value,
) -> Result<ExperimentConfig, CliError> {
    let mut probe = base.clone();
    if let Some(f) = &file {
        merge(&mut probe, f.clone());
    }
    merge(&mut probe, flags.clone());
    let algorithm: AlgorithmChoice = probe
        .get("algorithm")
        .map(|a| serde_json::from_value(a.clone()))
        .transpose()
        .map_err(|e| CliError::config(format!("invalid algorithm: {e}")))?
        .unwrap_or(AlgorithmChoice::FfMp);

    let mut merged = base;
    if let Some(p) = preset {
        merge(&mut merged, preset_overlay(p, algorithm));
    }
    if let Some(f) = file {
        merge(&mut merged, f);
    }
    merge(&mut merged, flags);
    let cfg = ExperimentConfig::from_json(merged)?;
    cfg.validate()?;
    Ok(cfg)
}
