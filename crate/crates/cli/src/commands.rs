use std::io::Write;
use std::path::{Path, PathBuf};

use lightff::calibrate::{self, CalibMethod};
use lightff::infer;
use lightff::persist::{self, ModelMeta};
use lightff::train::{self, EpochStats};
use lightff::{CalibConfig, InferenceMode, Model, RunReport};
use serde_json::Value;

use crate::config::{AlgorithmChoice, DatasetSpec, ExperimentConfig, Splits};
use crate::CliError;

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_HEADER: &str = "k,error,mean_layers,avg_core_macs,avg_overhead_macs";
pub const DEFAULT_SWEEP_K: [f64; 7] = [-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0];

fn epoch_line(log: &mut dyn Write, stage: &str, total: usize, s: &EpochStats) {
    let losses: Vec<String> = s
        .losses
        .iter()
        .map(|l| if l.is_nan() { "-".into() } else { format!("{l:.5}") })
        .collect();
    let _ = writeln!(
        log,
        "{stage} epoch {}/{total} loss [{}]",
        s.epoch + 1,
        losses.join(", ")
    );
}

fn echo_config(log: &mut dyn Write, command: &str, cfg: &ExperimentConfig) {
    let text = serde_json::to_string_pretty(&cfg.to_json()).expect("config serializes");
    let _ = writeln!(log, "{command} config:\n{text}");
}

/// Trains per `cfg.algorithm` on `splits.train`, fits heads where the
/// algorithm needs them, and calibrates gates for the light mode on `splits.val`.
pub fn train_model(cfg: &ExperimentConfig, splits: &Splits, log: &mut dyn Write) -> Result<Model, CliError> {
    cfg.validate()?;
    let tc = &cfg.train;
    let hc = cfg.head_train_config();
    let epochs = tc.epochs;
    let mut model = match cfg.algorithm {
        AlgorithmChoice::FfMp | AlgorithmChoice::FfOp => {
            let net = train::train_ff_with(&splits.train, &cfg.arch, tc, &mut |s| epoch_line(log, "ff", epochs, s))?;
            if cfg.algorithm == AlgorithmChoice::FfOp {
                let heads = train::train_heads_with(&net, &splits.train, &hc, cfg.per_layer_heads, &mut |s| {
                    epoch_line(log, "heads", hc.epochs, s)
                })?;
                Model::Forward(heads)
            } else {
                Model::Forward(net)
            }
        }
        AlgorithmChoice::Pepita => {
            let net = train::train_pepita_with(&splits.train, &cfg.arch, tc, &mut |s| {
                epoch_line(log, "pepita", epochs, s)
            })?;
            Model::Pepita(train::train_pt_readouts(&net, &splits.train, &hc)?)
        }
        AlgorithmChoice::Bp => {
            let net = train::train_bp_with(&splits.train, &cfg.arch, tc, &mut |s| epoch_line(log, "bp", epochs, s))?;
            let heads = train::train_heads_with(&net, &splits.train, &hc, cfg.per_layer_heads, &mut |s| {
                epoch_line(log, "heads", hc.epochs, s)
            })?;
            Model::Forward(heads)
        }
    };
    let mode = cfg.mode();
    if mode.is_light() {
        calibrate::calibrate_network(&mut model, &splits.val, &cfg.calibration, mode.gate_mode())?;
    }
    Ok(model)
}

fn meta_for(cfg: &ExperimentConfig) -> ModelMeta {
    ModelMeta {
        training: Some(cfg.train.clone()),
        experiment: cfg.to_json(),
    }
}

/// Resolved config in, model directory out.
pub fn cmd_train(cfg: &ExperimentConfig, log: &mut dyn Write) -> Result<PathBuf, CliError> {
    cfg.validate()?;
    echo_config(log, "train", cfg);
    let splits = cfg.dataset.load(cfg.seed)?;
    let _ = writeln!(
        log,
        "data: {} train / {} val / {} test samples, {} features, {} classes",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        splits.train.dim(),
        splits.train.num_classes()
    );
    let model = train_model(cfg, &splits, log)?;
    persist::save_model(&cfg.out, &model, &meta_for(cfg))?;
    let _ = writeln!(log, "saved model to {}", cfg.out.display());
    Ok(cfg.out.clone())
}

/// The experiment a model was trained with, with `overlay` merged on top.
pub fn stored_config(model_dir: &Path, overlay: Option<Value>) -> Result<(Model, ExperimentConfig), CliError> {
    let (model, manifest) = persist::load_model(model_dir)?;
    if manifest.experiment.is_null() {
        return Err(CliError::config(format!(
            "{} has no stored experiment config; it was not written by `lightff train`",
            model_dir.display()
        )));
    }
    let mut value = manifest.experiment;
    if let Some(o) = overlay {
        crate::config::merge(&mut value, o);
    }
    let cfg = ExperimentConfig::from_json(value)?;
    Ok((model, cfg))
}

#[derive(Debug, Clone, Default)]
pub struct CalibrateArgs {
    /// JSON merged over the stored experiment config (e.g. another dataset).
    pub overlay: Option<Value>,
    pub method: Option<CalibMethod>,
    pub k: Option<f64>,
    pub mode: Option<InferenceMode>,
}

/// Refits the gates on the validation split and rewrites the model directory.
pub fn cmd_calibrate(
    model_dir: &Path,
    args: &CalibrateArgs,
    log: &mut dyn Write,
) -> Result<persist::Manifest, CliError> {
    let (mut model, mut cfg) = stored_config(model_dir, args.overlay.clone())?;
    if let Some(m) = args.method {
        cfg.calibration.method = m;
    }
    if let Some(k) = args.k {
        cfg.calibration.k = k;
    }
    if let Some(mode) = args.mode {
        cfg.mode = Some(mode);
    }
    cfg.validate()?;
    echo_config(log, "calibrate", &cfg);
    let mode = cfg.mode().light();
    let splits = cfg.dataset.load(cfg.seed)?;
    calibrate::calibrate_network(&mut model, &splits.val, &cfg.calibration, mode.gate_mode())?;
    for g in model.gates() {
        let _ = writeln!(log, "layer {} gate: w = {:.6}, b = {:.6}", g.layer, g.weight, g.bias);
    }
    let manifest = persist::save_model(model_dir, &model, &meta_for(&cfg))?;
    Ok(manifest)
}

#[derive(Debug, Clone, Default)]
pub struct EvalArgs {
    pub overlay: Option<Value>,
    pub mode: Option<InferenceMode>,
    /// Directory for report.json / report.csv; defaults to the model directory.
    pub report_dir: Option<PathBuf>,
    pub threads: Option<usize>,
    pub count_bias: Option<bool>,
}

pub fn summary_line(r: &RunReport) -> String {
    format!(
        "{} on {}: error {:.2}% ({}/{}), mean layers {:.3}, avg core MACs {:.0}, avg overhead MACs {:.3}, {:.4} ms/sample",
        r.algo_label(),
        r.dataset,
        100.0 * r.error,
        r.errors,
        r.samples,
        r.mean_layers,
        r.avg_core_macs,
        r.avg_overhead_macs,
        r.wall_ms_per_sample
    )
}

/// Evaluates on the test split, writes report.json and appends report.csv.
pub fn cmd_eval(model_dir: &Path, args: &EvalArgs, log: &mut dyn Write) -> Result<RunReport, CliError> {
    let (model, mut cfg) = stored_config(model_dir, args.overlay.clone())?;
    if let Some(mode) = args.mode {
        cfg.mode = Some(mode);
    }
    if let Some(t) = args.threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    echo_config(log, "eval", &cfg);
    let splits = cfg.dataset.load(cfg.seed)?;
    let mut report = infer::evaluate_with(
        &model,
        &splits.test,
        cfg.mode(),
        cfg.threads,
        args.count_bias.unwrap_or(true),
    )?;
    report.dataset = splits.name.clone();
    let dir = args.report_dir.clone().unwrap_or_else(|| model_dir.to_path_buf());
    std::fs::create_dir_all(&dir)?;
    report.write_json(dir.join(REPORT_JSON))?;
    report.append_csv(dir.join(REPORT_CSV))?;
    let _ = writeln!(log, "{}", summary_line(&report));
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct SweepArgs {
    pub overlay: Option<Value>,
    pub mode: Option<InferenceMode>,
    pub k_values: Vec<f64>,
    /// Output CSV; defaults to `sweep.csv` in the model directory.
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl Default for SweepArgs {
    fn default() -> Self {
        Self {
            overlay: None,
            mode: None,
            k_values: DEFAULT_SWEEP_K.to_vec(),
            out: None,
            threads: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub k: f64,
    pub report: RunReport,
}

impl SweepRow {
    pub fn csv_row(&self) -> String {
        let r = &self.report;
        format!(
            "{},{:.6},{:.6},{:.3},{:.3}",
            self.k, r.error, r.mean_layers, r.avg_core_macs, r.avg_overhead_macs
        )
    }
}

/// Recalibrates with `stat` at every k and evaluates the light mode on the
/// test split. The model directory is left untouched.
pub fn sweep_model(
    model: &Model,
    splits: &Splits,
    mode: InferenceMode,
    k_values: &[f64],
    threads: usize,
) -> Result<Vec<SweepRow>, CliError> {
    let mode = mode.light();
    let scores = calibrate::collect_all_scores(model, &splits.val, mode.gate_mode())?;
    let mut model = model.clone();
    k_values
        .iter()
        .map(|&k| {
            let cal = CalibConfig {
                method: CalibMethod::Stat,
                k,
                ..CalibConfig::default()
            };
            model.set_gates(calibrate::gates_from_scores(&scores, &cal)?);
            let mut report = infer::evaluate(&model, &splits.test, mode, threads)?;
            report.dataset = splits.name.clone();
            Ok(SweepRow { k, report })
        })
        .collect()
}

pub fn cmd_sweep(model_dir: &Path, args: &SweepArgs, log: &mut dyn Write) -> Result<Vec<SweepRow>, CliError> {
    if args.k_values.is_empty() || args.k_values.iter().any(|k| !k.is_finite()) {
        return Err(CliError::config("sweep needs at least one finite k value"));
    }
    let (model, mut cfg) = stored_config(model_dir, args.overlay.clone())?;
    if let Some(mode) = args.mode {
        cfg.mode = Some(mode);
    }
    if let Some(t) = args.threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    echo_config(log, "sweep", &cfg);
    let splits = cfg.dataset.load(cfg.seed)?;
    let rows = sweep_model(&model, &splits, cfg.mode(), &args.k_values, cfg.threads)?;
    let path = args.out.clone().unwrap_or_else(|| model_dir.join(SWEEP_CSV));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut text = format!("{SWEEP_HEADER}\n");
    for row in &rows {
        text.push_str(&row.csv_row());
        text.push('\n');
        let _ = writeln!(log, "k = {:+}: {}", row.k, summary_line(&row.report));
    }
    std::fs::write(&path, text)?;
    let _ = writeln!(log, "wrote {}", path.display());
    Ok(rows)
}

/// Dataset spec for quick experiments and tests.
pub fn synthetic(n_per_class: usize, num_classes: usize, dim: usize, separation: f32) -> DatasetSpec {
    DatasetSpec::Synthetic {
        n_per_class,
        num_classes,
        dim,
        separation,
        fractions: crate::config::default_fractions(),
    }
}
