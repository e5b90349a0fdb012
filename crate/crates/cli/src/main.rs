use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lightff::{CalibMethod, InferenceMode};
use lightff_cli::commands::{self, CalibrateArgs, EvalArgs, SweepArgs};
use lightff_cli::config::{self, ExperimentConfig, Preset};
use lightff_cli::CliError;
use serde_json::{json, Value};

/// Forward-only training with lightweight early-exit inference.
#[derive(Parser, Debug)]
#[command(name = "lightff", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write manifest.json + weights.bin
    Train(TrainArgs),
    /// Refit the confidence gates on the validation split
    Calibrate(CalibrateCmd),
    /// Evaluate on the test split; writes report.json and appends report.csv
    Eval(EvalCmd),
    /// Evaluate the light mode over a range of stat offsets k
    Sweep(SweepCmd),
}

/// Settings shared by every command. Flags override `--config`, which
/// overrides the preset (train) or the stored experiment (other commands).
#[derive(Args, Debug)]
struct Common {
    /// JSON experiment config
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluation threads (0 = all cores)
    #[arg(long)]
    threads: Option<usize>,
    /// Set any config field, e.g. --set train.momentum=0.9 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    assignments: Vec<String>,
}

impl Common {
    fn overlay(&self, extra: Value) -> Result<Value, CliError> {
        let mut flags = json!({});
        if let Some(path) = &self.config {
            config::merge(&mut flags, config::read_config_file(path)?);
        }
        config::merge(&mut flags, self.flag_values(extra)?);
        Ok(flags)
    }

    fn flag_values(&self, extra: Value) -> Result<Value, CliError> {
        let mut flags = extra;
        if let Some(seed) = self.seed {
            config::set_path(&mut flags, "seed", json!(seed))?;
        }
        if let Some(t) = self.threads {
            config::set_path(&mut flags, "threads", json!(t))?;
        }
        for a in &self.assignments {
            let (k, v) = config::parse_assignment(a)?;
            config::set_path(&mut flags, &k, v)?;
        }
        Ok(flags)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// mnist-desk or paper-default
    #[arg(long)]
    preset: Option<String>,
    /// ff-mp, ff-op, pepita or bp
    #[arg(long)]
    algorithm: Option<String>,
    /// Hidden layer widths, e.g. 500,500,500,500
    #[arg(long, value_delimiter = ',')]
    arch: Option<Vec<usize>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    momentum: Option<f32>,
    /// Inference mode the gates are calibrated for
    #[arg(long)]
    mode: Option<InferenceMode>,
    /// Directory for the model files
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[command(flatten)]
    common: Common,
    /// Model directory written by `lightff train`
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    mode: Option<InferenceMode>,
}

#[derive(Args, Debug)]
struct CalibrateCmd {
    #[command(flatten)]
    model: ModelArgs,
    /// stat or bce
    #[arg(long)]
    method: Option<CalibMethod>,
    /// Offset in standard deviations for stat
    #[arg(long, allow_hyphen_values = true)]
    k: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalCmd {
    #[command(flatten)]
    model: ModelArgs,
    /// Report directory (default: the model directory)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Count weight MACs only, not bias additions
    #[arg(long)]
    no_bias_macs: bool,
}

#[derive(Args, Debug)]
struct SweepCmd {
    #[command(flatten)]
    model: ModelArgs,
    /// Comma-separated k values (default -3,-2,-1,0,1,2,3)
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    k: Option<Vec<f64>>,
    /// Sweep CSV path (default: sweep.csv in the model directory)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn resolve_train(args: &TrainArgs) -> Result<ExperimentConfig, CliError> {
    let preset = args.preset.as_deref().map(str::parse::<Preset>).transpose()?;
    let mut extra = json!({});
    if let Some(a) = &args.algorithm {
        extra["algorithm"] = json!(a);
    }
    if let Some(a) = &args.arch {
        extra["arch"] = json!(a);
    }
    if let Some(m) = args.mode {
        extra["mode"] = json!(m);
    }
    if let Some(o) = &args.out {
        extra["out"] = json!(o);
    }
    for (key, v) in [
        ("train.epochs", args.epochs.map(|v| json!(v))),
        ("train.learning_rate", args.lr.map(|v| json!(v))),
        ("train.batch_size", args.batch_size.map(|v| json!(v))),
        ("train.momentum", args.momentum.map(|v| json!(v))),
    ] {
        if let Some(v) = v {
            config::set_path(&mut extra, key, v)?;
        }
    }
    let file = args
        .common
        .config
        .as_deref()
        .map(config::read_config_file)
        .transpose()?;
    let flags = args.common.flag_values(extra)?;
    config::resolve(ExperimentConfig::default().to_json(), preset, file, flags)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let stdout = std::io::stdout();
    let mut log = stdout.lock();
    match cli.command {
        Command::Train(args) => {
            let cfg = resolve_train(&args)?;
            commands::cmd_train(&cfg, &mut log)?;
        }
        Command::Calibrate(args) => {
            let m = &args.model;
            let calib = CalibrateArgs {
                overlay: Some(m.common.overlay(json!({}))?),
                method: args.method,
                k: args.k,
                mode: m.mode,
            };
            commands::cmd_calibrate(&m.model, &calib, &mut log)?;
        }
        Command::Eval(args) => {
            let m = &args.model;
            let eval = EvalArgs {
                overlay: Some(m.common.overlay(json!({}))?),
                mode: m.mode,
                report_dir: args.out.clone(),
                threads: None,
                count_bias: Some(!args.no_bias_macs),
            };
            commands::cmd_eval(&m.model, &eval, &mut log)?;
        }
        Command::Sweep(args) => {
            let m = &args.model;
            let sweep = SweepArgs {
                overlay: Some(m.common.overlay(json!({}))?),
                mode: m.mode,
                k_values: args.k.clone().unwrap_or_else(|| commands::DEFAULT_SWEEP_K.to_vec()),
                out: args.out.clone(),
                threads: None,
            };
            commands::cmd_sweep(&m.model, &sweep, &mut log)?;
        }
    }
    log.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
