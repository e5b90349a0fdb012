//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails. The desk-scale MNIST criteria need the IDX
//! files in `data/mnist` (or `$LIGHTFF_MNIST_DIR`); see scripts/fetch_mnist.sh.

#[path = "../../core/tests/gradients.rs"]
#[allow(dead_code)]
mod gradients;

use std::io::Write;
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use lightff::calibrate::{self, CalibMethod};
use lightff::cost::{self, ExitDistribution, LayerCosts};
use lightff::infer::{self, goodness_separation};
use lightff::{CalibConfig, ConfidenceGate, GateMode, InferenceMode, MacCounter, Model, RunReport};
use lightff_cli::commands::{self, SweepArgs};
use lightff_cli::config::{self, Preset, MNIST_DIR_ENV};
use lightff_cli::{AlgorithmChoice, ExperimentConfig, Splits};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

type Check = Result<String, String>;

struct Outcome {
    id: u32,
    name: &'static str,
    result: Check,
    elapsed: Duration,
}

fn run(id: u32, name: &'static str, f: impl FnOnce() -> Check) -> Outcome {
    let start = Instant::now();
    let result = match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    };
    let o = Outcome {
        id,
        name,
        result,
        elapsed: start.elapsed(),
    };
    print_outcome(&o);
    o
}

fn print_outcome(o: &Outcome) {
    let (tag, detail) = match &o.result {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    // Straight to the stderr handle so the table shows even when libtest captures output.
    let _ = writeln!(
        std::io::stderr(),
        "[{tag}] criterion {:>2} {}: {detail} ({:.1} s)",
        o.id,
        o.name,
        o.elapsed.as_secs_f64()
    );
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn mnist_dir() -> PathBuf {
    std::env::var_os(MNIST_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn quick_config(algorithm: AlgorithmChoice, out: PathBuf) -> ExperimentConfig {
    let arch = if algorithm == AlgorithmChoice::Pepita {
        json!([32, 32, 32])
    } else {
        json!([32, 32])
    };
    let mut flags = json!({"algorithm": algorithm, "arch": arch, "out": out, "seed": 5, "train": {"epochs": 5}});
    if algorithm == AlgorithmChoice::Bp {
        flags["train"]["normalize"] = json!("off");
    }
    config::resolve(ExperimentConfig::default().to_json(), None, None, flags).expect("quick config")
}

// ---------------------------------------------------------------------------
// Criteria that need no MNIST

fn gradient_checks() -> Check {
    gradients::ff_layer_gradient_matches_finite_differences();
    gradients::head_gradient_matches_finite_differences();
    gradients::pepita_output_gradient_matches_finite_differences();
    gradients::backprop_gradients_match_finite_differences();
    Ok("ff layer, softmax head, PEPITA output layer and backprop within 1e-4 relative error".into())
}

fn pepita_sanity() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let cfg = quick_config(AlgorithmChoice::Pepita, dir.path().join("pt"));
    let cfg = ExperimentConfig {
        dataset: commands::synthetic(500, 2, 20, 10.0),
        train: lightff::TrainConfig {
            epochs: 20,
            ..cfg.train
        },
        ..cfg
    };
    let splits = cfg.dataset.load(cfg.seed).map_err(err)?;
    let model = lightff_cli::train_model(&cfg, &splits, &mut std::io::sink()).map_err(err)?;
    let pt = infer::evaluate(&model, &splits.test, InferenceMode::Pt, 0).map_err(err)?;
    let light = infer::evaluate(&model, &splits.test, InferenceMode::LightPt, 0).map_err(err)?;
    let n = model.depth() as f64;
    let detail = format!(
        "PT error {:.2}%, Light-PT error {:.2}%, mean layers {:.3} of {n}",
        100.0 * pt.error,
        100.0 * light.error,
        light.mean_layers
    );
    ensure(pt.error < 0.10, || format!("PT error too high: {detail}"))?;
    ensure(light.error <= pt.error + 0.03, || {
        format!("Light-PT too far behind PT: {detail}")
    })?;
    ensure(light.mean_layers < n, || format!("no early exits: {detail}"))?;
    Ok(detail)
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut checked = Vec::new();
    for algorithm in [
        AlgorithmChoice::FfMp,
        AlgorithmChoice::FfOp,
        AlgorithmChoice::Pepita,
        AlgorithmChoice::Bp,
    ] {
        let mut bytes = Vec::new();
        for run in 0..2 {
            let out = dir.path().join(format!("{}-{run}", algorithm.as_str()));
            let cfg = quick_config(algorithm, out.clone());
            commands::cmd_train(&cfg, &mut std::io::sink()).map_err(err)?;
            bytes.push(std::fs::read(out.join("weights.bin")).map_err(err)?);
        }
        ensure(!bytes[0].is_empty() && bytes[0] == bytes[1], || {
            format!("{} weights differ between runs", algorithm.as_str())
        })?;
        checked.push(format!("{} ({} bytes)", algorithm.as_str(), bytes[0].len()));
    }
    Ok(format!("byte-identical weights.bin for {}", checked.join(", ")))
}

fn cost_forms_agree() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..1000 {
        let n = rng.random_range(1..8);
        let m = rng.random_range(2..12);
        let arch: Vec<usize> = (0..n).map(|_| rng.random_range(1..3000)).collect();
        let costs = cost::layer_costs_for(&arch, rng.random_range(1..1000), m, rng.random_bool(0.5));
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let total: f64 = w.iter().sum::<f64>().max(1e-12);
        let mut p: Vec<f64> = w.iter().map(|v| v / total).collect();
        let head: f64 = p[..n - 1].iter().sum();
        p[n - 1] = (1.0 - head).max(0.0);
        let dist = ExitDistribution::new(p).map_err(err)?;
        let a = cost::expected_cost_mp(&costs, &dist).map_err(err)?;
        let b = cost::expected_cost_mp_by_exit(&costs, &dist).map_err(err)?;
        ensure((a - b).abs() <= 1e-9 * a.abs().max(1.0), || {
            format!("MP cost forms disagree: {a} vs {b}")
        })?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Desk-scale MNIST

struct Desk {
    cfg: ExperimentConfig,
    splits: Splits,
    mp_model: Model,
    op_model: Model,
    dir: tempfile::TempDir,
    train_time: Duration,
}

fn desk_config(out: PathBuf) -> Result<ExperimentConfig, String> {
    let flags = json!({
        "algorithm": "ff-mp",
        "out": out,
        "dataset": {"kind": "mnist", "dir": mnist_dir()},
    });
    config::resolve(
        ExperimentConfig::default().to_json(),
        Some(Preset::MnistDesk),
        None,
        flags,
    )
    .map_err(err)
}

/// Trains the desk model once; the MP model is also given per-layer heads for the one-pass criteria.
fn desk_setup() -> Result<Desk, String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let cfg = desk_config(dir.path().join("mp"))?;
    let start = Instant::now();
    let splits = cfg.dataset.load(cfg.seed).map_err(err)?;
    let mp_model = lightff_cli::train_model(&cfg, &splits, &mut std::io::sink()).map_err(err)?;
    let train_time = start.elapsed();
    lightff::persist::save_model(
        &cfg.out,
        &mp_model,
        &lightff::persist::ModelMeta {
            training: Some(cfg.train.clone()),
            experiment: cfg.to_json(),
        },
    )
    .map_err(err)?;
    let Model::Forward(net) = &mp_model else {
        return Err("desk model is not a Forward-Forward network".into());
    };
    let heads =
        lightff::train::train_heads(&net.clone(), &splits.train, &cfg.head_train_config(), true).map_err(err)?;
    let mut op_model = Model::Forward(heads);
    calibrate::calibrate_network(&mut op_model, &splits.val, &cfg.calibration, GateMode::MaxLogit).map_err(err)?;
    Ok(Desk {
        cfg,
        splits,
        mp_model,
        op_model,
        dir,
        train_time,
    })
}

struct DeskRuns {
    mp: RunReport,
    light_mp: RunReport,
    op: RunReport,
    light_op: RunReport,
}

fn desk_runs(d: &Desk) -> Result<DeskRuns, String> {
    let ev = |m: &Model, mode| infer::evaluate(m, &d.splits.test, mode, d.cfg.threads).map_err(err);
    Ok(DeskRuns {
        mp: ev(&d.mp_model, InferenceMode::Mp)?,
        light_mp: ev(&d.mp_model, InferenceMode::LightMp)?,
        op: ev(&d.op_model, InferenceMode::Op)?,
        light_op: ev(&d.op_model, InferenceMode::LightOp)?,
    })
}

fn with_gates(model: &Model, make: fn(usize, GateMode) -> ConfidenceGate, mode: GateMode) -> Model {
    let mut m = model.clone();
    m.set_gates((1..m.depth()).map(|l| make(l, mode)).collect());
    m
}

fn reduction_exactness(d: &Desk) -> Check {
    let start = Instant::now();
    let test = &d.splits.test.samples()[..1000];
    let mp_never = with_gates(&d.mp_model, ConfidenceGate::never, GateMode::Goodness);
    let op_never = with_gates(&d.op_model, ConfidenceGate::never, GateMode::MaxLogit);
    let costs = cost::layer_costs_for(&d.cfg.arch, d.splits.test.dim(), d.splits.test.num_classes(), true);
    let head_excess: u64 = costs.cs[..costs.depth() - 1].iter().sum();
    for (i, s) in test.iter().enumerate() {
        let run = |m: &Model, mode| infer::infer_with(m, mode, &s.features, &mut MacCounter::new()).map_err(err);
        let full = run(&d.mp_model, InferenceMode::Mp)?;
        let light = run(&mp_never, InferenceMode::LightMp)?;
        ensure(
            full.label == light.label && full.per_layer_scores == light.per_layer_scores,
            || format!("sample {i}: Light-MP differs from MP"),
        )?;
        ensure(full.core_macs == light.core_macs, || {
            format!("sample {i}: core MACs {} vs {}", light.core_macs, full.core_macs)
        })?;
        let full = run(&d.op_model, InferenceMode::Op)?;
        let light = run(&op_never, InferenceMode::LightOp)?;
        ensure(full.label == light.label, || {
            format!("sample {i}: Light-OP label differs from OP")
        })?;
        ensure(light.core_macs == full.core_macs + head_excess, || {
            format!(
                "sample {i}: Light-OP core MACs {} != OP {} + {head_excess}",
                light.core_macs, full.core_macs
            )
        })?;
    }
    let t = start.elapsed();
    ensure(t < Duration::from_secs(60), || format!("took {:.1} s", t.as_secs_f64()))?;
    Ok(format!(
        "1000 samples: Light-MP == MP bit-exactly with equal core MACs; Light-OP == OP labels, excess {head_excess} MACs"
    ))
}

fn cost_oracle(d: &Desk, runs: &DeskRuns, sweep: &[commands::SweepRow]) -> Check {
    let costs: LayerCosts = cost::layer_costs_for(&d.cfg.arch, d.splits.test.dim(), d.splits.test.num_classes(), true);
    let mut checked = 0;
    let light_mp = std::iter::once(&runs.light_mp).chain(sweep.iter().map(|r| &r.report));
    for (report, mode) in light_mp
        .map(|r| (r, InferenceMode::LightMp))
        .chain(std::iter::once((&runs.light_op, InferenceMode::LightOp)))
    {
        let rec = cost::reconcile(report, &costs, mode).map_err(err)?;
        ensure(rec.residual == 0.0, || format!("{mode}: residual {}", rec.residual))?;
        let dist = ExitDistribution::from_histogram(&report.exit_histogram).map_err(err)?;
        let formula = match mode {
            InferenceMode::LightMp => cost::expected_cost_mp(&costs, &dist),
            _ => cost::expected_cost_op(&costs, &dist),
        }
        .map_err(err)?;
        ensure((formula - report.avg_core_macs).abs() <= 1e-9 * formula, || {
            format!("{mode}: formula {formula} vs measured {}", report.avg_core_macs)
        })?;
        checked += 1;
    }
    cost_forms_agree()?;
    Ok(format!(
        "{checked} light evaluations reconcile with residual 0; 1000 random cost/distribution pairs agree within 1e-9"
    ))
}

fn desk_mp(d: &Desk, r: &DeskRuns) -> Check {
    let ratio = r.light_mp.avg_core_macs / r.mp.avg_core_macs;
    let detail = format!(
        "MP error {:.2}%, Light-MP error {:.2}%, mean layers {:.3}, MAC ratio {:.3}, train {:.0} s",
        100.0 * r.mp.error,
        100.0 * r.light_mp.error,
        r.light_mp.mean_layers,
        ratio,
        d.train_time.as_secs_f64()
    );
    ensure(r.mp.error <= 0.08, || format!("MP error above 8%: {detail}"))?;
    ensure(r.light_mp.error <= r.mp.error + 0.02, || {
        format!("Light-MP too far behind: {detail}")
    })?;
    ensure(r.light_mp.mean_layers <= 2.5, || {
        format!("mean layers above 2.5: {detail}")
    })?;
    ensure(ratio <= 0.65, || format!("MAC ratio above 0.65: {detail}"))?;
    ensure(d.train_time <= Duration::from_secs(600), || {
        format!("training over 10 min: {detail}")
    })?;
    Ok(detail)
}

fn desk_op(r: &DeskRuns) -> Check {
    let detail = format!(
        "OP error {:.2}%, Light-OP error {:.2}%, avg core MACs {:.0} vs {:.0}, mean layers {:.3}",
        100.0 * r.op.error,
        100.0 * r.light_op.error,
        r.light_op.avg_core_macs,
        r.op.avg_core_macs,
        r.light_op.mean_layers
    );
    ensure(r.light_op.error <= r.op.error + 0.02, || {
        format!("Light-OP too far behind: {detail}")
    })?;
    ensure(r.light_op.avg_core_macs < r.op.avg_core_macs, || {
        format!("no MAC saving: {detail}")
    })?;
    Ok(detail)
}

fn sweep_monotone(rows: &[commands::SweepRow]) -> Check {
    let layers: Vec<String> = rows.iter().map(|r| format!("{:.3}", r.report.mean_layers)).collect();
    ensure(rows.len() == 7, || format!("expected 7 rows, got {}", rows.len()))?;
    ensure(
        rows.windows(2)
            .all(|w| w[0].report.mean_layers <= w[1].report.mean_layers),
        || format!("mean layers not monotone: {}", layers.join(", ")),
    )?;
    Ok(format!("mean layers over k = -3..3: {}", layers.join(", ")))
}

fn separation(d: &Desk) -> Check {
    let Model::Forward(net) = &d.mp_model else {
        return Err("not an FF model".into());
    };
    let s = goodness_separation(net, &d.splits.val, d.cfg.seed).map_err(err)?;
    let pairs: Vec<String> = s
        .positive
        .iter()
        .zip(&s.negative)
        .map(|(p, n)| format!("{p:.1}/{n:.1}"))
        .collect();
    let detail = format!("positive/negative mean goodness per layer: {}", pairs.join(", "));
    ensure(s.is_separated(), || format!("not separated: {detail}"))?;
    Ok(detail)
}

fn relative_speed(r: &DeskRuns) -> Check {
    let detail = format!(
        "ms/sample: Light-MP {:.4} vs MP {:.4}, Light-OP {:.4} vs OP {:.4}",
        r.light_mp.wall_ms_per_sample, r.mp.wall_ms_per_sample, r.light_op.wall_ms_per_sample, r.op.wall_ms_per_sample
    );
    ensure(r.light_mp.wall_ms_per_sample < r.mp.wall_ms_per_sample, || {
        format!("Light-MP not faster: {detail}")
    })?;
    ensure(r.light_op.wall_ms_per_sample < r.op.wall_ms_per_sample, || {
        format!("Light-OP not faster: {detail}")
    })?;
    Ok(detail)
}

#[test]
fn acceptance_suite() {
    let mut outcomes = vec![
        run(7, "gradient checks", gradient_checks),
        run(8, "PEPITA sanity", pepita_sanity),
        run(10, "determinism", determinism),
    ];

    const DESK: [(u32, &str); 7] = [
        (1, "reduction exactness"),
        (2, "cost-model oracle"),
        (3, "desk-scale MNIST multi-pass"),
        (4, "desk-scale MNIST one-pass"),
        (5, "threshold-sweep monotonicity"),
        (6, "goodness separation"),
        (9, "relative speed"),
    ];
    let setup = panic::catch_unwind(AssertUnwindSafe(
        || -> Result<(Desk, DeskRuns, Vec<commands::SweepRow>), String> {
            let desk = desk_setup()?;
            let runs = desk_runs(&desk)?;
            let sweep = commands::cmd_sweep(&desk.cfg.out, &SweepArgs::default(), &mut std::io::sink()).map_err(err)?;
            Ok((desk, runs, sweep))
        },
    ))
    .unwrap_or_else(|_| Err("desk setup panicked".into()));
    match setup {
        Ok((desk, runs, sweep)) => {
            outcomes.push(run(1, DESK[0].1, || reduction_exactness(&desk)));
            outcomes.push(run(2, DESK[1].1, || cost_oracle(&desk, &runs, &sweep)));
            outcomes.push(run(3, DESK[2].1, || desk_mp(&desk, &runs)));
            outcomes.push(run(4, DESK[3].1, || desk_op(&runs)));
            outcomes.push(run(5, DESK[4].1, || sweep_monotone(&sweep)));
            outcomes.push(run(6, DESK[5].1, || separation(&desk)));
            outcomes.push(run(9, DESK[6].1, || relative_speed(&runs)));
            let _ = desk.dir.path();
        }
        Err(e) => {
            for (id, name) in DESK {
                let o = Outcome {
                    id,
                    name,
                    result: Err(format!("desk-scale setup failed: {e}")),
                    elapsed: Duration::ZERO,
                };
                print_outcome(&o);
                outcomes.push(o);
            }
        }
    }

    outcomes.sort_by_key(|o| o.id);
    let _ = writeln!(std::io::stderr(), "\nacceptance summary");
    for o in &outcomes {
        print_outcome(o);
    }
    let failed: Vec<u32> = outcomes.iter().filter(|o| o.result.is_err()).map(|o| o.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

#[test]
fn calibrate_command_records_method_and_gate_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(AlgorithmChoice::FfOp, dir.path().join("op"));
    commands::cmd_train(&cfg, &mut std::io::sink()).unwrap();
    let args = commands::CalibrateArgs {
        method: Some(CalibMethod::Bce),
        ..Default::default()
    };
    let manifest = commands::cmd_calibrate(&cfg.out, &args, &mut std::io::sink()).unwrap();
    let cal = manifest.calibration.unwrap();
    assert_eq!(cal.method, CalibMethod::Bce);
    assert_eq!(cal.gates.len(), cfg.arch.len() - 1);
    assert!(cal.gates.iter().all(|g| g.mode == GateMode::MaxLogit));
    let _ = CalibConfig::default();
}
