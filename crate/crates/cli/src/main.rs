use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use prunix_core::checkpoint::Checkpoint;
use prunix_core::crossbar::{
    evaluate_on_crossbar, inject_aging, inject_drift, inject_stuck_off, map_model, AgingParams, DriftParams, FaultMask,
};
use prunix_core::data::write_csv;
use prunix_core::pipeline::metrics::{write_metrics, write_sparsity, FaultSnapshot, MetricsRecord};
use prunix_core::pipeline::{sweep, PipelineConfig, PruneMode, Session, SweepAxis, SweepInputs};
use prunix_core::pruning::measure_sparsity;
use prunix_core::{Error, Result};

/// Non-ideality-aware training, pruning and crossbar fault simulation.
#[derive(Debug, Parser)]
#[command(name = "prunix", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for checkpoints and metric files.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Plain then regularized training.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Adaptive (or global) pruning of the regularized model.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long = "lambda-p")]
        lambda_p: Option<f64>,
        #[arg(long)]
        mu: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        /// Single pass at rate lambda-p on every layer, no accuracy feedback.
        #[arg(long)]
        global: bool,
    },
    /// Quantization to conductance levels, then fine-tuning.
    Quantize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        bits: Option<u32>,
    },
    /// Maps the model onto crossbars, injects faults and evaluates.
    Inject {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long = "stuck-off")]
        stuck_off: Option<f64>,
        #[arg(long)]
        drift: Option<f64>,
        #[arg(long = "drift-fraction")]
        drift_fraction: Option<f64>,
        #[arg(long = "aging-fraction")]
        aging_fraction: Option<f64>,
        #[arg(long = "aging-levels")]
        aging_levels: Option<u32>,
    },
    /// Accuracy of a checkpoint, in software and on (optionally faulty) crossbars.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Fault mask written by `inject`, replayed before evaluation.
        #[arg(long)]
        faults: Option<PathBuf>,
    },
    /// Accuracy over a grid of one non-ideality.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// bits | drift_r | stuck_fraction | aging
        #[arg(long)]
        axis: String,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
        /// Quantized model for the fault axes.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Float model for the bits axis.
        #[arg(long = "float-checkpoint")]
        float_checkpoint: Option<PathBuf>,
    },
    /// Sparsity report of a checkpoint.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// All stages in one process.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Writes the built-in digits corpus as CSV.
    GenData {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut config = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn checkpoint_path(common: &Common, given: &Option<PathBuf>, default: &str) -> PathBuf {
    given.clone().unwrap_or_else(|| common.out.join(default))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Config(format!("checkpoint {} not found", path.display())));
    }
    Checkpoint::load(path)
}

fn quantized_checkpoint(path: &Path) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.scheme.is_none() {
        return Err(Error::NotQuantized(format!("{} holds a float model", path.display())));
    }
    Ok(ckpt)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn finish(session: &Session, out: &Path) -> Result<()> {
    write_metrics(out, &session.records)?;
    for (stage, hist) in &session.histograms {
        hist.write(out, stage)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct FaultFile {
    snapshot: FaultSnapshot,
    mask: FaultMask,
}

#[derive(Serialize)]
struct EvalSummary {
    stage: String,
    test_accuracy: f64,
    crossbar_accuracy: Option<f64>,
    sparsity: f64,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common } => {
            let config = load_config(&common)?;
            let mut s = Session::new(config)?;
            let initial = s.stage_initial_train(s.initial_model()?)?;
            fs::create_dir_all(&common.out)?;
            Checkpoint::new("initial", initial.clone(), None).save(&common.out.join("initial.ckpt"))?;
            let reg = s.stage_regularized_train(initial)?;
            Checkpoint::new("regularized", reg, None).save(&common.out.join("regularized.ckpt"))?;
            finish(&s, &common.out)
        }
        Command::Prune {
            common,
            checkpoint,
            lambda_p,
            mu,
            sigma,
            gamma,
            global,
        } => {
            let mut config = load_config(&common)?;
            let p = &mut config.prune;
            p.lambda_p = lambda_p.unwrap_or(p.lambda_p);
            p.mu = mu.unwrap_or(p.mu);
            p.sigma = sigma.unwrap_or(p.sigma);
            p.gamma = gamma.unwrap_or(p.gamma);
            let mode = if global { PruneMode::Global(p.lambda_p) } else { PruneMode::Adaptive };
            let source = load_checkpoint(&checkpoint_path(&common, &checkpoint, "regularized.ckpt"))?;
            let mut s = Session::new(config)?;
            let result = s.stage_prune(&source.model, mode)?;
            fs::create_dir_all(&common.out)?;
            Checkpoint::new("pruned", result.model.clone(), None).save(&common.out.join("pruned.ckpt"))?;
            write_sparsity(&common.out, &result.report)?;
            if let Some(adaptive) = &result.adaptive {
                write_json(&common.out.join("prune_steps.json"), adaptive)?;
            }
            println!("{}", serde_json::to_string(&result.report).map_err(|e| Error::Data(e.to_string()))?);
            finish(&s, &common.out)
        }
        Command::Quantize {
            common,
            checkpoint,
            bits,
        } => {
            let mut config = load_config(&common)?;
            if let Some(b) = bits {
                config.quant.bits = b;
                config.validate()?;
            }
            let source = load_checkpoint(&checkpoint_path(&common, &checkpoint, "pruned.ckpt"))?;
            let mut s = Session::new(config)?;
            let (q, scheme) = s.stage_quantize(&source.model)?;
            fs::create_dir_all(&common.out)?;
            Checkpoint::new("quantized", q.clone(), Some(scheme.clone())).save(&common.out.join("quantized.ckpt"))?;
            let tuned = s.stage_fine_tune(&q, &scheme)?;
            Checkpoint::new("finetuned", tuned, Some(scheme)).save(&common.out.join("finetuned.ckpt"))?;
            finish(&s, &common.out)
        }
        Command::Inject {
            common,
            checkpoint,
            stuck_off,
            drift,
            drift_fraction,
            aging_fraction,
            aging_levels,
        } => {
            let config = load_config(&common)?;
            let f = &config.faults;
            let ckpt = quantized_checkpoint(&checkpoint_path(&common, &checkpoint, "finetuned.ckpt"))?;
            let scheme = ckpt.scheme.clone().expect("checked above");
            let s = Session::new(config.clone())?;
            let mut pairs = map_model(&ckpt.model, &scheme)?;
            let seed = config.seed;
            let snapshot = FaultSnapshot {
                bits: scheme.bits,
                stuck_off: stuck_off.unwrap_or(f.stuck_off),
                drift_r: drift.unwrap_or(f.drift_r),
                drift_fraction: drift_fraction.unwrap_or(f.drift_fraction),
                aging_fraction: aging_fraction.unwrap_or(f.aging_fraction),
                aging_levels: aging_levels.unwrap_or(0),
                rep: 0,
                seed,
            };
            let mut mask = inject_stuck_off(&mut pairs, snapshot.stuck_off, seed)?;
            let d = DriftParams {
                r: snapshot.drift_r,
                cell_fraction: snapshot.drift_fraction,
            };
            mask.merge(inject_drift(&mut pairs, d, seed)?);
            let a = AgingParams {
                cell_fraction: snapshot.aging_fraction,
                levels_lost: snapshot.aging_levels,
            };
            mask.merge(inject_aging(&mut pairs, a, seed)?);
            let accuracy = evaluate_on_crossbar(&pairs, &ckpt.model, &s.splits.test)?;
            let mut r = MetricsRecord::new("inject", 0, &measure_sparsity(&ckpt.model));
            r.crossbar_accuracy = Some(accuracy);
            r.faults = Some(snapshot.clone());
            fs::create_dir_all(&common.out)?;
            write_json(&common.out.join("faults.json"), &FaultFile { snapshot, mask })?;
            println!("crossbar accuracy {accuracy}");
            write_metrics(&common.out, &[r])
        }
        Command::Eval {
            common,
            checkpoint,
            faults,
        } => {
            let config = load_config(&common)?;
            let ckpt = load_checkpoint(&checkpoint_path(&common, &checkpoint, "finetuned.ckpt"))?;
            let s = Session::new(config)?;
            let test_accuracy = ckpt.model.evaluate_accuracy(&s.splits.test)?;
            let crossbar_accuracy = match &ckpt.scheme {
                Some(scheme) => {
                    let mut pairs = map_model(&ckpt.model, scheme)?;
                    if let Some(path) = &faults {
                        let text = fs::read_to_string(path)?;
                        let value: serde_json::Value =
                            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
                        let mask: FaultMask = serde_json::from_value(value["mask"].clone())
                            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
                        mask.apply(&mut pairs)?;
                    }
                    Some(evaluate_on_crossbar(&pairs, &ckpt.model, &s.splits.test)?)
                }
                None => None,
            };
            let report = measure_sparsity(&ckpt.model);
            let mut r = MetricsRecord::new("eval", 0, &report);
            r.test_accuracy = Some(test_accuracy);
            r.crossbar_accuracy = crossbar_accuracy;
            let summary = EvalSummary {
                stage: ckpt.stage,
                test_accuracy,
                crossbar_accuracy,
                sparsity: report.overall,
            };
            println!("{}", serde_json::to_string(&summary).map_err(|e| Error::Data(e.to_string()))?);
            write_metrics(&common.out, &[r])
        }
        Command::Sweep {
            common,
            axis,
            grid,
            checkpoint,
            float_checkpoint,
        } => {
            let config = load_config(&common)?;
            let axis: SweepAxis = axis.parse()?;
            let q = quantized_checkpoint(&checkpoint_path(&common, &checkpoint, "finetuned.ckpt"))?;
            let float = match axis {
                SweepAxis::Bits => load_checkpoint(&checkpoint_path(&common, &float_checkpoint, "pruned.ckpt"))?.model,
                _ => q.model.clone(),
            };
            let s = Session::new(config.clone())?;
            let inputs = SweepInputs {
                float_model: &float,
                quantized: &q.model,
                scheme: q.scheme.as_ref().expect("checked above"),
                data: &s.splits.test,
            };
            let out = sweep(inputs, &config.faults, axis, &grid, config.seed)?;
            fs::create_dir_all(&common.out)?;
            fs::write(common.out.join(format!("sweep_{}.csv", axis.name())), out.to_csv())?;
            print!("{}", out.to_csv());
            write_metrics(&common.out, &out.records)
        }
        Command::Report { common, checkpoint } => {
            let ckpt = load_checkpoint(&checkpoint_path(&common, &checkpoint, "finetuned.ckpt"))?;
            let report = measure_sparsity(&ckpt.model);
            write_sparsity(&common.out, &report)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).map_err(|e| Error::Data(e.to_string()))?
            );
            Ok(())
        }
        Command::Run { common } => {
            let config = load_config(&common)?;
            let mut s = Session::new(config)?;
            let out = s.run_all(PruneMode::Adaptive)?;
            let dir = &common.out;
            fs::create_dir_all(dir)?;
            Checkpoint::new("initial", out.initial, None).save(&dir.join("initial.ckpt"))?;
            Checkpoint::new("regularized", out.regularized, None).save(&dir.join("regularized.ckpt"))?;
            Checkpoint::new("pruned", out.pruned.model, None).save(&dir.join("pruned.ckpt"))?;
            Checkpoint::new("quantized", out.quantized, Some(out.scheme.clone())).save(&dir.join("quantized.ckpt"))?;
            Checkpoint::new("finetuned", out.finetuned, Some(out.scheme)).save(&dir.join("finetuned.ckpt"))?;
            write_sparsity(dir, &out.pruned.report)?;
            if let Some(adaptive) = &out.pruned.adaptive {
                write_json(&dir.join("prune_steps.json"), adaptive)?;
            }
            finish(&s, dir)
        }
        Command::GenData { common } => {
            let config = load_config(&common)?;
            let data = config.load_dataset()?;
            fs::create_dir_all(&common.out)?;
            write_csv(&data, &common.out.join("corpus.csv"))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
