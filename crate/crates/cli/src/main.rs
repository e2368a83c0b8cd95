//! `cdeflow`: data generation, training, evaluation, the numerical property
//! suites, the memory benchmark and the drop-fraction sweep.
//!
//! Exit status: 0 success, 1 usage or input error, 2 numerical failure,
//! 3 failed verification.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use cdeflow::experiment::{drop_sweep, Splits, SweepConfig};
use cdeflow::models::ModelKind;
use cdeflow::timeseries::{load_dir, MANIFEST_NAME};
use cdeflow::train::{evaluate, train, TrainConfig, TrainedModel};
use cdeflow::verify::{self, Suite, Tolerances};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] cdeflow::Error),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_numerical() => 2,
            CliError::Core(_) => 1,
            CliError::Verification(_) => 3,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "cdeflow",
    version,
    about = "Neural controlled differential equations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic toy dataset split 80/10/10 into train/, val/ and test/.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        /// Points per series before any dropping.
        #[arg(long, default_value_t = 40)]
        length: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on DATA/train, select on DATA/val, and write the model and logs.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's model kind.
        #[arg(long)]
        model: Option<ModelKind>,
    },
    /// Report accuracy and mean loss of a trained model.
    Eval {
        /// A model.json written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// A split directory, or a dataset root whose `--split` is used.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run numerical property suites and print a JSON report.
    Verify {
        #[arg(long, default_value = "all")]
        suite: Suite,
        /// JSON object of per-property tolerance overrides.
        #[arg(long)]
        tolerances: Option<PathBuf>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retained-state counts of both backward passes across step counts.
    BenchMemory {
        #[arg(long, value_delimiter = ',', default_values_t = [10usize, 100, 1000])]
        steps: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Test accuracy of each model against the fraction of dropped points.
    DropSweep {
        #[arg(long)]
        config: PathBuf,
        /// Dataset root with train/, val/ and test/. Without it a toy set of
        /// 1000 series is generated from `--seed`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.3, 0.5, 0.7])]
        fractions: Vec<f64>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Seed for toy data and for dropping.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Models to compare; all four by default.
        #[arg(long, value_delimiter = ',')]
        model: Vec<ModelKind>,
        /// Toy series length when `--data` is absent.
        #[arg(long, default_value_t = 40)]
        length: usize,
        /// Directory for sweep.csv, sweep.txt and runs.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.use_stderr() {
                true => ExitCode::from(1),
                false => ExitCode::SUCCESS,
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenerateData {
            out,
            samples,
            classes,
            length,
            seed,
        } => {
            let splits = Splits::toy(samples, classes, length, seed)?;
            splits.write(&out)?;
            let sizes = splits.sets().map(|s| s.len());
            print_json(&serde_json::json!({
                "out": out,
                "train": sizes[0],
                "val": sizes[1],
                "test": sizes[2],
            }))
        }
        Command::Train {
            config,
            data,
            out,
            seed,
            model,
        } => cmd_train(&config, &data, &out, seed, model),
        Command::Eval {
            checkpoint,
            data,
            split,
        } => cmd_eval(&checkpoint, &data, &split),
        Command::Verify {
            suite,
            tolerances,
            out,
        } => cmd_verify(suite, tolerances.as_deref(), out.as_deref()),
        Command::BenchMemory { steps, out } => {
            let report = verify::memory_report(&steps)?;
            emit(&report, out.as_deref())?;
            match report.passed {
                true => Ok(()),
                false => Err(CliError::Verification(
                    "memory counts break the backward-pass contract".into(),
                )),
            }
        }
        Command::DropSweep {
            config,
            data,
            fractions,
            repeats,
            seed,
            model,
            length,
            out,
        } => {
            let base = load_config(&config)?;
            let splits = match data {
                Some(dir) => Splits::load(&dir)?,
                None => Splits::toy(1000, 2, length, seed)?,
            };
            let kinds = match model.is_empty() {
                true => ModelKind::ALL.to_vec(),
                false => model,
            };
            let sweep = SweepConfig {
                base,
                kinds,
                fractions,
                repeats,
                seed,
            };
            let result = drop_sweep(&sweep, &splits)?;
            if let Some(dir) = out {
                create_dir(&dir)?;
                write(&dir.join("sweep.csv"), &result.to_csv())?;
                write(&dir.join("sweep.txt"), &result.to_table())?;
                write(&dir.join("runs.json"), &to_json(&result)?)?;
            }
            print!("{}", result.to_table());
            Ok(())
        }
    }
}

fn cmd_train(
    config: &Path,
    data: &Path,
    out: &Path,
    seed: Option<u64>,
    model: Option<ModelKind>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(kind) = model {
        cfg.model.kind = kind;
    }
    let train_set = load_dir(&data.join("train"))?;
    let val_set = load_dir(&data.join("val"))?;
    let outcome = train(&cfg, &train_set, &val_set)?;
    create_dir(out)?;
    outcome.trained.save(&out.join("model.json"))?;
    write(&out.join("metrics.jsonl"), &outcome.log_jsonl()?)?;
    write(&out.join("timings.jsonl"), &outcome.timings_jsonl()?)?;
    print_json(&serde_json::json!({
        "model": cfg.model.kind,
        "params": outcome.trained.model.param_count(),
        "epochs": outcome.log.len(),
        "best_epoch": outcome.best_epoch,
        "best_val_acc": outcome.log.iter().map(|m| m.val_acc).fold(f64::NAN, f64::max),
    }))
}

fn cmd_eval(checkpoint: &Path, data: &Path, split: &str) -> Result<()> {
    let trained = TrainedModel::load(checkpoint)?;
    let dir = match data.join(MANIFEST_NAME).exists() {
        true => data.to_path_buf(),
        false => data.join(split),
    };
    let set = load_dir(&dir)?;
    let result = evaluate(&trained.model, &trained.prepare(&set)?, trained.step)?;
    print_json(&serde_json::json!({
        "data": dir,
        "samples": set.len(),
        "accuracy": result.accuracy,
        "mean_loss": result.mean_loss,
    }))
}

fn cmd_verify(suite: Suite, tolerances: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let overrides: Tolerances = match tolerances {
        Some(path) => {
            let text = read(path)?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => Tolerances::new(),
    };
    let report = verify::run(suite, &overrides)?;
    emit(&report, out)?;
    match report.passed {
        true => Ok(()),
        false => {
            let failed: Vec<&str> = report
                .checks
                .iter()
                .filter(|c| !c.passed)
                .map(|c| c.name.as_str())
                .collect();
            Err(CliError::Verification(failed.join(", ")))
        }
    }
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "config file {} does not exist",
            path.display()
        )));
    }
    Ok(TrainConfig::load(path)?)
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value).map_err(cdeflow::Error::from)?;
    text.push('\n');
    Ok(text)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    print!("{}", to_json(value)?);
    Ok(())
}

/// Prints `value` as JSON and, when `out` is given, writes it there too.
fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = to_json(value)?;
    if let Some(path) = out {
        write(path, &text)?;
    }
    print!("{text}");
    Ok(())
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Usage(format!("{}: {e}", path.display()))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_error(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}
