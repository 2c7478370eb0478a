use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use robustcaps::data::Suite;
use robustcaps::experiment::{self, keyed, Precision, RunConfig, RunData};
use robustcaps::model::Model;
use robustcaps::tensor::Real;
use robustcaps::train::checkpoint::Checkpoint;
use robustcaps::train::{evaluate, EpochMetrics};
use robustcaps::verify::{self, Level, Options};
use robustcaps::Error;

/// Environment variable naming the directory that holds the datasets.
const DATA_ENV: &str = "ROBUSTCAPS_DATA";

#[derive(Debug, Parser)]
#[command(name = "robustcaps", version, about = "Train, evaluate and verify RobustCaps models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write metrics, a checkpoint and a summary.
    Train(RunArgs),
    /// Evaluate a checkpoint on the test suites of a config.
    Eval {
        checkpoint: PathBuf,
        #[command(flatten)]
        args: RunArgs,
    },
    /// Run the numerical verification suite.
    Verify {
        #[arg(long, value_enum, default_value = "fast")]
        level: LevelArg,
        /// Directory for verify.json.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the full model and both ablations on one config.
    Ablate(RunArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LevelArg {
    Fast,
    Full,
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    /// JSON run configuration; omitted sections take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding output.directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed, overriding train.seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["32", "64"])]
    precision: Option<String>,
}

/// A failed command and its exit status.
#[derive(Debug)]
enum Failure {
    Config(String),
    Data(String),
    Verification(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Self::Config(_) => 1,
            Self::Data(_) => 2,
            Self::Verification(_) => 3,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { .. } | Error::Format { .. } => Self::Data(e.to_string()),
            other => Self::Config(other.to_string()),
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Eval { checkpoint, args } => cmd_eval(&checkpoint, &args),
        Command::Verify { level, out, seed } => cmd_verify(level, out, seed),
        Command::Ablate(args) => cmd_ablate(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(m) => eprintln!("error: {m}"),
                Failure::Data(m) => eprintln!("data error: {m}"),
                Failure::Verification(m) => eprintln!("verification failed: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}

/// Parses a run config, naming the offending key on type errors.
fn parse_config(text: &str) -> Result<RunConfig, String> {
    let mut de = serde_json::Deserializer::from_str(text);
    let config: RunConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." {
            inner.to_string()
        } else {
            format!("{path}: {inner}")
        }
    })?;
    de.end().map_err(|e| e.to_string())?;
    Ok(config)
}

/// The config with command-line overrides applied and the dataset directory
/// resolved, so that it fully determines the run.
fn resolve(args: &RunArgs) -> Outcome<RunConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            parse_config(&text).map_err(|m| Failure::Config(format!("{}: {m}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(out) = &args.out {
        config.output.directory = out.clone();
    }
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    if let Some(bits) = &args.precision {
        config.precision = if bits == "64" { Precision::Double } else { Precision::Single };
    }
    if config.dataset.path.is_none() {
        let root = std::env::var_os(DATA_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from);
        config.dataset.path = Some(config.dataset_dir(&root));
    }
    config.validate()?;
    Ok(config)
}

fn load(config: &RunConfig) -> Outcome<RunData> {
    let dir = config.dataset.path.clone().unwrap_or_default();
    let data = experiment::load_data(config, &dir)?;
    log::info!(
        "{} training samples, {} suites of {} test samples",
        data.train.len(),
        data.suites.len(),
        data.suites.first().map_or(0, |s| s.samples.len())
    );
    Ok(data)
}

fn create_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| Failure::Config(format!("{}: {e}", dir.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Outcome {
    let text = serde_json::to_string_pretty(value).expect("serialisable");
    fs::write(path, text + "\n").map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct MetricsRow {
    epoch: usize,
    lr: f64,
    train_loss: f64,
    train_acc: f64,
    acc_0_0: Option<f64>,
    acc_2_30: Option<f64>,
    acc_2_60: Option<f64>,
    acc_2_90: Option<f64>,
    acc_2_180: Option<f64>,
}

const METRICS_HEADER: [&str; 9] = [
    "epoch", "lr", "train_loss", "train_acc", "acc_0_0", "acc_2_30", "acc_2_60", "acc_2_90", "acc_2_180",
];

fn write_metrics(path: &Path, history: &[EpochMetrics]) -> Outcome {
    let io = |e: csv::Error| Failure::Config(format!("{}: {e}", path.display()));
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(io)?;
    w.write_record(METRICS_HEADER).map_err(io)?;
    for m in history {
        let acc = |k: usize| m.suites.as_ref().map(|s| s[k]);
        w.serialize(MetricsRow {
            epoch: m.epoch,
            lr: m.lr,
            train_loss: m.train_loss,
            train_acc: m.train_acc,
            acc_0_0: acc(0),
            acc_2_30: acc(1),
            acc_2_60: acc(2),
            acc_2_90: acc(3),
            acc_2_180: acc(4),
        })
        .map_err(io)?;
    }
    w.flush().map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

/// Trains one config and writes its summary; the checkpoint and metrics too
/// unless `summary_only`.
fn train_and_write<T: Real>(
    config: &RunConfig,
    data: &RunData,
    summary_only: bool,
) -> Outcome<experiment::Summary> {
    let dir = &config.output.directory;
    create_dir(dir)?;
    let start = Instant::now();
    let outcome = experiment::run::<T>(config, data)?;
    log::info!("trained in {:.1} s", start.elapsed().as_secs_f64());
    let summary = outcome.summary(config, &data.suites);
    if !summary_only {
        write_metrics(&dir.join("metrics.csv"), &outcome.run.history)?;
        Checkpoint::capture(
            config.digest(),
            &outcome.params,
            Some(&outcome.run.optimizer),
            &outcome.run.history,
        )
        .save(&dir.join("checkpoint.bin"))?;
    }
    write_json(&dir.join("summary.json"), &summary)?;
    log::info!("accuracies {:?}", summary.accuracies);
    Ok(summary)
}

fn cmd_train(args: &RunArgs) -> Outcome {
    let config = resolve(args)?;
    let data = load(&config)?;
    match config.precision {
        Precision::Single => train_and_write::<f32>(&config, &data, false)?,
        Precision::Double => train_and_write::<f64>(&config, &data, false)?,
    };
    println!("{}", config.output.directory.join("summary.json").display());
    Ok(())
}

fn eval_checkpoint<T: Real>(config: &RunConfig, suites: &[Suite], path: &Path) -> Outcome<Vec<f64>> {
    let name = config.dataset.name;
    let (model, mut params) =
        Model::new::<T>(&config.model, name.channels(), name.classes(), config.train.seed)?;
    let checkpoint = Checkpoint::<T>::load(path)?;
    checkpoint.restore(&mut params, &model.digest())?;
    Ok(evaluate(&model, &params, suites, config.train.eval_batch_size)?)
}

fn cmd_eval(checkpoint: &Path, args: &RunArgs) -> Outcome {
    let config = resolve(args)?;
    let data = load(&config)?;
    let accuracies = match config.precision {
        Precision::Single => eval_checkpoint::<f32>(&config, &data.suites, checkpoint)?,
        Precision::Double => eval_checkpoint::<f64>(&config, &data.suites, checkpoint)?,
    };
    let keyed = keyed(&data.suites, &accuracies);
    let dir = &config.output.directory;
    create_dir(dir)?;
    write_json(&dir.join("eval.json"), &keyed)?;
    println!("{}", serde_json::to_string(&keyed).expect("serialisable"));
    Ok(())
}

fn cmd_verify(level: LevelArg, out: Option<PathBuf>, seed: Option<u64>) -> Outcome {
    let mut options = Options::new(match level {
        LevelArg::Fast => Level::Fast,
        LevelArg::Full => Level::Full,
    });
    if let Some(seed) = seed {
        options.seed = seed;
    }
    let report = verify::run(&options)?;
    for c in &report.checks {
        let verdict = match (c.threshold, c.passed) {
            (None, _) => "info",
            (Some(_), true) => "pass",
            (Some(_), false) => "FAIL",
        };
        let bound = c.threshold.map_or_else(String::new, |t| format!(" (< {t:.0e})"));
        log::info!("{verdict:4} {}: {:.3e}{bound}", c.name, c.error);
    }
    let dir = out.unwrap_or_else(|| PathBuf::from("runs/verify"));
    create_dir(&dir)?;
    write_json(&dir.join("verify.json"), &report)?;
    println!("{}", dir.join("verify.json").display());
    if report.passed {
        Ok(())
    } else {
        let failed = report.checks.iter().filter(|c| !c.passed).count();
        Err(Failure::Verification(format!("{failed} check(s) out of tolerance")))
    }
}

#[derive(Serialize)]
struct AblationRow<'a> {
    variant: &'a str,
    acc_0_0: f64,
    acc_2_30: f64,
    acc_2_60: f64,
    acc_2_90: f64,
    acc_2_180: f64,
}

fn cmd_ablate(args: &RunArgs) -> Outcome {
    let config = resolve(args)?;
    let data = load(&config)?;
    let root = config.output.directory.clone();
    let variants = [("full", false, false), ("noprecaps", true, false), ("noprojcaps", false, true)];
    let mut rows = Vec::with_capacity(variants.len());
    for (variant, no_precaps, no_projcaps) in variants {
        let mut c = config.clone();
        c.model.no_precaps = no_precaps;
        c.model.no_projcaps = no_projcaps;
        c.output.directory = root.join(variant);
        log::info!("ablation variant {variant}");
        let summary = match c.precision {
            Precision::Single => train_and_write::<f32>(&c, &data, true)?,
            Precision::Double => train_and_write::<f64>(&c, &data, true)?,
        };
        log::info!(
            "{variant}: {} parameters, {} in the stem",
            summary.parameters,
            summary.stem_parameters
        );
        rows.push((variant, summary));
    }
    let path = root.join("ablation.csv");
    let io = |e: csv::Error| Failure::Config(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(&path).map_err(io)?;
    for (variant, s) in &rows {
        let acc = |k: &str| s.accuracies[k];
        w.serialize(AblationRow {
            variant,
            acc_0_0: acc("(0,0)"),
            acc_2_30: acc("(2,30)"),
            acc_2_60: acc("(2,60)"),
            acc_2_90: acc("(2,90)"),
            acc_2_180: acc("(2,180)"),
        })
        .map_err(io)?;
    }
    w.flush().map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    println!("{}", path.display());
    Ok(())
}
