use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ventrisk::cohort::CohortError;
use ventrisk::eval::{delong_test, Comparison, DeLong, EvalError, EvalReport};
use ventrisk::explain::heatmap;
use ventrisk::model::{fixture, Checkpoint, CheckpointError, ModelError, Variant};
use ventrisk::numerics::primitive_suite;
use ventrisk::pipeline::{
    fit_variant, load_cohort, prepare, score, synthesize, test_windows, PipelineError, RunConfig,
};
use ventrisk::train::{write_log_csv, TrainError};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(
    name = "ventrisk",
    version,
    about = "Mechanical ventilation risk models on hourly ICU data"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Run configuration JSON.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stochastic step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Config override, e.g. `--set train.epochs=50`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort as patients.csv, events.csv and schema.json.
    Synth,
    /// Validate a cohort directory and summarize it.
    Ingest(DataArg),
    /// Train one variant and write checkpoint.json and train_log.csv.
    Train {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Score the test partition and write report.json and roc_points.csv.
    Evaluate {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// DeLong comparison of two checkpoints on the same test windows.
    Compare {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        against: PathBuf,
    },
    /// Top-factor heatmap over ventilated test patients.
    Explain {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference checks of every primitive and every variant.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
}

#[derive(Args, Debug)]
struct DataArg {
    /// Cohort directory (overrides `data` in the config).
    #[arg(long)]
    data: Option<PathBuf>,
}

/// A failure with its exit code class.
struct Failure {
    kind: &'static str,
    code: u8,
    message: String,
}

impl Failure {
    fn new(kind: &'static str, code: u8, message: impl Into<String>) -> Self {
        Self {
            kind,
            code,
            message: message.into(),
        }
    }
}

const CONFIG: (&str, u8) = ("config", 2);
const IO: (&str, u8) = ("io", 3);
const SCHEMA: (&str, u8) = ("schema", 4);
const DATA: (&str, u8) = ("data", 5);
const TRAIN: (&str, u8) = ("train", 6);
const EVAL: (&str, u8) = ("eval", 7);
const GRADCHECK: (&str, u8) = ("gradcheck", 8);

fn classify_cohort(e: &CohortError) -> (&'static str, u8) {
    match e {
        CohortError::Io { .. } => IO,
        CohortError::InvalidConfig(_) => CONFIG,
        CohortError::MissingColumn(_)
        | CohortError::InvalidSchema(_)
        | CohortError::UnknownColumn(_)
        | CohortError::SchemaMismatch(_) => SCHEMA,
        _ => DATA,
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let (kind, code) = match &e {
            PipelineError::Config(_) => CONFIG,
            PipelineError::Io { .. } => IO,
            PipelineError::Cohort(c) => classify_cohort(c),
            PipelineError::Feature(_) => DATA,
            PipelineError::Model(ModelError::Config(_)) => CONFIG,
            PipelineError::Model(_) => TRAIN,
            PipelineError::Checkpoint(c) => match c {
                CheckpointError::Io { .. } => IO,
                CheckpointError::SchemaMismatch { .. } => SCHEMA,
                _ => DATA,
            },
            PipelineError::Train(TrainError::Config(_)) => CONFIG,
            PipelineError::Train(_) => TRAIN,
            PipelineError::Eval(_) | PipelineError::Explain(_) => EVAL,
        };
        Failure::new(kind, code, e.to_string())
    }
}

macro_rules! from_via_pipeline {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                PipelineError::from(e).into()
            }
        }
    )*};
}
from_via_pipeline!(
    CohortError,
    CheckpointError,
    EvalError,
    TrainError,
    ModelError
);

type Outcome = Result<(), Failure>;

fn write_json(path: &Path, value: &impl Serialize) -> Outcome {
    let bytes =
        serde_json::to_vec_pretty(value).map_err(|e| Failure::new(IO.0, IO.1, e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| PipelineError::io(path)(e).into())
}

fn io_failure(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| PipelineError::io(path)(e).into()
}

fn load_config(g: &Global) -> Result<RunConfig, Failure> {
    let text = match &g.config {
        Some(p) => Some(
            std::fs::read_to_string(p)
                .map_err(|e| Failure::new(CONFIG.0, CONFIG.1, format!("{}: {e}", p.display())))?,
        ),
        None => None,
    };
    let mut overrides = g.overrides.clone();
    if let Some(seed) = g.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(out) = &g.out {
        overrides.push(format!(
            "out={}",
            serde_json::Value::String(out.display().to_string())
        ));
    }
    Ok(RunConfig::from_json(text.as_deref(), &overrides)?)
}

fn with_data(mut cfg: RunConfig, data: &DataArg) -> Result<RunConfig, Failure> {
    if let Some(d) = &data.data {
        cfg.data = Some(d.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<&Path, Failure> {
    std::fs::create_dir_all(&cfg.out).map_err(io_failure(&cfg.out))?;
    Ok(&cfg.out)
}

fn run(cli: Cli) -> Outcome {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Failure::new(CONFIG.0, CONFIG.1, e.to_string()))?;
    }
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Synth => {
            cfg.validate()?;
            let schema = cfg.schema()?;
            let out = out_dir(&cfg)?;
            let summary = synthesize(&cfg, &schema, out)?;
            write_json(&out.join("cohort_summary.json"), &summary)?;
            println!(
                "synthesized {} patients ({} ventilated) into {}",
                summary.patients,
                summary.ventilated,
                out.display()
            );
        }
        Command::Ingest(data) => {
            let cfg = with_data(cfg, &data)?;
            let schema = cfg.schema()?;
            let (_, summary) = load_cohort(cfg.data_dir()?, &schema)?;
            let out = out_dir(&cfg)?;
            write_json(&out.join("cohort_summary.json"), &summary)?;
            println!(
                "{} patients kept, {} ventilated, {} excluded",
                summary.patients,
                summary.ventilated,
                summary.excluded.values().sum::<usize>()
            );
        }
        Command::Train { data, variant } => {
            let cfg = with_data(cfg, &data)?;
            let variant = variant.unwrap_or(cfg.model.variant);
            let schema = cfg.schema()?;
            let (records, _) = load_cohort(cfg.data_dir()?, &schema)?;
            let prepared = prepare(
                records,
                &schema,
                &cfg.split,
                cfg.horizon_hours,
                cfg.tslm_cap,
            )?;
            let out = out_dir(&cfg)?;
            let started = Instant::now();
            let (ck, outcome) = fit_variant(&prepared, &schema, &cfg, variant, |e| {
                let auc = e
                    .val_auc
                    .map(|a| format!("{a:.4}"))
                    .unwrap_or_else(|| "-".into());
                eprintln!(
                    "epoch {:>4}  train_rmse {:.5}  val_auc {auc}  ({:.0}s)",
                    e.epoch,
                    e.train_rmse,
                    started.elapsed().as_secs_f64()
                );
            })?;
            ck.save(&out.join("checkpoint.json"))?;
            let log = out.join("train_log.csv");
            write_log_csv(&outcome.log, &log).map_err(io_failure(&log))?;
            println!(
                "{variant}: best validation AUC {:.4} at epoch {}",
                outcome.best_val_auc, outcome.best_epoch
            );
        }
        Command::Evaluate { data, checkpoint } => {
            let cfg = with_data(cfg, &data)?;
            let schema = cfg.schema()?;
            let ck = Checkpoint::load(&checkpoint, Some(&schema.hash()))?;
            let (records, _) = load_cohort(cfg.data_dir()?, &schema)?;
            let (set, _) = test_windows(&ck, records, &schema)?;
            let (_, scored) = score(&ck.network()?, &set)?;
            let report = EvalReport::compute(ck.model_config.variant.name(), &scored, cfg.eval)?;
            let out = out_dir(&cfg)?;
            report.write_dir(out).map_err(io_failure(out))?;
            let op = &report.operating_point;
            println!(
                "{}: AUC {:.4}  AUCpr {:.4}  SPC {:.4}  PPV {:.4}  FP {}",
                report.model, report.policy_auc, report.auc_pr, op.specificity, op.ppv, op.fp_count
            );
        }
        Command::Compare {
            data,
            checkpoint,
            against,
        } => {
            let cfg = with_data(cfg, &data)?;
            let schema = cfg.schema()?;
            let a = Checkpoint::load(&checkpoint, Some(&schema.hash()))?;
            let b = Checkpoint::load(&against, Some(&schema.hash()))?;
            if a.split != b.split || a.horizon_hours != b.horizon_hours {
                return Err(Failure::new(
                    CONFIG.0,
                    CONFIG.1,
                    "checkpoints were trained on different splits or horizons",
                ));
            }
            let (records, _) = load_cohort(cfg.data_dir()?, &schema)?;
            let (set_a, _) = test_windows(&a, records.clone(), &schema)?;
            let (set_b, _) = test_windows(&b, records, &schema)?;
            let (scores_a, _) = score(&a.network()?, &set_a)?;
            let (scores_b, _) = score(&b.network()?, &set_b)?;
            let labels: Vec<bool> = set_a.targets.iter().map(|&t| t > 0.0).collect();
            let result: DeLong = delong_test(&scores_a, &scores_b, &labels)?;
            let comparison = Comparison {
                model_a: a.model_config.variant.name().to_string(),
                model_b: b.model_config.variant.name().to_string(),
                delong: result,
            };
            let out = out_dir(&cfg)?;
            write_json(&out.join("comparison.json"), &comparison)?;
            println!(
                "{} vs {}: AUC {:.4} vs {:.4}, z = {:.3}, p = {:.4}",
                comparison.model_a,
                comparison.model_b,
                result.auc_a,
                result.auc_b,
                result.z,
                result.p_value
            );
        }
        Command::Explain { data, checkpoint } => {
            let cfg = with_data(cfg, &data)?;
            let schema = cfg.schema()?;
            let ck = Checkpoint::load(&checkpoint, Some(&schema.hash()))?;
            let (records, _) = load_cohort(cfg.data_dir()?, &schema)?;
            let (_, test) = test_windows(&ck, records, &schema)?;
            let net = ck.network()?;
            let map = heatmap(
                &net,
                &test,
                &schema,
                &ck.standardizer,
                ck.tslm_cap,
                cfg.heatmap,
            )
            .map_err(PipelineError::from)?;
            let out = out_dir(&cfg)?;
            let path = out.join("heatmap.csv");
            map.write_csv(&path).map_err(io_failure(&path))?;
            println!(
                "{} ventilated patients; top factors: {}",
                map.patients,
                map.variables
                    .iter()
                    .take(3)
                    .cloned()
                    .collect::<Vec<_>>()
                    .join(", ")
            );
        }
        Command::Gradcheck { seeds } => {
            let mut worst = 0.0f64;
            for seed in 0..seeds {
                let checks = primitive_suite(seed).map_err(ModelError::from)?;
                for c in checks {
                    worst = worst.max(c.max_relative_error);
                    let verdict = if c.max_relative_error < GRADCHECK_TOLERANCE {
                        "pass"
                    } else {
                        "FAIL"
                    };
                    println!(
                        "{verdict} primitive {} seed {seed} {:.3e}",
                        c.name, c.max_relative_error
                    );
                }
            }
            for v in Variant::ALL {
                for seed in 0..seeds {
                    let r = fixture::check_risk_gradients(v, seed)?;
                    worst = worst.max(r.max_relative_error);
                    let verdict = if r.max_relative_error < GRADCHECK_TOLERANCE {
                        "pass"
                    } else {
                        "FAIL"
                    };
                    println!(
                        "{verdict} variant {v} seed {seed} {:.3e}",
                        r.max_relative_error
                    );
                }
            }
            if worst.is_nan() || worst >= GRADCHECK_TOLERANCE {
                return Err(Failure::new(
                    GRADCHECK.0,
                    GRADCHECK.1,
                    format!("max relative error {worst:.3e} exceeds {GRADCHECK_TOLERANCE:e}"),
                ));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let message = f.message.replace('\n', " ");
            eprintln!("error[{}]: {message}", f.kind);
            ExitCode::from(f.code)
        }
    }
}
