use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use svkit_cli::config::{load_config, ExperimentConfig, ScoringBackend};
use svkit_cli::pipeline::{run_all, run_stage_by_name, summarize};
use svkit_cli::provenance::StageStatus;
use svkit_cli::stages::{evaluate_files, EvalInputs, Pipeline};
use svkit_cli::workspace::Workspace;

#[derive(Parser)]
#[command(
    name = "svkit",
    version,
    about = "End-to-end speaker-verification experiments on a synthetic corpus"
)]
struct Cli {
    /// Experiment configuration JSON; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory holding every artifact of the experiment.
    #[arg(long, global = true, default_value = "workspace")]
    workspace: PathBuf,

    /// Overrides the configuration's random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Rerun stages even when cached results are current.
    #[arg(long, global = true)]
    force: bool,

    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic demo corpus
    DemoCorpus,
    /// Simulate the room impulse-response bank
    SimulateRir,
    /// Create augmented copies of the training audio
    Augment {
        /// Augmentation preset: fixdata1, fixdata2, fixdata3 or opendata4.
        #[arg(long)]
        recipe: Option<String>,
    },
    /// Measure speech activity and build the filtered training manifest
    Sad,
    /// Extract features and speech masks for every utterance
    Features,
    /// Train the embedding extractors
    TrainExtractor {
        /// Architecture preset overriding the configured one.
        #[arg(long)]
        arch: Option<String>,
        /// Subsystem the override applies to (required with several).
        #[arg(long)]
        system: Option<String>,
    },
    /// Compute embeddings for the train, dev and eval splits
    Embed,
    /// Train the backend scoring transform
    TrainBackend,
    /// Score the dev and eval trial lists
    Score {
        /// cosine or csml.
        #[arg(long)]
        backend: Option<String>,
    },
    /// Adaptive s-norm of the raw scores
    Normalize {
        /// Embedding file providing the cohort instead of the training set.
        #[arg(long)]
        cohort: Option<PathBuf>,
        /// Cohort entries used per trial side.
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Fuse the normalized subsystem scores
    Fuse {
        /// Comma-separated subsystem weights; equal when omitted.
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
    },
    /// Fit the calibration strategy and write calibrated eval scores
    Calibrate {
        /// fixed1, fixed2 or fixed3.
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Report metrics for the pipeline output or an explicit score file
    Evaluate {
        /// Score file to evaluate instead of the pipeline output.
        #[arg(long, requires = "key")]
        scores: Option<PathBuf>,
        /// Trial key matching --scores.
        #[arg(long, requires = "scores")]
        key: Option<PathBuf>,
        /// Write the DET curve to this CSV file.
        #[arg(long)]
        det: Option<PathBuf>,
    },
    /// Run every stage in order
    RunAll,
}

impl Command {
    fn stage_name(&self) -> &'static str {
        match self {
            Command::DemoCorpus => "demo-corpus",
            Command::SimulateRir => "simulate-rir",
            Command::Augment { .. } => "augment",
            Command::Sad => "sad",
            Command::Features => "features",
            Command::TrainExtractor { .. } => "train-extractor",
            Command::Embed => "embed",
            Command::TrainBackend => "train-backend",
            Command::Score { .. } => "score",
            Command::Normalize { .. } => "normalize",
            Command::Fuse { .. } => "fuse",
            Command::Calibrate { .. } => "calibrate",
            Command::Evaluate { .. } => "evaluate",
            Command::RunAll => "run-all",
        }
    }
}

/// Fold per-command flags into the configuration so provenance sees them.
fn apply_overrides(cfg: &mut ExperimentConfig, cmd: &Command) -> Result<()> {
    match cmd {
        Command::Augment { recipe: Some(name) } => {
            cfg.augmentation.preset = name.clone();
        }
        Command::TrainExtractor { arch: Some(arch), system } => match system {
            Some(name) => {
                let sub = cfg
                    .subsystems
                    .iter_mut()
                    .find(|s| s.name == *name)
                    .with_context(|| format!("no subsystem named {name:?}"))?;
                sub.arch = arch.clone();
            }
            None if cfg.subsystems.len() == 1 => {
                cfg.subsystems[0].arch = arch.clone();
            }
            None => bail!("--arch needs --system when several subsystems are configured"),
        },
        Command::Score { backend: Some(name) } => {
            cfg.backend.scoring = match name.to_ascii_lowercase().as_str() {
                "cosine" => ScoringBackend::Cosine,
                "csml" => ScoringBackend::Csml,
                other => bail!("unknown backend {other:?} (expected cosine or csml)"),
            };
        }
        Command::Normalize { top_k: Some(k), .. } => {
            cfg.backend.snorm_top_k = *k;
        }
        Command::Calibrate { strategy: Some(name) } => {
            cfg.strategy = svkit_core::metrics::Strategy::from_str(name)?;
        }
        _ => {}
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    if cli.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
            .context("configuring the thread pool")?;
    }

    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    apply_overrides(&mut cfg, &cli.command)?;
    cfg.validate()?;

    let mut pipeline = Pipeline::new(cfg, Workspace::new(&cli.workspace), cli.force);
    match &cli.command {
        Command::Normalize { cohort, .. } => pipeline.cohort_override = cohort.clone(),
        Command::Fuse { weights } => pipeline.fuse_weights = weights.clone(),
        _ => {}
    }

    match &cli.command {
        Command::RunAll => {
            for (name, status) in run_all(&pipeline)? {
                println!(
                    "{name:<16} {}",
                    match status {
                        StageStatus::Ran => "ran",
                        StageStatus::Cached => "cached",
                    }
                );
            }
            print!("{}", summarize(&pipeline.ws)?);
        }
        Command::Evaluate { scores: Some(scores), key: Some(key), det } => {
            let report = evaluate_files(
                &EvalInputs { scores: scores.clone(), key: key.clone(), det: det.clone() },
                &pipeline.cfg.metrics,
            )?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Evaluate { det, .. } => {
            run_stage_by_name(&pipeline, "evaluate")?;
            if let Some(det) = det {
                std::fs::copy(pipeline.ws.det_curve(), det).with_context(|| {
                    format!("copying the DET curve to {}", det.display())
                })?;
            }
            let text = std::fs::read_to_string(pipeline.ws.eval_report())
                .context("reading the evaluation report")?;
            println!("{text}");
            print!("{}", summarize(&pipeline.ws)?);
        }
        cmd => {
            let status = run_stage_by_name(&pipeline, cmd.stage_name())?;
            if status == StageStatus::Cached {
                println!("{}: cached, nothing to do", cmd.stage_name());
            }
        }
    }
    Ok(())
}
