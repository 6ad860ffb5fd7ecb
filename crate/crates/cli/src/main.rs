//! `tlc` — generate the synthetic captioning sandbox, score captions
//! with algebraic or learned token confidence, calibrate thresholds,
//! re-rank beams, and evaluate hallucination / diversity / matching
//! metrics. Subcommands compose over JSONL artifacts in an output
//! directory; `pipeline` runs everything end to end.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use tlc_core::confidence::{AggregationMethod, ConfidenceMeasure};
use tlc_core::pipeline::{
    cmd_calibrate, cmd_caption, cmd_evaluate, cmd_generate, cmd_pipeline, cmd_rerank, cmd_report,
    cmd_score, cmd_train_estimator, BackendKind, RunConfig, Split,
};
use tlc_core::CoreError;

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;

#[derive(Parser)]
#[command(name = "tlc", version, about = "Token-level confidence sandbox and evaluation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// TOML run configuration; defaults apply for missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Artifact directory.
    #[arg(long, default_value = "tlc-out", global = true)]
    out_dir: PathBuf,

    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Algebraic confidence measure: logit, softmax, entropy, energy.
    #[arg(long, global = true)]
    measure: Option<String>,

    /// Span aggregation: min or mean.
    #[arg(long, global = true)]
    agg: Option<String>,

    /// Target precision for threshold selection.
    #[arg(long, global = true)]
    alpha: Option<f64>,

    /// Beam width B.
    #[arg(long, global = true)]
    beam_width: Option<usize>,

    /// Emit a null caption instead of falling back to the top beam.
    #[arg(long, global = true)]
    abstain: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scenes and reference captions for all four splits.
    Generate {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Decode beams for one split.
    Caption {
        #[command(flatten)]
        common: CommonOpts,
        /// train_captioner, train_estimator, validation, or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Score top-beam concept spans with one backend.
    Score {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long, default_value = "validation")]
        split: String,
        /// algebraic or learned.
        #[arg(long, default_value = "algebraic")]
        backend: String,
    },
    /// Train the learned confidence estimator.
    TrainEstimator {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Select the decision threshold on the validation split.
    Calibrate {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long, default_value = "algebraic")]
        backend: String,
    },
    /// Re-rank the test split's beams with a calibrated threshold.
    Rerank {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long, default_value = "algebraic")]
        backend: String,
    },
    /// Compute hallucination, diversity, and matching metrics.
    Evaluate {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Run the whole pipeline end to end.
    Pipeline {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Re-render report.csv and breakdown.csv from metrics.json.
    Report {
        #[command(flatten)]
        common: CommonOpts,
    },
}

fn load_config(common: &CommonOpts, backend: Option<BackendKind>) -> anyhow::Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str::<RunConfig>(&text)
                .with_context(|| format!("parsing config {}", path.display()))
                .map_err(|err| ConfigError(err).into_anyhow())?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(measure) = &common.measure {
        config.measure = measure
            .parse::<ConfidenceMeasure>()
            .map_err(|err| ConfigError(err.into()).into_anyhow())?;
    }
    if let Some(agg) = &common.agg {
        let method = agg
            .parse::<AggregationMethod>()
            .map_err(|err| ConfigError(err.into()).into_anyhow())?;
        match backend {
            Some(BackendKind::Learned) => config.learned_aggregation = method,
            _ => config.algebraic_aggregation = method,
        }
    }
    if let Some(alpha) = common.alpha {
        config.alpha = alpha;
    }
    if let Some(beam_width) = common.beam_width {
        config.beam_width = beam_width;
    }
    if common.abstain {
        config.abstain = true;
    }
    config
        .validate()
        .map_err(|err| ConfigError(err.into()).into_anyhow())?;
    Ok(config)
}

/// Marks errors that should exit with the configuration code.
struct ConfigError(anyhow::Error);

impl ConfigError {
    fn into_anyhow(self) -> anyhow::Error {
        self.0.context(CONFIG_ERROR_MARKER)
    }
}

impl From<CoreError> for ConfigError {
    fn from(err: CoreError) -> Self {
        ConfigError(err.into())
    }
}

const CONFIG_ERROR_MARKER: &str = "configuration error";

fn parse_split(name: &str) -> anyhow::Result<Split> {
    Split::parse(name).map_err(|err| ConfigError(err.into()).into_anyhow())
}

fn parse_backend(name: &str) -> anyhow::Result<BackendKind> {
    BackendKind::parse(name).map_err(|err| ConfigError(err.into()).into_anyhow())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate { common } => {
            let config = load_config(&common, None)?;
            let manifest = cmd_generate(&config, &common.out_dir)?;
            for split in &manifest.splits {
                println!(
                    "{}: {} scenes, {} references ({})",
                    split.name, split.scenes, split.references, split.scenes_sha256
                );
            }
        }
        Command::Caption { common, split } => {
            let config = load_config(&common, None)?;
            let split = parse_split(&split)?;
            let scenes = cmd_caption(&config, &common.out_dir, split)?;
            println!("captioned {scenes} scenes in {}", split.name());
        }
        Command::Score {
            common,
            split,
            backend,
        } => {
            let kind = parse_backend(&backend)?;
            let config = load_config(&common, Some(kind))?;
            let split = parse_split(&split)?;
            let scenes = cmd_score(&config, &common.out_dir, split, kind)?;
            println!("scored {scenes} scenes in {} with {}", split.name(), kind.name());
        }
        Command::TrainEstimator { common } => {
            let config = load_config(&common, None)?;
            let trace = cmd_train_estimator(&config, &common.out_dir)?;
            println!(
                "trained {} epochs, final loss {:.6}",
                trace.len(),
                trace.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Calibrate { common, backend } => {
            let kind = parse_backend(&backend)?;
            let config = load_config(&common, Some(kind))?;
            let result = cmd_calibrate(&config, &common.out_dir, kind)?;
            match result.selection {
                tlc_core::calibration::ThresholdSelection::Selected {
                    gamma,
                    precision,
                    recall,
                } => println!(
                    "{}: gamma {gamma:.6} (precision {precision:.4}, recall {recall:.4}, auc {:.4})",
                    kind.name(),
                    result.auc
                ),
                tlc_core::calibration::ThresholdSelection::Unattainable => println!(
                    "{}: target precision {} unattainable; re-ranking will never reject",
                    kind.name(),
                    result.alpha
                ),
            }
        }
        Command::Rerank { common, backend } => {
            let kind = parse_backend(&backend)?;
            let config = load_config(&common, Some(kind))?;
            let scenes = cmd_rerank(&config, &common.out_dir, kind)?;
            println!("re-ranked {scenes} scenes with {}", kind.name());
        }
        Command::Evaluate { common } => {
            let config = load_config(&common, None)?;
            cmd_evaluate(&config, &common.out_dir)?;
            let report = std::fs::read_to_string(common.out_dir.join("report.csv"))?;
            print!("{report}");
        }
        Command::Pipeline { common } => {
            let config = load_config(&common, None)?;
            cmd_pipeline(&config, &common.out_dir)?;
            let report = std::fs::read_to_string(common.out_dir.join("report.csv"))?;
            print!("{report}");
        }
        Command::Report { common } => {
            let report = cmd_report(&common.out_dir)?;
            print!("{report}");
        }
    }
    Ok(())
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    if err.chain().any(|cause| {
        cause.to_string().contains(CONFIG_ERROR_MARKER)
            || matches!(
                cause.downcast_ref::<CoreError>(),
                Some(
                    CoreError::InvalidConfig(_)
                        | CoreError::InvalidVocabulary(_)
                        | CoreError::TokenOutOfRange { .. }
                )
            )
    }) {
        EXIT_CONFIG
    } else {
        EXIT_STAGE
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
