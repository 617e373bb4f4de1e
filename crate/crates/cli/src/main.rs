use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use perspective_core::explainer::{Decoding, ExplainerMode};
use perspective_core::pipeline::{self, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "perspective", version, about = "Annotator-aware NLI labels and explanations")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for all outputs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Canonical corpus file (defaults to the run directory's corpus.jsonl).
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Posthoc,
    Bridge,
}

impl From<Mode> for ExplainerMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Posthoc => ExplainerMode::Posthoc,
            Mode::Bridge => ExplainerMode::Bridge,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert a released shared-task directory into the canonical corpus.
    Import {
        #[arg(long)]
        release: PathBuf,
    },
    /// Generate the rule-based persona corpus and its answer key.
    Synth,
    /// Dataset statistics of the run corpus.
    Stats,
    TrainClassifier,
    /// Grid-search decision thresholds on the dev prediction dump.
    TuneThresholds,
    TrainExplainer {
        #[arg(long, value_enum)]
        mode: Mode,
    },
    /// Explanations for every observed pair of the evaluation split.
    Generate {
        #[arg(long, value_enum)]
        mode: Mode,
        /// Beam width; greedy when omitted.
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Label metrics, plus explanation metrics when a mode is given.
    Evaluate {
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    Faithfulness {
        #[arg(long, value_enum)]
        mode: Mode,
    },
    /// Finite-difference gradient checks at toy dimensions.
    Gradcheck {
        #[arg(long, value_delimiter = ',')]
        blocks: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3, 4, 5])]
        seeds: Vec<u64>,
    },
    /// Every stage in order.
    Run,
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.model.seed = seed;
        cfg.synthetic.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(c) = &common.corpus {
        cfg.corpus = Some(c.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json(v: impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(&v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.common)?;
    match cli.command {
        Command::Import { release } => print_json(pipeline::import_stage(&cfg, &release)?),
        Command::Synth => {
            let (_, key) = pipeline::synth_stage(&cfg)?;
            print_json(&key.stats)
        }
        Command::Stats => {
            let report = pipeline::stats_stage(&cfg)?;
            print!("{}", report.render_table());
            Ok(())
        }
        Command::TrainClassifier => {
            let s = pipeline::train_classifier_stage(&cfg, |e| eprintln!("{}", serde_json::json!(e)))?;
            print_json(s)
        }
        Command::TuneThresholds => print_json(pipeline::tune_stage(&cfg)?),
        Command::TrainExplainer { mode } => {
            let s = pipeline::train_explainer_stage(&cfg, mode.into(), |e| eprintln!("{}", serde_json::json!(e)))?;
            print_json(s)
        }
        Command::Generate { mode, beam } => {
            let decoding = match beam {
                Some(0) => bail!("beam width must be at least 1"),
                Some(width) => Some(Decoding::Beam { width }),
                None => None,
            };
            print_json(pipeline::generate_stage(&cfg, mode.into(), decoding)?)
        }
        Command::Evaluate { mode } => {
            let report = pipeline::evaluate_stage(&cfg, mode.map(Into::into))?;
            print!("{}", report.render_table());
            Ok(())
        }
        Command::Faithfulness { mode } => {
            let report = pipeline::faithfulness_stage(&cfg, mode.into())?;
            print!("{}", report.to_tsv());
            Ok(())
        }
        Command::Gradcheck { blocks, seeds } => {
            let summary = pipeline::gradcheck_stage(&cfg, &blocks, &seeds)?;
            print_json(&summary)?;
            let failed: Vec<&str> = summary.iter().filter(|b| !b.passed).map(|b| b.block.as_str()).collect();
            if !failed.is_empty() {
                bail!(perspective_core::Error::Invariant(format!(
                    "gradient check failed for {}",
                    failed.join(", ")
                )));
            }
            Ok(())
        }
        Command::Run => {
            let s = pipeline::run_pipeline(&cfg, |m| eprintln!("{m}")).context("pipeline")?;
            print_json(s)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = format!("{:?}", cli.command);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .chain()
                .find_map(|c| c.downcast_ref::<perspective_core::Error>())
                .map_or("error", |c| c.kind());
            let record = serde_json::json!({
                "error": kind,
                "message": format!("{e:#}"),
                "command": command.split([' ', '{']).next().unwrap_or_default(),
            });
            eprintln!("{record}");
            ExitCode::from(2)
        }
    }
}
