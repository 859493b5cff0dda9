use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod report;

use config::{Overrides, PipelineConfig, OUTPUT_ROOT_VAR};

#[derive(Parser)]
#[command(name = "weldscan", version, about = "Weld radiograph defect segmentation pipeline")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config file and the environment.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override one config key, e.g. `--set nnet.train.max_steps=200`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic radiograph dataset.
    Synth,
    /// Build and write the augmented training patches.
    Augment,
    /// Train a model on every image outside the holdout fold.
    Train,
    /// Segment images with a trained checkpoint.
    Infer {
        /// Images to segment; defaults to the holdout fold of the dataset.
        #[arg(long)]
        input: Vec<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score predicted masks against the dataset ground truth.
    Eval {
        /// Directory of `pred_NNNN.pgm` masks; defaults to the infer output.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Cross-validated strategy by fraction grid.
    Experiment,
    /// Plot metrics and POD curves.
    Report {
        /// Metrics CSV; defaults to the experiment output.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Time tiled inference.
    Bench {
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let ov = Overrides {
        sets: cli.sets,
        seed: cli.seed,
        out: cli.out,
        output_root: std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from),
    };
    let cfg = PipelineConfig::load(cli.config.as_deref(), &ov)?;
    match cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::Augment => commands::augment(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Infer { input, checkpoint } => commands::infer(&cfg, &input, checkpoint.as_deref()),
        Command::Eval { predictions } => commands::eval(&cfg, predictions.as_deref()),
        Command::Experiment => commands::experiment(&cfg),
        Command::Report { metrics } => commands::report(&cfg, metrics.as_deref()),
        Command::Bench {
            repetitions,
            checkpoint,
        } => commands::bench(&cfg, repetitions, checkpoint.as_deref()),
        Command::ShowConfig => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    if e.downcast_ref::<commands::MissingInput>().is_some() {
        return "missing_input";
    }
    e.chain()
        .find_map(|c| c.downcast_ref::<weldscan::Error>())
        .map_or("error", weldscan::Error::kind)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({
                "error": {
                    "kind": error_kind(&e),
                    "message": format!("{e:#}"),
                }
            });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
