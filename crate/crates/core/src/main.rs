use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pace::config::RunConfig;
use pace::pipeline;
use pace::Error;

#[derive(Parser)]
#[command(name = "pace", version, about = "Concept-based explanations for a small CNN classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic parts dataset.
    Gen,
    /// Train the black-box classifier.
    TrainBb,
    /// Train the per-class concept explainers.
    TrainPace,
    /// Fit the PCA + K-means baseline.
    Baseline,
    /// Explain one PPM image.
    Explain {
        #[arg(long)]
        image: PathBuf,
        /// Output directory; defaults to `<report_dir>/explain/<image stem>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Agreement accuracy, localization proxy and misclassification digest.
    Eval,
    /// Print the default configuration.
    DefaultConfig,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::MissingArtifact(_) => 3,
        Error::Divergence { .. } | Error::NonFinite(_) => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> pace::Result<()> {
    if let Command::DefaultConfig = cli.command {
        print!("{}", pace::config::DEFAULT_CONFIG);
        return Ok(());
    }
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Gen => {
            let ds = pipeline::cmd_gen(&cfg)?;
            println!("wrote {} images to {}", ds.len(), cfg.dataset_dir.display());
        }
        Command::TrainBb => {
            let (_, s) = pipeline::cmd_train_bb(&cfg)?;
            println!("black-box: train accuracy {:.2}%, test accuracy {:.2}%", s.train_accuracy, s.test_accuracy);
        }
        Command::TrainPace => {
            let (_, log) = pipeline::cmd_train_pace(&cfg)?;
            if let Some(last) = log.epochs.last() {
                println!("explainer: {} epochs, final mean loss {:.4}", log.epochs.len(), last.total);
            }
        }
        Command::Baseline => {
            let (_, s) = pipeline::cmd_baseline(&cfg)?;
            println!("baseline fitted; classes without predictions: {:?}", s.missing_classes);
        }
        Command::Explain { image, out } => {
            let r = pipeline::cmd_explain(&cfg, &image, out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&r).expect("serializable report"));
        }
        Command::Eval => print!("{}", pipeline::cmd_eval(&cfg)?.summary_text()),
        Command::DefaultConfig => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
