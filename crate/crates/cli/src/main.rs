//! `mialab` — membership-inference experiments from a single TOML config.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mialab_cli::commands;
use mialab_cli::config::ExperimentConfig;
use mialab_cli::runner::RunOutcome;
use mialab_cli::CliError;

#[derive(Parser)]
#[command(
    name = "mialab",
    version,
    about = "Desk-scale membership-inference laboratory for fine-tuned language models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus dotted-path overrides, shared by the subcommands
/// that execute an experiment.
#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a config key by dotted path, e.g. --set training.epochs=5
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        ExperimentConfig::load(&self.config, &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build the membership split and write its dataset files.
    Split {
        #[command(flatten)]
        config: ConfigArgs,
        /// Rebuild even if this run directory already holds a split.
        #[arg(long)]
        force: bool,
    },
    /// Execute the configured preset end-to-end into the run directory.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Discard existing artifacts and start over.
        #[arg(long)]
        force: bool,
    },
    /// Merge metric reports from run directories into CSV + SVG.
    Report {
        /// Completed run directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Output directory for report.csv and report.svg.
        #[arg(long, default_value = "report")]
        out: PathBuf,
        /// Metric rendered by the heatmap.
        #[arg(long, default_value = "auc")]
        metric: String,
    },
    /// Run the attack suite against an existing model file.
    Attack {
        #[command(flatten)]
        config: ConfigArgs,
        /// Stamped model JSON to score.
        #[arg(long)]
        target: PathBuf,
        /// Optional stamped model JSON used as the reference model.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Artifact name (defaults to attack_<target stem>).
        #[arg(long)]
        name: Option<String>,
    },
    /// Train the obfuscation defense and save its artifacts (no attack).
    Defend {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write the paraphrase-exchange skeleton for external tools.
    ParaphraseExport {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output file (defaults to <run dir>/exchange.jsonl).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validate a filled exchange file and install it in the run dir.
    ParaphraseImport {
        #[command(flatten)]
        config: ConfigArgs,
        /// Exchange file with paraphrased_suffix_text filled in.
        #[arg(long)]
        exchange: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => e.exit(),
                // Usage problems (including a missing subcommand) are
                // config errors: print the message, exit 1.
                _ => {
                    let _ = e.print();
                    return ExitCode::from(1);
                }
            }
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Split { config, force } => {
            let cfg = config.load()?;
            let dir = cfg.output.dir.clone();
            match commands::cmd_split(cfg, force)? {
                RunOutcome::Completed => println!("split written: {}", dir.join("split").display()),
                RunOutcome::AlreadyComplete => {
                    println!("split already present: {}", dir.join("split").display())
                }
            }
            Ok(())
        }
        Command::Run { config, force } => {
            let cfg = config.load()?;
            let dir = cfg.output.dir.clone();
            match commands::cmd_run(cfg, force)? {
                RunOutcome::Completed => println!("run complete: {}", dir.display()),
                RunOutcome::AlreadyComplete => {
                    println!("run already complete: {}", dir.display())
                }
            }
            Ok(())
        }
        Command::Report { runs, out, metric } => {
            let (csv_path, svg_path) = commands::cmd_report(&runs, &out, &metric)?;
            println!("report written: {} and {}", csv_path.display(), svg_path.display());
            Ok(())
        }
        Command::Attack { config, target, reference, name } => {
            let cfg = config.load()?;
            let report = commands::cmd_attack(cfg, &target, reference.as_deref(), name)?;
            println!("attack report written: {}", report.display());
            Ok(())
        }
        Command::Defend { config } => {
            let cfg = config.load()?;
            let model = commands::cmd_defend(cfg)?;
            println!("defended model written: {}", model.display());
            Ok(())
        }
        Command::ParaphraseExport { config, out } => {
            let cfg = config.load()?;
            let (path, count) = commands::cmd_paraphrase_export(cfg, out)?;
            println!("exchange skeleton written: {} ({count} samples)", path.display());
            Ok(())
        }
        Command::ParaphraseImport { config, exchange } => {
            let cfg = config.load()?;
            let (path, count) = commands::cmd_paraphrase_import(cfg, &exchange)?;
            println!("exchange installed: {} ({count} paraphrases)", path.display());
            Ok(())
        }
    }
}
