use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use clumo_cli::commands::{self, parse_sizes, DEFAULT_SWEEP};
use clumo_cli::{CliError, ExperimentConfig};
use clumo_core::continual::Variant;

/// Continual-learning experiments with cluster-trained prompt pools.
#[derive(Parser)]
#[command(name = "clumo", version)]
struct Cli {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dotted config override, e.g. `train.lr=0.1`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured variant on every seed.
    Run,
    /// Compare variants on identical streams.
    Ablate {
        /// Comma-separated variant names; all by default.
        #[arg(long)]
        variants: Option<String>,
    },
    /// Sweep key grid sizes such as `2x2,3x3` or `2x2x22`.
    SweepKeys {
        #[arg(long, default_value = DEFAULT_SWEEP)]
        sizes: String,
    },
    /// Write PCA plot data of features and key assignments.
    Viz {
        /// Defaults to the first seed's checkpoint under the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write the generated datasets as JSON lines.
    ExportData,
}

fn parse_variants(list: &str) -> Result<Vec<Variant>, CliError> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<Variant>().map_err(|e| CliError::Usage(e.to_string())))
        .collect()
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        config.seeds = vec![seed];
    }
    let out = config.resolve_out_dir(cli.out.as_deref());
    match cli.command {
        Command::Run => {
            let output = commands::cmd_run(&config, &out)?;
            print!("{}", output.summary);
        }
        Command::Ablate { variants } => {
            let variants = match variants {
                Some(list) => parse_variants(&list)?,
                None => Variant::ALL.to_vec(),
            };
            print!("{}", commands::cmd_ablate(&config, &variants, &out)?.table);
        }
        Command::SweepKeys { sizes } => {
            let sizes = parse_sizes(&sizes)?;
            print!("{}", commands::cmd_sweep_keys(&config, &sizes, &out)?.table);
        }
        Command::Viz { checkpoint } => {
            let checkpoint = checkpoint.unwrap_or_else(|| commands::checkpoint_path(&out, config.seeds[0]));
            for f in commands::cmd_viz(&config, &checkpoint, &out)? {
                println!("{}", f.display());
            }
        }
        Command::ExportData => {
            for f in commands::cmd_export_data(&config, &out)? {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
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
