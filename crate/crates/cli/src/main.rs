use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pda_cli::bench::{self, BenchOptions};
use pda_cli::commands;
use pda_cli::config::RunConfig;
use pda_cli::CliError;
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "pda",
    version,
    about = "Partial domain adaptation on pre-extracted features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task into the configured task directory.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the configured variant; writes report.csv, snapshot.json and wall_time.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a snapshot on its task; writes metrics.json.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to snapshot.json in the output directory.
        #[arg(long)]
        snapshot: Option<PathBuf>,
        /// Include the bound terms (needs --theta).
        #[arg(long, requires = "theta")]
        bound: bool,
        #[arg(long)]
        theta: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Time fast and reference Sinkhorn iterations; prints CSV.
    BenchEtic {
        #[arg(long, value_delimiter = ',', default_value = "128,256,512,1024")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 20)]
        fast_iters: usize,
        #[arg(long, default_value_t = 2)]
        reference_iters: usize,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the bound terms for a snapshot at a fixed mixing ratio.
    BoundReport {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        snapshot: Option<PathBuf>,
        #[arg(long)]
        theta: f64,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { config, seed } => {
            let cfg = RunConfig::load(&config, seed)?;
            let m = commands::generate(&cfg)?;
            println!(
                "wrote {} and {} to {}",
                m.source.path,
                m.target.path,
                cfg.task_dir.display()
            );
        }
        Command::Train { config, seed } => {
            let cfg = RunConfig::load(&config, seed)?;
            let report = commands::train_cmd(&cfg)?;
            println!(
                "trained {} for {} epochs",
                report.variant.name(),
                report.epochs.len()
            );
            if let Some(acc) = report.final_target_accuracy() {
                println!("final target accuracy: {acc:.4}");
            }
        }
        Command::Evaluate {
            config,
            snapshot,
            bound,
            theta,
            seed,
        } => {
            let cfg = RunConfig::load(&config, seed)?;
            let snapshot = snapshot.unwrap_or_else(|| commands::default_snapshot(&cfg));
            let m = commands::evaluate(&cfg, &snapshot, if bound { theta } else { None })?;
            match m.target_accuracy {
                Some(acc) => println!("target accuracy: {acc:.4}"),
                None => println!(
                    "source accuracy: {:.4} (target unlabeled)",
                    m.source_accuracy
                ),
            }
        }
        Command::BenchEtic {
            sizes,
            repeats,
            fast_iters,
            reference_iters,
            output,
            seed,
        } => {
            let opts = BenchOptions {
                sizes,
                repeats,
                fast_iters,
                reference_iters,
                seed,
            };
            let result = bench::run(&opts)?;
            let prov = json!({
                "tool": "pda",
                "version": env!("CARGO_PKG_VERSION"),
                "command": "bench-etic",
                "seed": seed,
                "sizes": opts.sizes,
            });
            let csv = bench::to_csv(&prov, &opts, &result);
            match output {
                Some(path) => std::fs::write(&path, csv).map_err(CliError::io(&path))?,
                None => print!("{csv}"),
            }
        }
        Command::BoundReport {
            config,
            snapshot,
            theta,
            seed,
        } => {
            let cfg = RunConfig::load(&config, seed)?;
            let snapshot = snapshot.unwrap_or_else(|| commands::default_snapshot(&cfg));
            let out = commands::bound_cmd(&cfg, &snapshot, theta)?;
            println!("slack: {}", out["bound"]["slack"]);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
