use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use patchmoe_cli::commands::{self, EvalOptions};
use patchmoe_cli::{exit, CliResult};

/// Routed low-rank expert adapters for zero-shot anomaly segmentation on
/// synthetic textures.
#[derive(Parser)]
#[command(name = "patchmoe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the seen classes and write a checkpoint, its digest and the loss trace.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a dataset and write per-class metrics.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Average pixel metrics over images instead of pooling pixels per class.
        #[arg(long)]
        per_image_pixel_metrics: bool,
        /// Also write anomaly maps as PGM files.
        #[arg(long)]
        export_maps: bool,
        #[arg(long, hide = true)]
        oracle_scores: bool,
    },
    /// Compare analytic gradients against central differences.
    Gradcheck {
        #[arg(long, default_value_t = commands::DEFAULT_TOL)]
        tol: f64,
        #[arg(long, hide = true, default_value_t = 1.0)]
        inject_grad_scale: f64,
    },
    /// Write expert similarity, utilization and per-sample anomaly maps.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset file.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "eval")]
        split: String,
    },
}

fn run(cli: Cli) -> CliResult<String> {
    let seed = commands::parse_seed_env(std::env::var("MOEC_SEED").ok().as_deref())?;
    match cli.command {
        Command::Train { config, out } => commands::train(&config, &out, seed),
        Command::Eval {
            ckpt,
            data,
            out,
            per_image_pixel_metrics,
            export_maps,
            oracle_scores,
        } => {
            let opts = EvalOptions {
                per_image_pixel_metrics,
                export_maps,
                oracle_scores,
            };
            commands::eval(&ckpt, &data, &out, opts).map(|(_, csv)| csv)
        }
        Command::Gradcheck { tol, inject_grad_scale } => commands::gradcheck(tol, inject_grad_scale).map(|(_, t)| t),
        Command::Inspect { ckpt, data, out } => commands::inspect(&ckpt, &data, &out),
        Command::GenData { config, out, split } => commands::gen_data(&config, &out, &split, seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::from(exit::OK as u8)
        }
        Err(e) => {
            eprintln!("error: {}", e.message.trim_end());
            ExitCode::from(e.code as u8)
        }
    }
}
