//! Command-line entry point.

use clap::{Parser, Subcommand};
use evae::cli;
use evae::config::RunConfig;
use std::path::PathBuf;
use std::sync::OnceLock;

fn config_key_help() -> &'static str {
    static HELP: OnceLock<String> = OnceLock::new();
    HELP.get_or_init(|| {
        let mut s = String::from("Config keys (override with --KEY VALUE):\n");
        for (k, v) in RunConfig::default().flatten() {
            s.push_str(&format!("  {k} = {v}\n"));
        }
        s
    })
}

#[derive(Parser)]
#[command(
    name = "evae",
    about = "Autoencoder with a rectified-flow diffusion decoder: train, reconstruct, evaluate, plot",
    version,
    term_width = 100
)]
struct Cli {
    #[command(subcommand)]
    command: Commands,
}

#[derive(Subcommand)]
enum Commands {
    /// Train a model from a config file (checkpoints + JSON-lines metrics)
    #[command(after_help = config_key_help())]
    Train {
        /// TOML config file
        #[arg(long)]
        config: PathBuf,
        /// Run directory (default: $EVAE_OUT_ROOT/run-<digest>)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the run directory's checkpoint
        #[arg(long)]
        resume: bool,
        /// Dotted config overrides: --section.key VALUE
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Reconstruct images through encode + few-step decode
    Reconstruct {
        /// Run directory holding config.toml and checkpoint/
        #[arg(long)]
        run: PathBuf,
        /// Folder of input images (default: the configured eval corpus)
        #[arg(long)]
        input: Option<PathBuf>,
        /// Euler steps N
        #[arg(long, default_value_t = 3)]
        steps: usize,
        /// Inference grid: rholog | uniform
        #[arg(long, default_value = "rholog")]
        grid: String,
        /// Noise seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (default: <run>/reconstructions)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate reconstruction quality and emit an EvalReport JSON
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Evaluation resolution (default: training resolution)
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        /// rholog | uniform (default: from config)
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Evaluation corpus size
        #[arg(long)]
        count: Option<usize>,
        /// Write the report JSON here
        #[arg(long)]
        out: Option<PathBuf>,
        /// Append the report as one JSON line (for sweep plots)
        #[arg(long)]
        append: Option<PathBuf>,
    },
    /// Render SVG + PNG figures from a JSON-lines eval stream
    Plot {
        /// JSON-lines input
        #[arg(long)]
        input: PathBuf,
        /// nfe_sweep | gamma_sweep | ladder
        #[arg(long)]
        kind: String,
        /// Output path prefix (.svg and .png are appended)
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match cli.command {
        Commands::Train {
            config,
            out,
            resume,
            overrides,
        } => cli::cmd_train(&config, &overrides, out, resume),
        Commands::Reconstruct {
            run,
            input,
            steps,
            grid,
            seed,
            out,
        } => cli::cmd_reconstruct(&run, input.as_deref(), steps, &grid, seed, out),
        Commands::Eval {
            run,
            resolution,
            steps,
            grid,
            seed,
            count,
            out,
            append,
        } => cli::cmd_eval(
            &run,
            resolution,
            steps,
            grid.as_deref(),
            seed,
            count,
            out,
            append,
        ),
        Commands::Plot { input, kind, out } => cli::cmd_plot(&input, &kind, &out),
    };
    std::process::exit(code);
}
