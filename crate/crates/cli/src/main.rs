mod chart;
mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "chanprune", version, about = "Channel-width search with a parallel-subnet supernet")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train the supernet and stream loss records.
    TrainSupernet {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to `[paths] out` of the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `recipe.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a saved epoch checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Estimate the FLOPs-conditioned prior from loss records.
    BuildPrior {
        #[arg(long)]
        records: PathBuf,
        /// Architecture file or `builtin:<name>`.
        #[arg(long)]
        space: String,
        /// inverse-proxy, literal-proxy or frequency.
        #[arg(long, default_value = "inverse-proxy")]
        weighting: String,
        /// FLOPs per bucket (`250k`) or a percentage of the maximum (`5%`);
        /// defaults to 5%.
        #[arg(long)]
        bucket_width: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evolutionary width search under a FLOPs target.
    Search(commands::SearchArgs),
    /// Train one width configuration from scratch and report accuracy.
    Retrain {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the config's space.
        #[arg(long)]
        space: Option<String>,
        /// Widths such as `16-24-32`.
        #[arg(long)]
        widths: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Report FLOPs and parameters of a configuration.
    Flops {
        #[arg(long)]
        space: String,
        /// Defaults to the largest configuration.
        #[arg(long)]
        widths: Option<String>,
        #[arg(long)]
        json: bool,
        /// Also write `flops.json` and a manifest here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer keep ratios of the configurations in a results table.
    ExportWidths {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        space: String,
        #[arg(long, value_enum, default_value = "csv")]
        format: ExportFormat,
        /// Only the first N rows.
        #[arg(long)]
        top: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportFormat {
    Csv,
    Chart,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainSupernet {
            config,
            out,
            seed,
            resume,
        } => commands::train_supernet(&config, out, seed, resume),
        Command::BuildPrior {
            records,
            space,
            weighting,
            bucket_width,
            out,
        } => commands::build_prior(&records, &space, &weighting, bucket_width.as_deref(), &out),
        Command::Search(args) => commands::search(&args),
        Command::Retrain {
            config,
            space,
            widths,
            out,
            seed,
        } => commands::retrain(&config, space.as_deref(), &widths, &out, seed),
        Command::Flops {
            space,
            widths,
            json,
            out,
        } => commands::flops(&space, widths.as_deref(), json, out),
        Command::ExportWidths {
            results,
            space,
            format,
            top,
            out,
        } => commands::export_widths(&results, &space, matches!(format, ExportFormat::Chart), top, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
