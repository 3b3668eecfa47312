//! `hedunet` command-line front end.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors
//! (bad flags, unreadable or invalid configs, refusing to overwrite).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Environment variable that overrides the global seed when `--seed` is absent.
pub const SEED_ENV: &str = "HEDUNET_SEED";

#[derive(Parser)]
#[command(name = "hedunet", version, about = "Joint sea-land segmentation and coastline detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct SeedArg {
    /// Overrides the global, model and training seeds.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train and val scenes plus a manifest.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Train a model and write a checkpoint plus a per-epoch CSV log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Log path; defaults to the checkpoint path with a `.csv` extension.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Overwrite an existing checkpoint.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Score a checkpoint, or saved prediction rasters, on a dataset split.
    Eval {
        #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
        ckpt: Option<PathBuf>,
        /// Directory of `<id>_seg.ras` / `<id>_edge.ras` probability rasters.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Mean F1 per edge threshold.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Write probability and attention rasters with PGM previews.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        /// Also write one raster per side output.
        #[arg(long)]
        sides: bool,
    },
    /// Effective receptive field of one output pixel, plus attention statistics.
    Erf {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
        /// Output pixel as `row,col`; defaults to the tile centre.
        #[arg(long, value_parser = parse_center)]
        center: Option<(usize, usize)>,
        #[arg(long, value_enum)]
        head: Option<HeadArg>,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Run a classical baseline on a dataset split.
    Baseline {
        #[arg(value_enum)]
        kind: BaselineArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Train and evaluate every cell of an ablation matrix.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Seg,
    Edge,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Gmm,
    Sobel,
}

fn parse_center(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected row,col")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| e.to_string());
    Ok((p(a)?, p(b)?))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
