//! `g2recon` command-line front end.
//!
//! Exit status: 0 on success, 1 on usage or I/O errors, 2 when a
//! reconstruction stops without converging (its outputs are still written).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use g2recon::ScanMode;

#[derive(Debug, Parser)]
#[command(
    name = "g2recon",
    version,
    about = "Emitter counting from g2(0) raster scans"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// JSON run configuration; absent keys take their defaults
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Base random seed, overriding the config file
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// How g2(0) maps are produced, overriding the config file
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<ScanMode>,
    /// Output file or directory (per command)
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<ScanMode, String> {
    s.parse().map_err(|e: g2recon::Error| e.to_string())
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate merged emitters and write the correlation curve (--out is a directory)
    G2curve {
        /// Number of identical emitters merged into one record
        #[arg(long, default_value_t = 1)]
        emitters: u32,
        /// Comma-separated bin widths in ns for a g2(0)-versus-bin-width table
        #[arg(long, value_delimiter = ',', value_name = "NS,...")]
        binwidth_sweep: Vec<f64>,
    },
    /// Write a random occupancy grid as JSON and print its emitter total
    Generate {
        #[arg(long, default_value_t = 20)]
        width: usize,
        #[arg(long, default_value_t = 20)]
        height: usize,
        #[arg(long, default_value_t = 200.0)]
        pitch_nm: f64,
        /// Number of occupied pixels
        #[arg(long, default_value_t = 50)]
        nonzero: usize,
        /// Largest per-pixel emitter count
        #[arg(long, default_value_t = 4)]
        n_max: u32,
    },
    /// Raster-scan an occupancy grid into a g2(0) map CSV with a JSON sidecar
    Scan {
        grid: PathBuf,
        /// Also write the intensity map here
        #[arg(long, value_name = "PATH")]
        intensity: Option<PathBuf>,
    },
    /// Invert a g2(0) map into emitter counts (--out is a directory)
    Reconstruct {
        map: PathBuf,
        /// Ground-truth grid to score the reconstruction against
        #[arg(long, value_name = "PATH")]
        truth: Option<PathBuf>,
    },
    /// Reconstruction error versus n_max over random scenes
    Benchmark {
        /// Benchmark spec JSON; defaults to the full sweep
        spec: Option<PathBuf>,
        /// Override the number of realizations per point
        #[arg(long)]
        realizations: Option<usize>,
    },
    /// Coarse scan, ROI selection and fine scans (--out is a directory)
    Pipeline {
        field: PathBuf,
        /// JSON with `coarse` and `fine` resolution levels
        #[arg(long, value_name = "PATH")]
        levels: Option<PathBuf>,
        /// Fine scans to run; 0 stops after the coarse stage
        #[arg(long, default_value_t = 1)]
        max_rois: usize,
        /// Coarse occupancy a tile needs to become an ROI
        #[arg(long, default_value_t = 1)]
        criterion: u32,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
