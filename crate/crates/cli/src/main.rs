//! `dualskip`: inspect, verify, train and evaluate dual-skip segmentation
//! networks.
//!
//! Exit codes: 0 success, 1 I/O error or failed check, 2 usage or
//! configuration error, 3 checkpoint/architecture incompatibility or a
//! parameter count that does not match `--expect`.

mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dualskip_core::{Error, Family, Variant};

pub const EXIT_IO: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_COMPAT: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "dualskip", version, about = "Dual skip connection segmentation networks")]
struct Cli {
    /// Flat `key = value` configuration used by `train` and `eval`.
    #[arg(long, global = true, env = "DUALSKIP_CONFIG")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the layer table and parameter count of an architecture.
    Summarize {
        #[arg(long, value_parser = parse_family)]
        family: Family,
        #[arg(long, default_value_t = 5)]
        depth: usize,
        /// vanilla, L, S, A or scale=<n>[,<m>...]
        #[arg(long, default_value = "vanilla", value_parser = parse_variant)]
        variant: Variant,
        #[arg(long, default_value_t = 64)]
        base_filters: usize,
        /// Height and width of the (square) input used for output shapes.
        #[arg(long, default_value_t = 256)]
        input_size: usize,
        /// Expected total in millions; mismatches beyond ±0.001 fail.
        #[arg(long)]
        expect: Option<f64>,
        /// Only print the total line.
        #[arg(long)]
        brief: bool,
    },
    /// Compare back-propagated gradients with finite differences on a small
    /// depth-3 network.
    Gradcheck {
        #[arg(long, value_parser = parse_family)]
        family: Family,
        #[arg(long, default_value = "A", value_parser = parse_variant)]
        variant: Variant,
        #[arg(long, default_value_t = 4)]
        base_filters: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Cut an images/ + labels/ dataset into aligned square tiles.
    Tile {
        /// Directory with images/ and labels/, or a manifest file.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 256)]
        tile: usize,
        /// Mask value marking the positive class.
        #[arg(long, default_value_t = 255)]
        positive: u8,
    },
    /// Train a network.
    Train {
        /// Override any config key, e.g. `--set learning_rate=1e-3`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_steps: Option<usize>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Report P, R, IoU and F1 for a checkpoint or for stored predictions.
    Eval {
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Directory with images/ and labels/, or a manifest file.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Directory of predicted masks named like the labels.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Write predicted masks (0/255 PNG) into this directory.
        #[arg(long, requires = "checkpoint")]
        write_masks: Option<PathBuf>,
    },
}

fn parse_family(s: &str) -> Result<Family, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Incompatible(_) => EXIT_COMPAT,
            Error::Config(_) | Error::Arch(_) | Error::InputSize { .. } => EXIT_USAGE,
            _ => EXIT_IO,
        };
        Failure::new(code, e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Summarize {
            family,
            depth,
            variant,
            base_filters,
            input_size,
            expect,
            brief,
        } => commands::summarize(family, depth, &variant, base_filters, input_size, expect, brief),
        Command::Gradcheck {
            family,
            variant,
            base_filters,
            size,
            seed,
        } => commands::gradcheck(family, &variant, base_filters, size, seed),
        Command::Tile {
            input,
            output,
            tile,
            positive,
        } => commands::tile(&input, &output, tile, positive),
        Command::Train {
            overrides,
            data,
            out,
            seed,
            max_steps,
            resume,
        } => commands::train(
            cli.config.as_deref(),
            &overrides,
            commands::TrainFlags {
                data,
                out,
                seed,
                max_steps,
                resume,
            },
        ),
        Command::Eval {
            overrides,
            data,
            checkpoint,
            predictions,
            write_masks,
        } => commands::eval(
            cli.config.as_deref(),
            &overrides,
            data,
            checkpoint.as_deref(),
            predictions.as_deref(),
            write_masks.as_deref(),
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
