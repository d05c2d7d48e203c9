//! `diffrecon`: phantom generation, count simulation, score pretraining,
//! reconstruction and metrics for the desk-scale PET laboratory.

mod commands;
mod config;
mod manifest;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "diffrecon",
    version,
    about = "Desk-scale PET reconstruction with diffusion priors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Realizations processed in parallel. DIFFRECON_THREADS caps the pool.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Overrides the configured master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Mlem,
    Mapem,
    Dps,
    Ddip,
    DdimSample,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Mlem => "mlem",
            Method::Mapem => "mapem",
            Method::Dps => "dps",
            Method::Ddip => "ddip",
            Method::DdimSample => "ddim-sample",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Training phantoms and the test phantom.
    Phantom(#[command(flatten)] Common),
    /// Noisy sinogram realizations of the test phantom.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        phantom: PathBuf,
    },
    /// Pretrains the score network on the training phantoms.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        phantom: PathBuf,
    },
    /// Reconstructs every realization (or prior samples for ddim-sample).
    Recon {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        method: Method,
        /// Phantom directory; supplies the anatomical prior.
        #[arg(long)]
        phantom: PathBuf,
        /// Simulation directory; unused by ddim-sample.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Network checkpoint; required by dps, ddip and ddim-sample.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated realization indices; all when omitted.
        #[arg(long, value_delimiter = ',')]
        realizations: Option<Vec<usize>>,
    },
    /// Metrics, ensemble maps and sweep curves over reconstruction runs.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        phantom: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, num_args = 0..)]
        runs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Phantom(c) => commands::phantom(&c),
        Command::Simulate { common, phantom } => commands::simulate(&common, &phantom),
        Command::Train { common, phantom } => commands::train(&common, &phantom),
        Command::Recon {
            common,
            method,
            phantom,
            data,
            checkpoint,
            realizations,
        } => commands::recon(
            &common,
            method,
            &phantom,
            data.as_deref(),
            checkpoint.as_deref(),
            realizations,
        ),
        Command::Metrics {
            common,
            phantom,
            data,
            runs,
        } => commands::metrics(&common, &phantom, &data, &runs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
