use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use nsmgp_cli::{run, Command, RunConfig};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    /// MAP fit on a whole episode.
    Fit,
    /// MAP fit followed by HMC sampling.
    Hmc,
    /// Hold-out prediction with RMSE and LPD.
    Predict,
    /// Synthetic episodes with known latent processes.
    Synth,
    /// Hold-out protocol over a directory for all model kinds.
    Eval,
}

#[derive(Debug, Parser)]
#[command(name = "nsmgp", version, about = "Multivariate Gaussian processes for irregular time series")]
struct Args {
    #[arg(value_enum)]
    command: Cmd,
    /// TOML run configuration.
    config: PathBuf,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let cmd = match args.command {
        Cmd::Fit => Command::Fit,
        Cmd::Hmc => Command::Hmc,
        Cmd::Predict => Command::Predict,
        Cmd::Synth => Command::Synth,
        Cmd::Eval => Command::Eval,
    };
    match RunConfig::load(&args.config).and_then(|cfg| run(cmd, &cfg)) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let report = serde_json::to_string(&e.report()).expect("report serializes");
            eprintln!("{report}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
