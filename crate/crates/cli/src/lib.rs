//! Command-line front end for `nsmgp`: episode CSV ingestion, TOML run
//! configuration, and the `fit`, `hmc`, `predict`, `synth` and `eval`
//! commands.
//!
//! Every JSON artifact carries `schema_version`, `config_hash`, `seed` and
//! `model_kind`; CSV artifacts carry the same fields in a leading `#`
//! comment line.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

pub use commands::{run, Command};
pub use config::RunConfig;
pub use error::{CliError, CliResult};
pub use io::{ingest_csv, write_episode_csv};
