//! Run configuration files.
//!
//! ```toml
//! [run]
//! model = "GNMGP"      # SMGP | NMGP | GNMGP
//! seed = 0
//! holdout = 5
//! n_episodes = 1       # synth only
//! input = "episode.csv" # file, or directory for eval
//! output = "out"
//!
//! [prior]   # PriorSpec fields
//! [map]     # MapConfig fields
//! [hmc]     # HmcConfig fields; seed comes from [run]
//! [synth]   # SynthConfig fields; seed comes from [run]
//! ```
//!
//! Relative paths are resolved against the config file's directory.

use std::path::{Path, PathBuf};

use nsmgp::infer::{HmcConfig, MapConfig};
use nsmgp::synth::SynthConfig;
use nsmgp::{ModelKind, PriorSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_model")]
    pub model: ModelKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_holdout")]
    pub holdout: usize,
    #[serde(default = "default_n_episodes")]
    pub n_episodes: usize,
    #[serde(default)]
    pub input: Option<PathBuf>,
    pub output: PathBuf,
}

fn default_model() -> ModelKind {
    ModelKind::Gnmgp
}

fn default_holdout() -> usize {
    5
}

fn default_n_episodes() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    #[serde(default)]
    pub prior: PriorSpec,
    #[serde(default)]
    pub map: MapConfig,
    #[serde(default)]
    pub hmc: HmcConfig,
    #[serde(default)]
    pub synth: SynthConfig,
}

/// The fields that determine results; `output` is excluded.
#[derive(Serialize)]
struct HashView<'a> {
    model: ModelKind,
    seed: u64,
    holdout: usize,
    n_episodes: usize,
    input: Option<String>,
    prior: &'a PriorSpec,
    map: &'a MapConfig,
    hmc: &'a HmcConfig,
    synth: &'a SynthConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.hmc.seed = cfg.run.seed;
        cfg.synth.seed = cfg.run.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.run.output = base.join(&cfg.run.output);
        cfg.run.input = cfg.run.input.map(|p| base.join(p));
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.run.holdout == 0 {
            return Err(CliError::Config("run.holdout must be >= 1".into()));
        }
        if self.run.n_episodes == 0 {
            return Err(CliError::Config("run.n_episodes must be >= 1".into()));
        }
        let check = |r: nsmgp::Result<()>| r.map_err(|e| CliError::Config(e.to_string()));
        check(self.prior.validate())?;
        check(self.map.validate())?;
        check(self.hmc.validate())?;
        check(self.synth.validate())
    }

    pub fn input(&self) -> CliResult<&Path> {
        self.run.input.as_deref().ok_or_else(|| CliError::Config("run.input is required".into()))
    }

    /// Hex SHA-256 of the canonical JSON form of the result-determining
    /// fields, with input given by file name only.
    pub fn hash(&self) -> String {
        let view = HashView {
            model: self.run.model,
            seed: self.run.seed,
            holdout: self.run.holdout,
            n_episodes: self.run.n_episodes,
            input: self.run.input.as_ref().map(|p| {
                p.file_name().map_or_else(|| p.display().to_string(), |f| f.to_string_lossy().into_owned())
            }),
            prior: &self.prior,
            map: &self.map,
            hmc: &self.hmc,
            synth: &self.synth,
        };
        let json = serde_json::to_string(&view).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
