//! The five subcommands and the artifacts they write.

use std::path::{Path, PathBuf};

use nsmgp::infer::{derive_corr_sd_grid, hmc_sample, map_fit, MapFit, StopReason};
use nsmgp::model::tri_pairs;
use nsmgp::predict::{lpd, predict, rmse};
use nsmgp::synth::{generate, LatentTruth, SynthConfig};
use nsmgp::{Episode, ModelKind, ModelParams, PriorSpec, Structure};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io::{fmt_f64, ingest_csv, write_csv, write_episode_csv};

pub const SCHEMA_VERSION: u32 = 1;

/// Points in the posterior curve grid written by `hmc`.
pub const CURVE_GRID: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Fit,
    Hmc,
    Predict,
    Synth,
    Eval,
}

/// Header fields shared by every artifact.
#[derive(Debug, Clone, Serialize)]
pub struct Meta {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub model_kind: String,
}

impl Meta {
    fn new(cfg: &RunConfig, model_kind: &str) -> Self {
        Meta {
            schema_version: SCHEMA_VERSION,
            config_hash: cfg.hash(),
            seed: cfg.run.seed,
            model_kind: model_kind.to_string(),
        }
    }

    /// The same fields as a CSV comment line.
    fn comments(&self) -> Vec<String> {
        vec![format!(
            "schema_version={} config_hash={} seed={} model_kind={}",
            self.schema_version, self.config_hash, self.seed, self.model_kind
        )]
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum CoregJson {
    Matrix(Vec<Vec<f64>>),
    PerTime(Vec<Vec<Vec<f64>>>),
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamsArtifact {
    #[serde(flatten)]
    pub meta: Meta,
    pub episode_id: String,
    pub channels: Vec<String>,
    pub noise_var: f64,
    /// Lower-triangular factor, or one per timestamp for GNMGP.
    pub coreg: CoregJson,
    /// One value for SMGP, one per timestamp otherwise.
    pub loglen: Vec<f64>,
    /// Log amplitude for SMGP, log sd per timestamp for NMGP.
    pub logsd: Option<Vec<f64>>,
    pub times: Vec<f64>,
    pub prior: PriorSpec,
    pub log_post: f64,
    pub stop: StopReason,
    pub restart: usize,
    pub iterations: usize,
}

fn matrix_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn params_artifact(meta: &Meta, ep: &Episode, fit: &MapFit, prior: &PriorSpec) -> ParamsArtifact {
    let p = &fit.params;
    let (coreg, loglen, logsd) = match &p.structure {
        Structure::Smgp { coreg, loglen, logamp } => (CoregJson::Matrix(matrix_rows(coreg)), vec![*loglen], Some(vec![*logamp])),
        Structure::Nmgp { coreg, loglen, logsd } => {
            (CoregJson::Matrix(matrix_rows(coreg)), loglen.values.clone(), Some(logsd.values.clone()))
        }
        Structure::Gnmgp { loglen, .. } => (
            CoregJson::PerTime((0..p.n()).map(|n| matrix_rows(&p.coreg_at_index(n))).collect()),
            loglen.values.clone(),
            None,
        ),
    };
    ParamsArtifact {
        meta: meta.clone(),
        episode_id: ep.id.clone(),
        channels: ep.channels.clone(),
        noise_var: p.noise_var,
        coreg,
        loglen,
        logsd,
        times: p.times.clone(),
        prior: *prior,
        log_post: fit.log_post,
        stop: fit.stop,
        restart: fit.restart,
        iterations: fit.trace.last().map_or(0, |t| t.iter),
    }
}

/// Named segments of the unconstrained parameter vector, in order.
#[derive(Debug, Clone, Serialize)]
pub struct Block {
    pub name: String,
    pub len: usize,
}

pub fn param_layout(p: &ModelParams) -> Vec<Block> {
    let b = |name: &str, len: usize| Block { name: name.to_string(), len };
    let n = p.n();
    let m = p.m();
    let mut out = vec![b("log_noise_var", 1)];
    match &p.structure {
        Structure::Smgp { .. } => {
            out.push(b("coreg_lower", m * (m + 1) / 2));
            out.push(b("loglen", 1));
            out.push(b("logamp", 1));
        }
        Structure::Nmgp { .. } => {
            out.push(b("coreg_lower", m * (m + 1) / 2));
            out.push(b("loglen", n));
            out.push(b("logsd", n));
        }
        Structure::Gnmgp { .. } => {
            out.extend(tri_pairs(m).into_iter().map(|(i, j)| b(&format!("coreg_{i}_{j}"), n)));
            out.push(b("loglen", n));
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleJson {
    pub log_post: f64,
    pub accepted: bool,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SamplesArtifact {
    #[serde(flatten)]
    pub meta: Meta,
    pub episode_id: String,
    pub step_size: f64,
    pub n_leapfrog: usize,
    pub n_burnin: usize,
    pub acceptance_rate: f64,
    pub divergent: usize,
    pub layout: Vec<Block>,
    pub samples: Vec<SampleJson>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PredictSummary {
    #[serde(flatten)]
    pub meta: Meta,
    pub episode_id: String,
    pub n_train: usize,
    pub n_holdout: usize,
    pub rmse: f64,
    pub lpd: f64,
    pub log_post: f64,
    pub stop: StopReason,
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthEntry {
    pub episode_id: String,
    pub seed: u64,
    pub n_points: usize,
    pub episode_file: String,
    pub truth_file: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthManifest {
    #[serde(flatten)]
    pub meta: Meta,
    pub synth: SynthConfig,
    pub episodes: Vec<SynthEntry>,
}

/// Hold-out scores of one model on one episode; `None` when the model
/// failed numerically.
#[derive(Debug, Clone, Serialize)]
pub struct EpisodeScore {
    pub model: ModelKind,
    pub rmse: Option<f64>,
    pub lpd: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpisodeResult {
    #[serde(flatten)]
    pub meta: Meta,
    pub episode_id: String,
    pub scores: Vec<EpisodeScore>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelSummary {
    pub rmse_mean: f64,
    pub rmse_sd: f64,
    pub lpd_mean: f64,
    pub lpd_sd: f64,
    pub n_episodes: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelTable {
    #[serde(rename = "SMGP")]
    pub smgp: ModelSummary,
    #[serde(rename = "NMGP")]
    pub nmgp: ModelSummary,
    #[serde(rename = "GNMGP")]
    pub gnmgp: ModelSummary,
}

impl ModelTable {
    pub fn get(&self, kind: ModelKind) -> &ModelSummary {
        match kind {
            ModelKind::Smgp => &self.smgp,
            ModelKind::Nmgp => &self.nmgp,
            ModelKind::Gnmgp => &self.gnmgp,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    #[serde(flatten)]
    pub meta: Meta,
    pub holdout: usize,
    pub n_episodes: usize,
    pub models: ModelTable,
    /// Model kinds by increasing mean RMSE.
    pub ranking_by_rmse: Vec<ModelKind>,
}

/// Runs `cmd` and returns the paths written.
pub fn run(cmd: Command, cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    match cmd {
        Command::Fit => cmd_fit(cfg),
        Command::Hmc => cmd_hmc(cfg),
        Command::Predict => cmd_predict(cfg),
        Command::Synth => cmd_synth(cfg),
        Command::Eval => cmd_eval(cfg),
    }
}

fn output_dir(cfg: &RunConfig) -> CliResult<&Path> {
    let out = cfg.run.output.as_path();
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// MAP fit on the whole episode: `params.json` and `trace.csv`.
pub fn cmd_fit(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let ep = ingest_csv(cfg.input()?)?;
    let out = output_dir(cfg)?;
    let meta = Meta::new(cfg, cfg.run.model.name());
    let fit = map_fit(&ep, cfg.run.model, &cfg.prior, &cfg.map)?;
    let params_path = out.join("params.json");
    write_json(&params_path, &params_artifact(&meta, &ep, &fit, &cfg.prior))?;
    let rows: Vec<Vec<String>> = fit
        .trace
        .iter()
        .map(|t| vec![t.iter.to_string(), fmt_f64(t.log_post), fmt_f64(t.grad_inf), fmt_f64(t.step)])
        .collect();
    let trace_path = out.join("trace.csv");
    write_csv(&trace_path, &meta.comments(), &strings(&["iter", "log_post", "grad_inf", "step"]), &rows)?;
    Ok(vec![params_path, trace_path])
}

/// `q` evenly spaced points from `a` to `b` inclusive.
pub fn linspace(a: f64, b: f64, q: usize) -> Vec<f64> {
    if q == 1 {
        return vec![a];
    }
    (0..q).map(|i| a + (b - a) * i as f64 / (q - 1) as f64).collect()
}

fn curve_header(channels: &[String]) -> Vec<String> {
    let mut h = strings(&["sample", "t"]);
    h.extend(channels.iter().map(|c| format!("sd_{c}")));
    for (i, j) in tri_pairs(channels.len()).into_iter().filter(|(i, j)| i != j) {
        h.push(format!("corr_{}_{}", channels[i], channels[j]));
    }
    h
}

/// MAP fit, then HMC from the mode: `samples.json` and `curves.csv`.
pub fn cmd_hmc(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let ep = ingest_csv(cfg.input()?)?;
    let out = output_dir(cfg)?;
    let meta = Meta::new(cfg, cfg.run.model.name());
    let fit = map_fit(&ep, cfg.run.model, &cfg.prior, &cfg.map)?;
    let (samples, chain) = hmc_sample(&ep, cfg.run.model, &cfg.prior, &cfg.hmc, &fit.params)?;
    let grid = linspace(ep.times()[0], ep.times()[ep.n() - 1], CURVE_GRID);
    let pairs: Vec<(usize, usize)> = tri_pairs(ep.m()).into_iter().filter(|(i, j)| i != j).collect();
    let mut rows = Vec::with_capacity(samples.len() * grid.len());
    for (s, sample) in samples.iter().enumerate() {
        for (t, cs) in grid.iter().zip(derive_corr_sd_grid(&sample.params, &grid)?) {
            let mut row = vec![s.to_string(), fmt_f64(*t)];
            row.extend(cs.sd.iter().map(|v| fmt_f64(*v)));
            row.extend(pairs.iter().map(|&(i, j)| fmt_f64(cs.corr[(i, j)])));
            rows.push(row);
        }
    }
    let curves_path = out.join("curves.csv");
    write_csv(&curves_path, &meta.comments(), &curve_header(&ep.channels), &rows)?;
    let archive = SamplesArtifact {
        meta,
        episode_id: ep.id.clone(),
        step_size: cfg.hmc.step_size,
        n_leapfrog: cfg.hmc.n_leapfrog,
        n_burnin: cfg.hmc.n_burnin,
        acceptance_rate: chain.acceptance_rate,
        divergent: chain.divergent,
        layout: param_layout(&fit.params),
        samples: samples
            .iter()
            .map(|s| SampleJson { log_post: s.log_post, accepted: s.accepted, theta: s.params.to_vec() })
            .collect(),
    };
    let samples_path = out.join("samples.json");
    write_json(&samples_path, &archive)?;
    Ok(vec![samples_path, curves_path])
}

/// Fits on all but the last `holdout` rows and scores the rest:
/// `predictions.csv` and `summary.json`.
pub fn cmd_predict(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let ep = ingest_csv(cfg.input()?)?;
    let (train, hold) = ep.split_holdout(cfg.run.holdout)?;
    let out = output_dir(cfg)?;
    let meta = Meta::new(cfg, cfg.run.model.name());
    let fit = map_fit(&train, cfg.run.model, &cfg.prior, &cfg.map)?;
    let pred = predict(&fit.params, &train, hold.times())?;
    let mut rows = Vec::new();
    for q in 0..hold.n() {
        for (m, ch) in hold.channels.iter().enumerate() {
            let observed = if hold.is_present(q, m) { fmt_f64(hold.obs()[(q, m)]) } else { String::new() };
            rows.push(vec![
                fmt_f64(hold.times()[q]),
                ch.clone(),
                observed,
                fmt_f64(pred.mean_at(q, m)),
                fmt_f64(pred.sd_at(q, m)),
                fmt_f64(pred.obs_sd_at(q, m)),
            ]);
        }
    }
    let pred_path = out.join("predictions.csv");
    let header = strings(&["time", "channel", "observed", "mean", "sd", "obs_sd"]);
    write_csv(&pred_path, &meta.comments(), &header, &rows)?;
    let summary = PredictSummary {
        meta,
        episode_id: ep.id.clone(),
        n_train: train.n(),
        n_holdout: hold.n(),
        rmse: rmse(&pred, &hold)?,
        lpd: lpd(&pred, &hold)?,
        log_post: fit.log_post,
        stop: fit.stop,
    };
    let summary_path = out.join("summary.json");
    write_json(&summary_path, &summary)?;
    Ok(vec![pred_path, summary_path])
}

fn write_truth_csv(path: &Path, ep: &Episode, truth: &LatentTruth, meta: &Meta) -> CliResult<()> {
    let mut header = strings(&["time", "loglen"]);
    header.extend(ep.channels.iter().map(|c| format!("sd_{c}")));
    let pairs: Vec<(usize, usize)> = tri_pairs(ep.m()).into_iter().filter(|(i, j)| i != j).collect();
    header.extend(pairs.iter().map(|&(i, j)| format!("corr_{}_{}", ep.channels[i], ep.channels[j])));
    let coreg = truth.coreg();
    let rows: Vec<Vec<String>> = (0..truth.times.len())
        .map(|n| {
            let b = &coreg[n] * coreg[n].transpose();
            let mut row = vec![fmt_f64(truth.times[n]), fmt_f64(truth.loglen.values[n])];
            row.extend(truth.logsd.iter().map(|p| fmt_f64(p.values[n].exp())));
            row.extend(pairs.iter().map(|&(i, j)| fmt_f64(b[(i, j)] / (b[(i, i)] * b[(j, j)]).sqrt())));
            row
        })
        .collect();
    write_csv(path, &meta.comments(), &header, &rows)
}

/// Generates `n_episodes` episodes with seeds `seed, seed+1, …`:
/// `episodes/*.csv`, `truth/*.csv` and `manifest.json`.
pub fn cmd_synth(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let out = output_dir(cfg)?;
    let meta = Meta::new(cfg, ModelKind::Gnmgp.name());
    let ep_dir = out.join("episodes");
    let truth_dir = out.join("truth");
    for d in [&ep_dir, &truth_dir] {
        std::fs::create_dir_all(d).map_err(|e| CliError::io(d, e))?;
    }
    let mut written = Vec::new();
    let mut entries = Vec::new();
    for i in 0..cfg.run.n_episodes {
        let seed = cfg.run.seed.wrapping_add(i as u64);
        let (ep, truth) = generate(&SynthConfig { seed, ..cfg.synth })?;
        let file = format!("{}.csv", ep.id);
        let ep_path = ep_dir.join(&file);
        let truth_path = truth_dir.join(&file);
        write_episode_csv(&ep_path, &ep, &meta.comments())?;
        write_truth_csv(&truth_path, &ep, &truth, &meta)?;
        entries.push(SynthEntry {
            episode_id: ep.id.clone(),
            seed,
            n_points: ep.n(),
            episode_file: format!("episodes/{file}"),
            truth_file: format!("truth/{file}"),
        });
        written.push(ep_path);
        written.push(truth_path);
    }
    let manifest_path = out.join("manifest.json");
    write_json(&manifest_path, &SynthManifest { meta, synth: cfg.synth, episodes: entries })?;
    written.push(manifest_path);
    Ok(written)
}

fn score_episode(ep: &Episode, kind: ModelKind, cfg: &RunConfig) -> nsmgp::Result<(f64, f64)> {
    let (train, hold) = ep.split_holdout(cfg.run.holdout)?;
    let fit = map_fit(&train, kind, &cfg.prior, &cfg.map)?;
    let pred = predict(&fit.params, &train, hold.times())?;
    Ok((rmse(&pred, &hold)?, lpd(&pred, &hold)?))
}

fn is_numerical(e: &nsmgp::Error) -> bool {
    CliError::Core(e.clone()).exit_code() == 4
}

/// Mean and sample sd; sd is 0 for fewer than two values.
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn summarize(results: &[EpisodeResult], kind: ModelKind) -> ModelSummary {
    let scores: Vec<&EpisodeScore> =
        results.iter().flat_map(|r| r.scores.iter().filter(move |s| s.model == kind)).collect();
    let ok: Vec<(f64, f64)> = scores.iter().filter_map(|s| Some((s.rmse?, s.lpd?))).collect();
    let (rmse_mean, rmse_sd) = mean_sd(&ok.iter().map(|s| s.0).collect::<Vec<_>>());
    let (lpd_mean, lpd_sd) = mean_sd(&ok.iter().map(|s| s.1).collect::<Vec<_>>());
    ModelSummary { rmse_mean, rmse_sd, lpd_mean, lpd_sd, n_episodes: ok.len(), n_failed: scores.len() - ok.len() }
}

/// Hold-out protocol for every `*.csv` in the input directory and every
/// model kind: `per_episode/*.json`, `per_episode.csv` and `summary.json`.
///
/// Numerical failures of one model on one episode are recorded and
/// excluded from that model's statistics.
pub fn cmd_eval(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let dir = cfg.input()?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::EmptyFile(format!("no .csv episodes in {}", dir.display())));
    }
    let episodes = files.iter().map(|f| ingest_csv(f)).collect::<CliResult<Vec<_>>>()?;
    let out = output_dir(cfg)?;
    let ep_dir = out.join("per_episode");
    std::fs::create_dir_all(&ep_dir).map_err(|e| CliError::io(&ep_dir, e))?;
    let all_kinds = ModelKind::ALL.map(|k| k.name()).join("+");
    let meta = Meta::new(cfg, &all_kinds);
    let results: Vec<EpisodeResult> = episodes
        .par_iter()
        .map(|ep| {
            let scores = ModelKind::ALL
                .iter()
                .map(|&kind| match score_episode(ep, kind, cfg) {
                    Ok((r, l)) => Ok(EpisodeScore { model: kind, rmse: Some(r), lpd: Some(l), error: None }),
                    Err(e) if is_numerical(&e) => {
                        Ok(EpisodeScore { model: kind, rmse: None, lpd: None, error: Some(e.to_string()) })
                    }
                    Err(e) => Err(CliError::Core(e)),
                })
                .collect::<CliResult<Vec<_>>>()?;
            Ok(EpisodeResult { meta: meta.clone(), episode_id: ep.id.clone(), scores })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut written = Vec::new();
    let mut rows = Vec::new();
    for r in &results {
        let path = ep_dir.join(format!("{}.json", r.episode_id));
        write_json(&path, r)?;
        written.push(path);
        for s in &r.scores {
            let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
            rows.push(vec![
                r.episode_id.clone(),
                s.model.name().to_string(),
                opt(s.rmse),
                opt(s.lpd),
                s.error.clone().unwrap_or_default(),
            ]);
        }
    }
    let csv_path = out.join("per_episode.csv");
    write_csv(&csv_path, &meta.comments(), &strings(&["episode_id", "model", "rmse", "lpd", "error"]), &rows)?;
    written.push(csv_path);
    let models = ModelTable {
        smgp: summarize(&results, ModelKind::Smgp),
        nmgp: summarize(&results, ModelKind::Nmgp),
        gnmgp: summarize(&results, ModelKind::Gnmgp),
    };
    let mut ranking = ModelKind::ALL.to_vec();
    ranking.sort_by(|a, b| models.get(*a).rmse_mean.total_cmp(&models.get(*b).rmse_mean));
    let summary = EvalSummary {
        meta,
        holdout: cfg.run.holdout,
        n_episodes: results.len(),
        models,
        ranking_by_rmse: ranking,
    };
    let summary_path = out.join("summary.json");
    write_json(&summary_path, &summary)?;
    written.push(summary_path);
    Ok(written)
}
