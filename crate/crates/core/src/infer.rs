//! MAP estimation, HMC sampling and posterior correlation / sd curves.
//!
//! Both the optimizer and the sampler move in whitened coordinates `z`:
//! every block of the unconstrained vector is mapped as `θ = μ + A·z`,
//! where `A` is the Cholesky factor of that block's prior covariance (the
//! GP prior of a latent process, `√c·I` for constant coregionalization
//! entries, the prior sd for SMGP scalars) and the identity for `log σ²`.
//! The map is linear with constant Jacobian, so the target density is
//! unchanged up to a constant and the prior term becomes `−½‖z‖²`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::kernels::ModelKind;
use crate::latent::{
    init_coreg_windowed, init_loglen_semivariogram, lower_factor, LatentKind, LatentProcess,
    DEFAULT_VARIOGRAM_BINS,
};
use crate::model::{
    log_posterior, log_posterior_and_grad, tri_pairs, Mode, ModelParams, PriorSpec, Structure,
};

/// Settings for [`map_fit`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Stop once the sup-norm of the (whitened) gradient is at most this.
    pub grad_tol: f64,
    /// Half-width of the coregionalization initialization window; `None`
    /// means a tenth of the episode's time span.
    pub window_w: Option<f64>,
    /// Extra runs from perturbed initial length-scales.
    pub restarts: usize,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig { learning_rate: 0.01, max_iters: 500, grad_tol: 1e-3, window_w: None, restarts: 0 }
    }
}

impl MapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParams(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(Error::InvalidParams(format!("grad_tol must be >= 0, got {}", self.grad_tol)));
        }
        if let Some(w) = self.window_w {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::InvalidParams(format!("window_w must be > 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Why an optimization run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIters,
    /// Backtracking could not find a non-decreasing step.
    Stalled,
    /// The gradient became non-finite; the last finite iterate is returned.
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iter: usize,
    pub log_post: f64,
    pub grad_inf: f64,
    /// Step actually taken after backtracking (0 for the initial entry).
    pub step: f64,
}

/// Result of [`map_fit`]: the best run over all restarts.
#[derive(Debug, Clone)]
pub struct MapFit {
    pub params: ModelParams,
    pub log_post: f64,
    /// Entry 0 is the initialization; one entry per accepted step after.
    pub trace: Vec<TraceEntry>,
    pub stop: StopReason,
    /// Index of the winning run (0 is the unperturbed initialization).
    pub restart: usize,
}

enum Block {
    Identity,
    Scale { mean: f64, sd: f64 },
    Chol { mean: f64, lower: DMatrix<f64> },
}

/// Block-diagonal affine map `θ = μ + A·z`.
struct Whitener {
    blocks: Vec<(usize, usize, Block)>,
    dim: usize,
}

impl Whitener {
    fn new(params: &ModelParams, priors: &PriorSpec) -> Result<Self> {
        let n = params.n();
        let times = &params.times;
        let mut blocks = vec![(0, 1, Block::Identity)];
        let mut off = 1;
        let mut push = |len: usize, b: Block, blocks: &mut Vec<(usize, usize, Block)>| {
            blocks.push((off, len, b));
            off += len;
        };
        let chol = |p: &LatentProcess| -> Result<Block> {
            Ok(Block::Chol { mean: p.prior.mean, lower: p.prior.factor(times)?.lower() })
        };
        let c_sd = priors.coreg_var_c.sqrt();
        match &params.structure {
            Structure::Smgp { coreg, .. } => {
                for _ in tri_pairs(coreg.nrows()) {
                    push(1, Block::Scale { mean: 0.0, sd: c_sd }, &mut blocks);
                }
                let (lp, sp) = (priors.loglen_prior, priors.logsd_prior);
                push(1, Block::Scale { mean: lp.mean, sd: lp.amp }, &mut blocks);
                push(1, Block::Scale { mean: sp.mean, sd: sp.amp }, &mut blocks);
            }
            Structure::Nmgp { coreg, loglen, logsd } => {
                for _ in tri_pairs(coreg.nrows()) {
                    push(1, Block::Scale { mean: 0.0, sd: c_sd }, &mut blocks);
                }
                push(n, chol(loglen)?, &mut blocks);
                push(n, chol(logsd)?, &mut blocks);
            }
            Structure::Gnmgp { coreg, loglen } => {
                for p in coreg {
                    push(n, chol(p)?, &mut blocks);
                }
                push(n, chol(loglen)?, &mut blocks);
            }
        }
        Ok(Whitener { blocks, dim: off })
    }

    fn to_theta(&self, z: &[f64]) -> Vec<f64> {
        let mut theta = vec![0.0; self.dim];
        for (off, len, b) in &self.blocks {
            let (zs, ts) = (&z[*off..off + len], &mut theta[*off..off + len]);
            match b {
                Block::Identity => ts.copy_from_slice(zs),
                Block::Scale { mean, sd } => ts[0] = mean + sd * zs[0],
                Block::Chol { mean, lower } => {
                    let v = lower * DVector::from_column_slice(zs);
                    for (t, x) in ts.iter_mut().zip(v.iter()) {
                        *t = mean + x;
                    }
                }
            }
        }
        theta
    }

    fn to_z(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let mut z = vec![0.0; self.dim];
        for (off, len, b) in &self.blocks {
            let (ts, zs) = (&theta[*off..off + len], &mut z[*off..off + len]);
            match b {
                Block::Identity => zs.copy_from_slice(ts),
                Block::Scale { mean, sd } => zs[0] = (ts[0] - mean) / sd,
                Block::Chol { mean, lower } => {
                    let c = DVector::from_iterator(*len, ts.iter().map(|t| t - mean));
                    let v = lower
                        .solve_lower_triangular(&c)
                        .ok_or_else(|| Error::NonFinite("whitening solve".into()))?;
                    zs.copy_from_slice(v.as_slice());
                }
            }
        }
        Ok(z)
    }

    /// `Aᵀ·g`: gradient with respect to `z` from the gradient in `θ`.
    fn pull_back(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (off, len, b) in &self.blocks {
            let (gs, os) = (&g[*off..off + len], &mut out[*off..off + len]);
            match b {
                Block::Identity => os.copy_from_slice(gs),
                Block::Scale { sd, .. } => os[0] = sd * gs[0],
                Block::Chol { lower, .. } => {
                    let v = lower.tr_mul(&DVector::from_column_slice(gs));
                    os.copy_from_slice(v.as_slice());
                }
            }
        }
        out
    }
}

/// Log posterior of a model as a function of whitened coordinates.
struct WhitenedPosterior<'a> {
    template: ModelParams,
    priors: &'a PriorSpec,
    ep: &'a Episode,
    mode: Mode,
    white: Whitener,
}

impl<'a> WhitenedPosterior<'a> {
    fn new(template: ModelParams, priors: &'a PriorSpec, ep: &'a Episode, mode: Mode) -> Result<Self> {
        let white = Whitener::new(&template, priors)?;
        Ok(WhitenedPosterior { template, priors, ep, mode, white })
    }

    fn params(&self, z: &[f64]) -> Result<ModelParams> {
        self.template.with_vec(&self.white.to_theta(z))
    }

    fn value(&self, z: &[f64]) -> Result<f64> {
        log_posterior(&self.params(z)?, self.priors, self.ep, self.mode)
    }
}

/// A differentiable log density for [`hmc`].
pub trait LogDensity {
    fn dim(&self) -> usize;
    fn log_density_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

impl LogDensity for WhitenedPosterior<'_> {
    fn dim(&self) -> usize {
        self.white.dim
    }

    fn log_density_and_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (v, g) = log_posterior_and_grad(&self.params(z)?, self.priors, self.ep, self.mode)?;
        Ok((v, self.white.pull_back(&g)))
    }
}

/// Initial parameters: semivariogram length-scale, windowed
/// coregionalization, zero log signal sd and noise at 5% of the mean
/// channel variance. `loglen_shift` is added to the length-scale.
pub fn initial_params(
    ep: &Episode,
    kind: ModelKind,
    priors: &PriorSpec,
    window_w: Option<f64>,
    loglen_shift: f64,
) -> Result<ModelParams> {
    priors.validate()?;
    if ep.n() < 4 {
        return Err(Error::DegenerateData(format!("need at least 4 timestamps, got {}", ep.n())));
    }
    let times = ep.times().to_vec();
    let span = times[times.len() - 1] - times[0];
    let w = window_w.unwrap_or(0.1 * span);
    let loglen: Vec<f64> =
        init_loglen_semivariogram(ep, DEFAULT_VARIOGRAM_BINS)?.iter().map(|v| v + loglen_shift).collect();
    let ls = init_coreg_windowed(ep, w)?;
    let vars = ep.channel_variances();
    let noise = 0.05 * vars.iter().sum::<f64>() / vars.len() as f64;
    if !(noise > 0.0) {
        return Err(Error::DegenerateData("all channels have zero variance".into()));
    }
    let m = ep.m();
    let n = ep.n();
    let mean_coreg = || {
        let mut b = DMatrix::zeros(m, m);
        for l in &ls {
            b += l * l.transpose();
        }
        lower_factor(b / ls.len() as f64)
    };
    let loglen_proc = || LatentProcess::new(LatentKind::LogLengthScale, loglen.clone(), priors.loglen_prior);
    let structure = match kind {
        ModelKind::Smgp => Structure::Smgp { coreg: mean_coreg(), loglen: loglen[0], logamp: 0.0 },
        ModelKind::Nmgp => Structure::Nmgp {
            coreg: mean_coreg(),
            loglen: loglen_proc()?,
            logsd: LatentProcess::constant(LatentKind::LogSignalSd, n, 0.0, priors.logsd_prior)?,
        },
        ModelKind::Gnmgp => {
            let coreg = tri_pairs(m)
                .into_iter()
                .map(|(i, j)| {
                    let v: Vec<f64> = ls.iter().map(|l| l[(i, j)]).collect();
                    LatentProcess::new(LatentKind::CoregEntry(i, j), v, priors.coreg_prior)
                })
                .collect::<Result<_>>()?;
            Structure::Gnmgp { coreg, loglen: loglen_proc()? }
        }
    };
    ModelParams::new(noise, times, structure)
}

/// Length-scale offsets for restart `r`: `0, +ln 2, −ln 2, +2 ln 2, …`.
fn restart_shift(r: usize) -> f64 {
    if r == 0 {
        return 0.0;
    }
    let k = r.div_ceil(2) as f64;
    let sign = if r % 2 == 1 { 1.0 } else { -1.0 };
    sign * k * std::f64::consts::LN_2
}

/// Halvings tried before a step is declared impossible.
const MAX_HALVINGS: usize = 40;

/// Gradient ascent with backtracking from `init`.
///
/// Each iteration tries `z + lr·g`, halving the step until the log
/// posterior does not decrease.
pub fn gradient_ascent(
    init: &ModelParams,
    priors: &PriorSpec,
    ep: &Episode,
    cfg: &MapConfig,
) -> Result<(ModelParams, f64, Vec<TraceEntry>, StopReason)> {
    cfg.validate()?;
    let target = WhitenedPosterior::new(init.clone(), priors, ep, Mode::Map)?;
    let mut z = target.white.to_z(&init.to_vec())?;
    let mut f = log_posterior(init, priors, ep, Mode::Map)?;
    let mut best = init.clone();
    let inf_norm = |g: &[f64]| g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut g = match target.log_density_and_grad(&z) {
        Ok((_, g)) => g,
        Err(_) => {
            let entry = TraceEntry { iter: 0, log_post: f, grad_inf: f64::NAN, step: 0.0 };
            return Ok((best, f, vec![entry], StopReason::NonFinite));
        }
    };
    let mut trace = vec![TraceEntry { iter: 0, log_post: f, grad_inf: inf_norm(&g), step: 0.0 }];
    let mut stop = StopReason::MaxIters;
    for iter in 1..=cfg.max_iters {
        if inf_norm(&g) <= cfg.grad_tol {
            stop = StopReason::Converged;
            break;
        }
        let mut step = cfg.learning_rate;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let cand: Vec<f64> = z.iter().zip(&g).map(|(a, b)| a + step * b).collect();
            if let Ok(fc) = target.value(&cand) {
                if fc >= f {
                    accepted = Some((cand, fc));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((cand, fc)) = accepted else {
            stop = StopReason::Stalled;
            break;
        };
        let params = target.params(&cand)?;
        match target.log_density_and_grad(&cand) {
            Ok((_, gc)) if gc.iter().all(|v| v.is_finite()) => {
                z = cand;
                f = fc;
                g = gc;
                best = params;
                trace.push(TraceEntry { iter, log_post: f, grad_inf: inf_norm(&g), step });
            }
            _ => {
                stop = StopReason::NonFinite;
                break;
            }
        }
    }
    if stop == StopReason::MaxIters && inf_norm(&g) <= cfg.grad_tol {
        stop = StopReason::Converged;
    }
    Ok((best, f, trace, stop))
}

/// MAP estimate of `kind` on `ep`, best of `1 + cfg.restarts` runs.
pub fn map_fit(ep: &Episode, kind: ModelKind, priors: &PriorSpec, cfg: &MapConfig) -> Result<MapFit> {
    cfg.validate()?;
    let mut best: Option<MapFit> = None;
    for r in 0..=cfg.restarts {
        let init = initial_params(ep, kind, priors, cfg.window_w, restart_shift(r))?;
        let (params, log_post, trace, stop) = gradient_ascent(&init, priors, ep, cfg)?;
        if best.as_ref().is_none_or(|b| log_post > b.log_post) {
            best = Some(MapFit { params, log_post, trace, stop, restart: r });
        }
    }
    Ok(best.expect("at least one run"))
}

/// Settings for [`hmc`] and [`hmc_sample`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmcConfig {
    pub step_size: f64,
    pub n_leapfrog: usize,
    pub n_samples: usize,
    pub n_burnin: usize,
    pub seed: u64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        HmcConfig { step_size: 0.4, n_leapfrog: 20, n_samples: 1000, n_burnin: 500, seed: 0 }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidParams(format!("step_size must be > 0, got {}", self.step_size)));
        }
        if self.n_leapfrog == 0 || self.n_samples == 0 {
            return Err(Error::InvalidParams("n_leapfrog and n_samples must be >= 1".into()));
        }
        Ok(())
    }
}

/// One retained state of a generic chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub position: Vec<f64>,
    pub log_density: f64,
    /// Whether the proposal leading to this state was accepted.
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmcRun {
    pub draws: Vec<Draw>,
    /// Acceptance rate over the retained iterations.
    pub acceptance_rate: f64,
    /// Trajectories abandoned because the density became non-finite.
    pub divergent: usize,
}

/// Hamiltonian Monte Carlo with identity mass matrix on `target`.
///
/// Randomness comes from ChaCha8 seeded with `cfg.seed`; momenta are
/// standard normal and acceptance uses one uniform draw per iteration.
pub fn hmc<T: LogDensity>(target: &T, init: &[f64], cfg: &HmcConfig) -> Result<HmcRun> {
    cfg.validate()?;
    if init.len() != target.dim() {
        return Err(Error::DimensionMismatch(format!(
            "initial state has {} entries, target has {}",
            init.len(),
            target.dim()
        )));
    }
    let (mut logp, mut grad) = target.log_density_and_grad(init)?;
    if !logp.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("log density at the initial state".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = init.len();
    let h = cfg.step_size;
    let mut x = init.to_vec();
    let mut draws = Vec::with_capacity(cfg.n_samples);
    let mut n_accepted = 0usize;
    let mut divergent = 0usize;
    for it in 0..cfg.n_burnin + cfg.n_samples {
        let p0: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let u: f64 = rng.random();
        let h0 = -logp + 0.5 * p0.iter().map(|v| v * v).sum::<f64>();
        let proposal = leapfrog(target, &x, &p0, &grad, h, cfg.n_leapfrog);
        let mut accepted = false;
        match proposal {
            Some((xn, pn, lpn, gn)) => {
                let h1 = -lpn + 0.5 * pn.iter().map(|v| v * v).sum::<f64>();
                if h1.is_finite() && u.ln() < h0 - h1 {
                    x = xn;
                    logp = lpn;
                    grad = gn;
                    accepted = true;
                }
            }
            None => divergent += 1,
        }
        if it >= cfg.n_burnin {
            n_accepted += accepted as usize;
            draws.push(Draw { position: x.clone(), log_density: logp, accepted });
        }
    }
    Ok(HmcRun { acceptance_rate: n_accepted as f64 / cfg.n_samples as f64, draws, divergent })
}

type Phase = (Vec<f64>, Vec<f64>, f64, Vec<f64>);

fn leapfrog<T: LogDensity>(
    target: &T,
    x0: &[f64],
    p0: &[f64],
    g0: &[f64],
    h: f64,
    steps: usize,
) -> Option<Phase> {
    let mut x = x0.to_vec();
    let mut p: Vec<f64> = p0.iter().zip(g0).map(|(p, g)| p + 0.5 * h * g).collect();
    let mut lp = 0.0;
    let mut g = g0.to_vec();
    for s in 0..steps {
        for (xi, pi) in x.iter_mut().zip(&p) {
            *xi += h * pi;
        }
        let (l, gn) = target.log_density_and_grad(&x).ok()?;
        if !l.is_finite() || gn.iter().any(|v| !v.is_finite()) {
            return None;
        }
        lp = l;
        g = gn;
        let scale = if s + 1 == steps { 0.5 } else { 1.0 };
        for (pi, gi) in p.iter_mut().zip(&g) {
            *pi += scale * h * gi;
        }
    }
    Some((x, p, lp, g))
}

/// One retained posterior state of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSample {
    pub params: ModelParams,
    /// Log posterior in HMC mode (Jacobian of `σ² = exp(u)` included).
    pub log_post: f64,
    pub accepted: bool,
}

/// HMC over the full posterior of `init.kind()` on `ep`.
pub fn hmc_sample(
    ep: &Episode,
    kind: ModelKind,
    priors: &PriorSpec,
    cfg: &HmcConfig,
    init: &ModelParams,
) -> Result<(Vec<PosteriorSample>, HmcRun)> {
    if init.kind() != kind {
        return Err(Error::InvalidParams(format!("initial state is {}, requested {kind}", init.kind())));
    }
    init.validate()?;
    let target = WhitenedPosterior::new(init.clone(), priors, ep, Mode::Hmc)?;
    let z0 = target.white.to_z(&init.to_vec())?;
    let run = hmc(&target, &z0, cfg)?;
    let samples = run
        .draws
        .iter()
        .map(|d| {
            Ok(PosteriorSample { params: target.params(&d.position)?, log_post: d.log_density, accepted: d.accepted })
        })
        .collect::<Result<_>>()?;
    Ok((samples, run))
}

/// Correlation matrix and marginal sds of the outputs at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrSd {
    pub corr: DMatrix<f64>,
    pub sd: DVector<f64>,
}

/// `C(t) = D^{−½} B(t) D^{−½}` and `sd(t) = √diag B(t)` with
/// `B(t) = A(t) A(t)ᵀ` for the effective factor `A` (`amp·L`, `σ(t)·L`,
/// `L(t)`).
pub fn derive_corr_sd(params: &ModelParams, t: f64) -> Result<CorrSd> {
    derive_corr_sd_grid(params, &[t]).map(|mut v| v.remove(0))
}

/// [`derive_corr_sd`] on every time in `grid`.
pub fn derive_corr_sd_grid(params: &ModelParams, grid: &[f64]) -> Result<Vec<CorrSd>> {
    if grid.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("query time".into()));
    }
    let eval = params.latents_at(grid)?;
    eval.factor
        .iter()
        .map(|a| {
            let b = a * a.transpose();
            let m = b.nrows();
            if let Some(dim) = (0..m).find(|&i| !(b[(i, i)] > 1e-12)) {
                return Err(Error::ZeroVariance { dim });
            }
            let sd = DVector::from_fn(m, |i, _| b[(i, i)].sqrt());
            let corr =
                DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { (b[(i, j)] / (sd[i] * sd[j])).clamp(-1.0, 1.0) });
            Ok(CorrSd { corr, sd })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::GpPrior;
    use crate::linalg::{sym_eigen, SymMatrix};

    struct StdNormal(usize);

    impl LogDensity for StdNormal {
        fn dim(&self) -> usize {
            self.0
        }

        fn log_density_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
            Ok((-0.5 * x.iter().map(|v| v * v).sum::<f64>(), x.iter().map(|v| -v).collect()))
        }
    }

    fn sine_episode(n: usize, seed: u64) -> Episode {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        t.sort_by(f64::total_cmp);
        let obs = DMatrix::from_fn(n, 2, |r, c| {
            let e: f64 = rng.sample(StandardNormal);
            (6.0 * t[r] + c as f64).sin() + 0.1 * e
        });
        Episode::complete("s", t, obs).unwrap()
    }

    #[test]
    fn whitener_round_trip_and_pullback() {
        let ep = sine_episode(12, 1);
        let pri = PriorSpec::default();
        for kind in ModelKind::ALL {
            let p = initial_params(&ep, kind, &pri, None, 0.0).unwrap();
            let w = Whitener::new(&p, &pri).unwrap();
            let theta = p.to_vec();
            let z = w.to_z(&theta).unwrap();
            let back = w.to_theta(&z);
            for (a, b) in theta.iter().zip(&back) {
                assert!((a - b).abs() < 1e-6 * a.abs().max(1.0), "{kind}: {a} vs {b}");
            }
            // ⟨Aᵀg, e_k⟩ = ⟨g, A e_k⟩
            let g: Vec<f64> = (0..w.dim).map(|i| (i as f64 * 0.37).sin()).collect();
            let pulled = w.pull_back(&g);
            let zero = w.to_theta(&vec![0.0; w.dim]);
            for k in [0, 1, w.dim / 2, w.dim - 1] {
                let mut e = vec![0.0; w.dim];
                e[k] = 1.0;
                let col: f64 = w.to_theta(&e).iter().zip(&zero).zip(&g).map(|((a, b), gi)| (a - b) * gi).sum();
                assert!((pulled[k] - col).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_iterations_return_initialization() {
        let ep = sine_episode(20, 2);
        let pri = PriorSpec::default();
        let cfg = MapConfig { max_iters: 0, ..MapConfig::default() };
        for kind in ModelKind::ALL {
            let fit = map_fit(&ep, kind, &pri, &cfg).unwrap();
            let init = initial_params(&ep, kind, &pri, None, 0.0).unwrap();
            assert_eq!(fit.params, init);
            assert_eq!(fit.trace.len(), 1);
        }
    }

    #[test]
    fn trace_is_monotone_and_improves() {
        let ep = sine_episode(30, 3);
        let pri = PriorSpec::default();
        let cfg = MapConfig { max_iters: 60, ..MapConfig::default() };
        for kind in ModelKind::ALL {
            let fit = map_fit(&ep, kind, &pri, &cfg).unwrap();
            for w in fit.trace.windows(2) {
                assert!(w[1].log_post >= w[0].log_post, "{kind}: {} < {}", w[1].log_post, w[0].log_post);
            }
            let init = initial_params(&ep, kind, &pri, None, 0.0).unwrap();
            let f0 = log_posterior(&init, &pri, &ep, Mode::Map).unwrap();
            assert!(fit.log_post >= f0);
            assert_eq!(fit.log_post, fit.trace.last().unwrap().log_post);
        }
    }

    #[test]
    fn restarts_pick_the_best_run() {
        let ep = sine_episode(25, 4);
        let pri = PriorSpec::default();
        let base = MapConfig { max_iters: 20, ..MapConfig::default() };
        let single = map_fit(&ep, ModelKind::Smgp, &pri, &base).unwrap();
        let multi = map_fit(&ep, ModelKind::Smgp, &pri, &MapConfig { restarts: 2, ..base }).unwrap();
        assert!(multi.log_post >= single.log_post);
        assert_eq!(restart_shift(1), std::f64::consts::LN_2);
        assert_eq!(restart_shift(2), -std::f64::consts::LN_2);
    }

    #[test]
    fn stationary_point_has_small_gradient() {
        let ep = sine_episode(15, 5);
        let pri = PriorSpec::default();
        let cfg = MapConfig { max_iters: 20000, grad_tol: 1e-4, ..MapConfig::default() };
        let fit = map_fit(&ep, ModelKind::Smgp, &pri, &cfg).unwrap();
        assert_eq!(fit.stop, StopReason::Converged);
        assert!(fit.trace.last().unwrap().grad_inf <= 1e-4);
        // whitening is a diagonal scaling for SMGP with factors ≤ 5
        let g = crate::model::grad_log_posterior(&fit.params, &pri, &ep, Mode::Map).unwrap();
        assert!(g.iter().all(|v| v.abs() <= 1e-4), "{g:?}");
    }

    #[test]
    fn short_input_is_degenerate() {
        let ep = sine_episode(3, 6);
        assert!(matches!(
            map_fit(&ep, ModelKind::Smgp, &PriorSpec::default(), &MapConfig::default()),
            Err(Error::DegenerateData(_))
        ));
    }

    #[test]
    fn hmc_is_deterministic() {
        let cfg = HmcConfig { n_samples: 50, n_burnin: 10, seed: 9, ..HmcConfig::default() };
        let a = hmc(&StdNormal(3), &[0.5, 0.0, -0.5], &cfg).unwrap();
        let b = hmc(&StdNormal(3), &[0.5, 0.0, -0.5], &cfg).unwrap();
        assert_eq!(a, b);
        let c = hmc(&StdNormal(3), &[0.5, 0.0, -0.5], &HmcConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a.draws, c.draws);
        assert_eq!(a.draws.len(), 50);
    }

    #[test]
    fn hmc_tiny_steps_always_accept() {
        let cfg = HmcConfig { step_size: 1e-6, n_leapfrog: 1, n_samples: 500, n_burnin: 0, seed: 1 };
        let run = hmc(&StdNormal(4), &[1.0, -1.0, 0.3, 2.0], &cfg).unwrap();
        assert!(run.acceptance_rate >= 0.99);
    }

    #[test]
    fn hmc_one_dimensional_gaussian() {
        let s = 5000;
        let cfg = HmcConfig { n_samples: s, seed: 3, ..HmcConfig::default() };
        let run = hmc(&StdNormal(1), &[2.0], &cfg).unwrap();
        let xs: Vec<f64> = run.draws.iter().map(|d| d.position[0]).collect();
        let mean = xs.iter().sum::<f64>() / s as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (s - 1) as f64;
        assert!(mean.abs() <= 3.0 / (s as f64).sqrt(), "{mean}");
        assert!((0.8..=1.2).contains(&var), "{var}");
    }

    #[test]
    fn hmc_rejects_non_finite_start() {
        struct Bad;
        impl LogDensity for Bad {
            fn dim(&self) -> usize {
                1
            }
            fn log_density_and_grad(&self, _: &[f64]) -> Result<(f64, Vec<f64>)> {
                Ok((f64::NAN, vec![0.0]))
            }
        }
        assert!(matches!(hmc(&Bad, &[0.0], &HmcConfig::default()), Err(Error::NonFinite(_))));
    }

    #[test]
    fn hmc_sample_on_small_model() {
        let ep = sine_episode(10, 7);
        let pri = PriorSpec::default();
        let init = initial_params(&ep, ModelKind::Nmgp, &pri, None, 0.0).unwrap();
        let cfg = HmcConfig { step_size: 0.02, n_leapfrog: 5, n_samples: 20, n_burnin: 5, seed: 4 };
        let (samples, run) = hmc_sample(&ep, ModelKind::Nmgp, &pri, &cfg, &init).unwrap();
        assert_eq!(samples.len(), 20);
        assert!(run.acceptance_rate > 0.0);
        for s in &samples {
            assert!(s.log_post.is_finite());
            let direct = log_posterior(&s.params, &pri, &ep, Mode::Hmc).unwrap();
            assert!((direct - s.log_post).abs() < 1e-8 * direct.abs().max(1.0));
            for cs in derive_corr_sd_grid(&s.params, &[0.0, 0.33, 0.9]).unwrap() {
                let e = sym_eigen(&SymMatrix::new(cs.corr).unwrap()).unwrap();
                assert!(e.eigvals[0] >= -1e-8);
            }
        }
        assert!(hmc_sample(&ep, ModelKind::Smgp, &pri, &cfg, &init).is_err());
    }

    fn gnmgp_with(times: &[f64], entries: [Vec<f64>; 3]) -> ModelParams {
        let pr = GpPrior::new(0.0, 1.0, 0.2).unwrap();
        let kinds = [LatentKind::CoregEntry(0, 0), LatentKind::CoregEntry(1, 0), LatentKind::CoregEntry(1, 1)];
        let coreg = kinds.iter().zip(entries).map(|(k, v)| LatentProcess::new(*k, v, pr).unwrap()).collect();
        let loglen = LatentProcess::constant(LatentKind::LogLengthScale, times.len(), -1.0, pr).unwrap();
        ModelParams::new(0.1, times.to_vec(), Structure::Gnmgp { coreg, loglen }).unwrap()
    }

    #[test]
    fn canonical_factor_gives_its_correlation() {
        let times = [0.1, 0.4, 0.8];
        let r = [0.3, -0.6, 0.95];
        let p = gnmgp_with(
            &times,
            [vec![1.0; 3], r.to_vec(), r.iter().map(|v: &f64| (1.0 - v * v).sqrt()).collect()],
        );
        for (i, &t) in times.iter().enumerate() {
            let cs = derive_corr_sd(&p, t).unwrap();
            assert!((cs.corr[(1, 0)] - r[i]).abs() < 1e-12);
            assert_eq!(cs.corr[(0, 0)], 1.0);
            assert_eq!(cs.corr[(1, 0)], cs.corr[(0, 1)]);
            assert!((cs.sd[1] - 1.0).abs() < 1e-12);
        }
        let zero = gnmgp_with(&times, [vec![1.0; 3], vec![0.0; 3], vec![0.0; 3]]);
        assert_eq!(derive_corr_sd(&zero, 0.4), Err(Error::ZeroVariance { dim: 1 }));
    }

    #[test]
    fn unit_signal_sd_gives_coreg_sd() {
        let ep = sine_episode(8, 8);
        let p = initial_params(&ep, ModelKind::Nmgp, &PriorSpec::default(), None, 0.0).unwrap();
        let Structure::Nmgp { coreg, .. } = &p.structure else { unreachable!() };
        let b = coreg * coreg.transpose();
        for cs in derive_corr_sd_grid(&p, &[0.0, 0.5, 1.5]).unwrap() {
            for i in 0..2 {
                assert!((cs.sd[i] - b[(i, i)].sqrt()).abs() < 1e-12);
            }
            assert!((cs.corr[(1, 0)] - b[(1, 0)] / (b[(0, 0)] * b[(1, 1)]).sqrt()).abs() < 1e-12);
        }
    }
}
