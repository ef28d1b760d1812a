//! Parameter containers, priors and the marginal log posterior of the three
//! model classes, with analytic gradients.
//!
//! The unconstrained parameter vector is laid out as
//!
//! | kind  | layout                                                         |
//! |-------|----------------------------------------------------------------|
//! | SMGP  | `log σ²`, packed `L`, `log len`, `log amp`                     |
//! | NMGP  | `log σ²`, packed `L`, `ℓ̃₁..ℓ̃_N`, `σ̃₁..σ̃_N`                   |
//! | GNMGP | `log σ²`, `L_ij(t₁..t_N)` for each packed `(i, j)`, `ℓ̃₁..ℓ̃_N` |
//!
//! where "packed" means the lower triangle in row order
//! `(0,0), (1,0), (1,1), (2,0), …`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::kernels::{assemble_cov, gibbs, gibbs_dlog_l1, separable_factors, LatentEval, ModelKind};
use crate::latent::{conditional_mean_with, prior_logpdf, GpPrior, LatentKind, LatentProcess};
use crate::linalg::{cholesky, mvn_logpdf, sym_eigen, sym_eigen_project, SymMatrix};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Lower-triangle index pairs in packed order.
pub fn tri_pairs(m: usize) -> Vec<(usize, usize)> {
    (0..m).flat_map(|i| (0..=i).map(move |j| (i, j))).collect()
}

pub fn tri_len(m: usize) -> usize {
    m * (m + 1) / 2
}

/// Kind-specific parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Structure {
    Smgp {
        coreg: DMatrix<f64>,
        loglen: f64,
        logamp: f64,
    },
    Nmgp {
        coreg: DMatrix<f64>,
        loglen: LatentProcess,
        logsd: LatentProcess,
    },
    Gnmgp {
        /// One process per packed lower-triangle entry.
        coreg: Vec<LatentProcess>,
        loglen: LatentProcess,
    },
}

/// Complete parameter state. Latent processes live on `times`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub noise_var: f64,
    pub times: Vec<f64>,
    pub structure: Structure,
}

impl ModelParams {
    pub fn new(noise_var: f64, times: Vec<f64>, structure: Structure) -> Result<Self> {
        let p = ModelParams { noise_var, times, structure };
        p.validate()?;
        Ok(p)
    }

    pub fn kind(&self) -> ModelKind {
        match self.structure {
            Structure::Smgp { .. } => ModelKind::Smgp,
            Structure::Nmgp { .. } => ModelKind::Nmgp,
            Structure::Gnmgp { .. } => ModelKind::Gnmgp,
        }
    }

    pub fn m(&self) -> usize {
        match &self.structure {
            Structure::Smgp { coreg, .. } | Structure::Nmgp { coreg, .. } => coreg.nrows(),
            Structure::Gnmgp { coreg, .. } => {
                let mut m = 0;
                while tri_len(m) < coreg.len() {
                    m += 1;
                }
                m
            }
        }
    }

    pub fn n(&self) -> usize {
        self.times.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_var > 0.0 && self.noise_var.is_finite()) {
            return Err(Error::InvalidParams(format!("noise_var must be > 0, got {}", self.noise_var)));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParams("time grid must be strictly increasing".into()));
        }
        let n = self.n();
        let check_proc = |p: &LatentProcess, kind: LatentKind| -> Result<()> {
            if p.kind != kind {
                return Err(Error::InvalidParams(format!("expected {kind:?}, found {:?}", p.kind)));
            }
            if p.values.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "{kind:?} has {} values on a grid of {n}",
                    p.values.len()
                )));
            }
            if p.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("{kind:?} value")));
            }
            Ok(())
        };
        let check_coreg = |l: &DMatrix<f64>| -> Result<()> {
            if !l.is_square() || l.nrows() == 0 {
                return Err(Error::DimensionMismatch("coregionalization factor must be square".into()));
            }
            if l.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("coregionalization entry".into()));
            }
            for i in 0..l.nrows() {
                for j in (i + 1)..l.ncols() {
                    if l[(i, j)] != 0.0 {
                        return Err(Error::InvalidParams("coregionalization factor must be lower triangular".into()));
                    }
                }
            }
            Ok(())
        };
        match &self.structure {
            Structure::Smgp { coreg, loglen, logamp } => {
                check_coreg(coreg)?;
                if !(loglen.is_finite() && logamp.is_finite()) {
                    return Err(Error::NonFinite("SMGP kernel parameter".into()));
                }
            }
            Structure::Nmgp { coreg, loglen, logsd } => {
                check_coreg(coreg)?;
                check_proc(loglen, LatentKind::LogLengthScale)?;
                check_proc(logsd, LatentKind::LogSignalSd)?;
            }
            Structure::Gnmgp { coreg, loglen } => {
                check_proc(loglen, LatentKind::LogLengthScale)?;
                let m = self.m();
                if coreg.len() != tri_len(m) || m == 0 {
                    return Err(Error::DimensionMismatch(format!(
                        "{} coregionalization processes is not a triangular count",
                        coreg.len()
                    )));
                }
                for (p, (i, j)) in coreg.iter().zip(tri_pairs(m)) {
                    check_proc(p, LatentKind::CoregEntry(i, j))?;
                }
            }
        }
        Ok(())
    }

    /// Number of unconstrained parameters.
    pub fn dim(&self) -> usize {
        let n = self.n();
        match &self.structure {
            Structure::Smgp { coreg, .. } => 1 + tri_len(coreg.nrows()) + 2,
            Structure::Nmgp { coreg, .. } => 1 + tri_len(coreg.nrows()) + 2 * n,
            Structure::Gnmgp { coreg, .. } => 1 + coreg.len() * n + n,
        }
    }

    /// Flattens into the unconstrained vector (see module docs).
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.noise_var.ln()];
        match &self.structure {
            Structure::Smgp { coreg, loglen, logamp } => {
                v.extend(tri_pairs(coreg.nrows()).into_iter().map(|(i, j)| coreg[(i, j)]));
                v.push(*loglen);
                v.push(*logamp);
            }
            Structure::Nmgp { coreg, loglen, logsd } => {
                v.extend(tri_pairs(coreg.nrows()).into_iter().map(|(i, j)| coreg[(i, j)]));
                v.extend_from_slice(&loglen.values);
                v.extend_from_slice(&logsd.values);
            }
            Structure::Gnmgp { coreg, loglen } => {
                for p in coreg {
                    v.extend_from_slice(&p.values);
                }
                v.extend_from_slice(&loglen.values);
            }
        }
        v
    }

    /// Copy of `self` with every parameter replaced from `theta`.
    pub fn with_vec(&self, theta: &[f64]) -> Result<ModelParams> {
        if theta.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "parameter vector has {} entries, expected {}",
                theta.len(),
                self.dim()
            )));
        }
        let n = self.n();
        let mut out = self.clone();
        out.noise_var = theta[0].exp();
        let rest = &theta[1..];
        match &mut out.structure {
            Structure::Smgp { coreg, loglen, logamp } => {
                let pairs = tri_pairs(coreg.nrows());
                for (k, (i, j)) in pairs.iter().enumerate() {
                    coreg[(*i, *j)] = rest[k];
                }
                *loglen = rest[pairs.len()];
                *logamp = rest[pairs.len() + 1];
            }
            Structure::Nmgp { coreg, loglen, logsd } => {
                let pairs = tri_pairs(coreg.nrows());
                for (k, (i, j)) in pairs.iter().enumerate() {
                    coreg[(*i, *j)] = rest[k];
                }
                let p = pairs.len();
                loglen.values.copy_from_slice(&rest[p..p + n]);
                logsd.values.copy_from_slice(&rest[p + n..p + 2 * n]);
            }
            Structure::Gnmgp { coreg, loglen } => {
                for (k, proc) in coreg.iter_mut().enumerate() {
                    proc.values.copy_from_slice(&rest[k * n..(k + 1) * n]);
                }
                let off = coreg.len() * n;
                loglen.values.copy_from_slice(&rest[off..off + n]);
            }
        }
        Ok(out)
    }

    /// Coregionalization factor `L(t_n)` at grid index `n` (constant for
    /// the separable kinds).
    pub fn coreg_at_index(&self, n: usize) -> DMatrix<f64> {
        match &self.structure {
            Structure::Smgp { coreg, .. } | Structure::Nmgp { coreg, .. } => coreg.clone(),
            Structure::Gnmgp { coreg, .. } => lower_from_procs(coreg, self.m(), |p| p.values[n]),
        }
    }

    /// Length-scales and effective coregionalization factors at arbitrary
    /// times; latent processes are extended with
    /// [`crate::latent::conditional_mean`] (their prior mean on an empty
    /// grid).
    pub fn latents_at(&self, query: &[f64]) -> Result<LatentEval> {
        let q = query.len();
        let interp = |p: &LatentProcess| -> Result<Vec<f64>> {
            if query == self.times.as_slice() {
                return Ok(p.values.clone());
            }
            if self.times.is_empty() {
                return Ok(vec![p.prior.mean; q]);
            }
            let chol = p.prior.factor(&self.times)?;
            conditional_mean_with(p, &self.times, &chol, query)
        };
        let (lengthscale, factor) = match &self.structure {
            Structure::Smgp { coreg, loglen, logamp } => {
                (vec![loglen.exp(); q], vec![logamp.exp() * coreg; q])
            }
            Structure::Nmgp { coreg, loglen, logsd } => {
                let l = interp(loglen)?;
                let s = interp(logsd)?;
                (l.iter().map(|v| v.exp()).collect(), s.iter().map(|v| v.exp() * coreg).collect())
            }
            Structure::Gnmgp { coreg, loglen } => {
                let l = interp(loglen)?;
                let entries: Vec<Vec<f64>> = coreg.iter().map(interp).collect::<Result<_>>()?;
                let m = self.m();
                let pairs = tri_pairs(m);
                let factor = (0..q)
                    .map(|t| {
                        let mut f = DMatrix::zeros(m, m);
                        for (k, (i, j)) in pairs.iter().enumerate() {
                            f[(*i, *j)] = entries[k][t];
                        }
                        f
                    })
                    .collect();
                (l.iter().map(|v| v.exp()).collect(), factor)
            }
        };
        Ok(LatentEval { times: query.to_vec(), lengthscale, factor })
    }
}

pub(crate) fn lower_from_procs(
    coreg: &[LatentProcess],
    m: usize,
    value: impl Fn(&LatentProcess) -> f64,
) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(m, m);
    for (p, (i, j)) in coreg.iter().zip(tri_pairs(m)) {
        l[(i, j)] = value(p);
    }
    l
}

/// Hyperparameters of every prior in the model.
///
/// The GP priors seed the latent processes created by the fitting code;
/// once a [`LatentProcess`] exists, its own `prior` is the one evaluated.
/// For SMGP the scalar log length-scale and log amplitude get the
/// one-point versions `N(mean, amp²)` of `loglen_prior` and `logsd_prior`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSpec {
    /// Inverse-Gamma shape for the noise variance.
    pub ig_a: f64,
    /// Inverse-Gamma scale for the noise variance.
    pub ig_b: f64,
    /// Variance of the constant coregionalization entries.
    pub coreg_var_c: f64,
    pub loglen_prior: GpPrior,
    pub logsd_prior: GpPrior,
    pub coreg_prior: GpPrior,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            ig_a: 1.0,
            ig_b: 1.0,
            coreg_var_c: 25.0,
            loglen_prior: GpPrior { mean: 0.0, amp: 5.0, len: 0.1 },
            logsd_prior: GpPrior { mean: 0.0, amp: 1.0, len: 0.1 },
            coreg_prior: GpPrior { mean: 0.0, amp: 5.0, len: 0.1 },
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.ig_a > 0.0 && self.ig_b > 0.0 && self.coreg_var_c > 0.0) {
            return Err(Error::InvalidParams(format!(
                "prior constants must be positive: a={}, b={}, c={}",
                self.ig_a, self.ig_b, self.coreg_var_c
            )));
        }
        self.loglen_prior.validate()?;
        self.logsd_prior.validate()?;
        self.coreg_prior.validate()
    }

    /// `log IG(σ² | a, b)`.
    pub fn noise_logpdf(&self, noise_var: f64) -> f64 {
        let (a, b) = (self.ig_a, self.ig_b);
        a * b.ln() - ln_gamma(a) - (a + 1.0) * noise_var.ln() - b / noise_var
    }
}

/// Whether the density includes the log-Jacobian of `σ² = exp(u)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Mode finding; density of the original parameters, no Jacobian.
    Map,
    /// Sampling in the unconstrained space; Jacobian included.
    Hmc,
}

fn check_episode(params: &ModelParams, ep: &Episode) -> Result<()> {
    if params.times.as_slice() != ep.times() {
        return Err(Error::DimensionMismatch(
            "parameter time grid differs from the episode timestamps".into(),
        ));
    }
    if params.m() != ep.m() {
        return Err(Error::DimensionMismatch(format!(
            "model has {} outputs, episode has {}",
            params.m(),
            ep.m()
        )));
    }
    Ok(())
}

/// `log N(y | 0, B ⊗ K + σ²·I)` through the eigendecompositions of `B`
/// and `K`; `y` is dimension-major.
pub fn kron_fast_loglik(b: &SymMatrix, k: &SymMatrix, noise_var: f64, y: &DVector<f64>) -> Result<f64> {
    let (m, n) = (b.dim(), k.dim());
    if y.len() != m * n {
        return Err(Error::DimensionMismatch(format!("y has {} entries, expected {}", y.len(), m * n)));
    }
    let eb = sym_eigen(b)?;
    // z = (U_B ⊗ U_K)ᵀ y = vec(U_Kᵀ Y U_B) with Y the N×M reshape of y
    let ymat = DMatrix::from_column_slice(n, m, y.as_slice());
    let (kvals, proj) = sym_eigen_project(k, &ymat)?;
    let z = proj * &eb.eigvecs;
    let mut logdet = 0.0;
    let mut quad = 0.0;
    for i in 0..m {
        for j in 0..n {
            let d = eb.eigvals[i] * kvals[j] + noise_var;
            if !(d > 0.0) {
                return Err(Error::NotPositiveDefinite { cap: 0.0 });
            }
            logdet += d.ln();
            quad += z[(j, i)].powi(2) / d;
        }
    }
    Ok(-0.5 * ((m * n) as f64 * LN_2PI + logdet + quad))
}

/// Log marginal likelihood `log N(vec y_obs | 0, K^f_obs + σ²·I)`.
///
/// Uses [`kron_fast_loglik`] for separable kinds on complete data and the
/// dense Cholesky path otherwise.
pub fn log_likelihood(params: &ModelParams, ep: &Episode) -> Result<f64> {
    check_episode(params, ep)?;
    if ep.is_complete() {
        if let Some((b, k)) = separable_factors(params) {
            let y = ep.observed_values();
            return kron_fast_loglik(&SymMatrix::new(b)?, &SymMatrix::new(k)?, params.noise_var, &y);
        }
    }
    dense_log_likelihood(params, ep)
}

pub fn dense_log_likelihood(params: &ModelParams, ep: &Episode) -> Result<f64> {
    check_episode(params, ep)?;
    let mut cov = assemble_cov(params)?.select(&ep.observed_indices());
    cov.add_diag(params.noise_var);
    let y = ep.observed_values();
    mvn_logpdf(&y, &DVector::zeros(y.len()), &cov)
}

/// Sum of all prior log densities, plus the Jacobian term in HMC mode.
pub fn log_prior(params: &ModelParams, priors: &PriorSpec, mode: Mode) -> Result<f64> {
    let times = &params.times;
    let mut lp = priors.noise_logpdf(params.noise_var);
    if mode == Mode::Hmc {
        lp += params.noise_var.ln();
    }
    let const_coreg = |l: &DMatrix<f64>| {
        let c = priors.coreg_var_c;
        tri_pairs(l.nrows())
            .into_iter()
            .map(|(i, j)| -0.5 * l[(i, j)].powi(2) / c - 0.5 * (LN_2PI + c.ln()))
            .sum::<f64>()
    };
    match &params.structure {
        Structure::Smgp { coreg, loglen, logamp } => {
            lp += const_coreg(coreg);
            lp += normal_logpdf(*loglen, &priors.loglen_prior);
            lp += normal_logpdf(*logamp, &priors.logsd_prior);
        }
        Structure::Nmgp { coreg, loglen, logsd } => {
            lp += const_coreg(coreg);
            lp += prior_logpdf(loglen, times)?;
            lp += prior_logpdf(logsd, times)?;
        }
        Structure::Gnmgp { coreg, loglen } => {
            for p in coreg {
                lp += prior_logpdf(p, times)?;
            }
            lp += prior_logpdf(loglen, times)?;
        }
    }
    Ok(lp)
}

fn normal_logpdf(x: f64, p: &GpPrior) -> f64 {
    -0.5 * ((x - p.mean) / p.amp).powi(2) - 0.5 * (LN_2PI + 2.0 * p.amp.ln())
}

/// Unnormalized log marginal posterior in the unconstrained
/// parameterization.
pub fn log_posterior(params: &ModelParams, priors: &PriorSpec, ep: &Episode, mode: Mode) -> Result<f64> {
    let v = log_likelihood(params, ep)? + log_prior(params, priors, mode)?;
    if !v.is_finite() {
        return Err(Error::NonFinite("log posterior".into()));
    }
    Ok(v)
}

/// Gradient of [`log_posterior`] with respect to [`ModelParams::to_vec`].
pub fn grad_log_posterior(params: &ModelParams, priors: &PriorSpec, ep: &Episode, mode: Mode) -> Result<Vec<f64>> {
    log_posterior_and_grad(params, priors, ep, mode).map(|(_, g)| g)
}

/// Value and gradient of the log posterior, both from the dense path.
pub fn log_posterior_and_grad(
    params: &ModelParams,
    priors: &PriorSpec,
    ep: &Episode,
    mode: Mode,
) -> Result<(f64, Vec<f64>)> {
    check_episode(params, ep)?;
    let (loglik, g_full) = likelihood_weights(params, ep)?;
    let mut grad = likelihood_grad(params, ep, &g_full);
    let lp = log_prior(params, priors, mode)?;
    add_prior_grad(params, priors, mode, &mut grad)?;
    let v = loglik + lp;
    if !v.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("log posterior gradient".into()));
    }
    Ok((v, grad))
}

/// Log likelihood and the weight matrix `G = ½(ααᵀ − Σ⁻¹)` scattered to
/// the full `N·M` index set (zero rows/columns for missing entries), so
/// that `∂ log p / ∂θ = Σ_ab G_ab ∂Σ_ab/∂θ`.
fn likelihood_weights(params: &ModelParams, ep: &Episode) -> Result<(f64, DMatrix<f64>)> {
    let idx = ep.observed_indices();
    let mut cov = assemble_cov(params)?.select(&idx);
    cov.add_diag(params.noise_var);
    let chol = cholesky(&cov, 0.0)?;
    let y = ep.observed_values();
    let z = chol.solve_lower(&y);
    let loglik = -0.5 * (y.len() as f64 * LN_2PI + chol.log_det() + z.norm_squared());
    let alpha = chol.solve(&y);
    let inv = chol.inverse();
    let full = params.n() * params.m();
    let mut g = DMatrix::zeros(full, full);
    for (b, &jb) in idx.iter().enumerate() {
        for (a, &ia) in idx.iter().enumerate() {
            g[(ia, jb)] = 0.5 * (alpha[a] * alpha[b] - inv[(a, b)]);
        }
    }
    Ok((loglik, g))
}

fn likelihood_grad(params: &ModelParams, ep: &Episode, g: &DMatrix<f64>) -> Vec<f64> {
    let n = params.n();
    let times = &params.times;
    let mut grad = vec![0.0; params.dim()];
    // noise: ∂Σ/∂ log σ² = σ²·I on observed entries
    grad[0] = params.noise_var * ep.observed_indices().iter().map(|&a| g[(a, a)]).sum::<f64>();

    // Contract G over the output indices with a weight matrix W (M×M).
    let contract_outputs = |w: &DMatrix<f64>| -> DMatrix<f64> {
        let m = w.nrows();
        DMatrix::from_fn(n, n, |i, j| {
            let mut s = 0.0;
            for p in 0..m {
                for q in 0..m {
                    s += g[(p * n + i, q * n + j)] * w[(p, q)];
                }
            }
            s
        })
    };
    // Contract G over the time indices with a weight matrix K (N×N).
    let contract_times = |k: &DMatrix<f64>, m: usize| -> DMatrix<f64> {
        DMatrix::from_fn(m, m, |p, q| {
            let mut s = 0.0;
            for j in 0..n {
                for i in 0..n {
                    s += g[(p * n + i, q * n + j)] * k[(i, j)];
                }
            }
            s
        })
    };
    let coreg_grad = |r: &DMatrix<f64>, l: &DMatrix<f64>, out: &mut [f64]| {
        let rl = 2.0 * r * l;
        for (k, (i, j)) in tri_pairs(l.nrows()).into_iter().enumerate() {
            out[k] = rl[(i, j)];
        }
    };

    match &params.structure {
        Structure::Smgp { coreg, loglen, logamp } => {
            let m = coreg.nrows();
            let p = tri_len(m);
            let (amp, len) = (logamp.exp(), loglen.exp());
            let k = crate::kernels::rbf_gram(times, amp, len);
            let r = contract_times(&k, m);
            coreg_grad(&r, coreg, &mut grad[1..1 + p]);
            let b = coreg * coreg.transpose();
            let t = contract_outputs(&b);
            let mut d_len = 0.0;
            let mut d_amp = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let d2 = (times[i] - times[j]).powi(2);
                    d_len += t[(i, j)] * k[(i, j)] * d2 / (len * len);
                    d_amp += t[(i, j)] * 2.0 * k[(i, j)];
                }
            }
            grad[1 + p] = d_len;
            grad[2 + p] = d_amp;
        }
        Structure::Nmgp { coreg, loglen, logsd } => {
            let m = coreg.nrows();
            let p = tri_len(m);
            let kns = crate::kernels::nmgp_gram(times, &loglen.values, &logsd.values);
            let r = contract_times(&kns, m);
            coreg_grad(&r, coreg, &mut grad[1..1 + p]);
            let b = coreg * coreg.transpose();
            let t = contract_outputs(&b);
            let l: Vec<f64> = loglen.values.iter().map(|v| v.exp()).collect();
            for i in 0..n {
                let mut d_len = 0.0;
                let mut d_sd = 0.0;
                for j in 0..n {
                    let w = t[(i, j)] * kns[(i, j)];
                    d_sd += w;
                    if j != i {
                        d_len += w * gibbs_dlog_l1(times[i], times[j], l[i], l[j]);
                    }
                }
                grad[1 + p + i] = 2.0 * d_len;
                grad[1 + p + n + i] = 2.0 * d_sd;
            }
        }
        Structure::Gnmgp { coreg, loglen } => {
            let m = params.m();
            let pairs = tri_pairs(m);
            let ls: Vec<DMatrix<f64>> = (0..n).map(|i| params.coreg_at_index(i)).collect();
            let l: Vec<f64> = loglen.values.iter().map(|v| v.exp()).collect();
            let mut d_coreg = vec![DMatrix::<f64>::zeros(m, m); n];
            let len_off = 1 + coreg.len() * n;
            for i in 0..n {
                let mut d_len = 0.0;
                for j in 0..n {
                    let k = gibbs(times[i], times[j], l[i], l[j]);
                    // S_ij = Σ_pq G_blk[p,q]·(L_i L_jᵀ)[p,q];  d_coreg_i += k·G_blk·L_j
                    let mut s = 0.0;
                    for p in 0..m {
                        for q in 0..m {
                            let gpq = g[(p * n + i, q * n + j)];
                            if gpq == 0.0 {
                                continue;
                            }
                            let mut llt = 0.0;
                            for c in 0..=p.min(q) {
                                llt += ls[i][(p, c)] * ls[j][(q, c)];
                                d_coreg[i][(p, c)] += 2.0 * k * gpq * ls[j][(q, c)];
                            }
                            s += gpq * llt;
                        }
                    }
                    if j != i {
                        d_len += s * k * gibbs_dlog_l1(times[i], times[j], l[i], l[j]);
                    }
                }
                grad[len_off + i] = 2.0 * d_len;
            }
            for (k, (pi, pj)) in pairs.iter().enumerate() {
                for i in 0..n {
                    grad[1 + k * n + i] = d_coreg[i][(*pi, *pj)];
                }
            }
        }
    }
    grad
}

fn add_prior_grad(params: &ModelParams, priors: &PriorSpec, mode: Mode, grad: &mut [f64]) -> Result<()> {
    let n = params.n();
    let times = &params.times;
    grad[0] += -(priors.ig_a + 1.0) + priors.ig_b / params.noise_var;
    if mode == Mode::Hmc {
        grad[0] += 1.0;
    }
    let gp_grad = |p: &LatentProcess, out: &mut [f64]| -> Result<()> {
        let chol = p.prior.factor(times)?;
        let centered = DVector::from_iterator(n, p.values.iter().map(|v| v - p.prior.mean));
        let s = chol.solve(&centered);
        for (o, v) in out.iter_mut().zip(s.iter()) {
            *o -= v;
        }
        Ok(())
    };
    match &params.structure {
        Structure::Smgp { coreg, loglen, logamp } => {
            let pairs = tri_pairs(coreg.nrows());
            for (k, (i, j)) in pairs.iter().enumerate() {
                grad[1 + k] -= coreg[(*i, *j)] / priors.coreg_var_c;
            }
            let p = pairs.len();
            let lp = &priors.loglen_prior;
            let sp = &priors.logsd_prior;
            grad[1 + p] -= (loglen - lp.mean) / (lp.amp * lp.amp);
            grad[2 + p] -= (logamp - sp.mean) / (sp.amp * sp.amp);
        }
        Structure::Nmgp { coreg, loglen, logsd } => {
            let pairs = tri_pairs(coreg.nrows());
            for (k, (i, j)) in pairs.iter().enumerate() {
                grad[1 + k] -= coreg[(*i, *j)] / priors.coreg_var_c;
            }
            let p = pairs.len();
            gp_grad(loglen, &mut grad[1 + p..1 + p + n])?;
            gp_grad(logsd, &mut grad[1 + p + n..1 + p + 2 * n])?;
        }
        Structure::Gnmgp { coreg, loglen } => {
            for (k, proc) in coreg.iter().enumerate() {
                gp_grad(proc, &mut grad[1 + k * n..1 + (k + 1) * n])?;
            }
            let off = 1 + coreg.len() * n;
            gp_grad(loglen, &mut grad[off..off + n])?;
        }
    }
    Ok(())
}
