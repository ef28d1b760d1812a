//! Synthetic GNMGP episodes with known latent processes.
//!
//! Timestamps are i.i.d. `Uniform(0, 1)`, sorted. The log length-scale and
//! one log-sd process per channel are drawn from their GP priors; the
//! channel correlation follows a fixed curve `r(t)`. The factor is
//! `L(t) = diag(s(t))·chol(R(t))` with `R_ij = r(t)^|i−j|`, which for two
//! channels is `[[s₁, 0], [s₂·r, s₂·√(1−r²)]]`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::infer::derive_corr_sd_grid;
use crate::kernels::assemble_cov;
use crate::latent::{conditional_mean, GpPrior, LatentKind, LatentProcess};
use crate::linalg::cholesky;
use crate::model::{tri_pairs, ModelParams, Structure};

/// Correlation curve `r(t)` between neighbouring channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorrFn {
    /// `cos(π t)`.
    CosPi,
    Constant { value: f64 },
}

impl CorrFn {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            CorrFn::CosPi => (std::f64::consts::PI * t).cos(),
            CorrFn::Constant { value } => *value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_points: usize,
    pub m_dims: usize,
    pub seed: u64,
    pub noise_var: f64,
    pub loglen_prior: GpPrior,
    pub logsd_prior: GpPrior,
    pub corr_fn: CorrFn,
    /// Probability that an entry is dropped (each row keeps at least one).
    pub drop_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_points: 200,
            m_dims: 2,
            seed: 0,
            noise_var: 1e-6,
            loglen_prior: GpPrior { mean: 0.0, amp: 4.0, len: 0.4 },
            logsd_prior: GpPrior { mean: 0.0, amp: 1.0, len: 0.1 },
            corr_fn: CorrFn::CosPi,
            drop_prob: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_points < 2 || self.m_dims == 0 {
            return Err(Error::InvalidParams(format!(
                "need n_points >= 2 and m_dims >= 1, got {} and {}",
                self.n_points, self.m_dims
            )));
        }
        if !(self.noise_var > 0.0 && self.noise_var.is_finite()) {
            return Err(Error::InvalidParams(format!("noise_var must be > 0, got {}", self.noise_var)));
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(Error::InvalidParams(format!("drop_prob must be in [0, 1), got {}", self.drop_prob)));
        }
        if let CorrFn::Constant { value } = self.corr_fn {
            if !(-1.0..=1.0).contains(&value) {
                return Err(Error::InvalidParams(format!("constant correlation {value} outside [-1, 1]")));
            }
        }
        self.loglen_prior.validate()?;
        self.logsd_prior.validate()
    }
}

/// Ground-truth latent processes of a generated episode.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTruth {
    pub times: Vec<f64>,
    pub loglen: LatentProcess,
    /// One log-sd process per channel.
    pub logsd: Vec<LatentProcess>,
    pub corr_fn: CorrFn,
    pub noise_var: f64,
}

impl LatentTruth {
    pub fn m(&self) -> usize {
        self.logsd.len()
    }

    /// Channel sds on `grid` (GP interpolation of the log-sd draws).
    pub fn sd_at(&self, grid: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.logsd
            .iter()
            .map(|p| Ok(conditional_mean(p, &self.times, grid)?.into_iter().map(f64::exp).collect()))
            .collect()
    }

    pub fn loglen_at(&self, grid: &[f64]) -> Result<Vec<f64>> {
        conditional_mean(&self.loglen, &self.times, grid)
    }

    /// Correlation of channels 2 and 1 on `grid`.
    pub fn corr_at(&self, grid: &[f64]) -> Vec<f64> {
        grid.iter().map(|&t| self.corr_fn.eval(t)).collect()
    }

    /// `L(t)` at each stored timestamp.
    pub fn coreg(&self) -> Vec<DMatrix<f64>> {
        (0..self.times.len())
            .map(|n| {
                let s: Vec<f64> = self.logsd.iter().map(|p| p.values[n].exp()).collect();
                coreg_factor(&s, self.corr_fn.eval(self.times[n]))
            })
            .collect()
    }

    /// The generating model as GNMGP parameters; entry processes use
    /// `coreg_prior` for interpolation.
    pub fn to_params(&self, coreg_prior: GpPrior) -> Result<ModelParams> {
        let ls = self.coreg();
        let coreg = tri_pairs(self.m())
            .into_iter()
            .map(|(i, j)| {
                LatentProcess::new(LatentKind::CoregEntry(i, j), ls.iter().map(|l| l[(i, j)]).collect(), coreg_prior)
            })
            .collect::<Result<_>>()?;
        ModelParams::new(self.noise_var, self.times.clone(), Structure::Gnmgp { coreg, loglen: self.loglen.clone() })
    }
}

/// `diag(s)·chol(R)` with `R_ij = r^|i−j|`.
pub fn coreg_factor(s: &[f64], r: f64) -> DMatrix<f64> {
    let m = s.len();
    let c = (1.0 - r * r).max(0.0).sqrt();
    DMatrix::from_fn(m, m, |i, j| {
        if j > i {
            0.0
        } else if j == 0 {
            s[i] * r.powi(i as i32)
        } else {
            s[i] * c * r.powi((i - j) as i32)
        }
    })
}

fn sample_gp(prior: &GpPrior, times: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let chol = prior.factor(times)?;
    let z = DVector::from_fn(times.len(), |_, _| rng.sample(StandardNormal));
    Ok((chol.lower() * z).iter().map(|v| v + prior.mean).collect())
}

const MAX_ATTEMPTS: usize = 3;

/// Draws one episode and its latent truth; deterministic in `cfg.seed`.
pub fn generate(cfg: &SynthConfig) -> Result<(Episode, LatentTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut last_err = Error::NotPositiveDefinite { cap: 0.0 };
    for _ in 0..MAX_ATTEMPTS {
        match draw(cfg, &mut rng) {
            Ok(out) => return Ok(out),
            Err(e @ Error::NotPositiveDefinite { .. }) => last_err = e,
            Err(e) => return Err(e),
        }
    }
    Err(last_err)
}

fn draw(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<(Episode, LatentTruth)> {
    let (n, m) = (cfg.n_points, cfg.m_dims);
    let mut times: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    times.sort_by(f64::total_cmp);
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::NotPositiveDefinite { cap: 0.0 });
    }
    let loglen =
        LatentProcess::new(LatentKind::LogLengthScale, sample_gp(&cfg.loglen_prior, &times, rng)?, cfg.loglen_prior)?;
    let logsd = (0..m)
        .map(|_| LatentProcess::new(LatentKind::LogSignalSd, sample_gp(&cfg.logsd_prior, &times, rng)?, cfg.logsd_prior))
        .collect::<Result<Vec<_>>>()?;
    let truth = LatentTruth { times: times.clone(), loglen, logsd, corr_fn: cfg.corr_fn, noise_var: cfg.noise_var };
    let params = truth.to_params(cfg.logsd_prior)?;
    let mut cov = assemble_cov(&params)?;
    cov.add_diag(cfg.noise_var);
    let chol = cholesky(&cov, 0.0)?;
    let z = DVector::from_fn(n * m, |_, _| rng.sample(StandardNormal));
    let y = chol.lower() * z;
    let obs = DMatrix::from_fn(n, m, |r, c| y[c * n + r]);
    let mut mask = DMatrix::from_element(n, m, true);
    if cfg.drop_prob > 0.0 {
        for r in 0..n {
            for c in 0..m {
                mask[(r, c)] = rng.random::<f64>() >= cfg.drop_prob;
            }
            if !(0..m).any(|c| mask[(r, c)]) {
                mask[(r, rng.random_range(0..m))] = true;
            }
        }
    }
    let channels = (1..=m).map(|i| format!("y{i}")).collect();
    let ep = Episode::new(format!("synth-{}", cfg.seed), channels, times, obs, mask)?;
    Ok((ep, truth))
}

/// `Q` midpoints `(i + ½)/Q` of the unit interval.
pub fn unit_grid(q: usize) -> Vec<f64> {
    (0..q).map(|i| (i as f64 + 0.5) / q as f64).collect()
}

/// Differences between fitted and true latent curves on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    /// RMSE of the fitted `C₂₁(t)` against `r(t)`; `None` for one channel.
    pub corr_rmse: Option<f64>,
    /// Fraction of grid points with `|r(t)| ≥ 0.1` where the fitted `C₂₁`
    /// has the sign of `r(t)`.
    pub corr_sign_agreement: Option<f64>,
    /// RMSE of each fitted channel sd against the true `s_m(t)`.
    pub sd_rmse: Vec<f64>,
    pub loglen_rmse: f64,
}

fn rmse_of(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

/// Compares the correlation, sd and log length-scale curves of `fitted`
/// with the truth on `grid`.
pub fn score_recovery(truth: &LatentTruth, fitted: &ModelParams, grid: &[f64]) -> Result<RecoveryReport> {
    let curves = derive_corr_sd_grid(fitted, grid)?;
    let true_sd = truth.sd_at(grid)?;
    let sd_rmse = (0..truth.m())
        .map(|c| {
            let fit: Vec<f64> = curves.iter().map(|cs| cs.sd[c]).collect();
            rmse_of(&fit, &true_sd[c])
        })
        .collect();
    let (corr_rmse, corr_sign_agreement) = if truth.m() >= 2 {
        let r = truth.corr_at(grid);
        let fit: Vec<f64> = curves.iter().map(|cs| cs.corr[(1, 0)]).collect();
        let scored: Vec<(f64, f64)> = r.iter().zip(&fit).filter(|(r, _)| r.abs() >= 0.1).map(|(a, b)| (*a, *b)).collect();
        let agree = if scored.is_empty() {
            None
        } else {
            Some(scored.iter().filter(|(r, f)| r.signum() == f.signum()).count() as f64 / scored.len() as f64)
        };
        (Some(rmse_of(&fit, &r)), agree)
    } else {
        (None, None)
    };
    let fit_len: Vec<f64> = fitted.latents_at(grid)?.lengthscale.iter().map(|l| l.ln()).collect();
    let loglen_rmse = rmse_of(&fit_len, &truth.loglen_at(grid)?);
    Ok(RecoveryReport { corr_rmse, corr_sign_agreement, sd_rmse, loglen_rmse })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{sym_eigen, SymMatrix};

    fn small(seed: u64) -> SynthConfig {
        SynthConfig { n_points: 60, seed, ..SynthConfig::default() }
    }

    #[test]
    fn deterministic_given_seed() {
        let (a, ta) = generate(&small(3)).unwrap();
        let (b, tb) = generate(&small(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = generate(&small(4)).unwrap();
        assert_ne!(a.obs(), c.obs());
    }

    #[test]
    fn times_are_sorted_unit_interval() {
        let (ep, _) = generate(&small(1)).unwrap();
        assert_eq!(ep.n(), 60);
        assert!(ep.times().iter().all(|t| *t > 0.0 && *t < 1.0));
        assert!(ep.times().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn truth_factor_reproduces_sds_and_correlation() {
        let (_, truth) = generate(&small(2)).unwrap();
        for (n, l) in truth.coreg().iter().enumerate() {
            let b = l * l.transpose();
            let s1 = truth.logsd[0].values[n].exp();
            let s2 = truth.logsd[1].values[n].exp();
            let r = (std::f64::consts::PI * truth.times[n]).cos();
            assert!((b[(0, 0)] - s1 * s1).abs() < 1e-12 * s1 * s1);
            assert!((b[(1, 1)] - s2 * s2).abs() < 1e-12 * s2 * s2.max(1.0));
            assert!((b[(1, 0)] / (s1 * s2) - r).abs() < 1e-12);
        }
    }

    #[test]
    fn generated_covariance_is_psd() {
        let (_, truth) = generate(&small(5)).unwrap();
        let kf = assemble_cov(&truth.to_params(GpPrior::new(0.0, 1.0, 0.1).unwrap()).unwrap()).unwrap();
        let e = sym_eigen(&kf).unwrap();
        assert!(e.eigvals[0] >= -1e-8 * kf.trace() / kf.dim() as f64);
    }

    #[test]
    fn zero_correlation_has_diagonal_b() {
        let cfg = SynthConfig { corr_fn: CorrFn::Constant { value: 0.0 }, ..small(6) };
        let (_, truth) = generate(&cfg).unwrap();
        for l in truth.coreg() {
            assert_eq!((l.clone() * l.transpose())[(1, 0)], 0.0);
        }
    }

    #[test]
    fn perfect_correlation_is_rank_one() {
        let cfg = SynthConfig { corr_fn: CorrFn::Constant { value: 1.0 }, ..small(7) };
        let (_, truth) = generate(&cfg).unwrap();
        for l in truth.coreg() {
            let b = SymMatrix::new(&l * l.transpose()).unwrap();
            let e = sym_eigen(&b).unwrap();
            assert!(e.eigvals[0].abs() <= 1e-12 * e.eigvals[1]);
        }
    }

    #[test]
    fn windowed_correlation_follows_cosine() {
        let (ep, _) = generate(&SynthConfig { seed: 11, ..SynthConfig::default() }).unwrap();
        // sample correlation of the first differences over each half
        let corr_on = |lo: f64, hi: f64| {
            let rows: Vec<usize> = (1..ep.n()).filter(|&r| ep.times()[r] > lo && ep.times()[r] < hi).collect();
            let d = |c: usize| -> Vec<f64> { rows.iter().map(|&r| ep.obs()[(r, c)] - ep.obs()[(r - 1, c)]).collect() };
            let (a, b) = (d(0), d(1));
            let ma = a.iter().sum::<f64>() / a.len() as f64;
            let mb = b.iter().sum::<f64>() / b.len() as f64;
            let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
            let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
            let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
            cov / (va * vb).sqrt()
        };
        assert!(corr_on(0.05, 0.4) > 0.0);
        assert!(corr_on(0.6, 0.95) < 0.0);
    }

    #[test]
    fn drop_mask_keeps_every_row() {
        let cfg = SynthConfig { drop_prob: 0.6, ..small(8) };
        let (ep, _) = generate(&cfg).unwrap();
        assert!(!ep.is_complete());
        assert!(ep.n_present() >= ep.n());
        assert!(generate(&SynthConfig { drop_prob: 1.0, ..small(8) }).is_err());
    }

    #[test]
    fn self_recovery_is_exact() {
        let (_, truth) = generate(&small(9)).unwrap();
        let fitted = truth.to_params(GpPrior::new(0.0, 1.0, 0.1).unwrap()).unwrap();
        let rep = score_recovery(&truth, &fitted, &truth.times).unwrap();
        assert!(rep.corr_rmse.unwrap() < 1e-12);
        assert!(rep.sd_rmse.iter().all(|v| *v < 1e-12));
        assert!(rep.loglen_rmse < 1e-12);
        assert_eq!(rep.corr_sign_agreement, Some(1.0));
    }

    fn uncorrelated_fit(truth: &LatentTruth) -> ModelParams {
        let pr = GpPrior::new(0.0, 1.0, 0.1).unwrap();
        let n = truth.times.len();
        let coreg = tri_pairs(2)
            .into_iter()
            .map(|(i, j)| LatentProcess::constant(LatentKind::CoregEntry(i, j), n, if i == j { 1.0 } else { 0.0 }, pr).unwrap())
            .collect();
        ModelParams::new(0.1, truth.times.clone(), Structure::Gnmgp { coreg, loglen: truth.loglen.clone() }).unwrap()
    }

    #[test]
    fn zero_correlation_baseline() {
        let (_, truth) = generate(&small(10)).unwrap();
        let fitted = uncorrelated_fit(&truth);
        let rep = score_recovery(&truth, &fitted, &unit_grid(100)).unwrap();
        assert!((rep.corr_rmse.unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        let one = score_recovery(&truth, &fitted, &[0.5]).unwrap();
        assert!(one.corr_rmse.unwrap() < 1e-15);
        assert_eq!(one.corr_sign_agreement, None);
    }

    #[test]
    fn general_factor_is_kms_cholesky() {
        let s = [1.5, 0.7, 2.0];
        let r: f64 = -0.4;
        let l = coreg_factor(&s, r);
        let b = &l * l.transpose();
        for i in 0..3 {
            for j in 0..3 {
                let expected = s[i] * s[j] * r.powi((i as i32 - j as i32).abs());
                assert!((b[(i, j)] - expected).abs() < 1e-12);
            }
        }
    }
}
