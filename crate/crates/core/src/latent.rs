//! Latent input-dependent functions: log length-scale, log signal sd and
//! the time-varying coregionalization entries.
//!
//! A latent function is stored by its values at the observed timestamps.
//! Values elsewhere come from [`conditional_mean`], the noise-free GP
//! interpolant under the function's own prior.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::episode::{sample_variance, Episode};
use crate::error::{Error, Result};
use crate::kernels::rbf;
use crate::linalg::{cholesky, mvn_logpdf_chol, CholFactor, SymMatrix};

/// Constant-mean GP prior with an RBF covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpPrior {
    pub mean: f64,
    pub amp: f64,
    pub len: f64,
}

impl GpPrior {
    pub fn new(mean: f64, amp: f64, len: f64) -> Result<Self> {
        let p = GpPrior { mean, amp, len };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amp > 0.0 && self.len > 0.0 && self.mean.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "GP prior needs amp > 0 and len > 0, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn cov(&self, a: &[f64], b: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(a.len(), b.len(), |i, j| rbf(a[i], b[j], self.amp, self.len))
    }

    /// Prior covariance at `times` with the linalg jitter policy applied.
    pub fn factor(&self, times: &[f64]) -> Result<CholFactor> {
        check_increasing(times)?;
        let k = SymMatrix::new(self.cov(times, times))?;
        cholesky(&k, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatentKind {
    LogLengthScale,
    LogSignalSd,
    /// Entry `(i, j)` of the lower-triangular coregionalization factor.
    CoregEntry(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentProcess {
    pub kind: LatentKind,
    pub values: Vec<f64>,
    pub prior: GpPrior,
}

impl LatentProcess {
    pub fn new(kind: LatentKind, values: Vec<f64>, prior: GpPrior) -> Result<Self> {
        if let LatentKind::CoregEntry(i, j) = kind {
            if j > i {
                return Err(Error::InvalidParams(format!("coreg entry ({i},{j}) is above the diagonal")));
            }
        }
        prior.validate()?;
        Ok(LatentProcess { kind, values, prior })
    }

    pub fn constant(kind: LatentKind, n: usize, value: f64, prior: GpPrior) -> Result<Self> {
        Self::new(kind, vec![value; n], prior)
    }
}

fn check_increasing(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::DimensionMismatch("empty time grid".into()));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::DegenerateData("time grid must be strictly increasing".into()));
    }
    Ok(())
}

/// Log density of the process values under `N(μ·1, K_prior(times))`.
pub fn prior_logpdf(p: &LatentProcess, times: &[f64]) -> Result<f64> {
    if p.values.len() != times.len() {
        return Err(Error::DimensionMismatch(format!(
            "latent process has {} values for {} timestamps",
            p.values.len(),
            times.len()
        )));
    }
    let chol = p.prior.factor(times)?;
    let x = DVector::from_column_slice(&p.values);
    mvn_logpdf_chol(&x, &DVector::from_element(times.len(), p.prior.mean), &chol)
}

/// Noise-free GP interpolation of the stored values at `query`.
///
/// Query points that coincide exactly with a grid timestamp return the
/// stored value.
pub fn conditional_mean(p: &LatentProcess, times: &[f64], query: &[f64]) -> Result<Vec<f64>> {
    if p.values.len() != times.len() {
        return Err(Error::DimensionMismatch(format!(
            "latent process has {} values for {} timestamps",
            p.values.len(),
            times.len()
        )));
    }
    if query.iter().any(|q| !q.is_finite()) {
        return Err(Error::NonFinite("query time".into()));
    }
    let chol = p.prior.factor(times)?;
    conditional_mean_with(p, times, &chol, query)
}

pub(crate) fn conditional_mean_with(
    p: &LatentProcess,
    times: &[f64],
    chol: &CholFactor,
    query: &[f64],
) -> Result<Vec<f64>> {
    let mu = p.prior.mean;
    let centered = DVector::from_iterator(times.len(), p.values.iter().map(|v| v - mu));
    let alpha = chol.solve(&centered);
    let cross = p.prior.cov(query, times);
    let interp = cross * alpha;
    Ok(query
        .iter()
        .enumerate()
        .map(|(q, &t)| match times.binary_search_by(|x| x.total_cmp(&t)) {
            Ok(i) => p.values[i],
            Err(_) => interp[q] + mu,
        })
        .collect())
}

/// One bin of an empirical semivariogram.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariogramBin {
    pub center: f64,
    pub gamma: f64,
    pub pairs: usize,
}

/// `γ(h) = ½·mean[(y(t) − y(t+h))²]` over `nbins` equal-width lag bins on
/// `(0, max_lag]`. Empty bins are omitted.
pub fn empirical_semivariogram(times: &[f64], values: &[f64], nbins: usize, max_lag: f64) -> Vec<VariogramBin> {
    let width = max_lag / nbins as f64;
    let mut sums = vec![0.0; nbins];
    let mut counts = vec![0usize; nbins];
    for i in 0..times.len() {
        for j in (i + 1)..times.len() {
            let h = (times[j] - times[i]).abs();
            if h > max_lag || h <= 0.0 {
                continue;
            }
            let b = ((h / width).ceil() as usize).clamp(1, nbins) - 1;
            sums[b] += (values[i] - values[j]).powi(2);
            counts[b] += 1;
        }
    }
    (0..nbins)
        .filter(|&b| counts[b] > 0)
        .map(|b| VariogramBin {
            center: (b as f64 + 0.5) * width,
            gamma: 0.5 * sums[b] / counts[b] as f64,
            pairs: counts[b],
        })
        .collect()
}

/// Fraction of the sill at which the range is read off the semivariogram.
pub const SILL_FRACTION: f64 = 0.95;
pub const DEFAULT_VARIOGRAM_BINS: usize = 15;

/// Initial log length-scale vector from the empirical semivariogram.
///
/// For each channel the sill is the sample variance (the semivariogram's
/// plateau for a stationary series) and the range is the first bin center
/// where `γ ≥ 0.95·sill`; lags go up to half the observed time span. The
/// per-channel ranges are averaged and every entry is set to the log of
/// that average.
pub fn init_loglen_semivariogram(ep: &Episode, nbins: usize) -> Result<Vec<f64>> {
    if ep.n() < 4 {
        return Err(Error::DegenerateData(format!("need at least 4 timestamps, got {}", ep.n())));
    }
    if nbins == 0 {
        return Err(Error::InvalidParams("nbins must be positive".into()));
    }
    let times = ep.times();
    let max_lag = 0.5 * (times[ep.n() - 1] - times[0]);
    let mut ranges = Vec::new();
    for c in 0..ep.m() {
        let rows: Vec<usize> = (0..ep.n()).filter(|&r| ep.is_present(r, c)).collect();
        let t: Vec<f64> = rows.iter().map(|&r| times[r]).collect();
        let y: Vec<f64> = rows.iter().map(|&r| ep.obs()[(r, c)]).collect();
        let sill = sample_variance(&y);
        if !(sill > 0.0) {
            continue;
        }
        let bins = empirical_semivariogram(&t, &y, nbins, max_lag);
        let Some(last) = bins.last() else { continue };
        let range = bins
            .iter()
            .find(|b| b.gamma >= SILL_FRACTION * sill)
            .map_or(last.center, |b| b.center);
        ranges.push(range);
    }
    if ranges.is_empty() {
        return Err(Error::DegenerateData("every channel is constant (zero sill)".into()));
    }
    let range = ranges.iter().sum::<f64>() / ranges.len() as f64;
    Ok(vec![range.ln(); ep.n()])
}

/// Initial per-time coregionalization factors from windowed sample
/// covariances.
///
/// At each timestamp the fully observed rows within `[t − w, t + w]` are
/// used; a window holding fewer than `M + 1` rows is widened to the `M + 1`
/// nearest fully observed rows. The returned matrices are lower triangular.
pub fn init_coreg_windowed(ep: &Episode, w: f64) -> Result<Vec<DMatrix<f64>>> {
    let m = ep.m();
    let times = ep.times();
    let full: Vec<usize> = (0..ep.n()).filter(|&r| (0..m).all(|c| ep.is_present(r, c))).collect();
    if full.len() < 2 {
        return Err(Error::DegenerateData(
            "need at least two fully observed rows for a sample covariance".into(),
        ));
    }
    let need = (m + 1).min(full.len());
    let mut out = Vec::with_capacity(ep.n());
    for &t in times {
        let mut rows: Vec<usize> =
            full.iter().copied().filter(|&r| (times[r] - t).abs() <= w).collect();
        if rows.len() < need {
            let mut by_dist = full.clone();
            by_dist.sort_by(|&a, &b| (times[a] - t).abs().total_cmp(&(times[b] - t).abs()));
            rows = by_dist[..need].to_vec();
        }
        let cov = sample_covariance(ep, &rows);
        out.push(lower_factor(cov));
    }
    Ok(out)
}

pub(crate) fn sample_covariance(ep: &Episode, rows: &[usize]) -> DMatrix<f64> {
    let m = ep.m();
    let k = rows.len() as f64;
    let mean: Vec<f64> =
        (0..m).map(|c| rows.iter().map(|&r| ep.obs()[(r, c)]).sum::<f64>() / k).collect();
    DMatrix::from_fn(m, m, |a, b| {
        rows.iter()
            .map(|&r| (ep.obs()[(r, a)] - mean[a]) * (ep.obs()[(r, b)] - mean[b]))
            .sum::<f64>()
            / (k - 1.0)
    })
}

/// Lower Cholesky factor of a sample covariance; falls back to the
/// diagonal square root when the matrix is degenerate beyond the jitter cap.
pub(crate) fn lower_factor(cov: DMatrix<f64>) -> DMatrix<f64> {
    let m = cov.nrows();
    let diag_fallback = |c: &DMatrix<f64>| {
        DMatrix::from_fn(m, m, |i, j| if i == j { c[(i, i)].max(1e-12).sqrt() } else { 0.0 })
    };
    match SymMatrix::new(cov.clone()).and_then(|s| cholesky(&s, 0.0)) {
        Ok(f) => f.lower(),
        Err(_) => diag_fallback(&cov),
    }
}
