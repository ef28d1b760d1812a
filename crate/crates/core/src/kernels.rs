//! Covariance functions and full covariance assembly.
//!
//! Every vectorized quantity uses dimension-major ordering: entry
//! `(time n, output m)` sits at index `m·N + n`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{kron, SymMatrix};
use crate::model::{ModelParams, Structure};

/// The three model classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    /// Stationary, separable: `B ⊗ K_rbf`.
    #[serde(rename = "SMGP")]
    Smgp,
    /// Separable with time-varying length-scale and signal sd.
    #[serde(rename = "NMGP")]
    Nmgp,
    /// Nonseparable with time-varying coregionalization.
    #[serde(rename = "GNMGP")]
    Gnmgp,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Smgp, ModelKind::Nmgp, ModelKind::Gnmgp];

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Smgp => "SMGP",
            ModelKind::Nmgp => "NMGP",
            ModelKind::Gnmgp => "GNMGP",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SMGP" => Ok(ModelKind::Smgp),
            "NMGP" => Ok(ModelKind::Nmgp),
            "GNMGP" => Ok(ModelKind::Gnmgp),
            other => Err(Error::InvalidParams(format!("unknown model kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Squared-exponential kernel `amp²·exp(−(t−t2)²/(2·len²))`.
#[inline]
pub fn rbf(t: f64, t2: f64, amp: f64, len: f64) -> f64 {
    let d = t - t2;
    amp * amp * (-(d * d) / (2.0 * len * len)).exp()
}

/// Gibbs kernel with length-scales `l1 = ℓ(t)` and `l2 = ℓ(t2)`.
#[inline]
pub fn gibbs(t: f64, t2: f64, l1: f64, l2: f64) -> f64 {
    let d = t - t2;
    let s = l1 * l1 + l2 * l2;
    (2.0 * l1 * l2 / s).sqrt() * (-(d * d) / s).exp()
}

/// `∂ log gibbs / ∂ log l1`.
#[inline]
pub(crate) fn gibbs_dlog_l1(t: f64, t2: f64, l1: f64, l2: f64) -> f64 {
    let d = t - t2;
    let s = l1 * l1 + l2 * l2;
    let r = l1 * l1 / s;
    0.5 - r + 2.0 * d * d * r / s
}

/// Separable nonstationary kernel `s1·s2·gibbs(t, t2, l1, l2)`.
#[inline]
pub fn nmgp_k(t: f64, t2: f64, l1: f64, l2: f64, s1: f64, s2: f64) -> f64 {
    s1 * s2 * gibbs(t, t2, l1, l2)
}

/// Cross-output block `kval·L1·L2ᵀ` of the nonseparable kernel.
pub fn gnmgp_block(l1: &DMatrix<f64>, l2: &DMatrix<f64>, kval: f64) -> Result<DMatrix<f64>> {
    if !l1.is_square() || l1.shape() != l2.shape() {
        return Err(Error::DimensionMismatch(format!(
            "coregionalization factors {:?} and {:?}",
            l1.shape(),
            l2.shape()
        )));
    }
    Ok(kval * l1 * l2.transpose())
}

/// Latent quantities evaluated on a set of timestamps, in the common form
/// `K^f(t, t') = gibbs(t, t'; ℓ(t), ℓ(t'))·[A(t) A(t')ᵀ]` where `A` is the
/// effective coregionalization factor (`amp·L`, `σ(t)·L` or `L(t)`).
#[derive(Debug, Clone)]
pub struct LatentEval {
    pub times: Vec<f64>,
    pub lengthscale: Vec<f64>,
    pub factor: Vec<DMatrix<f64>>,
}

impl LatentEval {
    pub fn m(&self) -> usize {
        self.factor.first().map_or(0, |f| f.nrows())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Cross covariance between all `(t, m)` of `a` and `(t', m')` of `b`, both
/// in dimension-major order.
pub fn cross_cov(a: &LatentEval, b: &LatentEval) -> DMatrix<f64> {
    let m = a.m().max(b.m());
    let (na, nb) = (a.len(), b.len());
    let mut out = DMatrix::zeros(m * na, m * nb);
    for j in 0..nb {
        let fb = &b.factor[j];
        for i in 0..na {
            let k = gibbs(a.times[i], b.times[j], a.lengthscale[i], b.lengthscale[j]);
            let fa = &a.factor[i];
            for q in 0..m {
                for p in 0..m {
                    let mut s = 0.0;
                    for c in 0..m {
                        s += fa[(p, c)] * fb[(q, c)];
                    }
                    out[(p * na + i, q * nb + j)] = k * s;
                }
            }
        }
    }
    out
}

/// Stationary temporal Gram matrix `K_rbf(times)`.
pub fn rbf_gram(times: &[f64], amp: f64, len: f64) -> DMatrix<f64> {
    DMatrix::from_fn(times.len(), times.len(), |i, j| rbf(times[i], times[j], amp, len))
}

/// Nonstationary temporal Gram matrix with entries `nmgp_k`.
pub fn nmgp_gram(times: &[f64], loglen: &[f64], logsd: &[f64]) -> DMatrix<f64> {
    let l: Vec<f64> = loglen.iter().map(|v| v.exp()).collect();
    let s: Vec<f64> = logsd.iter().map(|v| v.exp()).collect();
    DMatrix::from_fn(times.len(), times.len(), |i, j| {
        nmgp_k(times[i], times[j], l[i], l[j], s[i], s[j])
    })
}

/// Separable factors `(B, K)` with `K^f = B ⊗ K`, or `None` for GNMGP.
pub fn separable_factors(params: &ModelParams) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let times = &params.times;
    match &params.structure {
        Structure::Smgp { coreg, loglen, logamp } => Some((
            coreg * coreg.transpose(),
            rbf_gram(times, logamp.exp(), loglen.exp()),
        )),
        Structure::Nmgp { coreg, loglen, logsd } => Some((
            coreg * coreg.transpose(),
            nmgp_gram(times, &loglen.values, &logsd.values),
        )),
        Structure::Gnmgp { .. } => None,
    }
}

/// Full `N·M` covariance of the latent function values at `params.times`.
pub fn assemble_cov(params: &ModelParams) -> Result<SymMatrix> {
    params.validate()?;
    let kf = match separable_factors(params) {
        Some((b, k)) => kron(&b, &k),
        None => {
            let eval = params.latents_at(&params.times)?;
            cross_cov(&eval, &eval)
        }
    };
    SymMatrix::new(kf)
}
