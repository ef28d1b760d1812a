//! Stationary, separable-nonstationary and nonseparable-nonstationary
//! multivariate Gaussian processes for irregularly sampled time series.
//!
//! The three model classes share one covariance form,
//! `K^f(t, t', m, m') = K(t, t')·[A(t) A(t')ᵀ]_{m,m'}` with a Gibbs temporal
//! kernel `K`:
//!
//! * [`ModelKind::Smgp`]: constant length-scale and `A = amp·L`.
//! * [`ModelKind::Nmgp`]: latent log length-scale and log signal sd,
//!   `A(t) = σ(t)·L`.
//! * [`ModelKind::Gnmgp`]: latent log length-scale and a latent
//!   lower-triangular `A(t) = L(t)`.
//!
//! Parameters are fitted by MAP gradient ascent ([`infer::map_fit`]) or
//! sampled with HMC ([`infer::hmc_sample`]); predictions come from
//! [`predict::predict`].

pub mod episode;
pub mod error;
pub mod infer;
pub mod kernels;
pub mod latent;
pub mod linalg;
pub mod model;
pub mod predict;
pub mod synth;

pub use episode::Episode;
pub use error::{Error, Result};
pub use kernels::ModelKind;
pub use latent::{GpPrior, LatentKind, LatentProcess};
pub use model::{Mode, ModelParams, PriorSpec, Structure};
