//! Exact Gaussian predictive distribution and hold-out scores.

use nalgebra::{DMatrix, DVector};

use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::kernels::{cross_cov, gibbs, LatentEval};
use crate::linalg::{cholesky, mvn_logpdf, SymMatrix};
use crate::model::ModelParams;

/// Predictive distribution of the latent `f*` at `Q` query times,
/// dimension-major (`m·Q + q`).
#[derive(Debug, Clone)]
pub struct PredictiveDist {
    pub query: Vec<f64>,
    pub m: usize,
    pub mean: DVector<f64>,
    pub cov: SymMatrix,
    /// Observation noise added when scoring observations.
    pub noise_var: f64,
}

impl PredictiveDist {
    pub fn q(&self) -> usize {
        self.query.len()
    }

    pub fn mean_at(&self, q: usize, m: usize) -> f64 {
        self.mean[m * self.q() + q]
    }

    /// Marginal sd of the latent function.
    pub fn sd_at(&self, q: usize, m: usize) -> f64 {
        let k = m * self.q() + q;
        self.cov.as_matrix()[(k, k)].max(0.0).sqrt()
    }

    /// Marginal sd of a new observation (noise included).
    pub fn obs_sd_at(&self, q: usize, m: usize) -> f64 {
        (self.sd_at(q, m).powi(2) + self.noise_var).sqrt()
    }
}

/// Cross covariance in time-major order (`q·M + m` by `n·M + m'`): block
/// `(q, n)` is `k(t*_q, t_n)·A(t*_q)·A(t_n)ᵀ`.
pub fn cross_cov_time_major(a: &LatentEval, b: &LatentEval) -> DMatrix<f64> {
    let m = a.m().max(b.m());
    let mut out = DMatrix::zeros(m * a.len(), m * b.len());
    for i in 0..a.len() {
        for j in 0..b.len() {
            let k = gibbs(a.times[i], b.times[j], a.lengthscale[i], b.lengthscale[j]);
            let block = k * &a.factor[i] * b.factor[j].transpose();
            out.view_mut((i * m, j * m), (m, m)).copy_from(&block);
        }
    }
    out
}

/// Permutation `P` taking time-major position `n·M + m` to dimension-major
/// position `m·N + n`: entry `k` of the result is the time-major index that
/// lands at dimension-major index `k`.
pub fn time_to_dim_major(n: usize, m: usize) -> Vec<usize> {
    (0..n * m).map(|k| (k % n) * m + k / n).collect()
}

fn permute(mat: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |r, c| mat[(rows[r], cols[c])])
}

/// `f* | y ~ N(μ*, Σ*)` at `query` given the observed entries of `ep`.
///
/// Latent functions at the query times come from their conditional means.
/// The cross covariance is assembled time-major and permuted to
/// dimension-major order; missing training entries are dropped.
pub fn predict(params: &ModelParams, ep: &Episode, query: &[f64]) -> Result<PredictiveDist> {
    params.validate()?;
    if params.times.as_slice() != ep.times() || params.m() != ep.m() {
        return Err(Error::DimensionMismatch("parameters were not fitted on this episode's grid".into()));
    }
    if query.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("query time".into()));
    }
    let (m, n, q) = (ep.m(), ep.n(), query.len());
    let eq = params.latents_at(query)?;
    let to_dim_q = time_to_dim_major(q, m);
    let kqq = if q == 0 {
        DMatrix::zeros(0, 0)
    } else {
        permute(&cross_cov_time_major(&eq, &eq), &to_dim_q, &to_dim_q)
    };
    let idx = ep.observed_indices();
    if idx.is_empty() {
        return Ok(PredictiveDist {
            query: query.to_vec(),
            m,
            mean: DVector::zeros(q * m),
            cov: SymMatrix::new(kqq)?,
            noise_var: params.noise_var,
        });
    }
    let et = params.latents_at(&params.times)?;
    let mut ktt = SymMatrix::new(cross_cov(&et, &et))?.select(&idx);
    ktt.add_diag(params.noise_var);
    let chol = cholesky(&ktt, 0.0)?;
    // rows: observed training entries; columns: query entries
    let to_dim_n = time_to_dim_major(n, m);
    let obs_rows: Vec<usize> = idx.iter().map(|&k| to_dim_n[k]).collect();
    let kstar = permute(&cross_cov_time_major(&et, &eq), &obs_rows, &to_dim_q);
    let y = ep.observed_values();
    let mean = kstar.tr_mul(&chol.solve(&y));
    let v = chol.solve_lower_mat(&kstar);
    let cov = SymMatrix::new(kqq - v.tr_mul(&v))?;
    Ok(PredictiveDist { query: query.to_vec(), m, mean, cov, noise_var: params.noise_var })
}

fn scored(pred: &PredictiveDist, truth: &Episode) -> Result<Vec<usize>> {
    if truth.times() != pred.query.as_slice() || truth.m() != pred.m {
        return Err(Error::DimensionMismatch(format!(
            "prediction covers {} times x {} outputs, truth has {} x {}",
            pred.q(),
            pred.m,
            truth.n(),
            truth.m()
        )));
    }
    let idx = truth.observed_indices();
    if idx.is_empty() {
        return Err(Error::EmptyHoldout);
    }
    Ok(idx)
}

/// Root mean squared error of the predictive mean over present entries.
pub fn rmse(pred: &PredictiveDist, truth: &Episode) -> Result<f64> {
    let idx = scored(pred, truth)?;
    let y = truth.observed_values();
    let sse: f64 = idx.iter().zip(y.iter()).map(|(&k, v)| (pred.mean[k] - v).powi(2)).sum();
    Ok((sse / idx.len() as f64).sqrt())
}

/// Joint log density of the present held-out observations under
/// `N(μ*, Σ* + σ²·I)`, divided by the number of scored scalars.
pub fn lpd(pred: &PredictiveDist, truth: &Episode) -> Result<f64> {
    let idx = scored(pred, truth)?;
    let y = truth.observed_values();
    let mean = DVector::from_iterator(idx.len(), idx.iter().map(|&k| pred.mean[k]));
    let mut cov = pred.cov.select(&idx);
    cov.add_diag(pred.noise_var);
    Ok(mvn_logpdf(&y, &mean, &cov)? / idx.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{assemble_cov, rbf};
    use crate::latent::{GpPrior, LatentKind, LatentProcess};
    use crate::linalg::sym_eigen;
    use crate::model::{tri_pairs, Structure};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn grid(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        let mut t: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        t.sort_by(f64::total_cmp);
        t
    }

    fn lower(m: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        DMatrix::from_fn(m, m, |i, j| if j <= i { rng.random_range(-1.0..1.0) } else { 0.0 })
    }

    fn smgp(times: &[f64], coreg: DMatrix<f64>, noise: f64) -> ModelParams {
        ModelParams::new(noise, times.to_vec(), Structure::Smgp { coreg, loglen: -1.5, logamp: 0.2 }).unwrap()
    }

    fn gnmgp(times: &[f64], m: usize, rng: &mut impl Rng, noise: f64) -> ModelParams {
        let pr = GpPrior::new(0.0, 1.0, 0.3).unwrap();
        let n = times.len();
        let coreg = tri_pairs(m)
            .into_iter()
            .map(|(i, j)| {
                let base = if i == j { 1.0 } else { 0.0 };
                let v = (0..n).map(|_| base + rng.random_range(-0.3..0.3)).collect();
                LatentProcess::new(LatentKind::CoregEntry(i, j), v, pr).unwrap()
            })
            .collect();
        let loglen =
            LatentProcess::new(LatentKind::LogLengthScale, (0..n).map(|_| rng.random_range(-2.0..-1.0)).collect(), pr)
                .unwrap();
        ModelParams::new(noise, times.to_vec(), Structure::Gnmgp { coreg, loglen }).unwrap()
    }

    fn episode(times: &[f64], m: usize, rng: &mut impl Rng) -> Episode {
        let obs = DMatrix::from_fn(times.len(), m, |_, _| rng.random_range(-2.0..2.0));
        Episode::complete("p", times.to_vec(), obs).unwrap()
    }

    #[test]
    fn permutation_is_a_bijection() {
        let p = time_to_dim_major(4, 3);
        let mut sorted = p.clone();
        sorted.sort();
        assert_eq!(sorted, (0..12).collect::<Vec<_>>());
        // dimension-major slot m·N + n holds time-major n·M + m
        assert_eq!(p[2 * 4 + 1], 1 * 3 + 2);
    }

    #[test]
    fn time_major_assembly_matches_dimension_major() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let times = grid(6, &mut rng);
        let q = [0.05, 0.5, 0.77];
        for p in [smgp(&times, lower(3, &mut rng), 0.1), gnmgp(&times, 3, &mut rng, 0.1)] {
            let a = p.latents_at(&q).unwrap();
            let b = p.latents_at(&times).unwrap();
            let direct = cross_cov(&b, &a);
            let permuted = permute(&cross_cov_time_major(&b, &a), &time_to_dim_major(6, 3), &time_to_dim_major(3, 3));
            assert!((direct - permuted).amax() < 1e-12);
        }
    }

    #[test]
    fn noise_free_interpolation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let times: Vec<f64> = (0..12).map(|i| (i as f64 + rng.random_range(0.0..0.5)) / 12.0).collect();
        let ep = episode(&times, 2, &mut rng);
        let coreg = lower(2, &mut rng) + DMatrix::identity(2, 2);
        let p = ModelParams::new(1e-12, times.clone(), Structure::Smgp { coreg, loglen: -3.0, logamp: 0.2 }).unwrap();
        let pred = predict(&p, &ep, &times[3..6]).unwrap();
        for q in 0..3 {
            for m in 0..2 {
                assert!((pred.mean_at(q, m) - ep.obs()[(q + 3, m)]).abs() < 1e-5);
                assert!(pred.sd_at(q, m) <= 1e-4);
            }
        }
    }

    #[test]
    fn far_query_reverts_to_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let times = grid(10, &mut rng);
        let ep = episode(&times, 2, &mut rng);
        let p = gnmgp(&times, 2, &mut rng, 0.05);
        let far = [1e3];
        let pred = predict(&p, &ep, &far).unwrap();
        let a = &p.latents_at(&far).unwrap().factor[0];
        let b = a * a.transpose();
        for m in 0..2 {
            assert!(pred.mean_at(0, m).abs() < 1e-12);
            assert!((pred.sd_at(0, m).powi(2) - b[(m, m)]).abs() < 1e-12);
        }
    }

    #[test]
    fn univariate_gp_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let times = grid(9, &mut rng);
        let ep = episode(&times, 1, &mut rng);
        let l = DMatrix::from_element(1, 1, 0.8);
        let p = smgp(&times, l, 0.07);
        let query = [0.1, 0.45, 1.2];
        let pred = predict(&p, &ep, &query).unwrap();
        // textbook: μ = k*ᵀ (K + σ²I)⁻¹ y, Σ = K** − k*ᵀ (K + σ²I)⁻¹ k*
        let amp = 0.8 * 0.2f64.exp();
        let len = (-1.5f64).exp();
        let k = DMatrix::from_fn(9, 9, |i, j| rbf(times[i], times[j], amp, len) + if i == j { 0.07 } else { 0.0 });
        let ks = DMatrix::from_fn(9, 3, |i, j| rbf(times[i], query[j], amp, len));
        let kss = DMatrix::from_fn(3, 3, |i, j| rbf(query[i], query[j], amp, len));
        let lu = k.lu();
        let y = DVector::from_column_slice(ep.obs().as_slice());
        let mean = ks.transpose() * lu.solve(&y).unwrap();
        let cov = &kss - ks.transpose() * lu.solve(&ks).unwrap();
        assert!((&pred.mean - mean).amax() < 1e-10);
        assert!((pred.cov.as_matrix() - cov).amax() < 1e-10);
    }

    #[test]
    fn conditioning_shrinks_covariance_and_mean_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let times = grid(8, &mut rng);
        let p = gnmgp(&times, 2, &mut rng, 0.1);
        let e1 = episode(&times, 2, &mut rng);
        let e2 = episode(&times, 2, &mut rng);
        let sum = Episode::complete("s", times.clone(), e1.obs() + e2.obs()).unwrap();
        let q = [0.2, 0.6, 0.9];
        let p1 = predict(&p, &e1, &q).unwrap();
        let p2 = predict(&p, &e2, &q).unwrap();
        let ps = predict(&p, &sum, &q).unwrap();
        assert!((&ps.mean - (&p1.mean + &p2.mean)).amax() < 1e-10);
        let with_latents = p.latents_at(&q).unwrap();
        let kqq = cross_cov(&with_latents, &with_latents);
        let shrink = SymMatrix::new(kqq.clone() - p1.cov.as_matrix()).unwrap();
        let eig = sym_eigen(&shrink).unwrap();
        assert!(eig.eigvals[0] >= -1e-8 * kqq.trace());
        let post_eig = sym_eigen(&p1.cov).unwrap();
        assert!(post_eig.eigvals[0] >= -1e-8 * kqq.trace() / 6.0);
    }

    #[test]
    fn empty_training_returns_prior() {
        let pr = GpPrior::new(0.5, 1.0, 0.3).unwrap();
        let structure = Structure::Nmgp {
            coreg: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 0.7]),
            loglen: LatentProcess::new(LatentKind::LogLengthScale, vec![], pr).unwrap(),
            logsd: LatentProcess::new(LatentKind::LogSignalSd, vec![], pr).unwrap(),
        };
        let p = ModelParams::new(0.1, vec![], structure).unwrap();
        let empty =
            Episode::new("e", vec!["a".into(), "b".into()], vec![], DMatrix::zeros(0, 2), DMatrix::from_element(0, 2, true))
                .unwrap();
        let q = [0.0, 0.4];
        let pred = predict(&p, &empty, &q).unwrap();
        assert!(pred.mean.iter().all(|v| *v == 0.0));
        let mut full = p.clone();
        full.times = q.to_vec();
        if let Structure::Nmgp { loglen, logsd, .. } = &mut full.structure {
            loglen.values = vec![0.5; 2];
            logsd.values = vec![0.5; 2];
        }
        let prior = assemble_cov(&full).unwrap();
        assert!((pred.cov.as_matrix() - prior.as_matrix()).amax() < 1e-14);
    }

    fn dist(mean: Vec<f64>, sds: Vec<f64>, noise: f64, q: usize, m: usize) -> PredictiveDist {
        let cov = DMatrix::from_diagonal(&DVector::from_iterator(sds.len(), sds.iter().map(|s| s * s)));
        PredictiveDist {
            query: (0..q).map(|i| i as f64).collect(),
            m,
            mean: DVector::from_vec(mean),
            cov: SymMatrix::new(cov).unwrap(),
            noise_var: noise,
        }
    }

    fn truth(vals: &[f64], q: usize, m: usize) -> Episode {
        Episode::complete("t", (0..q).map(|i| i as f64).collect(), DMatrix::from_column_slice(q, m, vals)).unwrap()
    }

    #[test]
    fn rmse_cases() {
        let d = dist(vec![1.0, 2.0, 3.0, 4.0], vec![1.0; 4], 0.0, 2, 2);
        assert_eq!(rmse(&d, &truth(&[1.0, 2.0, 3.0, 4.0], 2, 2)).unwrap(), 0.0);
        let off = rmse(&d, &truth(&[1.5, 2.5, 3.5, 4.5], 2, 2)).unwrap();
        assert!((off - 0.5).abs() < 1e-15);
        let mut mask = DMatrix::from_element(2, 2, true);
        mask[(1, 0)] = false;
        let partial = Episode::new(
            "t",
            vec!["a".into(), "b".into()],
            vec![0.0, 1.0],
            DMatrix::from_column_slice(2, 2, &[2.0, 99.0, 3.0, 4.0]),
            mask,
        )
        .unwrap();
        assert!((rmse(&d, &partial).unwrap() - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(rmse(&d, &truth(&[0.0; 2], 2, 1)).is_err());
    }

    #[test]
    fn lpd_cases() {
        let d = dist(vec![0.3], vec![0.6], 0.64, 1, 1);
        let v = lpd(&d, &truth(&[0.3], 1, 1)).unwrap();
        assert!((v + 0.5 * (2.0 * PI).ln()).abs() < 1e-12);
        let wide = dist(vec![0.3], vec![6.0], 64.0, 1, 1);
        assert!((lpd(&wide, &truth(&[0.3], 1, 1)).unwrap() - (v - 10f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn lpd_matches_direct_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let times = grid(20, &mut rng);
        let ep = episode(&times, 3, &mut rng);
        let (train, test) = ep.split_holdout(5).unwrap();
        let mut p = gnmgp(&times, 3, &mut rng, 0.2);
        // restrict the latent grid to the training rows
        if let Structure::Gnmgp { coreg, loglen } = &mut p.structure {
            for proc in coreg.iter_mut().chain(std::iter::once(loglen)) {
                proc.values.truncate(15);
            }
        }
        p.times.truncate(15);
        let pred = predict(&p, &train, test.times()).unwrap();
        let mut cov = pred.cov.clone();
        cov.add_diag(0.2);
        let y = DVector::from_column_slice(test.obs().as_slice());
        let direct = mvn_logpdf(&y, &pred.mean, &cov).unwrap() / 15.0;
        assert!((lpd(&pred, &test).unwrap() - direct).abs() < 1e-10);
    }

    #[test]
    fn missing_training_entries_are_dropped() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let times = grid(10, &mut rng);
        let full = episode(&times, 2, &mut rng);
        let mut mask = DMatrix::from_element(10, 2, true);
        mask[(4, 1)] = false;
        let mut obs = full.obs().clone();
        obs[(4, 1)] = 1e6;
        let ep = Episode::new("m", full.channels.clone(), times.clone(), obs.clone(), mask.clone()).unwrap();
        obs[(4, 1)] = -1e6;
        let ep2 = Episode::new("m", full.channels.clone(), times.clone(), obs, mask).unwrap();
        let p = gnmgp(&times, 2, &mut rng, 0.1);
        let a = predict(&p, &ep, &[0.5]).unwrap();
        let b = predict(&p, &ep2, &[0.5]).unwrap();
        assert_eq!(a.mean, b.mean);
        let c = predict(&p, &full, &[0.5]).unwrap();
        assert!((a.cov.trace() - c.cov.trace()) >= -1e-12);
    }
}
