//! Irregularly sampled multivariate time series.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// One multivariate series: `N` strictly increasing timestamps and an
/// `N × M` observation table with a presence mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: String,
    pub channels: Vec<String>,
    times: Vec<f64>,
    obs: DMatrix<f64>,
    mask: DMatrix<bool>,
}

impl Episode {
    pub fn new(
        id: impl Into<String>,
        channels: Vec<String>,
        times: Vec<f64>,
        obs: DMatrix<f64>,
        mask: DMatrix<bool>,
    ) -> Result<Self> {
        let n = times.len();
        let m = channels.len();
        if obs.shape() != (n, m) || mask.shape() != (n, m) {
            return Err(Error::DimensionMismatch(format!(
                "episode with {n} times and {m} channels has obs {:?} and mask {:?}",
                obs.shape(),
                mask.shape()
            )));
        }
        if m == 0 {
            return Err(Error::DimensionMismatch("episode needs at least one channel".into()));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("timestamp".into()));
        }
        if let Some(w) = times.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::DegenerateData(format!(
                "timestamps must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        for r in 0..n {
            if !(0..m).any(|c| mask[(r, c)]) {
                return Err(Error::DegenerateData(format!("row {r} has no observed entries")));
            }
            for c in 0..m {
                if mask[(r, c)] && !obs[(r, c)].is_finite() {
                    return Err(Error::NonFinite(format!("observation at row {r}, column {c}")));
                }
            }
        }
        Ok(Episode { id: id.into(), channels, times, obs, mask })
    }

    /// Fully observed episode with default channel names `y1..yM`.
    pub fn complete(id: impl Into<String>, times: Vec<f64>, obs: DMatrix<f64>) -> Result<Self> {
        let channels = (1..=obs.ncols()).map(|i| format!("y{i}")).collect();
        let mask = DMatrix::from_element(obs.nrows(), obs.ncols(), true);
        Self::new(id, channels, times, obs, mask)
    }

    pub fn n(&self) -> usize {
        self.times.len()
    }

    pub fn m(&self) -> usize {
        self.channels.len()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn obs(&self) -> &DMatrix<f64> {
        &self.obs
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }

    pub fn is_present(&self, n: usize, m: usize) -> bool {
        self.mask[(n, m)]
    }

    pub fn is_complete(&self) -> bool {
        self.mask.iter().all(|&b| b)
    }

    pub fn n_present(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// Dimension-major indices `m·N + n` of the observed entries, ascending.
    pub fn observed_indices(&self) -> Vec<usize> {
        let n = self.n();
        (0..self.m())
            .flat_map(|m| (0..n).filter(move |&i| self.mask[(i, m)]).map(move |i| m * n + i))
            .collect()
    }

    /// Observed values in the order of [`Episode::observed_indices`].
    pub fn observed_values(&self) -> DVector<f64> {
        let n = self.n();
        let vals: Vec<f64> =
            self.observed_indices().into_iter().map(|k| self.obs[(k % n, k / n)]).collect();
        DVector::from_vec(vals)
    }

    /// Sample variance of each channel over its present entries.
    pub fn channel_variances(&self) -> Vec<f64> {
        (0..self.m())
            .map(|c| {
                let v: Vec<f64> =
                    (0..self.n()).filter(|&r| self.mask[(r, c)]).map(|r| self.obs[(r, c)]).collect();
                sample_variance(&v)
            })
            .collect()
    }

    /// Rows `range` as a new episode with the same id and channels.
    pub fn slice(&self, start: usize, end: usize) -> Result<Episode> {
        let rows: Vec<usize> = (start..end).collect();
        let obs = DMatrix::from_fn(rows.len(), self.m(), |r, c| self.obs[(rows[r], c)]);
        let mask = DMatrix::from_fn(rows.len(), self.m(), |r, c| self.mask[(rows[r], c)]);
        Episode::new(
            self.id.clone(),
            self.channels.clone(),
            self.times[start..end].to_vec(),
            obs,
            mask,
        )
    }

    /// Splits off the last `k` observations by time.
    pub fn split_holdout(&self, k: usize) -> Result<(Episode, Episode)> {
        if k >= self.n() {
            return Err(Error::EmptyTraining);
        }
        if k == 0 {
            return Err(Error::EmptyHoldout);
        }
        let cut = self.n() - k;
        Ok((self.slice(0, cut)?, self.slice(cut, self.n())?))
    }
}

pub(crate) fn sample_variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}
