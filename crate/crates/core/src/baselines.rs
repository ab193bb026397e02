//! Ordinary least squares and the two non-mixture comparison estimators:
//! the two-stage fit pooled over linked datasets, and the true-link oracle.

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::comparison::RecordFile;
use crate::error::{Error, Result};
use crate::imputation::{pool_all, t_quantile, LinkedDataset, PerDatasetEstimate, PooledCoef, PooledEstimate};

#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    pub beta: Vec<f64>,
    /// Unbiased residual variance `RSS / (n - k)`.
    pub sigma2: f64,
    pub variances: Vec<f64>,
    pub residuals: Vec<f64>,
    pub rss: f64,
    /// Residual degrees of freedom `n - k`.
    pub df: usize,
}

impl OlsFit {
    /// Two-sided t interval for coefficient `l`.
    pub fn interval(&self, l: usize, level: f64) -> (f64, f64) {
        let t = t_quantile(0.5 + level / 2.0, self.df as f64).expect("positive degrees of freedom");
        let half = t * self.variances[l].sqrt();
        (self.beta[l] - half, self.beta[l] + half)
    }

    /// A single complete-data fit as a pooled table: t intervals on `n - k`
    /// degrees of freedom and no between-imputation variance.
    pub fn to_pooled(&self, level: f64) -> PooledEstimate {
        let coefs = (0..self.beta.len())
            .map(|l| {
                let (lo, hi) = self.interval(l, level);
                PooledCoef {
                    estimate: self.beta[l],
                    within: self.variances[l],
                    between: 0.0,
                    total: self.variances[l],
                    df: self.df as f64,
                    lo,
                    hi,
                }
            })
            .collect();
        PooledEstimate {
            coefs,
            used: 1,
            dropped: 0,
            level,
        }
    }

    pub fn to_estimate(&self) -> PerDatasetEstimate {
        let n = self.residuals.len() as f64;
        let mle_var = self.rss / n;
        let loglik = -0.5 * n * ((2.0 * std::f64::consts::PI * mle_var).ln() + 1.0);
        PerDatasetEstimate {
            theta: self.beta.clone(),
            variances: self.variances.clone(),
            converged: true,
            loglik,
        }
    }
}

/// Prepends the intercept column to covariate rows.
pub fn design_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let k = rows.first().map_or(0, Vec::len) + 1;
    DMatrix::from_fn(rows.len(), k, |r, c| if c == 0 { 1.0 } else { rows[r][c - 1] })
}

/// Least squares via Householder QR; variances come from `(R^T R)^{-1}`.
pub fn ols_fit(x: &DMatrix<f64>, y: &[f64]) -> Result<OlsFit> {
    let (n, k) = x.shape();
    if y.len() != n {
        return Err(Error::invalid("design and response lengths differ"));
    }
    if n <= k {
        return Err(Error::Degenerate(format!("OLS needs more than {k} rows, got {n}")));
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let max_diag = (0..k).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if (0..k).any(|i| r[(i, i)].abs() <= 1e-10 * max_diag.max(f64::MIN_POSITIVE)) {
        return Err(Error::RankDeficient);
    }
    let yv = DVector::from_column_slice(y);
    let qty = qr.q().transpose() * &yv;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or(Error::RankDeficient)?;
    let fitted = x * &beta;
    let residuals: Vec<f64> = (&yv - fitted).iter().cloned().collect();
    let rss: f64 = residuals.iter().map(|e| e * e).sum();
    let df = n - k;
    let sigma2 = rss / df as f64;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or(Error::RankDeficient)?;
    let xtx_inv = &r_inv * r_inv.transpose();
    Ok(OlsFit {
        beta: beta.iter().cloned().collect(),
        sigma2,
        variances: (0..k).map(|i| sigma2 * xtx_inv[(i, i)]).collect(),
        residuals,
        rss,
        df,
    })
}

/// OLS on one linked dataset, seeds included as ordinary rows.
pub fn ols_on_dataset(ds: &LinkedDataset) -> Result<OlsFit> {
    let rows: Vec<Vec<f64>> = ds.rows.iter().map(|r| r.x.clone()).collect();
    let y: Vec<f64> = ds.rows.iter().map(|r| r.y).collect();
    ols_fit(&design_matrix(&rows), &y)
}

/// Two-stage estimator: OLS within each linked dataset, pooled by Rubin's rules.
pub fn ts_ols(datasets: &[LinkedDataset], level: f64) -> Result<PooledEstimate> {
    pool_all(&per_dataset_ols(datasets), level)
}

/// OLS per dataset. A dataset that cannot be fitted (too few rows, rank
/// deficient design) gives a non-converged estimate, which pooling drops.
pub fn per_dataset_ols(datasets: &[LinkedDataset]) -> Vec<PerDatasetEstimate> {
    datasets
        .iter()
        .map(|d| match ols_on_dataset(d) {
            Ok(fit) => fit.to_estimate(),
            Err(e) => {
                warn!("two-stage OLS failed on a linked dataset: {e}");
                PerDatasetEstimate {
                    theta: Vec::new(),
                    variances: Vec::new(),
                    converged: false,
                    loglik: f64::NAN,
                }
            }
        })
        .collect()
}

/// OLS over the true-link pairs `(i, j)`.
pub fn perfect_ols(truth: &[(usize, usize)], f1: &RecordFile, f2: &RecordFile) -> Result<OlsFit> {
    if truth.is_empty() {
        return Err(Error::invalid("the true-link table is empty"));
    }
    let mut rows = Vec::with_capacity(truth.len());
    let mut y = Vec::with_capacity(truth.len());
    for &(i, j) in truth {
        let a = f1
            .records
            .get(i)
            .ok_or_else(|| Error::invalid(format!("true link ({i}, {j}) is out of range")))?;
        let b = f2
            .records
            .get(j)
            .ok_or_else(|| Error::invalid(format!("true link ({i}, {j}) is out of range")))?;
        rows.push(a.covariates.clone());
        y.push(
            b.response
                .ok_or_else(|| Error::invalid(format!("file-2 record {j} has no response")))?,
        );
    }
    ols_fit(&design_matrix(&rows), &y)
}
