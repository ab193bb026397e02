//! Marginal response densities for the false-link mixture component.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Densities are floored here so their logs stay finite.
pub const DENSITY_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginalKind {
    Normal,
    Kde,
}

impl std::str::FromStr for MarginalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(MarginalKind::Normal),
            "kde" => Ok(MarginalKind::Kde),
            other => Err(Error::invalid(format!("unknown marginal density kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MarginalDensity {
    Normal { mean: f64, variance: f64 },
    Kde { points: Vec<f64>, bandwidth: f64 },
}

impl MarginalDensity {
    pub fn fit(kind: MarginalKind, y: &[f64]) -> Result<Self> {
        match kind {
            MarginalKind::Normal => fit_normal_marginal(y),
            MarginalKind::Kde => fit_kde_marginal(y),
        }
    }

    pub fn eval(&self, y: f64) -> f64 {
        let v = match self {
            MarginalDensity::Normal { mean, variance } => normal_pdf(y, *mean, *variance),
            MarginalDensity::Kde { points, bandwidth } => {
                let h = *bandwidth;
                let norm = 1.0 / (points.len() as f64 * h * (2.0 * PI).sqrt());
                points
                    .iter()
                    .map(|p| {
                        let u = (y - p) / h;
                        (-0.5 * u * u).exp()
                    })
                    .sum::<f64>()
                    * norm
            }
        };
        v.max(DENSITY_FLOOR)
    }

    pub fn ln_eval(&self, y: f64) -> f64 {
        self.eval(y).ln()
    }
}

fn normal_pdf(y: f64, mean: f64, variance: f64) -> f64 {
    let z = y - mean;
    (-0.5 * z * z / variance).exp() / (2.0 * PI * variance).sqrt()
}

/// Normal with the sample mean and the maximum-likelihood variance.
pub fn fit_normal_marginal(y: &[f64]) -> Result<MarginalDensity> {
    if y.len() < 2 {
        return Err(Error::Degenerate("need at least two responses".into()));
    }
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let variance = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if !(variance > 0.0) {
        return Err(Error::Degenerate("responses have zero variance".into()));
    }
    Ok(MarginalDensity::Normal { mean, variance })
}

/// Gaussian kernel estimate with Silverman's rule-of-thumb bandwidth
/// `0.9 min(sd, IQR / 1.34) n^(-1/5)`.
pub fn fit_kde_marginal(y: &[f64]) -> Result<MarginalDensity> {
    if y.len() < 5 {
        return Err(Error::Degenerate("kernel density needs at least five responses".into()));
    }
    let bandwidth = silverman_bandwidth(y);
    if !(bandwidth > 0.0) {
        return Err(Error::Degenerate("responses have zero spread".into()));
    }
    Ok(MarginalDensity::Kde {
        points: y.to_vec(),
        bandwidth,
    })
}

pub fn silverman_bandwidth(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut sorted = y.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * n.powf(-0.2)
}

/// Linearly interpolated quantile of sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}
