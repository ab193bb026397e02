//! Mixture fit without confidence measures: every non-seed row is a true
//! link with one shared probability `delta`, and seeds anchor the regression.

use crate::error::{Error, Result};
use crate::mixture::{
    e_step, fit_mixture, initial_theta, observed_loglik, weighted_least_squares, EmConfig, InitSource, LinkFitting,
    LinkModel, MixtureData, MixtureFit, RegressionParams,
};

pub const DEFAULT_DELTA: f64 = 0.9;

fn require_seeds(data: &MixtureData) -> Result<()> {
    if data.n_seeds() == 0 {
        return Err(Error::invalid("the seed-only model needs at least one seed"));
    }
    Ok(())
}

/// `n_s log delta + sum_seeds log phi + sum_rest log(phi delta + p_Y (1 - delta))`.
pub fn observed_loglik_plmi(data: &MixtureData, theta: &RegressionParams, delta: f64) -> Result<f64> {
    require_seeds(data)?;
    Ok(observed_loglik(data, theta, &LinkModel::Constant { delta }))
}

pub fn e_step_plmi(data: &MixtureData, theta: &RegressionParams, delta: f64, eps: f64) -> Vec<f64> {
    e_step(data, theta, &LinkModel::Constant { delta }, eps)
}

/// Weighted least squares for theta; `delta` is the mean latent probability
/// with seeds counted as 1, clamped to `[eps, 1 - eps]`.
pub fn m_step_plmi(data: &MixtureData, probs: &[f64], eps: f64) -> Result<(RegressionParams, f64)> {
    let theta = weighted_least_squares(data, probs)?;
    Ok((theta, update_delta(probs, eps)))
}

/// Closed-form delta update: the mean latent probability, clamped.
pub fn update_delta(probs: &[f64], eps: f64) -> f64 {
    (probs.iter().sum::<f64>() / probs.len() as f64).clamp(eps, 1.0 - eps)
}

/// EM with restarts, started from seed OLS (unless configured otherwise) and
/// `delta = 0.9`.
pub fn fit_plmi(data: &MixtureData, cfg: &EmConfig) -> Result<MixtureFit> {
    require_seeds(data)?;
    let source = match cfg.init {
        InitSource::Auto => InitSource::SeedOls,
        other => other,
    };
    let (theta, note) = initial_theta(data, source)?;
    fit_mixture(
        data,
        theta,
        LinkModel::Constant { delta: DEFAULT_DELTA },
        LinkFitting::Estimate,
        cfg,
        note.into_iter().collect(),
    )
}
