//! Mixture fit that models the prior true-link probability of each row as a
//! logistic function of its confidence measure.

use crate::error::Result;
use crate::mixture::{
    e_step, fit_mixture, initial_theta, logistic, logistic_m_step, observed_loglik, q_function,
    weighted_least_squares, EmConfig, LinkFitting, LinkModel, MixtureData, MixtureFit, RegressionParams,
};

/// Starting eta used when none is given.
pub const DEFAULT_ETA: [f64; 2] = [0.0, 1.0];

/// `1 / (1 + exp(-(eta0 + eta1 c)))`.
pub fn logistic_h(c: f64, eta: [f64; 2]) -> f64 {
    logistic(eta[0] + eta[1] * c)
}

pub fn observed_loglik_plmic(data: &MixtureData, theta: &RegressionParams, eta: [f64; 2]) -> f64 {
    observed_loglik(data, theta, &LinkModel::Logistic { eta })
}

pub fn e_step_plmic(data: &MixtureData, theta: &RegressionParams, eta: [f64; 2], eps: f64) -> Vec<f64> {
    e_step(data, theta, &LinkModel::Logistic { eta }, eps)
}

pub fn q_plmic(data: &MixtureData, theta: &RegressionParams, eta: [f64; 2], probs: &[f64]) -> f64 {
    q_function(data, theta, &LinkModel::Logistic { eta }, probs)
}

/// Weighted least squares for theta and a weighted logistic fit for eta.
pub fn m_step_plmic(
    data: &MixtureData,
    probs: &[f64],
    eta_old: [f64; 2],
    cfg: &EmConfig,
) -> Result<(RegressionParams, [f64; 2])> {
    let theta = weighted_least_squares(data, probs)?;
    let eta = logistic_m_step(data.c(), probs, eta_old, cfg.eta_solver);
    Ok((theta, eta))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlmicInit {
    /// Overrides the OLS start chosen by `EmConfig::init`.
    pub theta: Option<RegressionParams>,
    pub eta: [f64; 2],
    /// Hold eta at its start value instead of estimating it.
    pub fix_eta: bool,
}

impl Default for PlmicInit {
    fn default() -> Self {
        PlmicInit {
            theta: None,
            eta: DEFAULT_ETA,
            fix_eta: false,
        }
    }
}

/// EM with restarts; eta is held fixed when requested or when every row is a seed.
pub fn fit_plmic(data: &MixtureData, cfg: &EmConfig, init: &PlmicInit) -> Result<MixtureFit> {
    let mut warnings = Vec::new();
    let theta = match &init.theta {
        Some(t) => t.clone(),
        None => {
            let (t, note) = initial_theta(data, cfg.init)?;
            warnings.extend(note);
            t
        }
    };
    let fitting = if init.fix_eta || data.n_seeds() == data.len() {
        LinkFitting::Fixed
    } else {
        LinkFitting::Estimate
    };
    fit_mixture(data, theta, LinkModel::Logistic { eta: init.eta }, fitting, cfg, warnings)
}
