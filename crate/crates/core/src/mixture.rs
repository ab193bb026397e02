//! Two-component regression mixture shared by the confidence-measure model
//! and the seed-only model. Each linked row is a true link with prior
//! probability `pi_k`, in which case `y ~ N(x'beta, sigma2)`, or a false link
//! whose response follows the frozen marginal density `p_Y`.
//!
//! Seed rows are known links: they contribute `log pi_k + log phi_k` to the
//! log-likelihood and carry latent probability 1.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::baselines::ols_fit;
use crate::error::{Error, Result};
use crate::imputation::{LinkedDataset, PerDatasetEstimate};
use crate::marginal::MarginalDensity;
use crate::optim::{default_step, nelder_mead, numerical_hessian_with, OptimizerConfig};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Regression rows prepared for a mixture fit.
#[derive(Debug, Clone)]
pub struct MixtureData {
    /// Columns per row, intercept included.
    k: usize,
    /// Row-major design, `n * k`.
    x: Vec<f64>,
    y: Vec<f64>,
    c: Vec<f64>,
    ln_py: Vec<f64>,
    /// Rows `0..n_seeds` are seeds.
    n_seeds: usize,
}

impl MixtureData {
    /// `covariates` exclude the intercept; the first `n_seeds` rows are seeds.
    pub fn new(covariates: &[Vec<f64>], y: Vec<f64>, c: Vec<f64>, ln_py: Vec<f64>, n_seeds: usize) -> Result<Self> {
        let n = covariates.len();
        if y.len() != n || c.len() != n || ln_py.len() != n || n_seeds > n {
            return Err(Error::invalid("mixture inputs have inconsistent lengths"));
        }
        let p = covariates.first().map_or(0, Vec::len);
        if covariates.iter().any(|r| r.len() != p) {
            return Err(Error::invalid("covariate rows have different lengths"));
        }
        let all = covariates.iter().flatten().chain(&y).chain(&c).chain(&ln_py);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("mixture inputs must be finite"));
        }
        let k = p + 1;
        let mut x = Vec::with_capacity(n * k);
        for r in covariates {
            x.push(1.0);
            x.extend_from_slice(r);
        }
        Ok(MixtureData {
            k,
            x,
            y,
            c,
            ln_py,
            n_seeds,
        })
    }

    pub fn from_dataset(ds: &LinkedDataset, py: &MarginalDensity) -> Result<Self> {
        let cov: Vec<Vec<f64>> = ds.rows.iter().map(|r| r.x.clone()).collect();
        let y: Vec<f64> = ds.rows.iter().map(|r| r.y).collect();
        let c = ds.rows.iter().map(|r| r.c).collect();
        let ln_py = y.iter().map(|&v| py.ln_eval(v)).collect();
        MixtureData::new(&cov, y, c, ln_py, ds.n_seeds())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_seeds(&self) -> usize {
        self.n_seeds
    }

    /// Coefficients per regression, intercept included.
    pub fn num_coefficients(&self) -> usize {
        self.k
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.x[r * self.k..(r + 1) * self.k]
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    pub fn ln_py(&self) -> &[f64] {
        &self.ln_py
    }

    /// Same rows in a new order, with the seed block moved along.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let n = self.len();
        let mut seen = vec![false; n];
        for &r in order {
            if r >= n || std::mem::replace(&mut seen[r], true) {
                return Err(Error::invalid("not a permutation"));
            }
        }
        if order.len() != n || order[..self.n_seeds].iter().any(|&r| r >= self.n_seeds) {
            return Err(Error::invalid("permutation must keep seeds in the leading block"));
        }
        let mut x = Vec::with_capacity(self.x.len());
        for &r in order {
            x.extend_from_slice(self.row(r));
        }
        let pick = |v: &[f64]| order.iter().map(|&r| v[r]).collect::<Vec<_>>();
        Ok(MixtureData {
            k: self.k,
            x,
            y: pick(&self.y),
            c: pick(&self.c),
            ln_py: pick(&self.ln_py),
            n_seeds: self.n_seeds,
        })
    }

    fn design(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.len(), self.k, &self.x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionParams {
    pub beta: Vec<f64>,
    pub sigma2: f64,
}

impl RegressionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) || self.beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::invalid("regression parameters must be finite with positive variance"));
        }
        Ok(())
    }

    /// Normal log density of row `r`.
    pub fn ln_phi(&self, data: &MixtureData, r: usize) -> f64 {
        let mean: f64 = data.row(r).iter().zip(&self.beta).map(|(a, b)| a * b).sum();
        let e = data.y[r] - mean;
        -0.5 * (LN_2PI + self.sigma2.ln()) - 0.5 * e * e / self.sigma2
    }
}

/// How the prior probability of a true link is modelled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LinkModel {
    /// `h(c) = 1 / (1 + exp(-(eta0 + eta1 c)))`.
    Logistic { eta: [f64; 2] },
    /// A single probability shared by every row.
    Constant { delta: f64 },
}

/// `1 / (1 + exp(-t))` without overflow.
pub fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(t))` without overflow.
pub(crate) fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

impl LinkModel {
    /// `(log pi, log(1 - pi))` for a row with confidence `c`.
    pub fn ln_prior(&self, c: f64) -> (f64, f64) {
        match *self {
            LinkModel::Logistic { eta } => {
                let t = eta[0] + eta[1] * c;
                (-softplus(-t), -softplus(t))
            }
            LinkModel::Constant { delta } => (delta.ln(), (-delta).ln_1p()),
        }
    }

    pub fn prior(&self, c: f64) -> f64 {
        match *self {
            LinkModel::Logistic { eta } => logistic(eta[0] + eta[1] * c),
            LinkModel::Constant { delta } => delta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitSource {
    /// OLS over every row of the dataset.
    TwoStageOls,
    /// OLS over the seed rows only.
    SeedOls,
    /// Seed OLS when the seeds support it, two-stage OLS otherwise.
    Auto,
}

/// Solver for the logistic part of the M-step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaSolver {
    /// Damped Newton on the weighted logistic log-likelihood.
    Newton,
    NelderMead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    /// Stop when the relative change of the log-likelihood falls below this.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Total runs; every run after the first starts from a jittered point.
    pub restarts: usize,
    /// Latent probabilities are clamped to `[eps, 1 - eps]`.
    pub eps: f64,
    pub init: InitSource,
    /// Relative size of the multiplicative jitter used by restarts.
    pub jitter: f64,
    pub seed: u64,
    pub eta_solver: EtaSolver,
    /// Keep the per-iteration latent probabilities of the selected run.
    pub record_history: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            tolerance: 1e-8,
            max_iterations: 500,
            restarts: 3,
            eps: 1e-12,
            init: InitSource::Auto,
            jitter: 0.1,
            seed: 0,
            eta_solver: EtaSolver::Newton,
            record_history: false,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::invalid("EM tolerance must be positive"));
        }
        if self.max_iterations == 0 || self.restarts == 0 {
            return Err(Error::invalid("EM needs at least one iteration and one run"));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::invalid("probability clamp must lie in (0, 0.5)"));
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::invalid("jitter must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureFit {
    pub theta: RegressionParams,
    pub link: LinkModel,
    /// Posterior true-link probabilities at the final parameters.
    pub probs: Vec<f64>,
    /// Log-likelihood at the start point and after every iteration.
    pub trace: Vec<f64>,
    /// Inverse negative Hessian over `(beta, ln sigma2, link parameters)`.
    pub covariance: Option<Vec<Vec<f64>>>,
    /// Usable for pooling: a valid covariance and enough effective sample.
    pub converged: bool,
    /// The relative-change stopping rule fired before the iteration cap.
    pub reached_tolerance: bool,
    pub iterations: usize,
    /// Index of the selected run.
    pub run: usize,
    pub warnings: Vec<String>,
    /// Latent probabilities per iteration, when requested.
    pub history: Vec<Vec<f64>>,
}

impl MixtureFit {
    pub fn loglik(&self) -> f64 {
        *self.trace.last().expect("trace holds the start point")
    }

    /// Variances of the regression coefficients.
    pub fn beta_variances(&self) -> Option<Vec<f64>> {
        let cov = self.covariance.as_ref()?;
        Some((0..self.theta.beta.len()).map(|l| cov[l][l]).collect())
    }

    pub fn to_estimate(&self) -> PerDatasetEstimate {
        let k = self.theta.beta.len();
        let variances = self.beta_variances().unwrap_or_else(|| vec![f64::NAN; k]);
        PerDatasetEstimate {
            theta: self.theta.beta.clone(),
            converged: self.converged && variances.iter().all(|v| v.is_finite() && *v >= 0.0),
            variances,
            loglik: self.loglik(),
        }
    }

    /// CSV with columns `iteration, loglik`.
    pub fn write_trace_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let wrap = |e: csv::Error| Error::invalid(format!("writing trace: {e}"));
        w.write_record(["iteration", "loglik"]).map_err(wrap)?;
        for (t, v) in self.trace.iter().enumerate() {
            w.write_record([t.to_string(), v.to_string()]).map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::invalid(format!("writing trace: {e}")))?;
        Ok(())
    }

    /// CSV with columns `iteration, row, prob`; the final probabilities are
    /// written when no history was kept.
    pub fn write_probs_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let wrap = |e: csv::Error| Error::invalid(format!("writing probabilities: {e}"));
        w.write_record(["iteration", "row", "prob"]).map_err(wrap)?;
        let final_only = [self.probs.clone()];
        let (rows, offset) = if self.history.is_empty() {
            (&final_only[..], self.iterations)
        } else {
            (&self.history[..], 1)
        };
        for (t, probs) in rows.iter().enumerate() {
            for (k, p) in probs.iter().enumerate() {
                w.write_record([(t + offset).to_string(), k.to_string(), p.to_string()])
                    .map_err(wrap)?;
            }
        }
        w.flush().map_err(|e| Error::invalid(format!("writing probabilities: {e}")))?;
        Ok(())
    }
}

/// Observed-data log-likelihood.
pub fn observed_loglik(data: &MixtureData, theta: &RegressionParams, link: &LinkModel) -> f64 {
    (0..data.len())
        .map(|r| {
            let lp = theta.ln_phi(data, r);
            let (a, b) = link.ln_prior(data.c[r]);
            if r < data.n_seeds {
                a + lp
            } else {
                log_add(lp + a, data.ln_py[r] + b)
            }
        })
        .sum()
}

fn log_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Posterior true-link probabilities, clamped to `[eps, 1 - eps]`; seeds are 1.
pub fn e_step(data: &MixtureData, theta: &RegressionParams, link: &LinkModel, eps: f64) -> Vec<f64> {
    (0..data.len())
        .map(|r| {
            if r < data.n_seeds {
                return 1.0;
            }
            let (a, b) = link.ln_prior(data.c[r]);
            let true_part = theta.ln_phi(data, r) + a;
            let false_part = data.ln_py[r] + b;
            logistic(true_part - false_part).clamp(eps, 1.0 - eps)
        })
        .collect()
}

/// Expected complete-data log-likelihood given latent probabilities.
pub fn q_function(data: &MixtureData, theta: &RegressionParams, link: &LinkModel, probs: &[f64]) -> f64 {
    q_theta(data, theta, probs) + q_link(data, link, probs) + q_const(data, probs)
}

/// The part of `Q` that depends on the regression parameters.
pub fn q_theta(data: &MixtureData, theta: &RegressionParams, probs: &[f64]) -> f64 {
    (0..data.len()).map(|r| probs[r] * theta.ln_phi(data, r)).sum()
}

/// The part of `Q` that depends on the link model.
pub fn q_link(data: &MixtureData, link: &LinkModel, probs: &[f64]) -> f64 {
    (0..data.len())
        .map(|r| {
            let (a, b) = link.ln_prior(data.c[r]);
            let p = probs[r];
            // Zero weights contribute nothing even where the log is -inf.
            let t1 = if p > 0.0 { p * a } else { 0.0 };
            let t2 = if p < 1.0 { (1.0 - p) * b } else { 0.0 };
            t1 + t2
        })
        .sum()
}

fn q_const(data: &MixtureData, probs: &[f64]) -> f64 {
    (0..data.len()).map(|r| (1.0 - probs[r]) * data.ln_py[r]).sum()
}

/// Weighted least squares for `beta` with `sigma2 = sum w r^2 / sum w`.
/// Fails when the total weight is below twice the coefficient count.
pub fn weighted_least_squares(data: &MixtureData, weights: &[f64]) -> Result<RegressionParams> {
    let k = data.k;
    let total: f64 = weights.iter().sum();
    if !(total >= 2.0 * k as f64) {
        return Err(Error::Degenerate(format!(
            "effective sample {total:.3} is below {}",
            2 * k
        )));
    }
    let mut xtx = DMatrix::<f64>::zeros(k, k);
    let mut xty = DVector::<f64>::zeros(k);
    for (r, &w) in weights.iter().enumerate() {
        let row = data.row(r);
        for a in 0..k {
            xty[a] += w * row[a] * data.y[r];
            for b in 0..=a {
                xtx[(a, b)] += w * row[a] * row[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            xtx[(b, a)] = xtx[(a, b)];
        }
    }
    let beta = xtx.cholesky().ok_or(Error::RankDeficient)?.solve(&xty);
    let beta: Vec<f64> = beta.iter().cloned().collect();
    let mut rss = 0.0;
    for (r, &w) in weights.iter().enumerate() {
        let mean: f64 = data.row(r).iter().zip(&beta).map(|(a, b)| a * b).sum();
        rss += w * (data.y[r] - mean).powi(2);
    }
    let sigma2 = rss / total;
    if !(sigma2 > 0.0) {
        return Err(Error::Degenerate("weighted residual variance is zero".into()));
    }
    Ok(RegressionParams { beta, sigma2 })
}

/// Maximizes `sum_k p_k log h(c_k) + (1 - p_k) log(1 - h(c_k))` over `eta`,
/// never returning a worse point than `start`.
pub fn logistic_m_step(c: &[f64], probs: &[f64], start: [f64; 2], solver: EtaSolver) -> [f64; 2] {
    let objective = |eta: [f64; 2]| {
        c.iter()
            .zip(probs)
            .map(|(&ci, &p)| {
                let t = eta[0] + eta[1] * ci;
                -p * softplus(-t) - (1.0 - p) * softplus(t)
            })
            .sum::<f64>()
    };
    match solver {
        EtaSolver::Newton => newton_logistic(c, probs, start, objective),
        EtaSolver::NelderMead => {
            let cfg = OptimizerConfig {
                ftol: 1e-12,
                xtol: 1e-10,
                ..Default::default()
            };
            match nelder_mead(|e| -objective([e[0], e[1]]), &start, &cfg) {
                Ok(m) if -m.value >= objective(start) => [m.x[0], m.x[1]],
                _ => start,
            }
        }
    }
}

fn newton_logistic<F: Fn([f64; 2]) -> f64>(c: &[f64], probs: &[f64], start: [f64; 2], objective: F) -> [f64; 2] {
    let mut eta = start;
    let mut current = objective(eta);
    for _ in 0..100 {
        let (mut g0, mut g1, mut h00, mut h01, mut h11) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&ci, &p) in c.iter().zip(probs) {
            let h = logistic(eta[0] + eta[1] * ci);
            let resid = p - h;
            let w = h * (1.0 - h);
            g0 += resid;
            g1 += resid * ci;
            h00 += w;
            h01 += w * ci;
            h11 += w * ci * ci;
        }
        let det = h00 * h11 - h01 * h01;
        let scale = h00 + h11;
        let step = if det > 1e-12 * scale * scale && det.is_finite() {
            [(h11 * g0 - h01 * g1) / det, (h00 * g1 - h01 * g0) / det]
        } else {
            // Flat or collinear curvature: fall back to a gradient step.
            let s = 1.0 / scale.max(1e-8);
            [g0 * s, g1 * s]
        };
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let cand = [eta[0] + t * step[0], eta[1] + t * step[1]];
            let v = objective(cand);
            if v >= current && v.is_finite() {
                let gain = v - current;
                eta = cand;
                current = v;
                moved = gain > 0.0;
                break;
            }
            t *= 0.5;
        }
        let size = (t * step[0]).abs().max((t * step[1]).abs());
        if !moved || size < 1e-12 * (1.0 + eta[0].abs().max(eta[1].abs())) {
            break;
        }
    }
    eta
}

/// Whether the link model's parameters are estimated or held fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum LinkFitting {
    Estimate,
    Fixed,
}

fn m_step_link(data: &MixtureData, probs: &[f64], link: &LinkModel, fitting: LinkFitting, cfg: &EmConfig) -> LinkModel {
    if fitting == LinkFitting::Fixed {
        return *link;
    }
    match *link {
        LinkModel::Logistic { eta } => LinkModel::Logistic {
            eta: logistic_m_step(&data.c, probs, eta, cfg.eta_solver),
        },
        LinkModel::Constant { .. } => {
            let n = data.len() as f64;
            let delta = probs.iter().sum::<f64>() / n;
            LinkModel::Constant {
                delta: delta.clamp(cfg.eps, 1.0 - cfg.eps),
            }
        }
    }
}

/// Initial regression parameters: OLS coefficients with the MLE variance.
pub(crate) fn initial_theta(data: &MixtureData, source: InitSource) -> Result<(RegressionParams, Option<String>)> {
    let k = data.k;
    let seeds_ok = data.n_seeds > k + 1;
    let (rows, note) = match source {
        InitSource::TwoStageOls => (data.len(), None),
        InitSource::SeedOls if seeds_ok => (data.n_seeds, None),
        InitSource::Auto if seeds_ok => (data.n_seeds, None),
        InitSource::Auto => (data.len(), None),
        InitSource::SeedOls => (
            data.len(),
            Some(format!(
                "{} seeds cannot support an initial fit; starting from OLS on all rows",
                data.n_seeds
            )),
        ),
    };
    let x = DMatrix::from_row_slice(rows, k, &data.x[..rows * k]);
    let fit = ols_fit(&x, &data.y[..rows])?;
    let sigma2 = (fit.rss / rows as f64).max(1e-12);
    Ok((RegressionParams { beta: fit.beta, sigma2 }, note))
}

struct Run {
    theta: RegressionParams,
    link: LinkModel,
    trace: Vec<f64>,
    reached_tolerance: bool,
    iterations: usize,
    history: Vec<Vec<f64>>,
    failure: Option<String>,
}

fn run_em(
    data: &MixtureData,
    mut theta: RegressionParams,
    mut link: LinkModel,
    fitting: LinkFitting,
    cfg: &EmConfig,
) -> Run {
    let mut ll = observed_loglik(data, &theta, &link);
    let mut trace = vec![ll];
    let mut history = Vec::new();
    let mut reached = false;
    let mut failure = None;
    let mut iterations = 0;
    for _ in 0..cfg.max_iterations {
        let probs = e_step(data, &theta, &link, cfg.eps);
        let new_theta = match weighted_least_squares(data, &probs) {
            Ok(t) => t,
            Err(e) => {
                failure = Some(e.to_string());
                break;
            }
        };
        let new_link = m_step_link(data, &probs, &link, fitting, cfg);
        if cfg.record_history {
            history.push(probs);
        }
        let new_ll = observed_loglik(data, &new_theta, &new_link);
        iterations += 1;
        trace.push(new_ll);
        theta = new_theta;
        link = new_link;
        let done = (new_ll - ll).abs() <= cfg.tolerance * ll.abs().max(1.0);
        ll = new_ll;
        if done {
            reached = true;
            break;
        }
    }
    Run {
        theta,
        link,
        trace,
        reached_tolerance: reached,
        iterations,
        history,
        failure,
    }
}

fn jittered<R: rand::Rng>(v: f64, scale: f64, rng: &mut R) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    v * (1.0 + scale * z)
}

/// Delta values this close to 0 or 1 sit on the boundary and are left out
/// of the Hessian.
const DELTA_BOUNDARY: f64 = 1e-8;

/// Packs the free parameters for differentiation.
fn pack(theta: &RegressionParams, link: &LinkModel, free_link: bool) -> Vec<f64> {
    let mut v = theta.beta.clone();
    v.push(theta.sigma2.ln());
    if free_link {
        match *link {
            LinkModel::Logistic { eta } => v.extend_from_slice(&eta),
            LinkModel::Constant { delta } => v.push((delta / (1.0 - delta)).ln()),
        }
    }
    v
}

fn unpack(v: &[f64], k: usize, link: &LinkModel, free_link: bool) -> (RegressionParams, LinkModel) {
    let theta = RegressionParams {
        beta: v[..k].to_vec(),
        sigma2: v[k].exp(),
    };
    let link = if free_link {
        match link {
            LinkModel::Logistic { .. } => LinkModel::Logistic { eta: [v[k + 1], v[k + 2]] },
            LinkModel::Constant { .. } => LinkModel::Constant {
                delta: logistic(v[k + 1]),
            },
        }
    } else {
        *link
    };
    (theta, link)
}

/// `(-H)^{-1}` of the observed log-likelihood in packed coordinates, or
/// `None` when `-H` is not positive definite.
pub(crate) fn covariance_at(
    data: &MixtureData,
    theta: &RegressionParams,
    link: &LinkModel,
    free_link: bool,
) -> Option<DMatrix<f64>> {
    let k = data.k;
    let x = pack(theta, link, free_link);
    let f = |v: &[f64]| {
        let (t, l) = unpack(v, k, link, free_link);
        observed_loglik(data, &t, &l)
    };
    let h = numerical_hessian_with(f, &x, default_step).ok()?;
    let neg = -h;
    let chol = neg.cholesky()?;
    let cov = chol.inverse();
    cov.iter().all(|v| v.is_finite()).then_some(cov)
}

/// Full EM fit with restarts and the Hessian-based covariance.
pub(crate) fn fit_mixture(
    data: &MixtureData,
    theta0: RegressionParams,
    link0: LinkModel,
    fitting: LinkFitting,
    cfg: &EmConfig,
    mut warnings: Vec<String>,
) -> Result<MixtureFit> {
    cfg.validate()?;
    theta0.validate()?;
    let k = data.k;
    if data.len() <= k + 1 {
        return Err(Error::Degenerate(format!(
            "mixture fit needs more than {} rows, got {}",
            k + 1,
            data.len()
        )));
    }
    // Singular designs are rejected outright.
    ols_fit(&data.design(), &data.y)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, Run)> = None;
    for run_index in 0..cfg.restarts {
        let (theta, link) = if run_index == 0 {
            (theta0.clone(), link0)
        } else {
            let beta = theta0.beta.iter().map(|&b| jittered(b, cfg.jitter, &mut rng)).collect();
            let sigma2 = jittered(theta0.sigma2, cfg.jitter, &mut rng).abs().max(1e-12);
            let link = match (fitting, link0) {
                (LinkFitting::Fixed, l) => l,
                (_, LinkModel::Logistic { eta }) => LinkModel::Logistic {
                    eta: [jittered(eta[0], cfg.jitter, &mut rng), jittered(eta[1], cfg.jitter, &mut rng)],
                },
                (_, LinkModel::Constant { delta }) => LinkModel::Constant {
                    delta: jittered(delta, cfg.jitter, &mut rng).clamp(cfg.eps, 1.0 - cfg.eps),
                },
            };
            (RegressionParams { beta, sigma2 }, link)
        };
        let run = run_em(data, theta, link, fitting, cfg);
        let better = match &best {
            None => true,
            Some((_, b)) => match (&b.failure, &run.failure) {
                (Some(_), None) => true,
                (None, Some(_)) => false,
                _ => run.trace.last() > b.trace.last(),
            },
        };
        if better {
            best = Some((run_index, run));
        }
    }
    let (run_index, run) = best.expect("at least one run");

    let free_link = fitting == LinkFitting::Estimate
        && match run.link {
            LinkModel::Constant { delta } => delta > DELTA_BOUNDARY && delta < 1.0 - DELTA_BOUNDARY,
            LinkModel::Logistic { .. } => data.len() > data.n_seeds,
        };
    let mut covariance = None;
    if run.failure.is_none() {
        covariance = covariance_at(data, &run.theta, &run.link, free_link);
        if covariance.is_none() && free_link {
            // Separated confidence measures leave the link likelihood flat
            // along a direction to infinity; the regression block is still
            // well determined, so condition on the fitted link parameters.
            covariance = covariance_at(data, &run.theta, &run.link, false);
            if covariance.is_some() {
                warnings.push("link parameters are not identified; variances condition on them".into());
            }
        }
    }
    if let Some(f) = &run.failure {
        warnings.push(format!("EM stopped early: {f}"));
    } else if covariance.is_none() {
        warnings.push("negative Hessian is not positive definite".into());
    }
    if !run.reached_tolerance && run.failure.is_none() {
        warnings.push(format!("EM hit the {}-iteration cap", cfg.max_iterations));
    }
    if let LinkModel::Logistic { eta } = run.link {
        if eta[1] < 0.0 && fitting == LinkFitting::Estimate {
            warnings.push(format!("fitted link slope {:.4} is negative", eta[1]));
        }
    }
    let probs = e_step(data, &run.theta, &run.link, cfg.eps);
    let converged = covariance.is_some() && run.failure.is_none();
    Ok(MixtureFit {
        theta: run.theta,
        link: run.link,
        probs,
        trace: run.trace,
        covariance: covariance.map(|m| (0..m.nrows()).map(|r| m.row(r).iter().cloned().collect()).collect()),
        converged,
        reached_tolerance: run.reached_tolerance,
        iterations: run.iterations,
        run: run_index,
        warnings,
        history: run.history,
    })
}
