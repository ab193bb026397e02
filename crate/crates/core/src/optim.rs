//! Derivative-free minimization and finite-difference Hessians.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    /// Offset added to each coordinate of `x0` to build the initial simplex.
    pub initial_scale: f64,
    /// Stop once the spread of simplex values falls below this.
    pub ftol: f64,
    /// ...and every vertex lies within this distance of the best one.
    pub xtol: f64,
    pub max_evals: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            initial_scale: 0.1,
            ftol: 1e-10,
            xtol: 1e-8,
            max_evals: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    pub converged: bool,
}

/// Nelder-Mead simplex minimization with reflection 1, expansion 2,
/// contraction 1/2 and shrink 1/2. Non-finite values count as `+inf`.
pub fn nelder_mead<F>(mut objective: F, x0: &[f64], cfg: &OptimizerConfig) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(cfg.ftol > 0.0 && cfg.xtol > 0.0 && cfg.initial_scale > 0.0) {
        return Err(Error::invalid("optimizer tolerances must be positive"));
    }
    let n = x0.len();
    if n == 0 {
        return Err(Error::invalid("nelder_mead needs at least one dimension"));
    }
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = objective(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let f0 = eval(x0, &mut evals);
    if !f0.is_finite() {
        return Err(Error::Optimizer("objective is not finite at the start point".into()));
    }
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), f0));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += cfg.initial_scale;
        let v = eval(&x, &mut evals);
        simplex.push((x, v));
    }

    let mut converged = false;
    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[n].1;
        let diameter = simplex[1..]
            .iter()
            .map(|(x, _)| {
                x.iter()
                    .zip(&simplex[0].0)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if worst - best < cfg.ftol && diameter < cfg.xtol {
            converged = true;
            break;
        }
        if evals >= cfg.max_evals {
            break;
        }

        let mut centroid = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(x) {
                *c += v / n as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n].0)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };

        let xr = along(1.0);
        let fr = eval(&xr, &mut evals);
        if fr < simplex[0].1 {
            let xe = along(2.0);
            let fe = eval(&xe, &mut evals);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        // Outside contraction when the reflection beat the worst point.
        let (xc, fc) = if fr < simplex[n].1 {
            let xc = along(0.5);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        } else {
            let xc = along(-0.5);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        };
        if fc < simplex[n].1.min(fr) {
            simplex[n] = (xc, fc);
            continue;
        }
        let x_best = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            let x: Vec<f64> = vertex
                .0
                .iter()
                .zip(&x_best)
                .map(|(v, b)| b + 0.5 * (v - b))
                .collect();
            let v = eval(&x, &mut evals);
            *vertex = (x, v);
        }
    }

    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, value) = simplex.swap_remove(0);
    if !value.is_finite() {
        return Err(Error::Optimizer("objective is not finite at any probe".into()));
    }
    Ok(Minimum {
        x,
        value,
        evals,
        converged,
    })
}

/// Per-coordinate step `1e-4 max(|x_i|, 1)`, near the fourth root of machine epsilon.
pub fn default_step(x: f64) -> f64 {
    1e-4 * x.abs().max(1.0)
}

/// Central-difference Hessian of `f` at `x`, symmetrized as `(H + H^T) / 2`.
pub fn numerical_hessian<F>(f: F, x: &[f64]) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    numerical_hessian_with(f, x, default_step)
}

pub fn numerical_hessian_with<F, S>(f: F, x: &[f64], step: S) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> f64,
    S: Fn(f64) -> f64,
{
    let n = x.len();
    let h: Vec<f64> = x.iter().map(|&v| step(v)).collect();
    let mut probe = x.to_vec();
    let mut at = |deltas: &[(usize, f64)]| -> Result<f64> {
        for &(i, d) in deltas {
            probe[i] = x[i] + d;
        }
        let v = f(&probe);
        for &(i, _) in deltas {
            probe[i] = x[i];
        }
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Optimizer("non-finite value while differencing".into()))
        }
    };

    let f0 = at(&[])?;
    let mut hess = DMatrix::zeros(n, n);
    for i in 0..n {
        let fp = at(&[(i, h[i])])?;
        let fm = at(&[(i, -h[i])])?;
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let fpp = at(&[(i, h[i]), (j, h[j])])?;
            let fpm = at(&[(i, h[i]), (j, -h[j])])?;
            let fmp = at(&[(i, -h[i]), (j, h[j])])?;
            let fmm = at(&[(i, -h[i]), (j, -h[j])])?;
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    let sym = (&hess + hess.transpose()) * 0.5;
    Ok(sym)
}
