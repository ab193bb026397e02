use std::path::Path;

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, StudentsT};

use linkmi::pipeline::{self, Estimator, PipelineConfig};
use linkmi::simgen::{generate_scenario, FrequencyTables, ScenarioConfig};

fn scenario(dir: &Path) {
    let cfg = ScenarioConfig {
        n1: 70,
        n2: 70,
        n_error: 2,
        seed_fraction: 0.1,
        seed: 21,
        ..Default::default()
    };
    generate_scenario(&cfg, &FrequencyTables::default())
        .unwrap()
        .write(dir)
        .unwrap();
}

fn config(data: &Path, out: &Path, estimators: Vec<Estimator>) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        file1: Some(data.join("file1.csv")),
        file2: Some(data.join("file2.csv")),
        seeds: Some(data.join("seeds.csv")),
        truth: Some(data.join("truth.csv")),
        output: out.to_path_buf(),
        seed: 3,
        estimators,
        ..Default::default()
    };
    cfg.gibbs.iterations = 200;
    cfg.gibbs.burn_in = 50;
    cfg
}

/// OLS through the normal equations: coefficients and `s^2 (X'X)^-1` diagonal.
fn normal_equations(x: &[Vec<f64>], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = y.len();
    let k = x[0].len() + 1;
    let design = DMatrix::from_fn(n, k, |r, c| if c == 0 { 1.0 } else { x[r][c - 1] });
    let xtx = design.transpose() * &design;
    let inv = xtx.try_inverse().expect("full rank");
    let yv = DVector::from_column_slice(y);
    let beta = &inv * design.transpose() * &yv;
    let resid = yv - &design * &beta;
    let s2 = resid.norm_squared() / (n - k) as f64;
    (beta.as_slice().to_vec(), (0..k).map(|l| s2 * inv[(l, l)]).collect())
}

#[test]
fn two_imputations_pool_by_rubins_rules() {
    let tmp = tempfile::tempdir().unwrap();
    scenario(tmp.path());
    let mut cfg = config(tmp.path(), &tmp.path().join("out"), vec![Estimator::TsOls]);
    cfg.m = Some(2);
    cfg.level = 0.95;
    let inputs = pipeline::load_inputs(&cfg).unwrap();
    let out = pipeline::run_in_memory(&inputs, &cfg).unwrap();
    assert_eq!(out.fit.datasets.len(), 2);

    let per: Vec<(Vec<f64>, Vec<f64>)> = out
        .fit
        .datasets
        .iter()
        .map(|d| {
            let x: Vec<Vec<f64>> = d.rows.iter().map(|r| r.x.clone()).collect();
            let y: Vec<f64> = d.rows.iter().map(|r| r.y).collect();
            normal_equations(&x, &y)
        })
        .collect();
    let pooled = out.fit.report(Estimator::TsOls).unwrap().pooled.as_ref().unwrap();
    for l in 0..2 {
        let (a, b) = (per[0].0[l], per[1].0[l]);
        let mean = (a + b) / 2.0;
        let w = (per[0].1[l] + per[1].1[l]) / 2.0;
        let between = (a - mean).powi(2) + (b - mean).powi(2);
        let t = w + 1.5 * between;
        let df = (1.0 + w / (1.5 * between)).powi(2);
        let q = StudentsT::new(0.0, 1.0, df).unwrap().inverse_cdf(0.975);
        let c = &pooled.coefs[l];
        assert!((c.estimate - mean).abs() < 1e-10, "{l}: {} vs {mean}", c.estimate);
        assert!((c.total - t).abs() < 1e-10 * t.max(1.0));
        assert!((c.df - df).abs() < 1e-6 * df.max(1.0));
        assert!((c.hi - (mean + q * t.sqrt())).abs() < 1e-8);
        assert!((c.lo - (mean - q * t.sqrt())).abs() < 1e-8);
    }
}

#[test]
fn perfect_is_ols_on_the_true_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    scenario(tmp.path());
    let cfg = config(tmp.path(), &tmp.path().join("out"), vec![Estimator::Perfect]);
    let inputs = pipeline::load_inputs(&cfg).unwrap();
    let out = pipeline::run_in_memory(&inputs, &cfg).unwrap();

    let column = |file: &str, name: &str| -> Vec<f64> {
        let mut r = csv::Reader::from_path(tmp.path().join(file)).unwrap();
        let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap();
        r.records().map(|rec| rec.unwrap()[idx].parse().unwrap()).collect()
    };
    let x1 = column("file1.csv", "x1");
    let y2 = column("file2.csv", "y");
    let (mut x, mut y) = (Vec::new(), Vec::new());
    let ti = column("truth.csv", "i");
    let tj = column("truth.csv", "j");
    for (i, j) in ti.iter().zip(&tj) {
        x.push(vec![x1[*i as usize]]);
        y.push(y2[*j as usize]);
    }
    let (beta, var) = normal_equations(&x, &y);
    let pooled = out.fit.report(Estimator::Perfect).unwrap().pooled.as_ref().unwrap();
    let q = StudentsT::new(0.0, 1.0, (y.len() - 2) as f64).unwrap().inverse_cdf(0.95);
    for l in 0..2 {
        let c = &pooled.coefs[l];
        assert!((c.estimate - beta[l]).abs() < 1e-9);
        assert!((c.total - var[l]).abs() < 1e-9);
        assert!((c.hi - c.lo - 2.0 * q * var[l].sqrt()).abs() < 1e-8);
    }
}

#[test]
fn staged_fit_from_disk_matches_in_memory() {
    let tmp = tempfile::tempdir().unwrap();
    scenario(tmp.path());
    let out_dir = tmp.path().join("out");
    let mut cfg = config(tmp.path(), &out_dir, vec![Estimator::Plmic, Estimator::Plmi]);
    cfg.thin = 15;
    let inputs = pipeline::load_inputs(&cfg).unwrap();
    let mem = pipeline::run_in_memory(&inputs, &cfg).unwrap();

    pipeline::write_link_outputs(&out_dir, &inputs, &mem.linkage).unwrap();
    let chain = pipeline::read_chain(&out_dir.join("chain.jsonl")).unwrap();
    assert_eq!(chain, mem.linkage.chain);
    let linkage = pipeline::Linkage {
        cmp: pipeline::compare(&inputs, &cfg).unwrap(),
        chain,
    };
    let disk = pipeline::fit(&inputs, &linkage, &cfg).unwrap();
    for e in [Estimator::Plmic, Estimator::Plmi] {
        let a = mem.fit.report(e).unwrap();
        let b = disk.report(e).unwrap();
        assert_eq!(a.pooled, b.pooled);
        assert_eq!(a.fits, b.fits);
        let sep = a.separation.unwrap();
        assert!((0.0..=1.0).contains(&sep.mean_true) && (0.0..=1.0).contains(&sep.mean_false));
    }
}

#[test]
fn chain_from_other_seeds_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    scenario(tmp.path());
    let cfg = config(tmp.path(), &tmp.path().join("out"), vec![Estimator::TsOls]);
    let inputs = pipeline::load_inputs(&cfg).unwrap();
    let mut linkage = pipeline::link(&inputs, &cfg).unwrap();
    linkage.chain.seeds.clear();
    assert!(pipeline::fit(&inputs, &linkage, &cfg).is_err());
}
