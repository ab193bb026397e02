//! Monte Carlo studies: generate a scenario per replication, run the
//! pipeline on it, and score each estimator's intervals against the true
//! coefficients.
//!
//! The per-replication log is the primary output. Metrics are a pure
//! function of it, so re-aggregating a saved log reproduces the table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::pipeline::{run_in_memory, write_manifest_value, Estimator, Inputs, PipelineConfig};
use crate::simgen::{derive_seed, generate_scenario, FrequencyTables, ScenarioConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    /// `scenario.seed` is replaced by each replication's seed.
    pub scenario: ScenarioConfig,
    pub replications: usize,
    pub seed: u64,
    /// Zipf exponents of the first-name, last-name and occupation tables.
    pub table_exponents: [f64; 3],
    /// Sampler, EM and estimator settings. File paths must be unset and the
    /// seed is replaced by each replication's seed.
    pub pipeline: PipelineConfig,
    pub output: PathBuf,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            scenario: ScenarioConfig::default(),
            replications: 100,
            seed: 1,
            table_exponents: [0.5, 0.5, 0.5],
            pipeline: PipelineConfig {
                estimators: vec![Estimator::Plmic, Estimator::TsOls, Estimator::Perfect],
                ..Default::default()
            },
            output: PathBuf::from("study"),
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::invalid("a study needs at least one replication"));
        }
        let p = &self.pipeline;
        if p.file1.is_some() || p.file2.is_some() || p.seeds.is_some() || p.truth.is_some() {
            return Err(Error::invalid("study pipelines take generated files; unset file1, file2, seeds and truth"));
        }
        if self.table_exponents.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::invalid("table exponents must be finite and non-negative"));
        }
        if p.estimators.contains(&Estimator::Plmi) && self.scenario.n_seeds() == 0 {
            return Err(Error::invalid("plmi needs seeds; set scenario.seed_fraction above zero"));
        }
        self.scenario.validate()?;
        p.validate()
    }

    pub fn replication_seed(&self, rep: usize) -> u64 {
        derive_seed(self.seed, rep as u64)
    }

    pub fn canonical_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output");
            if let Some(p) = obj.get_mut("pipeline").and_then(|p| p.as_object_mut()) {
                p.remove("output");
            }
        }
        v
    }
}

/// One estimator and coefficient in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub rep: usize,
    pub seed: u64,
    pub estimator: Estimator,
    pub coef: usize,
    pub truth: f64,
    /// `ok` or `failed`.
    pub status: String,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub covered: Option<bool>,
    pub abs_err: Option<f64>,
    pub length: Option<f64>,
    /// Fits pooled and fits dropped as non-converged.
    pub used: usize,
    pub dropped: usize,
    pub mean_prob_true: Option<f64>,
    pub mean_prob_false: Option<f64>,
    pub message: String,
}

impl LogRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    pub fn separation(&self) -> Option<f64> {
        Some(self.mean_prob_true? - self.mean_prob_false?)
    }
}

fn failed_rows(rep: usize, seed: u64, e: Estimator, beta: &[f64], msg: &str, used: usize, dropped: usize) -> Vec<LogRow> {
    beta.iter()
        .enumerate()
        .map(|(coef, &truth)| LogRow {
            rep,
            seed,
            estimator: e,
            coef,
            truth,
            status: "failed".into(),
            estimate: None,
            se: None,
            lo: None,
            hi: None,
            covered: None,
            abs_err: None,
            length: None,
            used,
            dropped,
            mean_prob_true: None,
            mean_prob_false: None,
            message: msg.to_string(),
        })
        .collect()
}

fn estimators_of(cfg: &StudyConfig) -> Vec<Estimator> {
    let mut es = cfg.pipeline.estimators.clone();
    es.sort_unstable();
    es.dedup();
    es
}

/// Generates, links, fits and scores one replication. Failures become
/// `failed` rows instead of errors.
pub fn run_replication(cfg: &StudyConfig, tables: &FrequencyTables, rep: usize) -> Vec<LogRow> {
    let seed = cfg.replication_seed(rep);
    let beta = &cfg.scenario.beta;
    let estimators = estimators_of(cfg);
    let scenario_cfg = ScenarioConfig {
        seed,
        ..cfg.scenario.clone()
    };
    let pipe_cfg = PipelineConfig {
        seed,
        ..cfg.pipeline.clone()
    };
    let attempt = generate_scenario(&scenario_cfg, tables).and_then(|s| {
        let inputs = Inputs {
            file1: s.file1,
            file2: s.file2,
            seeds: s.seeds,
            truth: Some(s.truth.links),
        }
        .prepare(&pipe_cfg)?;
        run_in_memory(&inputs, &pipe_cfg)
    });
    let out = match attempt {
        Ok(out) => out,
        Err(e) => {
            warn!("replication {rep} failed: {e}");
            return estimators
                .iter()
                .flat_map(|&est| failed_rows(rep, seed, est, beta, &e.to_string(), 0, 0))
                .collect();
        }
    };
    let mut rows = Vec::new();
    for r in &out.fit.reports {
        let dropped = r.fits.iter().filter(|f| !f.estimate.converged).count();
        let pooled = match &r.pooled {
            Ok(p) if p.coefs.len() == beta.len() => p,
            Ok(p) => {
                let msg = format!("{} coefficients estimated, {} expected", p.coefs.len(), beta.len());
                rows.extend(failed_rows(rep, seed, r.estimator, beta, &msg, p.used, p.dropped));
                continue;
            }
            Err(msg) => {
                rows.extend(failed_rows(rep, seed, r.estimator, beta, msg, r.fits.len() - dropped, dropped));
                continue;
            }
        };
        for (coef, (c, &truth)) in pooled.coefs.iter().zip(beta).enumerate() {
            rows.push(LogRow {
                rep,
                seed,
                estimator: r.estimator,
                coef,
                truth,
                status: "ok".into(),
                estimate: Some(c.estimate),
                se: Some(c.se()),
                lo: Some(c.lo),
                hi: Some(c.hi),
                covered: Some(c.covers(truth)),
                abs_err: Some((c.estimate - truth).abs()),
                length: Some(c.length()),
                used: pooled.used,
                dropped: pooled.dropped,
                mean_prob_true: r.separation.map(|s| s.mean_true),
                mean_prob_false: r.separation.map(|s| s.mean_false),
                message: String::new(),
            });
        }
    }
    rows
}

/// Metrics for one estimator and coefficient over all replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub estimator: Estimator,
    pub coef: usize,
    pub replications: usize,
    /// Replications without a pooled result.
    pub failed: usize,
    /// Percent of successful replications whose interval covers the truth.
    pub coverage: f64,
    /// Median `|estimate - truth|`, times 100.
    pub median_abs_diff: f64,
    /// Median interval length, times 100.
    pub median_length: f64,
    /// Non-converged per-dataset fits left out of pooling, summed.
    pub dropped_fits: usize,
    /// Mean over replications of the true-minus-false latent probability gap.
    pub mean_separation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyMetrics {
    pub rows: Vec<MetricRow>,
}

impl StudyMetrics {
    pub fn get(&self, e: Estimator, coef: usize) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.estimator == e && r.coef == coef)
    }
}

/// Median of a non-empty sample; NaN when empty.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Aggregates a replication log; rows are grouped by estimator and
/// coefficient in sorted order.
pub fn aggregate(log: &[LogRow]) -> StudyMetrics {
    let mut groups: BTreeMap<(Estimator, usize), Vec<&LogRow>> = BTreeMap::new();
    for row in log {
        groups.entry((row.estimator, row.coef)).or_default().push(row);
    }
    let rows = groups
        .into_iter()
        .map(|((estimator, coef), rows)| {
            let ok: Vec<&LogRow> = rows.iter().copied().filter(|r| r.is_ok()).collect();
            let covered = ok.iter().filter(|r| r.covered == Some(true)).count();
            let coverage = if ok.is_empty() {
                f64::NAN
            } else {
                100.0 * covered as f64 / ok.len() as f64
            };
            let abs: Vec<f64> = ok.iter().filter_map(|r| r.abs_err).collect();
            let len: Vec<f64> = ok.iter().filter_map(|r| r.length).collect();
            let seps: Vec<f64> = ok.iter().filter_map(|r| r.separation()).collect();
            MetricRow {
                estimator,
                coef,
                replications: rows.len(),
                failed: rows.len() - ok.len(),
                coverage,
                median_abs_diff: 100.0 * median(&abs),
                median_length: 100.0 * median(&len),
                dropped_fits: rows.iter().map(|r| r.dropped).sum(),
                mean_separation: (!seps.is_empty()).then(|| seps.iter().sum::<f64>() / seps.len() as f64),
            }
        })
        .collect();
    StudyMetrics { rows }
}

#[derive(Debug, Clone)]
pub struct StudyResult {
    pub log: Vec<LogRow>,
    pub metrics: StudyMetrics,
}

/// Runs every replication (concurrently) and aggregates.
pub fn run_study_in_memory(cfg: &StudyConfig) -> Result<StudyResult> {
    cfg.validate()?;
    let [a, b, c] = cfg.table_exponents;
    let tables = FrequencyTables::zipf(a, b, c);
    let log: Vec<LogRow> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| {
            let rows = run_replication(cfg, &tables, rep);
            info!("replication {} of {} done", rep + 1, cfg.replications);
            rows
        })
        .flatten()
        .collect();
    let metrics = aggregate(&log);
    Ok(StudyResult { log, metrics })
}

/// Runs the study and writes `replications.csv`, `metrics.csv`,
/// `summary.txt` and `manifest.json` into `cfg.output`.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyResult> {
    let result = run_study_in_memory(cfg)?;
    let written = write_study_outputs(&cfg.output, &result)?;
    write_manifest_value(&cfg.output, "study", cfg.seed, cfg.canonical_json(), &[], &written)?;
    Ok(result)
}

pub fn write_study_outputs(dir: &Path, result: &StudyResult) -> Result<Vec<String>> {
    io::ensure_dir(dir)?;
    write_log(&dir.join("replications.csv"), &result.log)?;
    write_metrics(&dir.join("metrics.csv"), &result.metrics)?;
    io::write_text(&dir.join("summary.txt"), &metrics_text(&result.metrics))?;
    Ok(vec!["replications.csv".into(), "metrics.csv".into(), "summary.txt".into()])
}

pub fn write_log(path: &Path, log: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for row in log {
        w.serialize(row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| Error::csv(path, e))).collect()
}

pub fn write_metrics(path: &Path, metrics: &StudyMetrics) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for row in &metrics.rows {
        w.serialize(row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Table with coverage, median absolute difference and median length
/// (both times 100) per estimator and coefficient.
pub fn metrics_text(metrics: &StudyMetrics) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<8} {:<6} {:>5} {:>7} {:>10} {:>14} {:>14} {:>8} {:>11}",
        "method", "coef", "reps", "failed", "coverage", "med |diff|x100", "med lengthx100", "dropped", "separation"
    );
    for r in &metrics.rows {
        let sep = r.mean_separation.map_or("-".to_string(), |v| format!("{v:.3}"));
        let _ = writeln!(
            s,
            "{:<8} {:<6} {:>5} {:>7} {:>10.1} {:>14.1} {:>14.1} {:>8} {:>11}",
            r.estimator.name(),
            format!("beta{}", r.coef),
            r.replications,
            r.failed,
            r.coverage,
            r.median_abs_diff,
            r.median_length,
            r.dropped_fits,
            sep
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(rep: usize, e: Estimator, est: f64, lo: f64, hi: f64) -> LogRow {
        LogRow {
            rep,
            seed: rep as u64,
            estimator: e,
            coef: 1,
            truth: 3.0,
            status: "ok".into(),
            estimate: Some(est),
            se: Some((hi - lo) / 3.29),
            lo: Some(lo),
            hi: Some(hi),
            covered: Some(lo <= 3.0 && 3.0 <= hi),
            abs_err: Some((est - 3.0).abs()),
            length: Some(hi - lo),
            used: 10,
            dropped: rep % 2,
            mean_prob_true: Some(0.9),
            mean_prob_false: Some(0.3 + 0.1 * rep as f64),
            message: String::new(),
        }
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn aggregate_by_hand() {
        let mut log = vec![
            row(0, Estimator::Plmic, 3.1, 2.9, 3.3),
            row(1, Estimator::Plmic, 2.7, 2.5, 2.9),
            row(2, Estimator::Plmic, 3.0, 2.8, 3.4),
            row(0, Estimator::TsOls, 2.5, 2.4, 2.6),
        ];
        log.extend(failed_rows(3, 3, Estimator::Plmic, &[3.0, 3.0], "boom", 0, 0));
        let m = aggregate(&log);
        let p = m.get(Estimator::Plmic, 1).unwrap();
        assert_eq!((p.replications, p.failed), (4, 1));
        assert!((p.coverage - 200.0 / 3.0).abs() < 1e-12);
        assert!((p.median_abs_diff - 10.0).abs() < 1e-9);
        assert!((p.median_length - 40.0).abs() < 1e-9);
        assert_eq!(p.dropped_fits, 1);
        assert!((p.mean_separation.unwrap() - 0.5).abs() < 1e-12);
        let t = m.get(Estimator::TsOls, 1).unwrap();
        assert_eq!(t.coverage, 0.0);
        assert_eq!(m.get(Estimator::Plmic, 0).unwrap().failed, 1);
    }

    #[test]
    fn log_round_trip_reaggregates_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let mut log: Vec<LogRow> = (0..7)
            .map(|r| row(r, Estimator::Plmi, 3.0 + 0.013 * r as f64, 2.8 + 0.1 / 3.0, 3.1 + r as f64 / 7.0))
            .collect();
        log.extend(failed_rows(7, 7, Estimator::Plmi, &[3.0, 3.0], "no converged fits", 0, 5));
        write_log(&path, &log).unwrap();
        let back = read_log(&path).unwrap();
        assert_eq!(back, log);
        // Debug text is exact for floats and treats NaN cells as equal.
        assert_eq!(format!("{:?}", aggregate(&back)), format!("{:?}", aggregate(&log)));
    }

    #[test]
    fn study_config_validation() {
        let cfg = StudyConfig::default();
        cfg.validate().unwrap();
        let bad = StudyConfig {
            replications: 0,
            ..cfg.clone()
        };
        assert!(bad.validate().is_err());
        let mut bad = cfg.clone();
        bad.pipeline.estimators.push(Estimator::Plmi);
        assert!(bad.validate().is_err());
        let mut bad = cfg;
        bad.pipeline.file1 = Some("x.csv".into());
        assert!(bad.validate().is_err());
    }
}
