//! End-to-end runs: compare two files, sample linkages, build the imputed
//! datasets, fit the requested estimators on each, pool, and write reports.
//!
//! Every random stream is derived from the single `seed` of the
//! configuration: stream 1 drives the sampler and stream `2 + m` the EM
//! restarts of dataset `m`.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{ols_on_dataset, perfect_ols};
use crate::comparison::{build_comparison_matrix, Comparator, ComparisonMatrix, FieldSpec, RecordFile, DEFAULT_CELL_CAP};
use crate::error::{Error, Result};
use crate::gibbs::{Chain, GibbsConfig};
use crate::imputation::{extract_all, pool_all, select_draws, LinkedDataset, PerDatasetEstimate, PooledEstimate};
use crate::io;
use crate::marginal::{MarginalDensity, MarginalKind};
use crate::mixture::{EmConfig, LinkModel, MixtureData, MixtureFit};
use crate::plmi::fit_plmi;
use crate::plmic::{fit_plmic, PlmicInit};
use crate::simgen::derive_seed;

const GIBBS_STREAM: u64 = 1;
const EM_STREAM_BASE: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Plmic,
    Plmi,
    TsOls,
    Perfect,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [Estimator::Plmic, Estimator::Plmi, Estimator::TsOls, Estimator::Perfect];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Plmic => "plmic",
            Estimator::Plmi => "plmi",
            Estimator::TsOls => "ts_ols",
            Estimator::Perfect => "perfect",
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown estimator `{s}` (expected plmic, plmi, ts_ols or perfect)")))
    }
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A linking column and how to compare it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    pub column: String,
    pub comparator: Comparator,
    /// Upper distance bin edges for the Levenshtein comparator.
    #[serde(default)]
    pub thresholds: Vec<f64>,
}

impl FieldConfig {
    pub fn spec(&self) -> Result<FieldSpec> {
        let spec = FieldSpec {
            comparator: self.comparator,
            thresholds: self.thresholds.clone(),
        };
        spec.validate()
            .map_err(|e| Error::invalid(format!("field `{}`: {e}", self.column)))?;
        Ok(spec)
    }
}

/// The four generated linking fields: names by binned edit distance, age and
/// occupation by exact match.
pub fn default_fields() -> Vec<FieldConfig> {
    let name = |c: &str| FieldConfig {
        column: c.into(),
        comparator: Comparator::NormalizedLevenshtein,
        thresholds: vec![0.25, 0.5, 1.0],
    };
    let exact = |c: &str| FieldConfig {
        column: c.into(),
        comparator: Comparator::Exact,
        thresholds: Vec::new(),
    };
    vec![name("first_name"), name("last_name"), exact("age"), exact("occupation")]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub file1: Option<PathBuf>,
    pub file2: Option<PathBuf>,
    /// `(i, j)` pairs known to be true links.
    pub seeds: Option<PathBuf>,
    /// `(i, j)` table of every true link; needed by `perfect` and by the
    /// latent-probability separation diagnostics.
    pub truth: Option<PathBuf>,
    pub output: PathBuf,
    /// Master seed; the sampler and EM seeds are derived from it.
    pub seed: u64,
    pub fields: Vec<FieldConfig>,
    /// `gibbs.seed` is overwritten by the derived sampler seed.
    pub gibbs: GibbsConfig,
    /// Keep every `thin`-th retained draw.
    pub thin: usize,
    /// Use only the last `m` selected draws.
    pub m: Option<usize>,
    pub marginal: MarginalKind,
    pub estimators: Vec<Estimator>,
    /// `em.seed` is overwritten per dataset.
    pub em: EmConfig,
    pub level: f64,
    pub cell_cap: usize,
    /// Also write every linked dataset under `datasets/`.
    pub write_datasets: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            file1: None,
            file2: None,
            seeds: None,
            truth: None,
            output: PathBuf::from("out"),
            seed: 1,
            fields: default_fields(),
            gibbs: GibbsConfig::default(),
            thin: 1,
            m: None,
            marginal: MarginalKind::Normal,
            estimators: vec![Estimator::Plmic, Estimator::TsOls],
            em: EmConfig::default(),
            level: 0.9,
            cell_cap: DEFAULT_CELL_CAP,
            write_datasets: false,
        }
    }
}

impl PipelineConfig {
    /// Checks that do not need the input files.
    pub fn validate(&self) -> Result<()> {
        if self.fields.is_empty() {
            return Err(Error::invalid("at least one linking field is required"));
        }
        let mut seen = HashSet::new();
        for f in &self.fields {
            f.spec()?;
            if !seen.insert(f.column.as_str()) {
                return Err(Error::invalid(format!("linking field `{}` is listed twice", f.column)));
            }
        }
        if self.estimators.is_empty() {
            return Err(Error::invalid("no estimators requested"));
        }
        if self.thin == 0 {
            return Err(Error::invalid("thin must be at least 1"));
        }
        if self.m == Some(0) {
            return Err(Error::invalid("m must be at least 1"));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::invalid("level must lie in (0, 1)"));
        }
        self.gibbs.validate()?;
        self.em.validate()
    }

    /// The configuration as hashed and echoed in the manifest; the output
    /// directory is left out because it does not affect any result.
    pub fn canonical_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output");
        }
        v
    }

    fn gibbs_for_run(&self) -> GibbsConfig {
        GibbsConfig {
            seed: derive_seed(self.seed, GIBBS_STREAM),
            ..self.gibbs.clone()
        }
    }

    fn em_for_dataset(&self, m: usize) -> EmConfig {
        EmConfig {
            seed: derive_seed(self.seed, EM_STREAM_BASE + m as u64),
            ..self.em.clone()
        }
    }
}

/// Files and link tables after loading and field selection.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub file1: RecordFile,
    pub file2: RecordFile,
    /// `j -> i`.
    pub seeds: BTreeMap<usize, usize>,
    pub truth: Option<Vec<(usize, usize)>>,
}

impl Inputs {
    /// Checks the inputs against the configuration and keeps only the
    /// configured linking fields, in configuration order.
    pub fn prepare(self, cfg: &PipelineConfig) -> Result<Inputs> {
        cfg.validate()?;
        let columns: Vec<&str> = cfg.fields.iter().map(|f| f.column.as_str()).collect();
        let file1 = select_fields(&self.file1, &columns, "file 1")?;
        let file2 = select_fields(&self.file2, &columns, "file 2")?;
        if file1.records.iter().any(|r| r.covariates.is_empty()) {
            return Err(Error::invalid("every file-1 record needs covariates x1, x2, ..."));
        }
        let p = file1.records.first().map_or(0, |r| r.covariates.len());
        if file1.records.iter().any(|r| r.covariates.len() != p) {
            return Err(Error::invalid("file-1 records disagree on the number of covariates"));
        }
        if let Some(j) = file2.records.iter().position(|r| r.response.is_none()) {
            return Err(Error::invalid(format!("file-2 record {j} has no response y")));
        }
        crate::gibbs::validate_seeds(&self.seeds, file1.len(), file2.len())?;
        if cfg.estimators.contains(&Estimator::Plmi) && self.seeds.is_empty() {
            return Err(Error::invalid("plmi needs a non-empty seed table"));
        }
        if cfg.estimators.contains(&Estimator::Perfect) && self.truth.is_none() {
            return Err(Error::invalid("perfect needs a ground-truth table"));
        }
        if let Some(truth) = &self.truth {
            check_one_to_one(truth, file1.len(), file2.len())?;
        }
        Ok(Inputs {
            file1,
            file2,
            seeds: self.seeds,
            truth: self.truth,
        })
    }
}

fn select_fields(file: &RecordFile, columns: &[&str], which: &str) -> Result<RecordFile> {
    let idx: Vec<usize> = columns
        .iter()
        .map(|c| {
            file.field_names
                .iter()
                .position(|n| n == c)
                .ok_or_else(|| Error::invalid(format!("{which} has no linking column `{c}`")))
        })
        .collect::<Result<_>>()?;
    let records = file
        .records
        .iter()
        .map(|r| {
            let mut r2 = r.clone();
            r2.fields = idx.iter().map(|&k| r.fields[k].clone()).collect();
            r2
        })
        .collect();
    RecordFile::new(columns.iter().map(|c| c.to_string()).collect(), records)
}

fn check_one_to_one(pairs: &[(usize, usize)], n1: usize, n2: usize) -> Result<()> {
    let mut seen_i = HashSet::new();
    let mut seen_j = HashSet::new();
    for &(i, j) in pairs {
        if i >= n1 || j >= n2 {
            return Err(Error::invalid(format!("true link ({i}, {j}) is out of range")));
        }
        if !seen_i.insert(i) || !seen_j.insert(j) {
            return Err(Error::invalid(format!("true link ({i}, {j}) repeats a record")));
        }
    }
    Ok(())
}

/// Reads the files named in the configuration.
pub fn load_inputs(cfg: &PipelineConfig) -> Result<Inputs> {
    let need = |p: &Option<PathBuf>, what: &str| {
        p.clone()
            .ok_or_else(|| Error::invalid(format!("no {what} given")))
    };
    let file1 = io::read_record_file(&need(&cfg.file1, "file1")?)?;
    let file2 = io::read_record_file(&need(&cfg.file2, "file2")?)?;
    let seeds = match &cfg.seeds {
        Some(p) => io::seeds_from_pairs(&io::read_pairs(p)?)?,
        None => BTreeMap::new(),
    };
    let truth = cfg.truth.as_deref().map(io::read_pairs).transpose()?;
    Inputs {
        file1,
        file2,
        seeds,
        truth,
    }
    .prepare(cfg)
}

#[derive(Debug, Clone)]
pub struct Linkage {
    pub cmp: ComparisonMatrix,
    pub chain: Chain,
}

pub fn compare(inputs: &Inputs, cfg: &PipelineConfig) -> Result<ComparisonMatrix> {
    let specs = cfg.fields.iter().map(FieldConfig::spec).collect::<Result<Vec<_>>>()?;
    build_comparison_matrix(&inputs.file1, &inputs.file2, &specs, cfg.cell_cap)
}

/// Comparison vectors and the sampler chain.
pub fn link(inputs: &Inputs, cfg: &PipelineConfig) -> Result<Linkage> {
    let cmp = compare(inputs, cfg)?;
    info!(
        "sampling linkages for {} x {} records over {} iterations",
        cmp.n1(),
        cmp.n2(),
        cfg.gibbs.iterations
    );
    let chain = crate::gibbs::run_gibbs(&cmp, &cfg.gibbs_for_run(), &inputs.seeds)?;
    Ok(Linkage { cmp, chain })
}

/// Mean latent probability over rows that are true and false links, seeds
/// excluded, pooled over all fitted datasets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub mean_true: f64,
    pub mean_false: f64,
    pub n_true: usize,
    pub n_false: usize,
}

impl Separation {
    pub fn gap(&self) -> f64 {
        self.mean_true - self.mean_false
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct SeparationSums {
    sum_true: f64,
    n_true: usize,
    sum_false: f64,
    n_false: usize,
}

impl SeparationSums {
    fn add(mut self, o: SeparationSums) -> Self {
        self.sum_true += o.sum_true;
        self.n_true += o.n_true;
        self.sum_false += o.sum_false;
        self.n_false += o.n_false;
        self
    }

    fn finish(self) -> Option<Separation> {
        (self.n_true > 0 && self.n_false > 0).then(|| Separation {
            mean_true: self.sum_true / self.n_true as f64,
            mean_false: self.sum_false / self.n_false as f64,
            n_true: self.n_true,
            n_false: self.n_false,
        })
    }
}

/// Diagnostics for one dataset's fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub m: usize,
    pub rows: usize,
    pub seeds: usize,
    pub estimate: PerDatasetEstimate,
    pub iterations: usize,
    pub reached_tolerance: bool,
    pub run: usize,
    pub link: Option<LinkModel>,
    pub warnings: Vec<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct EstimatorReport {
    pub estimator: Estimator,
    /// Pooled table, or why pooling was impossible.
    pub pooled: std::result::Result<PooledEstimate, String>,
    /// Empty for `perfect`.
    pub fits: Vec<FitRecord>,
    /// Full fit of the first dataset, for the mixture estimators.
    pub first_fit: Option<MixtureFit>,
    pub separation: Option<Separation>,
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub datasets: Vec<LinkedDataset>,
    pub reports: Vec<EstimatorReport>,
}

impl FitOutput {
    pub fn report(&self, e: Estimator) -> Option<&EstimatorReport> {
        self.reports.iter().find(|r| r.estimator == e)
    }
}

/// Fits every requested estimator on the datasets implied by the chain.
pub fn fit(inputs: &Inputs, linkage: &Linkage, cfg: &PipelineConfig) -> Result<FitOutput> {
    if linkage.chain.seeds != inputs.seeds {
        return Err(Error::invalid("the chain was sampled with a different seed table"));
    }
    let draws = select_draws(&linkage.chain, cfg.thin, cfg.m)?;
    if draws.is_empty() {
        return Err(Error::invalid("the chain holds no retained draws"));
    }
    let datasets = extract_all(&draws, &linkage.cmp, &inputs.file1, &inputs.file2, &inputs.seeds)?;
    let ys: Vec<f64> = inputs.file2.records.iter().filter_map(|r| r.response).collect();
    let py = MarginalDensity::fit(cfg.marginal, &ys)?;
    let truth: Option<HashSet<(usize, usize)>> = inputs.truth.as_ref().map(|t| t.iter().copied().collect());

    let mut estimators = cfg.estimators.clone();
    estimators.sort_unstable();
    estimators.dedup();
    let mut reports = Vec::new();
    for e in estimators {
        info!("fitting {e} on {} datasets", datasets.len());
        let report = match e {
            Estimator::Perfect => {
                let truth = inputs.truth.as_ref().ok_or_else(|| Error::invalid("perfect needs a ground-truth table"))?;
                let pooled = perfect_ols(truth, &inputs.file1, &inputs.file2)
                    .map(|f| f.to_pooled(cfg.level))
                    .map_err(|e| e.to_string());
                EstimatorReport {
                    estimator: e,
                    pooled,
                    fits: Vec::new(),
                    first_fit: None,
                    separation: None,
                }
            }
            Estimator::TsOls => {
                let fits: Vec<FitRecord> = datasets.par_iter().enumerate().map(|(m, d)| ols_record(m, d)).collect();
                finish_report(e, fits, None, None, cfg.level)
            }
            Estimator::Plmic | Estimator::Plmi => {
                let results: Vec<(FitRecord, Option<MixtureFit>, SeparationSums)> = datasets
                    .par_iter()
                    .enumerate()
                    .map(|(m, d)| mixture_record(e, m, d, &py, cfg, truth.as_ref()))
                    .collect();
                let mut fits = Vec::with_capacity(results.len());
                let mut first = None;
                let mut sums = SeparationSums::default();
                for (m, (rec, full, s)) in results.into_iter().enumerate() {
                    if m == 0 {
                        first = full;
                    }
                    sums = sums.add(s);
                    fits.push(rec);
                }
                let separation = truth.as_ref().and_then(|_| sums.finish());
                finish_report(e, fits, first, separation, cfg.level)
            }
        };
        if let Err(msg) = &report.pooled {
            warn!("{e}: {msg}");
        }
        reports.push(report);
    }
    Ok(FitOutput { datasets, reports })
}

fn finish_report(
    estimator: Estimator,
    fits: Vec<FitRecord>,
    first_fit: Option<MixtureFit>,
    separation: Option<Separation>,
    level: f64,
) -> EstimatorReport {
    let estimates: Vec<PerDatasetEstimate> = fits.iter().map(|f| f.estimate.clone()).collect();
    EstimatorReport {
        estimator,
        pooled: pool_all(&estimates, level).map_err(|e| e.to_string()),
        fits,
        first_fit,
        separation,
    }
}

fn failed_estimate() -> PerDatasetEstimate {
    PerDatasetEstimate {
        theta: Vec::new(),
        variances: Vec::new(),
        converged: false,
        loglik: f64::NAN,
    }
}

fn ols_record(m: usize, d: &LinkedDataset) -> FitRecord {
    let (estimate, error) = match ols_on_dataset(d) {
        Ok(f) => (f.to_estimate(), None),
        Err(e) => (failed_estimate(), Some(e.to_string())),
    };
    FitRecord {
        m,
        rows: d.len(),
        seeds: d.n_seeds(),
        estimate,
        iterations: 0,
        reached_tolerance: true,
        run: 0,
        link: None,
        warnings: Vec::new(),
        error,
    }
}

fn mixture_record(
    e: Estimator,
    m: usize,
    d: &LinkedDataset,
    py: &MarginalDensity,
    cfg: &PipelineConfig,
    truth: Option<&HashSet<(usize, usize)>>,
) -> (FitRecord, Option<MixtureFit>, SeparationSums) {
    let em = cfg.em_for_dataset(m);
    let result = MixtureData::from_dataset(d, py).and_then(|data| match e {
        Estimator::Plmic => fit_plmic(&data, &em, &PlmicInit::default()),
        _ => fit_plmi(&data, &em),
    });
    let mut record = FitRecord {
        m,
        rows: d.len(),
        seeds: d.n_seeds(),
        estimate: failed_estimate(),
        iterations: 0,
        reached_tolerance: false,
        run: 0,
        link: None,
        warnings: Vec::new(),
        error: None,
    };
    let mut sums = SeparationSums::default();
    match result {
        Ok(fit) => {
            if let Some(truth) = truth {
                for (row, &p) in d.rows.iter().zip(&fit.probs) {
                    if row.is_seed {
                        continue;
                    }
                    if truth.contains(&(row.i, row.j)) {
                        sums.sum_true += p;
                        sums.n_true += 1;
                    } else {
                        sums.sum_false += p;
                        sums.n_false += 1;
                    }
                }
            }
            record.estimate = fit.to_estimate();
            record.iterations = fit.iterations;
            record.reached_tolerance = fit.reached_tolerance;
            record.run = fit.run;
            record.link = Some(fit.link);
            record.warnings = fit.warnings.clone();
            (record, (m == 0).then_some(fit), sums)
        }
        Err(err) => {
            record.error = Some(err.to_string());
            (record, None, sums)
        }
    }
}

/// Everything a full run produced.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub linkage: Linkage,
    pub fit: FitOutput,
}

/// Link and fit without touching the filesystem.
pub fn run_in_memory(inputs: &Inputs, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let linkage = link(inputs, cfg)?;
    let fit = fit(inputs, &linkage, cfg)?;
    Ok(PipelineOutput { linkage, fit })
}

/// Loads the inputs, runs every stage and writes all reports and the
/// manifest into `cfg.output`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let inputs = load_inputs(cfg)?;
    let out = run_in_memory(&inputs, cfg)?;
    let mut written = write_link_outputs(&cfg.output, &inputs, &out.linkage)?;
    written.extend(write_fit_outputs(&cfg.output, cfg, &inputs, &out.linkage, &out.fit)?);
    write_manifest(&cfg.output, "run", cfg, &[], &written)?;
    Ok(out)
}

/// Reads a chain written by [`write_link_outputs`].
pub fn read_chain(path: &Path) -> Result<Chain> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Chain::read_jsonl(std::io::BufReader::new(file)).map_err(|e| match e {
        Error::Parse { line, msg, .. } => Error::Parse {
            path: path.into(),
            line,
            msg,
        },
        other => other,
    })
}

fn write_buffered<F>(dir: &Path, name: &str, written: &mut Vec<String>, fill: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> Result<()>,
{
    let mut buf = Vec::new();
    fill(&mut buf)?;
    let path = dir.join(name);
    std::fs::write(&path, &buf).map_err(|e| Error::io(&path, e))?;
    written.push(name.to_string());
    Ok(())
}

/// `chain.jsonl` and `chain_summary.csv`; returns the written file names.
pub fn write_link_outputs(dir: &Path, inputs: &Inputs, linkage: &Linkage) -> Result<Vec<String>> {
    io::ensure_dir(dir)?;
    let mut written = Vec::new();
    write_buffered(dir, "chain.jsonl", &mut written, |buf| {
        linkage.chain.write_jsonl(buf).map_err(|e| Error::io(dir.join("chain.jsonl"), e))
    })?;
    write_buffered(dir, "chain_summary.csv", &mut written, |buf| {
        write_chain_summary(buf, &linkage.chain, &inputs.file1.field_names, linkage.cmp.levels())
    })?;
    Ok(written)
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("formatting CSV output: {e}"))
}

/// One row per retained draw: iteration, link count, then every `mu` and
/// `nu` entry.
pub fn write_chain_summary(buf: &mut Vec<u8>, chain: &Chain, fields: &[String], levels: &[u8]) -> Result<()> {
    let mut w = csv::Writer::from_writer(buf);
    let mut header = vec!["iteration".to_string(), "n12".to_string()];
    for which in ["mu", "nu"] {
        for (f, &l) in fields.iter().zip(levels) {
            header.extend((1..=l).map(|l| format!("{which}_{f}_{l}")));
        }
    }
    w.write_record(&header).map_err(csv_err)?;
    for d in &chain.draws {
        let mut row = vec![d.iteration.to_string(), d.n12().to_string()];
        for probs in d.params.mu.iter().chain(&d.params.nu) {
            row.extend(probs.iter().map(f64::to_string));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::invalid(format!("formatting CSV output: {e}")))
}

fn opt_num(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else if v.is_nan() {
        String::new()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn write_fit_table(buf: &mut Vec<u8>, fits: &[FitRecord], k: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(buf);
    let mut header: Vec<String> = ["m", "rows", "seeds", "converged", "reached_tolerance", "iterations", "run", "loglik"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..k).map(|l| format!("beta{l}")));
    header.extend((0..k).map(|l| format!("var{l}")));
    header.extend(["link0", "link1", "warnings", "error"].iter().map(|s| s.to_string()));
    w.write_record(&header).map_err(csv_err)?;
    for f in fits {
        let mut row = vec![
            f.m.to_string(),
            f.rows.to_string(),
            f.seeds.to_string(),
            u8::from(f.estimate.converged).to_string(),
            u8::from(f.reached_tolerance).to_string(),
            f.iterations.to_string(),
            f.run.to_string(),
            opt_num(f.estimate.loglik),
        ];
        for l in 0..k {
            row.push(f.estimate.theta.get(l).map_or(String::new(), |v| opt_num(*v)));
        }
        for l in 0..k {
            row.push(f.estimate.variances.get(l).map_or(String::new(), |v| opt_num(*v)));
        }
        let (a, b) = match f.link {
            Some(LinkModel::Logistic { eta }) => (eta[0].to_string(), eta[1].to_string()),
            Some(LinkModel::Constant { delta }) => (delta.to_string(), String::new()),
            None => (String::new(), String::new()),
        };
        row.extend([a, b, f.warnings.join("; "), f.error.clone().unwrap_or_default()]);
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::invalid(format!("formatting CSV output: {e}")))
}

/// Pooled tables, per-dataset diagnostics, first-dataset EM trace and
/// probabilities, optional datasets, and `summary.txt`.
pub fn write_fit_outputs(
    dir: &Path,
    cfg: &PipelineConfig,
    inputs: &Inputs,
    linkage: &Linkage,
    fit: &FitOutput,
) -> Result<Vec<String>> {
    io::ensure_dir(dir)?;
    let mut written = Vec::new();
    let k = inputs.file1.records.first().map_or(0, |r| r.covariates.len()) + 1;
    for r in &fit.reports {
        let name = r.estimator.name();
        if let Ok(p) = &r.pooled {
            write_buffered(dir, &format!("pooled_{name}.csv"), &mut written, |buf| p.write_csv(buf))?;
        }
        if !r.fits.is_empty() {
            write_buffered(dir, &format!("fits_{name}.csv"), &mut written, |buf| {
                write_fit_table(buf, &r.fits, k)
            })?;
        }
        if let Some(first) = &r.first_fit {
            write_buffered(dir, &format!("em_trace_{name}.csv"), &mut written, |buf| {
                first.write_trace_csv(buf)
            })?;
            write_buffered(dir, &format!("em_probs_{name}.csv"), &mut written, |buf| {
                first.write_probs_csv(buf)
            })?;
        }
    }
    if cfg.write_datasets {
        let sub = dir.join("datasets");
        io::ensure_dir(&sub)?;
        for (m, d) in fit.datasets.iter().enumerate() {
            let name = format!("datasets/d{m:04}.csv");
            write_buffered(dir, &name, &mut written, |buf| d.write_csv(buf))?;
        }
    }
    let summary = summary_text(cfg, inputs, linkage, fit);
    write_buffered(dir, "summary.txt", &mut written, |buf| {
        buf.extend_from_slice(summary.as_bytes());
        Ok(())
    })?;
    Ok(written)
}

/// Plain-text report of a run.
pub fn summary_text(cfg: &PipelineConfig, inputs: &Inputs, linkage: &Linkage, fit: &FitOutput) -> String {
    let mut s = String::new();
    let chain = &linkage.chain;
    let mean_n12 = chain.draws.iter().map(|d| d.n12() as f64).sum::<f64>() / chain.draws.len().max(1) as f64;
    let _ = writeln!(s, "records: n1 = {}, n2 = {}, seeds = {}", inputs.file1.len(), inputs.file2.len(), inputs.seeds.len());
    let _ = writeln!(s, "linking fields: {}", inputs.file1.field_names.join(", "));
    let _ = writeln!(
        s,
        "sampler: {} iterations, burn-in {}, {} retained draws, mean links per draw {:.2}",
        cfg.gibbs.iterations,
        chain.burn_in,
        chain.draws.len(),
        mean_n12
    );
    let _ = writeln!(s, "imputed datasets: {} (thin {})", fit.datasets.len(), cfg.thin);
    let _ = writeln!(s, "interval level: {}%", cfg.level * 100.0);
    for r in &fit.reports {
        let _ = writeln!(s);
        match &r.pooled {
            Ok(p) => {
                let _ = writeln!(s, "[{}] pooled over {} fits, {} dropped", r.estimator, p.used, p.dropped);
                let _ = writeln!(
                    s,
                    "{:<6} {:>12} {:>12} {:>10} {:>12} {:>12}",
                    "coef", "estimate", "se", "df", "lo", "hi"
                );
                for (l, c) in p.coefs.iter().enumerate() {
                    let df = if c.df.is_finite() { format!("{:.1}", c.df) } else { "inf".into() };
                    let _ = writeln!(
                        s,
                        "{:<6} {:>12.6} {:>12.6} {:>10} {:>12.6} {:>12.6}",
                        format!("beta{l}"),
                        c.estimate,
                        c.se(),
                        df,
                        c.lo,
                        c.hi
                    );
                }
            }
            Err(msg) => {
                let _ = writeln!(s, "[{}] failed: {msg}", r.estimator);
            }
        }
        if let Some(sep) = r.separation {
            let _ = writeln!(
                s,
                "mean latent probability: true links {:.4} ({}), false links {:.4} ({})",
                sep.mean_true, sep.n_true, sep.mean_false, sep.n_false
            );
        }
    }
    s
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    pub config: serde_json::Value,
    pub inputs: Vec<ManifestFile>,
    pub outputs: Vec<ManifestFile>,
}

fn hash_files(paths: &[(String, PathBuf)]) -> Result<Vec<ManifestFile>> {
    paths
        .iter()
        .map(|(name, p)| {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            Ok(ManifestFile {
                file: name.clone(),
                sha256: sha256_hex(&bytes),
            })
        })
        .collect()
}

/// Writes the manifest: tool version, seed, the configuration with its hash,
/// and hashes of the inputs and of every written file.
pub fn write_manifest_value(
    dir: &Path,
    command: &str,
    seed: u64,
    config: serde_json::Value,
    inputs: &[(String, PathBuf)],
    written: &[String],
) -> Result<()> {
    let config_text = serde_json::to_string(&config).expect("config serializes");
    let outputs: Vec<(String, PathBuf)> = written.iter().map(|n| (n.clone(), dir.join(n))).collect();
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        seed,
        config_sha256: sha256_hex(config_text.as_bytes()),
        config,
        inputs: hash_files(inputs)?,
        outputs: hash_files(&outputs)?,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    io::write_text(&dir.join(manifest_name(command)), &text)
}

/// `manifest.json` for full runs and studies, `manifest_<stage>.json` for
/// single stages, so staged runs in one directory keep both manifests.
pub fn manifest_name(command: &str) -> String {
    match command {
        "run" | "study" => "manifest.json".into(),
        stage => format!("manifest_{stage}.json"),
    }
}

pub fn write_manifest(
    dir: &Path,
    command: &str,
    cfg: &PipelineConfig,
    extra_inputs: &[(String, PathBuf)],
    written: &[String],
) -> Result<()> {
    let mut inputs: Vec<(String, PathBuf)> = [
        ("file1", &cfg.file1),
        ("file2", &cfg.file2),
        ("seeds", &cfg.seeds),
        ("truth", &cfg.truth),
    ]
    .into_iter()
    .filter_map(|(n, p)| p.clone().map(|p| (n.to_string(), p)))
    .collect();
    inputs.extend_from_slice(extra_inputs);
    write_manifest_value(dir, command, cfg.seed, cfg.canonical_json(), &inputs, written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comparison::Record;

    fn rec(name: &str, x: Option<f64>, y: Option<f64>) -> Record {
        Record {
            fields: vec![Some(name.into()), Some("extra".into())],
            covariates: x.into_iter().collect(),
            response: y,
        }
    }

    #[test]
    fn estimator_names_round_trip() {
        for e in Estimator::ALL {
            assert_eq!(e.name().parse::<Estimator>().unwrap(), e);
        }
        assert!("ols".parse::<Estimator>().is_err());
    }

    #[test]
    fn field_selection_reorders_and_rejects_missing_columns() {
        let f = RecordFile::new(vec!["a".into(), "b".into()], vec![rec("ann", Some(1.0), None)]).unwrap();
        let g = select_fields(&f, &["b", "a"], "file 1").unwrap();
        assert_eq!(g.field_names, vec!["b", "a"]);
        assert_eq!(g.records[0].fields, vec![Some("extra".into()), Some("ann".into())]);
        assert!(select_fields(&f, &["c"], "file 1").is_err());
    }

    #[test]
    fn config_invariants() {
        let mut cfg = PipelineConfig {
            fields: vec![FieldConfig {
                column: "a".into(),
                comparator: Comparator::Exact,
                thresholds: vec![],
            }],
            estimators: vec![Estimator::Plmi, Estimator::Perfect],
            ..Default::default()
        };
        let file1 = RecordFile::new(vec!["a".into()], vec![Record {
            fields: vec![Some("x".into())],
            covariates: vec![1.0],
            response: None,
        }])
        .unwrap();
        let file2 = RecordFile::new(vec!["a".into()], vec![Record {
            fields: vec![Some("x".into())],
            covariates: vec![],
            response: Some(2.0),
        }])
        .unwrap();
        let inputs = Inputs {
            file1,
            file2,
            seeds: BTreeMap::new(),
            truth: None,
        };
        let err = inputs.clone().prepare(&cfg).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
        cfg.estimators = vec![Estimator::Perfect];
        let err = inputs.clone().prepare(&cfg).unwrap_err();
        assert!(err.to_string().contains("ground-truth"), "{err}");
        cfg.estimators = vec![Estimator::TsOls];
        assert!(inputs.clone().prepare(&cfg).is_ok());
        cfg.level = 1.0;
        assert!(inputs.prepare(&cfg).is_err());
    }

    #[test]
    fn config_parses_from_toml_with_defaults() {
        let text = r#"
            seed = 7
            estimators = ["plmic", "ts_ols"]
            level = 0.95
            [gibbs]
            iterations = 200
            burn_in = 20
            mu_prior = 2.0
            [em]
            restarts = 1
            [[fields]]
            column = "last_name"
            comparator = "normalized_levenshtein"
            thresholds = [0.25, 0.5, 1.0]
        "#;
        let cfg: PipelineConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.gibbs.iterations, 200);
        assert_eq!(cfg.gibbs.mu_prior, crate::gibbs::Hyper::Constant(2.0));
        assert_eq!(cfg.em.restarts, 1);
        assert_eq!(cfg.em.max_iterations, EmConfig::default().max_iterations);
        assert_eq!(cfg.fields.len(), 1);
        assert_eq!(cfg.thin, 1);
        cfg.validate().unwrap();
    }

    #[test]
    fn canonical_config_ignores_output_directory() {
        let a = PipelineConfig::default();
        let b = PipelineConfig {
            output: "elsewhere".into(),
            ..Default::default()
        };
        assert_eq!(a.canonical_json(), b.canonical_json());
        let c = PipelineConfig {
            seed: 2,
            ..Default::default()
        };
        assert_ne!(a.canonical_json(), c.canonical_json());
    }

    #[test]
    fn derived_seeds_are_distinct_per_dataset() {
        let cfg = PipelineConfig::default();
        let seeds: HashSet<u64> = (0..50).map(|m| cfg.em_for_dataset(m).seed).collect();
        assert_eq!(seeds.len(), 50);
        assert!(!seeds.contains(&cfg.gibbs_for_run().seed));
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
