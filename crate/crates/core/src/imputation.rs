//! Linked analysis datasets built from chain draws, and Rubin's combining
//! rules for estimates computed on each of them.

use std::collections::BTreeMap;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::comparison::{ComparisonMatrix, RecordFile};
use crate::error::{Error, Result};
use crate::gibbs::{confidence_measure, Chain, Draw};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkedRow {
    /// File-1 record index.
    pub i: usize,
    /// File-2 record index.
    pub j: usize,
    pub x: Vec<f64>,
    pub y: f64,
    /// Confidence measure of the pair under the draw's match parameters.
    pub c: f64,
    pub is_seed: bool,
}

/// One analysis file; seed rows come first.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkedDataset {
    pub rows: Vec<LinkedRow>,
}

impl LinkedDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_seeds(&self) -> usize {
        self.rows.iter().take_while(|r| r.is_seed).count()
    }

    pub fn num_covariates(&self) -> usize {
        self.rows.first().map_or(0, |r| r.x.len())
    }

    /// CSV with columns `k, i, j, is_seed, c, y, x1..xp`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let p = self.num_covariates();
        let mut header: Vec<String> = ["k", "i", "j", "is_seed", "c", "y"].iter().map(|s| s.to_string()).collect();
        header.extend((1..=p).map(|l| format!("x{l}")));
        let wrap = |e: csv::Error| Error::invalid(format!("writing linked dataset: {e}"));
        w.write_record(&header).map_err(wrap)?;
        for (k, r) in self.rows.iter().enumerate() {
            let mut rec = vec![
                k.to_string(),
                r.i.to_string(),
                r.j.to_string(),
                (r.is_seed as u8).to_string(),
                r.c.to_string(),
                r.y.to_string(),
            ];
            rec.extend(r.x.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::invalid(format!("writing linked dataset: {e}")))?;
        Ok(())
    }
}

/// Builds the analysis file implied by one draw: a row `(x_i, y_j)` per
/// linked file-2 record `j`, seeds first, then by `j`.
pub fn extract_linked_dataset(
    draw: &Draw,
    cmp: &ComparisonMatrix,
    f1: &RecordFile,
    f2: &RecordFile,
    seeds: &BTreeMap<usize, usize>,
) -> Result<LinkedDataset> {
    if draw.links.len() != f2.len() || cmp.n2() != f2.len() || cmp.n1() != f1.len() {
        return Err(Error::invalid("draw, comparison matrix and files disagree on sizes"));
    }
    let mut seeded = Vec::new();
    let mut others = Vec::new();
    for (j, z) in draw.links.iter().enumerate() {
        let Some(i) = *z else { continue };
        if i >= f1.len() {
            return Err(Error::invalid(format!("draw links file-2 record {j} to missing file-1 record {i}")));
        }
        let y = f2.records[j]
            .response
            .ok_or_else(|| Error::invalid(format!("file-2 record {j} has no response")))?;
        let is_seed = seeds.get(&j) == Some(&i);
        let row = LinkedRow {
            i,
            j,
            x: f1.records[i].covariates.clone(),
            y,
            c: confidence_measure(cmp.pair(i, j), &draw.params),
            is_seed,
        };
        if is_seed {
            seeded.push(row);
        } else {
            others.push(row);
        }
    }
    seeded.extend(others);
    Ok(LinkedDataset { rows: seeded })
}

/// Every `stride`-th retained draw, optionally keeping only the last `m`.
pub fn select_draws(chain: &Chain, stride: usize, m: Option<usize>) -> Result<Vec<&Draw>> {
    if stride == 0 {
        return Err(Error::invalid("thinning stride must be positive"));
    }
    let picked: Vec<&Draw> = chain.draws.iter().step_by(stride).collect();
    Ok(match m {
        Some(m) if m < picked.len() => picked[picked.len() - m..].to_vec(),
        _ => picked,
    })
}

/// Datasets for the selected draws, in draw order.
pub fn extract_all(
    draws: &[&Draw],
    cmp: &ComparisonMatrix,
    f1: &RecordFile,
    f2: &RecordFile,
    seeds: &BTreeMap<usize, usize>,
) -> Result<Vec<LinkedDataset>> {
    draws
        .par_iter()
        .map(|d| extract_linked_dataset(d, cmp, f1, f2, seeds))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerDatasetEstimate {
    pub theta: Vec<f64>,
    pub variances: Vec<f64>,
    pub converged: bool,
    pub loglik: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PooledCoef {
    pub estimate: f64,
    pub within: f64,
    pub between: f64,
    pub total: f64,
    /// `f64::INFINITY` when the between-imputation variance is zero.
    pub df: f64,
    pub lo: f64,
    pub hi: f64,
}

impl PooledCoef {
    pub fn se(&self) -> f64 {
        self.total.sqrt()
    }

    pub fn length(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.lo <= truth && truth <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledEstimate {
    pub coefs: Vec<PooledCoef>,
    /// Estimates that entered the pool.
    pub used: usize,
    /// Non-converged estimates left out.
    pub dropped: usize,
    pub level: f64,
}

/// Above this many degrees of freedom the t quantile comes from its
/// expansion around the normal; the incomplete-beta inversion crawls there.
const T_EXPANSION_DF: f64 = 1e4;

/// Quantile of Student's t with `df` degrees of freedom. For large `df` uses
/// the two-term Cornish-Fisher expansion, whose error is `O(df^-3)`.
pub(crate) fn t_quantile(p: f64, df: f64) -> Result<f64> {
    if df > T_EXPANSION_DF {
        let z = Normal::standard().inverse_cdf(p);
        let z3 = z.powi(3);
        let z5 = z.powi(5);
        return Ok(z + (z3 + z) / (4.0 * df) + (5.0 * z5 + 16.0 * z3 + 3.0 * z) / (96.0 * df * df));
    }
    StudentsT::new(0.0, 1.0, df)
        .map(|t| t.inverse_cdf(p))
        .map_err(|e| Error::Degenerate(format!("t distribution: {e}")))
}

/// Rubin's rules for coefficient `l` over the converged estimates.
pub fn pool_rubin(estimates: &[PerDatasetEstimate], l: usize, level: f64) -> Result<PooledCoef> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid("confidence level must lie in (0, 1)"));
    }
    let kept: Vec<&PerDatasetEstimate> = estimates.iter().filter(|e| e.converged).collect();
    if kept.len() < 2 {
        return Err(Error::Degenerate(format!(
            "pooling needs at least two converged estimates, got {}",
            kept.len()
        )));
    }
    if kept.iter().any(|e| e.theta.len() <= l || e.variances.len() <= l) {
        return Err(Error::invalid(format!("coefficient {l} is missing from some estimates")));
    }
    let m = kept.len() as f64;
    let estimate = kept.iter().map(|e| e.theta[l]).sum::<f64>() / m;
    let within = kept.iter().map(|e| e.variances[l]).sum::<f64>() / m;
    let between = kept.iter().map(|e| (e.theta[l] - estimate).powi(2)).sum::<f64>() / (m - 1.0);
    let inflated = (1.0 + 1.0 / m) * between;
    let total = within + inflated;
    let (df, q) = if between > 0.0 {
        let df = (m - 1.0) * (1.0 + within / inflated).powi(2);
        (df, t_quantile(0.5 + level / 2.0, df)?)
    } else {
        let q = Normal::standard().inverse_cdf(0.5 + level / 2.0);
        (f64::INFINITY, q)
    };
    let half = q * total.sqrt();
    Ok(PooledCoef {
        estimate,
        within,
        between,
        total,
        df,
        lo: estimate - half,
        hi: estimate + half,
    })
}

/// Pools every coefficient; non-converged fits are dropped with a warning.
pub fn pool_all(estimates: &[PerDatasetEstimate], level: f64) -> Result<PooledEstimate> {
    let used = estimates.iter().filter(|e| e.converged).count();
    let dropped = estimates.len() - used;
    if dropped > 0 {
        warn!("dropping {dropped} of {} non-converged fits from pooling", estimates.len());
    }
    let k = estimates
        .iter()
        .find(|e| e.converged)
        .map(|e| e.theta.len())
        .ok_or_else(|| Error::Degenerate("no converged estimates to pool".into()))?;
    let coefs = (0..k).map(|l| pool_rubin(estimates, l, level)).collect::<Result<_>>()?;
    Ok(PooledEstimate {
        coefs,
        used,
        dropped,
        level,
    })
}

impl PooledEstimate {
    /// CSV table with columns `coef, estimate, se, df, lo, hi`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let wrap = |e: csv::Error| Error::invalid(format!("writing pooled table: {e}"));
        w.write_record(["coef", "estimate", "se", "df", "lo", "hi"]).map_err(wrap)?;
        for (l, c) in self.coefs.iter().enumerate() {
            let df = if c.df.is_finite() { c.df.to_string() } else { "inf".into() };
            w.write_record([
                format!("beta{l}"),
                c.estimate.to_string(),
                c.se().to_string(),
                df,
                c.lo.to_string(),
                c.hi.to_string(),
            ])
            .map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::invalid(format!("writing pooled table: {e}")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comparison::Record;
    use crate::gibbs::MatchParams;
    use proptest::prelude::*;

    fn est(theta: f64, var: f64) -> PerDatasetEstimate {
        PerDatasetEstimate {
            theta: vec![theta],
            variances: vec![var],
            converged: true,
            loglik: 0.0,
        }
    }

    #[test]
    fn t_quantile_expansion_matches_reference_values() {
        // scipy.stats.t.ppf(p, 2e4)
        let reference = [
            (0.9, 1.2815938962102158),
            (0.95, 1.6449298189594812),
            (0.975, 1.9600826051581348),
            (0.995, 2.5760751530172543),
        ];
        for (p, q) in reference {
            let approx = t_quantile(p, 2e4).unwrap();
            assert!((approx - q).abs() < 1e-11, "{p}: {approx} vs {q}");
            // The exact branch just below the switch agrees to its own precision.
            let below = t_quantile(p, T_EXPANSION_DF).unwrap();
            let above = t_quantile(p, T_EXPANSION_DF * (1.0 + 1e-12)).unwrap();
            assert!((below - above).abs() < 1e-7, "{p}: {below} vs {above}");
        }
        // Huge df from nearly-identical imputations.
        let q = t_quantile(0.95, 2.3e7).unwrap();
        assert!((q - Normal::standard().inverse_cdf(0.95)).abs() < 1e-6);
    }

    #[test]
    fn rubin_two_estimates_by_hand() {
        let p = pool_rubin(&[est(1.0, 1.0), est(3.0, 1.0)], 0, 0.9).unwrap();
        assert_eq!(p.estimate, 2.0);
        assert_eq!(p.within, 1.0);
        assert_eq!(p.between, 2.0);
        assert_eq!(p.total, 4.0);
        assert!((p.df - 16.0 / 9.0).abs() < 1e-12);
        assert!(((p.lo + p.hi) / 2.0 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rubin_identical_estimates_use_normal_quantile() {
        let p = pool_rubin(&[est(0.5, 0.04), est(0.5, 0.04), est(0.5, 0.04)], 0, 0.9).unwrap();
        assert_eq!(p.between, 0.0);
        assert_eq!(p.total, 0.04);
        assert!(p.df.is_infinite());
        assert!((p.hi - 0.5 - 1.6448536269514722 * 0.2).abs() < 1e-9);
    }

    #[test]
    fn rubin_rescaling() {
        let a = [est(1.0, 0.2), est(1.7, 0.3), est(0.4, 0.1)];
        let b: Vec<_> = a.iter().map(|e| est(10.0 * e.theta[0], 100.0 * e.variances[0])).collect();
        let pa = pool_rubin(&a, 0, 0.9).unwrap();
        let pb = pool_rubin(&b, 0, 0.9).unwrap();
        assert!((pb.estimate - 10.0 * pa.estimate).abs() < 1e-12);
        assert!((pb.total.sqrt() - 10.0 * pa.total.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rubin_errors_and_dropping() {
        assert!(pool_rubin(&[est(1.0, 1.0)], 0, 0.9).is_err());
        let mut bad = est(100.0, 1.0);
        bad.converged = false;
        assert!(pool_rubin(&[est(1.0, 1.0), bad.clone()], 0, 0.9).is_err());
        let pooled = pool_all(&[est(1.0, 1.0), bad, est(3.0, 1.0)], 0.9).unwrap();
        assert_eq!((pooled.used, pooled.dropped), (2, 1));
        assert_eq!(pooled.coefs[0].estimate, 2.0);
    }

    proptest! {
        #[test]
        fn rubin_permutation_invariant_and_total_dominates(
            vals in proptest::collection::vec((-5.0f64..5.0, 0.01f64..2.0), 2..8),
            rot in 0usize..8,
        ) {
            let a: Vec<_> = vals.iter().map(|&(t, v)| est(t, v)).collect();
            let mut b = a.clone();
            let r = rot % b.len();
            b.rotate_left(r);
            b.reverse();
            let pa = pool_rubin(&a, 0, 0.9).unwrap();
            let pb = pool_rubin(&b, 0, 0.9).unwrap();
            prop_assert!((pa.estimate - pb.estimate).abs() < 1e-12);
            prop_assert!((pa.total - pb.total).abs() < 1e-12);
            prop_assert!(pa.total >= pa.within);
        }

        #[test]
        fn width_grows_with_between_variance(spread in 0.01f64..3.0, extra in 0.01f64..3.0) {
            let mk = |s: f64| vec![est(-s, 0.5), est(0.0, 0.5), est(s, 0.5)];
            let a = pool_rubin(&mk(spread), 0, 0.9).unwrap();
            let b = pool_rubin(&mk(spread + extra), 0, 0.9).unwrap();
            prop_assert!(b.length() > a.length());
        }
    }

    fn files() -> (RecordFile, RecordFile, ComparisonMatrix) {
        let r1 = (0..3)
            .map(|i| Record {
                fields: vec![Some(format!("a{i}"))],
                covariates: vec![i as f64 * 10.0],
                response: None,
            })
            .collect();
        let r2 = (0..3)
            .map(|j| Record {
                fields: vec![Some(format!("a{j}"))],
                covariates: vec![],
                response: Some(j as f64 + 0.5),
            })
            .collect();
        let f1 = RecordFile::new(vec!["name".into()], r1).unwrap();
        let f2 = RecordFile::new(vec!["name".into()], r2).unwrap();
        let data = (0..9).map(|k| if k / 3 == k % 3 { 2 } else { 1 }).collect();
        let cmp = ComparisonMatrix::from_raw(3, 3, vec![2], data).unwrap();
        (f1, f2, cmp)
    }

    fn params() -> MatchParams {
        MatchParams {
            mu: vec![vec![0.1, 0.9]],
            nu: vec![vec![0.8, 0.2]],
        }
    }

    #[test]
    fn empty_draw_gives_empty_dataset() {
        let (f1, f2, cmp) = files();
        let draw = Draw {
            iteration: 1,
            links: vec![None; 3],
            params: params(),
        };
        let ds = extract_linked_dataset(&draw, &cmp, &f1, &f2, &BTreeMap::new()).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn rows_match_provenance_and_seeds_come_first() {
        let (f1, f2, cmp) = files();
        let draw = Draw {
            iteration: 1,
            links: vec![Some(2), None, Some(1)],
            params: params(),
        };
        let seeds = BTreeMap::from([(2, 1)]);
        let ds = extract_linked_dataset(&draw, &cmp, &f1, &f2, &seeds).unwrap();
        assert_eq!(ds.len(), draw.n12());
        assert_eq!(ds.n_seeds(), 1);
        assert_eq!((ds.rows[0].i, ds.rows[0].j, ds.rows[0].is_seed), (1, 2, true));
        for r in &ds.rows {
            assert_eq!(r.x, f1.records[r.i].covariates);
            assert_eq!(Some(r.y), f2.records[r.j].response);
        }
        // Pair (2, 0) disagrees, pair (1, 2) disagrees too.
        let disagree = (0.1f64 / 0.8).ln();
        assert!((ds.rows[1].c - disagree).abs() < 1e-12);

        let bad = Draw {
            iteration: 1,
            links: vec![Some(7), None, None],
            params: params(),
        };
        assert!(extract_linked_dataset(&bad, &cmp, &f1, &f2, &seeds).is_err());
    }

    #[test]
    fn thinning() {
        let chain = Chain {
            n1: 1,
            burn_in: 0,
            seeds: BTreeMap::new(),
            draws: (1..=10)
                .map(|t| Draw {
                    iteration: t,
                    links: vec![],
                    params: params(),
                })
                .collect(),
        };
        let its = |v: Vec<&Draw>| v.iter().map(|d| d.iteration).collect::<Vec<_>>();
        assert_eq!(its(select_draws(&chain, 1, None).unwrap()).len(), 10);
        assert_eq!(its(select_draws(&chain, 3, None).unwrap()), vec![1, 4, 7, 10]);
        assert_eq!(its(select_draws(&chain, 3, Some(2)).unwrap()), vec![7, 10]);
        assert!(select_draws(&chain, 0, None).is_err());
    }

    #[test]
    fn dataset_csv_layout() {
        let ds = LinkedDataset {
            rows: vec![LinkedRow {
                i: 4,
                j: 1,
                x: vec![0.5, -1.0],
                y: 2.0,
                c: 3.25,
                is_seed: true,
            }],
        };
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "k,i,j,is_seed,c,y,x1,x2\n0,4,1,1,3.25,2,0.5,-1\n");
    }
}
