//! Bipartite Bayesian record linkage.
//!
//! The comparison vectors follow independent multinomial laws given the
//! linkage structure: `mu_f` for true links and `nu_f` for non-links, each
//! with a Dirichlet prior. The linkage `Z` assigns every file-2 record either
//! one file-1 record or no link, never letting two file-2 records claim the
//! same file-1 record. Given the number of links `n12`, every feasible `Z` is
//! equally likely, and `n12` carries a beta-binomial prior with the link
//! proportion integrated out.
//!
//! The sampler alternates
//!
//! 1. sequential resampling of each unseeded `Z_j` from its full conditional,
//!    where label `i` gets weight `exp(c_ij)` when unclaimed and the no-link
//!    label gets `(n1 - n12) (n2 - n12 - 1 + b_pi) / (n12 + a_pi)` with
//!    `n12` counted over the other entries;
//! 2. Dirichlet draws of `mu_f` and `nu_f` given the level counts over linked
//!    and non-linked pairs.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::comparison::{ComparisonMatrix, MISSING_LEVEL};
use crate::error::{Error, Result};

/// Probabilities are clamped here before taking log ratios.
const PROB_FLOOR: f64 = 1e-300;

/// Dirichlet hyperparameters for every field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Hyper {
    /// The same value for every level of every field.
    Constant(f64),
    /// One vector per field, one entry per level.
    PerLevel(Vec<Vec<f64>>),
}

impl Hyper {
    fn resolve(&self, levels: &[u8]) -> Result<Vec<Vec<f64>>> {
        let out = match self {
            Hyper::Constant(v) => levels.iter().map(|&l| vec![*v; l as usize]).collect(),
            Hyper::PerLevel(v) => {
                if v.len() != levels.len() || v.iter().zip(levels).any(|(h, &l)| h.len() != l as usize) {
                    return Err(Error::invalid("Dirichlet hyperparameters do not match the field levels"));
                }
                v.clone()
            }
        };
        if out.iter().flatten().any(|&a: &f64| !(a > 0.0 && a.is_finite())) {
            return Err(Error::invalid("Dirichlet hyperparameters must be positive"));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GibbsConfig {
    pub mu_prior: Hyper,
    pub nu_prior: Hyper,
    pub alpha_pi: f64,
    pub beta_pi: f64,
    pub iterations: usize,
    pub burn_in: usize,
    pub seed: u64,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        GibbsConfig {
            mu_prior: Hyper::Constant(1.0),
            nu_prior: Hyper::Constant(1.0),
            alpha_pi: 1.0,
            beta_pi: 1.0,
            iterations: 1000,
            burn_in: 100,
            seed: 1,
        }
    }
}

impl GibbsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_pi > 0.0 && self.beta_pi > 0.0) {
            return Err(Error::invalid("alpha_pi and beta_pi must be positive"));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::invalid("burn-in must be smaller than the iteration count"));
        }
        Ok(())
    }
}

/// Linkage labels for the file-2 records: `Some(i)` links to file-1 record
/// `i`, `None` is the no-link label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkState {
    pub links: Vec<Option<usize>>,
    /// Seeded pairs `j -> i`, held fixed.
    pub seeds: BTreeMap<usize, usize>,
}

impl LinkState {
    pub fn unlinked(n2: usize, seeds: &BTreeMap<usize, usize>) -> Self {
        let mut links = vec![None; n2];
        for (&j, &i) in seeds {
            links[j] = Some(i);
        }
        LinkState {
            links,
            seeds: seeds.clone(),
        }
    }

    pub fn n12(&self) -> usize {
        self.links.iter().filter(|z| z.is_some()).count()
    }

    pub fn validate(&self, n1: usize) -> Result<()> {
        let mut owner = vec![false; n1];
        for (j, z) in self.links.iter().enumerate() {
            if let Some(i) = *z {
                if i >= n1 {
                    return Err(Error::invalid(format!("label {i} of record {j} is out of range")));
                }
                if std::mem::replace(&mut owner[i], true) {
                    return Err(Error::invalid(format!("file-1 record {i} is linked twice")));
                }
            }
        }
        for (&j, &i) in &self.seeds {
            if self.links.get(j) != Some(&Some(i)) {
                return Err(Error::invalid(format!("seed ({i}, {j}) is not honored")));
            }
        }
        Ok(())
    }
}

/// Checks a seed map against the file sizes and the one-to-one constraint.
pub fn validate_seeds(seeds: &BTreeMap<usize, usize>, n1: usize, n2: usize) -> Result<()> {
    let mut used = vec![false; n1];
    for (&j, &i) in seeds {
        if j >= n2 || i >= n1 {
            return Err(Error::invalid(format!("seed ({i}, {j}) is out of range")));
        }
        if std::mem::replace(&mut used[i], true) {
            return Err(Error::invalid(format!("file-1 record {i} is seeded twice")));
        }
    }
    Ok(())
}

/// Level probabilities given link (`mu`) and non-link (`nu`), per field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchParams {
    pub mu: Vec<Vec<f64>>,
    pub nu: Vec<Vec<f64>>,
}

impl MatchParams {
    pub fn validate(&self) -> Result<()> {
        if self.mu.len() != self.nu.len() {
            return Err(Error::invalid("mu and nu cover different numbers of fields"));
        }
        for (m, n) in self.mu.iter().zip(&self.nu) {
            if m.len() != n.len() {
                return Err(Error::invalid("mu and nu differ in level count"));
            }
            for v in [m, n] {
                if v.iter().any(|&p| !(p >= 0.0)) || (v.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                    return Err(Error::invalid("level probabilities must be a distribution"));
                }
            }
        }
        Ok(())
    }

    /// `log(mu_fl / nu_fl)` indexed `[f][l - 1]`.
    pub fn log_ratios(&self) -> Vec<Vec<f64>> {
        self.mu
            .iter()
            .zip(&self.nu)
            .map(|(m, n)| {
                m.iter()
                    .zip(n)
                    .map(|(a, b)| a.max(PROB_FLOOR).ln() - b.max(PROB_FLOOR).ln())
                    .collect()
            })
            .collect()
    }

    /// Independent draws from the Dirichlet priors.
    pub fn sample_prior<R: Rng + ?Sized>(levels: &[u8], cfg: &GibbsConfig, rng: &mut R) -> Result<Self> {
        let a = cfg.mu_prior.resolve(levels)?;
        let b = cfg.nu_prior.resolve(levels)?;
        Ok(MatchParams {
            mu: a.iter().map(|s| dirichlet(s, rng)).collect(),
            nu: b.iter().map(|s| dirichlet(s, rng)).collect(),
        })
    }
}

fn dirichlet<R: Rng + ?Sized>(shape: &[f64], rng: &mut R) -> Vec<f64> {
    let mut draws: Vec<f64> = shape
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("positive shape").sample(rng))
        .collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 {
        draws.iter_mut().for_each(|d| *d /= total);
    } else {
        // Every gamma underflowed (tiny shapes); fall back to the largest shape.
        let k = (0..shape.len()).max_by(|&x, &y| shape[x].total_cmp(&shape[y])).unwrap_or(0);
        draws.iter_mut().enumerate().for_each(|(i, d)| *d = f64::from(u8::from(i == k)));
    }
    draws
}

/// Log prior of `Z`: `log[(n1 - n12)!/n1!] + log B(n12 + a, n2 - n12 + b) - log B(a, b)`.
pub fn log_prior_z(state: &LinkState, n1: usize, cfg: &GibbsConfig) -> f64 {
    log_prior_n12(state.n12(), n1, state.links.len(), cfg.alpha_pi, cfg.beta_pi)
}

pub(crate) fn log_prior_n12(n12: usize, n1: usize, n2: usize, a: f64, b: f64) -> f64 {
    let ln_beta = |x: f64, y: f64| ln_gamma(x) + ln_gamma(y) - ln_gamma(x + y);
    ln_gamma((n1 - n12) as f64 + 1.0) - ln_gamma(n1 as f64 + 1.0)
        + ln_beta(n12 as f64 + a, (n2 - n12) as f64 + b)
        - ln_beta(a, b)
}

/// Log-likelihood ratio `sum_f log(mu_{f,g_f} / nu_{f,g_f})`; missing fields
/// contribute nothing.
pub fn confidence_measure(gamma: &[u8], params: &MatchParams) -> f64 {
    gamma
        .iter()
        .enumerate()
        .filter(|(_, &l)| l != MISSING_LEVEL)
        .map(|(f, &l)| {
            let l = l as usize - 1;
            params.mu[f][l].max(PROB_FLOOR).ln() - params.nu[f][l].max(PROB_FLOOR).ln()
        })
        .sum()
}

/// Full conditional of `Z_j` over labels `0..n1` followed by the no-link
/// label, given every other entry of `state`. The current value of `Z_j` is
/// ignored.
pub fn full_conditional_z_entry(
    j: usize,
    state: &LinkState,
    cmp: &ComparisonMatrix,
    params: &MatchParams,
    cfg: &GibbsConfig,
) -> Vec<f64> {
    let n1 = cmp.n1();
    let n2 = cmp.n2();
    let mut claimed = vec![false; n1];
    let mut n12 = 0usize;
    for (jj, z) in state.links.iter().enumerate() {
        if let (true, Some(i)) = (jj != j, z) {
            claimed[*i] = true;
            n12 += 1;
        }
    }
    let mut logw = vec![f64::NEG_INFINITY; n1 + 1];
    for i in 0..n1 {
        if !claimed[i] {
            logw[i] = confidence_measure(cmp.pair(i, j), params);
        }
    }
    logw[n1] = log_no_link_weight(n12, n1, n2, cfg);
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        // Every file-1 record is claimed: only the no-link label remains.
        let mut p = vec![0.0; n1 + 1];
        p[n1] = 1.0;
        return p;
    }
    let w: Vec<f64> = logw.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

fn log_no_link_weight(n12: usize, n1: usize, n2: usize, cfg: &GibbsConfig) -> f64 {
    if n12 >= n1 {
        return f64::NEG_INFINITY;
    }
    ((n1 - n12) as f64).ln() + ((n2 - n12 - 1) as f64 + cfg.beta_pi).ln() - (n12 as f64 + cfg.alpha_pi).ln()
}

/// Level counts over linked and non-linked pairs, indexed `[f][l - 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelCounts {
    pub linked: Vec<Vec<f64>>,
    pub unlinked: Vec<Vec<f64>>,
}

pub fn level_counts(state: &LinkState, cmp: &ComparisonMatrix) -> LevelCounts {
    let zero = || cmp.levels().iter().map(|&l| vec![0.0; l as usize]).collect::<Vec<_>>();
    let (mut linked, mut unlinked) = (zero(), zero());
    for j in 0..cmp.n2() {
        for i in 0..cmp.n1() {
            let target = if state.links[j] == Some(i) { &mut linked } else { &mut unlinked };
            for (f, &l) in cmp.pair(i, j).iter().enumerate() {
                if l != MISSING_LEVEL {
                    target[f][l as usize - 1] += 1.0;
                }
            }
        }
    }
    LevelCounts { linked, unlinked }
}

/// Draws `mu` and `nu` from their Dirichlet full conditionals.
pub fn sample_mu_nu<R: Rng + ?Sized>(
    state: &LinkState,
    cmp: &ComparisonMatrix,
    cfg: &GibbsConfig,
    rng: &mut R,
) -> Result<MatchParams> {
    let counts = level_counts(state, cmp);
    draw_params(&counts, cmp.levels(), cfg, rng)
}

fn draw_params<R: Rng + ?Sized>(
    counts: &LevelCounts,
    levels: &[u8],
    cfg: &GibbsConfig,
    rng: &mut R,
) -> Result<MatchParams> {
    let a = cfg.mu_prior.resolve(levels)?;
    let b = cfg.nu_prior.resolve(levels)?;
    let post = |prior: &[Vec<f64>], c: &[Vec<f64>], rng: &mut R| -> Vec<Vec<f64>> {
        prior
            .iter()
            .zip(c)
            .map(|(p, c)| {
                let shape: Vec<f64> = p.iter().zip(c).map(|(x, y)| x + y).collect();
                dirichlet(&shape, rng)
            })
            .collect()
    };
    let mu = post(&a, &counts.linked, rng);
    let nu = post(&b, &counts.unlinked, rng);
    Ok(MatchParams { mu, nu })
}

/// Greedy one-to-one starting linkage: seeds first, then pairs with a
/// positive confidence measure in decreasing order.
pub fn init_z(cmp: &ComparisonMatrix, params: &MatchParams, seeds: &BTreeMap<usize, usize>) -> LinkState {
    let n1 = cmp.n1();
    let mut state = LinkState::unlinked(cmp.n2(), seeds);
    let mut used = vec![false; n1];
    for &i in seeds.values() {
        used[i] = true;
    }
    let mut candidates = Vec::new();
    for j in (0..cmp.n2()).filter(|j| !seeds.contains_key(j)) {
        for i in (0..n1).filter(|&i| !used[i]) {
            let c = confidence_measure(cmp.pair(i, j), params);
            if c > 0.0 {
                candidates.push((c, j, i));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for (_, j, i) in candidates {
        if state.links[j].is_none() && !used[i] {
            state.links[j] = Some(i);
            used[i] = true;
        }
    }
    state
}

/// One retained draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    /// 1-based iteration number.
    pub iteration: usize,
    pub links: Vec<Option<usize>>,
    pub params: MatchParams,
}

impl Draw {
    pub fn n12(&self) -> usize {
        self.links.iter().filter(|z| z.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub n1: usize,
    pub burn_in: usize,
    pub seeds: BTreeMap<usize, usize>,
    /// Post-burn-in draws in iteration order.
    pub draws: Vec<Draw>,
}

#[derive(Serialize, Deserialize)]
struct ChainHeader {
    n1: usize,
    n2: usize,
    burn_in: usize,
    seeds: Vec<(usize, usize)>,
}

impl Chain {
    /// Writes a header line followed by one JSON record per draw.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header = ChainHeader {
            n1: self.n1,
            n2: self.draws.first().map_or(0, |d| d.links.len()),
            burn_in: self.burn_in,
            seeds: self.seeds.iter().map(|(&j, &i)| (i, j)).collect(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for d in &self.draws {
            serde_json::to_writer(&mut out, d)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: "<chain>".into(),
            line,
            msg,
        };
        let mut lines = input.lines().enumerate();
        let header: ChainHeader = match lines.next() {
            Some((_, Ok(l))) => serde_json::from_str(&l).map_err(|e| parse_err(1, e.to_string()))?,
            Some((_, Err(e))) => return Err(parse_err(1, e.to_string())),
            None => return Err(parse_err(1, "empty chain file".into())),
        };
        let mut draws = Vec::new();
        for (idx, line) in lines {
            let line = line.map_err(|e| parse_err(idx + 1, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let d: Draw = serde_json::from_str(&line).map_err(|e| parse_err(idx + 1, e.to_string()))?;
            if d.links.len() != header.n2 {
                return Err(parse_err(idx + 1, "draw has the wrong number of labels".into()));
            }
            draws.push(d);
        }
        Ok(Chain {
            n1: header.n1,
            burn_in: header.burn_in,
            seeds: header.seeds.into_iter().map(|(i, j)| (j, i)).collect(),
            draws,
        })
    }
}

/// Distinct agreement patterns and the pattern of every pair.
struct PatternIndex {
    /// Pattern id of pair `(i, j)` at `j * n1 + i`.
    of_pair: Vec<u32>,
    patterns: Vec<Vec<u8>>,
    /// Number of pairs sharing each pattern.
    counts: Vec<f64>,
}

impl PatternIndex {
    fn build(cmp: &ComparisonMatrix) -> Self {
        let (n1, n2) = (cmp.n1(), cmp.n2());
        let mut lookup: HashMap<&[u8], u32> = HashMap::new();
        let mut patterns = Vec::new();
        let mut counts = Vec::new();
        let mut of_pair = vec![0u32; n1 * n2];
        for j in 0..n2 {
            for i in 0..n1 {
                let key = cmp.pair(i, j);
                let id = *lookup.entry(key).or_insert_with(|| {
                    patterns.push(key.to_vec());
                    counts.push(0.0);
                    (patterns.len() - 1) as u32
                });
                counts[id as usize] += 1.0;
                of_pair[j * n1 + i] = id;
            }
        }
        PatternIndex {
            of_pair,
            patterns,
            counts,
        }
    }

    fn measures(&self, params: &MatchParams) -> Vec<f64> {
        let ratios = params.log_ratios();
        self.patterns
            .iter()
            .map(|p| {
                p.iter()
                    .enumerate()
                    .filter(|(_, &l)| l != MISSING_LEVEL)
                    .map(|(f, &l)| ratios[f][l as usize - 1])
                    .sum()
            })
            .collect()
    }
}

/// Runs the sampler and keeps every draw after burn-in.
pub fn run_gibbs(cmp: &ComparisonMatrix, cfg: &GibbsConfig, seeds: &BTreeMap<usize, usize>) -> Result<Chain> {
    run_gibbs_with(cmp, cfg, seeds, |_| {})
}

/// As [`run_gibbs`], calling `observe` on every draw including burn-in.
pub fn run_gibbs_with<F>(
    cmp: &ComparisonMatrix,
    cfg: &GibbsConfig,
    seeds: &BTreeMap<usize, usize>,
    mut observe: F,
) -> Result<Chain>
where
    F: FnMut(&Draw),
{
    cfg.validate()?;
    let (n1, n2) = (cmp.n1(), cmp.n2());
    validate_seeds(seeds, n1, n2)?;
    let levels = cmp.levels().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let index = PatternIndex::build(cmp);

    let mut params = MatchParams::sample_prior(&levels, cfg, &mut rng)?;
    let mut state = init_z(cmp, &params, seeds);
    let mut owner: Vec<Option<usize>> = vec![None; n1];
    for (j, z) in state.links.iter().enumerate() {
        if let Some(i) = z {
            owner[*i] = Some(j);
        }
    }
    let mut n12 = state.n12();
    let free: Vec<usize> = (0..n2).filter(|j| !seeds.contains_key(j)).collect();
    let mut weights = vec![0.0; n1 + 1];
    let mut draws = Vec::with_capacity(cfg.iterations - cfg.burn_in);

    for iteration in 1..=cfg.iterations {
        // S.1
        let c = index.measures(&params);
        let cmax = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let scaled: Vec<f64> = c.iter().map(|v| (v - cmax).exp()).collect();
        for &j in &free {
            if let Some(i) = state.links[j].take() {
                owner[i] = None;
                n12 -= 1;
            }
            if n12 == n1 {
                continue;
            }
            let row = &index.of_pair[j * n1..(j + 1) * n1];
            let row_max = row
                .iter()
                .zip(&owner)
                .filter(|(_, o)| o.is_none())
                .map(|(&p, _)| c[p as usize])
                .fold(f64::NEG_INFINITY, f64::max);
            let log_nolink = log_no_link_weight(n12, n1, n2, cfg);
            let shift = row_max.max(log_nolink);
            let mut total = 0.0;
            if row_max >= cmax - 600.0 {
                let factor = (cmax - shift).exp();
                for ((w, &p), o) in weights.iter_mut().zip(row).zip(&owner) {
                    *w = if o.is_none() { scaled[p as usize] * factor } else { 0.0 };
                    total += *w;
                }
            } else {
                for ((w, &p), o) in weights.iter_mut().zip(row).zip(&owner) {
                    *w = if o.is_none() { (c[p as usize] - shift).exp() } else { 0.0 };
                    total += *w;
                }
            }
            weights[n1] = (log_nolink - shift).exp();
            total += weights[n1];

            let mut u = rng.random::<f64>() * total;
            let mut pick = n1;
            for (q, &w) in weights.iter().enumerate() {
                if w > 0.0 {
                    pick = q;
                    if u < w {
                        break;
                    }
                    u -= w;
                }
            }
            if pick < n1 {
                state.links[j] = Some(pick);
                owner[pick] = Some(j);
                n12 += 1;
            }
        }

        // S.2
        let mut linked: Vec<Vec<f64>> = levels.iter().map(|&l| vec![0.0; l as usize]).collect();
        let mut unlinked = linked.clone();
        for (p, pattern) in index.patterns.iter().enumerate() {
            for (f, &l) in pattern.iter().enumerate() {
                if l != MISSING_LEVEL {
                    unlinked[f][l as usize - 1] += index.counts[p];
                }
            }
        }
        for (j, z) in state.links.iter().enumerate() {
            if let Some(i) = z {
                let pattern = &index.patterns[index.of_pair[j * n1 + i] as usize];
                for (f, &l) in pattern.iter().enumerate() {
                    if l != MISSING_LEVEL {
                        linked[f][l as usize - 1] += 1.0;
                        unlinked[f][l as usize - 1] -= 1.0;
                    }
                }
            }
        }
        params = draw_params(&LevelCounts { linked, unlinked }, &levels, cfg, &mut rng)?;

        let draw = Draw {
            iteration,
            links: state.links.clone(),
            params: params.clone(),
        };
        observe(&draw);
        if iteration > cfg.burn_in {
            draws.push(draw);
        }
    }

    Ok(Chain {
        n1,
        burn_in: cfg.burn_in,
        seeds: seeds.clone(),
        draws,
    })
}

/// Exact posterior link probabilities by enumerating every feasible `Z`,
/// with `mu`/`nu` integrated out against their Dirichlet priors. Entry
/// `[j][i]` is `P(Z_j = i)`; entry `[j][n1]` is the no-link probability.
///
/// Only feasible for tiny files; used as a reference for the sampler.
pub fn enumerate_posterior(
    cmp: &ComparisonMatrix,
    cfg: &GibbsConfig,
    seeds: &BTreeMap<usize, usize>,
) -> Result<Vec<Vec<f64>>> {
    let (n1, n2) = (cmp.n1(), cmp.n2());
    if n1 > 6 || n2 > 6 {
        return Err(Error::invalid("exhaustive enumeration is limited to 6x6 files"));
    }
    let a = cfg.mu_prior.resolve(cmp.levels())?;
    let b = cfg.nu_prior.resolve(cmp.levels())?;
    let ln_mbeta = |v: &[f64]| v.iter().map(|&x| ln_gamma(x)).sum::<f64>() - ln_gamma(v.iter().sum());

    let mut states = Vec::new();
    let mut current = vec![None; n2];
    fn recurse(
        j: usize,
        n1: usize,
        used: &mut Vec<bool>,
        current: &mut Vec<Option<usize>>,
        seeds: &BTreeMap<usize, usize>,
        out: &mut Vec<Vec<Option<usize>>>,
    ) {
        if j == current.len() {
            out.push(current.clone());
            return;
        }
        if let Some(&i) = seeds.get(&j) {
            if !used[i] {
                used[i] = true;
                current[j] = Some(i);
                recurse(j + 1, n1, used, current, seeds, out);
                used[i] = false;
            }
            return;
        }
        current[j] = None;
        recurse(j + 1, n1, used, current, seeds, out);
        for i in 0..n1 {
            if !used[i] {
                used[i] = true;
                current[j] = Some(i);
                recurse(j + 1, n1, used, current, seeds, out);
                used[i] = false;
            }
        }
        current[j] = None;
    }
    recurse(0, n1, &mut vec![false; n1], &mut current, seeds, &mut states);

    let log_weights: Vec<f64> = states
        .iter()
        .map(|links| {
            let state = LinkState {
                links: links.clone(),
                seeds: seeds.clone(),
            };
            let counts = level_counts(&state, cmp);
            let mut lw = log_prior_z(&state, n1, cfg);
            for f in 0..cmp.num_fields() {
                let pa: Vec<f64> = a[f].iter().zip(&counts.linked[f]).map(|(x, y)| x + y).collect();
                let pb: Vec<f64> = b[f].iter().zip(&counts.unlinked[f]).map(|(x, y)| x + y).collect();
                lw += ln_mbeta(&pa) - ln_mbeta(&a[f]) + ln_mbeta(&pb) - ln_mbeta(&b[f]);
            }
            lw
        })
        .collect();
    let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_weights.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = w.iter().sum();

    let mut probs = vec![vec![0.0; n1 + 1]; n2];
    for (links, wt) in states.iter().zip(&w) {
        for (j, z) in links.iter().enumerate() {
            probs[j][z.unwrap_or(n1)] += wt / total;
        }
    }
    Ok(probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn binary_matrix(n1: usize, n2: usize, f: usize, data: Vec<u8>) -> ComparisonMatrix {
        ComparisonMatrix::from_raw(n1, n2, vec![2; f], data).unwrap()
    }

    fn no_seeds() -> BTreeMap<usize, usize> {
        BTreeMap::new()
    }

    #[test]
    fn prior_on_single_pair() {
        let cfg = GibbsConfig::default();
        let linked = LinkState::unlinked(1, &BTreeMap::from([(0, 0)]));
        let unlinked = LinkState::unlinked(1, &no_seeds());
        assert!((log_prior_z(&linked, 1, &cfg) - 0.5f64.ln()).abs() < 1e-12);
        assert!((log_prior_z(&unlinked, 1, &cfg) - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn prior_depends_only_on_link_count() {
        let cfg = GibbsConfig {
            alpha_pi: 2.0,
            beta_pi: 0.7,
            ..Default::default()
        };
        let a = LinkState {
            links: vec![Some(0), None, Some(3)],
            seeds: no_seeds(),
        };
        let b = LinkState {
            links: vec![None, Some(2), Some(1)],
            seeds: no_seeds(),
        };
        assert_eq!(log_prior_z(&a, 4, &cfg), log_prior_z(&b, 4, &cfg));
    }

    #[test]
    fn prior_sums_to_one_over_feasible_states() {
        // n1 = 3, n2 = 2: 1 empty state, 6 with one link, 6 with two.
        let cfg = GibbsConfig::default();
        let total: f64 = [(0usize, 1.0), (1, 6.0), (2, 6.0)]
            .iter()
            .map(|&(k, count)| count * log_prior_n12(k, 3, 2, cfg.alpha_pi, cfg.beta_pi).exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn confidence_measure_examples() {
        let p = MatchParams {
            mu: vec![vec![0.1, 0.9]],
            nu: vec![vec![0.5, 0.5]],
        };
        assert!((confidence_measure(&[2], &p) - (0.9f64 / 0.5).ln()).abs() < 1e-12);
        assert!((confidence_measure(&[2], &p) - 0.5878).abs() < 1e-4);
        assert_eq!(confidence_measure(&[MISSING_LEVEL], &p), 0.0);

        let same = MatchParams {
            mu: vec![vec![0.3, 0.7], vec![0.2, 0.2, 0.6]],
            nu: vec![vec![0.3, 0.7], vec![0.2, 0.2, 0.6]],
        };
        assert_eq!(confidence_measure(&[1, 3], &same), 0.0);

        let two = MatchParams {
            mu: vec![vec![0.1, 0.9], vec![0.2, 0.8]],
            nu: vec![vec![0.5, 0.5], vec![0.7, 0.3]],
        };
        let single_a = MatchParams {
            mu: vec![two.mu[0].clone()],
            nu: vec![two.nu[0].clone()],
        };
        let single_b = MatchParams {
            mu: vec![two.mu[1].clone()],
            nu: vec![two.nu[1].clone()],
        };
        let joint = confidence_measure(&[2, 1], &two);
        assert!((joint - confidence_measure(&[2], &single_a) - confidence_measure(&[1], &single_b)).abs() < 1e-12);
    }

    #[test]
    fn confidence_measure_is_finite_at_zero_probabilities() {
        let p = MatchParams {
            mu: vec![vec![0.0, 1.0]],
            nu: vec![vec![1.0, 0.0]],
        };
        assert!(confidence_measure(&[1], &p).is_finite());
        assert!(confidence_measure(&[2], &p).is_finite());
    }

    #[test]
    fn full_conditional_single_pair() {
        let cmp = binary_matrix(1, 1, 1, vec![2]);
        let p = MatchParams {
            mu: vec![vec![0.5, 0.5]],
            nu: vec![vec![0.5, 0.5]],
        };
        let state = LinkState::unlinked(1, &no_seeds());
        let probs = full_conditional_z_entry(0, &state, &cmp, &p, &GibbsConfig::default());
        assert!((probs[0] - 0.5).abs() < 1e-12 && (probs[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn full_conditional_excludes_claimed_records() {
        let cmp = binary_matrix(2, 2, 1, vec![2, 2, 2, 2]);
        let p = MatchParams {
            mu: vec![vec![0.1, 0.9]],
            nu: vec![vec![0.9, 0.1]],
        };
        let state = LinkState {
            links: vec![None, Some(0)],
            seeds: no_seeds(),
        };
        let probs = full_conditional_z_entry(0, &state, &cmp, &p, &GibbsConfig::default());
        assert_eq!(probs[0], 0.0);
        assert!(probs[1] > 0.0);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_conditional_all_claimed_forces_no_link() {
        let cmp = binary_matrix(1, 2, 1, vec![2, 2]);
        let p = MatchParams {
            mu: vec![vec![0.1, 0.9]],
            nu: vec![vec![0.9, 0.1]],
        };
        let state = LinkState {
            links: vec![Some(0), None],
            seeds: no_seeds(),
        };
        let probs = full_conditional_z_entry(1, &state, &cmp, &p, &GibbsConfig::default());
        assert_eq!(probs, vec![0.0, 1.0]);
    }

    #[test]
    fn full_conditional_saturates_for_huge_measure() {
        let cmp = binary_matrix(2, 1, 1, vec![2, 1]);
        let p = MatchParams {
            mu: vec![vec![1e-300, 1.0 - 1e-300]],
            nu: vec![vec![1.0 - 1e-300, 1e-300]],
        };
        let state = LinkState::unlinked(1, &no_seeds());
        let probs = full_conditional_z_entry(0, &state, &cmp, &p, &GibbsConfig::default());
        assert!(probs[0] > 1.0 - 1e-12);
    }

    #[test]
    fn level_counts_two_by_two() {
        let cmp = binary_matrix(2, 2, 1, vec![2; 4]);
        let state = LinkState {
            links: vec![Some(0), Some(1)],
            seeds: no_seeds(),
        };
        let c = level_counts(&state, &cmp);
        assert_eq!(c.linked[0], vec![0.0, 2.0]);
        assert_eq!(c.unlinked[0], vec![0.0, 2.0]);

        let none = LinkState::unlinked(2, &no_seeds());
        assert_eq!(level_counts(&none, &cmp).linked[0], vec![0.0, 0.0]);
    }

    #[test]
    fn dirichlet_posterior_mean() {
        // Counts (9, 0) on top of a flat prior: E[mu_top] = 10/11.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shape = [1.0, 10.0];
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| dirichlet(&shape, &mut rng)[1]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = 10.0 * 1.0 / (11.0f64.powi(2) * 12.0);
        let se = (var / n as f64).sqrt();
        assert!((mean - 10.0 / 11.0).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn sample_mu_nu_produces_distributions() {
        let cmp = binary_matrix(2, 2, 2, vec![2, 1, 1, 1, 1, 2, 2, 2]);
        let state = LinkState {
            links: vec![Some(0), None],
            seeds: no_seeds(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = sample_mu_nu(&state, &cmp, &GibbsConfig::default(), &mut rng).unwrap();
        p.validate().unwrap();
    }

    #[test]
    fn init_z_greedy_rules() {
        // One field, three levels: log ratio +5 at the top level, -5 below.
        let (up, down) = (5f64.exp(), (-5f64).exp());
        let a = (up - 1.0) / (2.0 * (up - down));
        let params = MatchParams {
            mu: vec![vec![a * down, a * down, (1.0 - 2.0 * a) * up]],
            nu: vec![vec![a, a, 1.0 - 2.0 * a]],
        };
        params.validate().unwrap();
        let cmp = ComparisonMatrix::from_raw(2, 2, vec![3], vec![1, 3, 2, 1]).unwrap();
        assert!(confidence_measure(&[3], &params) > 0.0);
        assert!(confidence_measure(&[2], &params) < 0.0);
        let z = init_z(&cmp, &params, &no_seeds());
        assert_eq!(z.links, vec![None, Some(0)]);

        let all_negative = ComparisonMatrix::from_raw(2, 2, vec![3], vec![1, 2, 2, 1]).unwrap();
        assert_eq!(init_z(&all_negative, &params, &no_seeds()).links, vec![None, None]);

        let seeds = BTreeMap::from([(0usize, 1usize)]);
        let z = init_z(&all_negative, &params, &seeds);
        assert_eq!(z.links[0], Some(1));
        z.validate(2).unwrap();
    }

    #[test]
    fn chain_length_and_seed_constancy() {
        let cmp = binary_matrix(2, 2, 1, vec![2, 1, 1, 2]);
        let seeds = BTreeMap::from([(0usize, 0usize), (1, 1)]);
        let cfg = GibbsConfig {
            iterations: 50,
            burn_in: 10,
            ..Default::default()
        };
        let chain = run_gibbs(&cmp, &cfg, &seeds).unwrap();
        assert_eq!(chain.draws.len(), 40);
        assert!(chain.draws.iter().all(|d| d.links == vec![Some(0), Some(1)]));
    }

    #[test]
    fn gibbs_rejects_bad_config_and_seeds() {
        let cmp = binary_matrix(1, 1, 1, vec![2]);
        let cfg = GibbsConfig {
            iterations: 5,
            burn_in: 5,
            ..Default::default()
        };
        assert!(run_gibbs(&cmp, &cfg, &no_seeds()).is_err());
        let bad = BTreeMap::from([(0usize, 3usize)]);
        assert!(run_gibbs(&cmp, &GibbsConfig::default(), &bad).is_err());
    }

    #[test]
    fn gibbs_is_deterministic_given_seed() {
        let cmp = binary_matrix(3, 3, 2, (0..18).map(|k| 1 + (k * 7 % 3 == 0) as u8).collect());
        let cfg = GibbsConfig {
            iterations: 30,
            burn_in: 5,
            seed: 99,
            ..Default::default()
        };
        let a = run_gibbs(&cmp, &cfg, &no_seeds()).unwrap();
        let b = run_gibbs(&cmp, &cfg, &no_seeds()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn chain_jsonl_round_trip_is_exact() {
        let cmp = binary_matrix(3, 2, 2, vec![2, 2, 1, 1, 1, 2, 2, 1, 1, 1, 2, 2]);
        let cfg = GibbsConfig {
            iterations: 20,
            burn_in: 2,
            ..Default::default()
        };
        let chain = run_gibbs(&cmp, &cfg, &BTreeMap::from([(1usize, 2usize)])).unwrap();
        let mut buf = Vec::new();
        chain.write_jsonl(&mut buf).unwrap();
        let back = Chain::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, chain);
    }

    #[test]
    fn small_posterior_matches_enumeration() {
        let cmp = binary_matrix(2, 2, 2, vec![2, 2, 1, 1, 1, 2, 2, 1]);
        let cfg = GibbsConfig {
            iterations: 40_000,
            burn_in: 1_000,
            seed: 5,
            ..Default::default()
        };
        let exact = enumerate_posterior(&cmp, &cfg, &no_seeds()).unwrap();
        let chain = run_gibbs(&cmp, &cfg, &no_seeds()).unwrap();
        let n = chain.draws.len() as f64;
        for j in 0..2 {
            for q in 0..=2 {
                let freq = chain.draws.iter().filter(|d| d.links[j].unwrap_or(2) == q).count() as f64 / n;
                assert!((freq - exact[j][q]).abs() < 0.02, "j={j} q={q} {freq} vs {}", exact[j][q]);
            }
        }
    }

    proptest! {
        #[test]
        fn full_conditional_is_a_distribution(
            data in proptest::collection::vec(1u8..=2, 3 * 3 * 2),
            mu in 0.01f64..0.99, nu in 0.01f64..0.99,
            z0 in 0usize..4, z1 in 0usize..4,
        ) {
            let cmp = binary_matrix(3, 3, 2, data);
            let p = MatchParams {
                mu: vec![vec![1.0 - mu, mu]; 2],
                nu: vec![vec![1.0 - nu, nu]; 2],
            };
            let to_label = |z: usize| if z < 3 { Some(z) } else { None };
            let mut links = vec![to_label(z0), None, to_label(z1)];
            if links[0].is_some() && links[0] == links[2] {
                links[2] = None;
            }
            let state = LinkState { links, seeds: BTreeMap::new() };
            let probs = full_conditional_z_entry(1, &state, &cmp, &p, &GibbsConfig::default());
            prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(probs.iter().all(|&v| v >= 0.0));
            for z in [state.links[0], state.links[2]].into_iter().flatten() {
                prop_assert_eq!(probs[z], 0.0);
            }
        }

        #[test]
        fn identical_candidates_are_exchangeable(level in 1u8..=2, other in 1u8..=2) {
            // Records 0 and 1 of file 1 compare identically with j = 0.
            let cmp = binary_matrix(3, 1, 1, vec![level, level, other]);
            let p = MatchParams { mu: vec![vec![0.2, 0.8]], nu: vec![vec![0.7, 0.3]] };
            let probs = full_conditional_z_entry(0, &LinkState::unlinked(1, &BTreeMap::new()), &cmp, &p, &GibbsConfig::default());
            prop_assert_eq!(probs[0], probs[1]);
        }

        #[test]
        fn draws_are_one_to_one_and_keep_seeds(
            data in proptest::collection::vec(1u8..=2, 4 * 3),
            seed in 0u64..1000,
        ) {
            let cmp = binary_matrix(4, 3, 1, data);
            let seeds = BTreeMap::from([(2usize, 1usize)]);
            let cfg = GibbsConfig { iterations: 30, burn_in: 0, seed, ..Default::default() };
            let chain = run_gibbs(&cmp, &cfg, &seeds).unwrap();
            for d in &chain.draws {
                let state = LinkState { links: d.links.clone(), seeds: seeds.clone() };
                prop_assert!(state.validate(4).is_ok());
                prop_assert!(d.params.validate().is_ok());
            }
        }
    }
}
