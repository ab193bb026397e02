//! Synthetic file pairs with known links, controllable overlap, linking-field
//! errors, regression strength, seeds and covariate shift.
//!
//! Base entities carry a first name, last name, age and occupation drawn
//! from bundled frequency tables in which common values are more likely.
//! Overlapping entities appear in both files; the file-2 copy has exactly
//! `n_error` fields corrupted.

use std::collections::{BTreeMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::comparison::{normalized_levenshtein, FieldSpec, Record, RecordFile};
use crate::error::{Error, Result};

pub const FIELD_NAMES: [&str; 4] = ["first_name", "last_name", "age", "occupation"];

/// Ordered from most to least common.
const FIRST_NAMES: &[&str] = &[
    "james", "john", "robert", "michael", "william", "david", "richard", "joseph", "thomas", "charles", "mary",
    "patricia", "jennifer", "linda", "elizabeth", "barbara", "susan", "jessica", "sarah", "karen", "daniel",
    "matthew", "anthony", "mark", "donald", "steven", "paul", "andrew", "joshua", "kenneth", "nancy", "lisa",
    "betty", "margaret", "sandra", "ashley", "kimberly", "emily", "donna", "michelle", "kevin", "brian", "george",
    "timothy", "ronald", "edward", "jason", "jeffrey", "ryan", "jacob", "carol", "amanda", "melissa", "deborah",
    "stephanie", "rebecca", "sharon", "laura", "cynthia", "kathleen", "gary", "nicholas", "eric", "jonathan",
    "stephen", "larry", "justin", "scott", "brandon", "benjamin", "amy", "angela", "shirley", "anna", "brenda",
    "pamela", "emma", "nicole", "helen", "samantha", "samuel", "gregory", "frank", "alexander", "raymond",
    "patrick", "jack", "dennis", "jerry", "tyler", "katherine", "christine", "debra", "rachel", "carolyn",
    "janet", "catherine", "maria", "heather", "diane", "aaron", "jose", "adam", "henry", "nathan", "douglas",
    "zachary", "peter", "kyle", "walter", "ruth", "julie", "olivia", "joyce", "virginia", "victoria", "kelly",
    "lauren", "christina", "joan",
];

const LAST_NAMES: &[&str] = &[
    "smith", "jones", "williams", "brown", "wilson", "taylor", "johnson", "white", "martin", "anderson",
    "thompson", "nguyen", "thomas", "walker", "harris", "lee", "ryan", "robinson", "kelly", "king", "davis",
    "wright", "evans", "roberts", "green", "hall", "wood", "jackson", "clarke", "patel", "khan", "lewis", "james",
    "phillips", "mitchell", "turner", "campbell", "mcdonald", "hughes", "edwards", "murphy", "young", "stewart",
    "scott", "moore", "morris", "baker", "collins", "allen", "cooper", "watson", "hill", "murray", "bell",
    "clark", "ward", "walsh", "graham", "morgan", "kennedy", "parker", "miller", "cook", "ross", "bailey",
    "shaw", "richardson", "russell", "kaur", "singh", "davies", "lloyd", "mills", "marshall", "hunt", "price",
    "gray", "chapman", "ellis", "harrison", "butler", "reid", "fraser", "grant", "webb", "adams", "simpson",
    "hamilton", "hayes", "rogers", "wallace", "cox", "burke", "matthews", "gibson", "black", "holmes", "hunter",
    "palmer", "lane", "fisher", "wang", "chen", "zhang", "li", "liu", "tran", "le", "pham", "sullivan",
    "oconnor", "byrne", "doyle", "quinn", "brennan", "dunn", "burns", "gordon", "wells", "payne", "woods",
    "knight", "barnes", "mason", "austin", "jenkins", "stevens", "fletcher", "ferguson", "spencer", "perry",
    "pearce", "dixon", "lawrence", "carter", "howard", "henderson", "hart", "armstrong", "rose", "newman",
    "harvey", "cole", "sharp", "bennett", "wilkinson", "page", "francis", "carroll", "lynch", "west", "hudson",
    "fox", "day", "daly", "barker", "holland", "owen", "kane", "stone", "boyd", "tucker", "rowe", "mann",
    "mckenzie", "ali", "hussain", "ahmed", "brady", "watts", "long", "field", "little", "warren", "mcgrath",
    "higgins", "duncan", "jordan", "nolan", "ford", "pearson", "griffiths", "arnold", "dawson", "bishop",
    "curtis", "lowe", "hogan", "farrell", "flynn", "moran", "keane", "ryder", "doherty", "jensen", "larsen",
    "rossi", "russo", "romano", "costa", "silva",
];

const OCCUPATIONS: &[&str] = &[
    "teacher", "nurse", "clerk", "salesperson", "labourer", "carpenter", "electrician", "driver", "accountant",
    "cleaner", "mechanic", "manager", "farmer", "engineer", "cook", "plumber", "secretary", "receptionist",
    "storeperson", "chef", "lawyer", "doctor", "pharmacist", "painter", "builder", "baker", "butcher", "hairdresser",
    "librarian", "architect", "dentist", "pilot", "police", "firefighter", "scientist", "programmer", "designer",
    "journalist", "musician", "gardener",
];

/// Zipf-like weights `1 / rank^s`.
fn zipf_weights(n: usize, s: f64) -> Vec<f64> {
    (1..=n).map(|r| 1.0 / (r as f64).powf(s)).collect()
}

/// Cumulative sampler over a weighted list.
#[derive(Debug, Clone)]
struct Table {
    values: Vec<String>,
    cumulative: Vec<f64>,
}

impl Table {
    fn new(values: Vec<String>, weights: &[f64]) -> Self {
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        Table { values, cumulative }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &str {
        let u: f64 = rng.random();
        let k = self.cumulative.partition_point(|&c| c < u).min(self.values.len() - 1);
        &self.values[k]
    }
}

/// The bundled frequency tables.
#[derive(Debug, Clone)]
pub struct FrequencyTables {
    first: Table,
    last: Table,
    age: Table,
    occupation: Table,
}

impl Default for FrequencyTables {
    fn default() -> Self {
        FrequencyTables::zipf(0.5, 0.5, 0.5)
    }
}

impl FrequencyTables {
    /// Bundled values with Zipf weights of the given exponents for first
    /// names, last names and occupations.
    pub fn zipf(first: f64, last: f64, occupation: f64) -> Self {
        let owned = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        // Adult ages 18..=90, roughly flat to 60 then thinning out.
        let ages: Vec<String> = (18..=90).map(|a: u32| a.to_string()).collect();
        let age_w: Vec<f64> = (18..=90)
            .map(|a: u32| if a <= 60 { 1.0 } else { (1.0 - (a - 60) as f64 / 35.0).max(0.1) })
            .collect();
        FrequencyTables {
            first: Table::new(owned(FIRST_NAMES), &zipf_weights(FIRST_NAMES.len(), first)),
            last: Table::new(owned(LAST_NAMES), &zipf_weights(LAST_NAMES.len(), last)),
            age: Table::new(ages, &age_w),
            occupation: Table::new(owned(OCCUPATIONS), &zipf_weights(OCCUPATIONS.len(), occupation)),
        }
    }
}

impl FrequencyTables {
    fn entity<R: Rng + ?Sized>(&self, rng: &mut R) -> [String; 4] {
        [
            self.first.sample(rng).to_string(),
            self.last.sample(rng).to_string(),
            self.age.sample(rng).to_string(),
            self.occupation.sample(rng).to_string(),
        ]
    }
}

/// Character pairs confused by optical character recognition.
const OCR_CONFUSIONS: &[(&str, &str)] = &[
    ("0", "o"),
    ("1", "l"),
    ("m", "rn"),
    ("rn", "m"),
    ("l", "1"),
    ("o", "0"),
    ("cl", "d"),
    ("d", "cl"),
    ("vv", "w"),
    ("w", "vv"),
    ("e", "c"),
    ("c", "e"),
    ("i", "l"),
    ("h", "b"),
    ("b", "h"),
    ("s", "5"),
    ("g", "q"),
    ("u", "v"),
];

const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

fn random_letter<R: Rng + ?Sized>(rng: &mut R) -> char {
    ALPHABET[rng.random_range(0..ALPHABET.len())] as char
}

/// One random edit: substitution, deletion, insertion, adjacent
/// transposition or an OCR-style confusion. The result always differs from
/// the input.
pub fn corrupt_field<R: Rng + ?Sized>(value: &str, rng: &mut R) -> String {
    loop {
        let out = corrupt_once(value, rng);
        if out != value {
            return out;
        }
    }
}

fn corrupt_once<R: Rng + ?Sized>(value: &str, rng: &mut R) -> String {
    let mut chars: Vec<char> = value.chars().collect();
    if chars.is_empty() {
        return random_letter(rng).to_string();
    }
    let n = chars.len();
    match rng.random_range(0..5) {
        0 => {
            let k = rng.random_range(0..n);
            chars[k] = random_letter(rng);
        }
        1 if n > 1 => {
            chars.remove(rng.random_range(0..n));
        }
        1 => chars[0] = random_letter(rng),
        2 => chars.insert(rng.random_range(0..=n), random_letter(rng)),
        3 if n > 1 => {
            let k = rng.random_range(0..n - 1);
            chars.swap(k, k + 1);
        }
        3 => chars[0] = random_letter(rng),
        _ => {
            let applicable: Vec<&(&str, &str)> = OCR_CONFUSIONS.iter().filter(|(a, _)| value.contains(a)).collect();
            if let Some((from, to)) = applicable.choose(rng) {
                let hits: Vec<usize> = value.match_indices(from).map(|(k, _)| k).collect();
                let at = hits[rng.random_range(0..hits.len())];
                return format!("{}{}{}", &value[..at], to, &value[at + from.len()..]);
            }
            let k = rng.random_range(0..n);
            chars[k] = random_letter(rng);
        }
    }
    chars.into_iter().collect()
}

/// Age perturbed by a uniform nonzero shift of 1 to 3 years.
fn corrupt_age<R: Rng + ?Sized>(age: &str, rng: &mut R) -> String {
    let a: i64 = age.parse().unwrap_or(40);
    let shift = rng.random_range(1..=3) * if rng.random_bool(0.5) { 1 } else { -1 };
    let mut v = a + shift;
    if v < 0 {
        v = a + shift.abs();
    }
    v.to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateSpec {
    /// One covariate `x ~ N(0, 1)`.
    StandardNormal,
    /// `x1 ~ N(0, 1)` and `x2 ~ Bernoulli(p)`.
    NormalBernoulli { p: f64 },
    /// `x ~ N(0, 1)` for entities in both files and `N(r, 1)` for the rest.
    Shifted { r: f64 },
}

impl CovariateSpec {
    pub fn num_covariates(&self) -> usize {
        match self {
            CovariateSpec::NormalBernoulli { .. } => 2,
            _ => 1,
        }
    }

    /// Variance of `x'beta` under the linked-entity covariate law.
    pub fn linear_predictor_variance(&self, slopes: &[f64]) -> f64 {
        match self {
            CovariateSpec::NormalBernoulli { p } => slopes[0].powi(2) + slopes[1].powi(2) * p * (1.0 - p),
            _ => slopes[0].powi(2),
        }
    }

    fn draw<R: Rng + ?Sized>(&self, linked: bool, rng: &mut R) -> Vec<f64> {
        let z: f64 = StandardNormal.sample(rng);
        match *self {
            CovariateSpec::StandardNormal => vec![z],
            CovariateSpec::NormalBernoulli { p } => vec![z, f64::from(u8::from(rng.random_bool(p)))],
            CovariateSpec::Shifted { r } => vec![if linked { z } else { z + r }],
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            CovariateSpec::NormalBernoulli { p } if !(p > 0.0 && p < 1.0) => {
                Err(Error::invalid("Bernoulli probability must lie in (0, 1)"))
            }
            CovariateSpec::Shifted { r } if !r.is_finite() => Err(Error::invalid("shift must be finite")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum NoiseSpec {
    /// Target coefficient of determination.
    R2(f64),
    /// Explicit error variance.
    Sigma2(f64),
}

/// `sigma2 = Var(x'beta) (1 - R2) / R2`.
pub fn sigma_for_r2(slopes: &[f64], covariates: &CovariateSpec, r2: f64) -> Result<f64> {
    if !(r2 > 0.0 && r2 < 1.0) {
        return Err(Error::invalid(format!("target R2 {r2} is outside (0, 1)")));
    }
    if slopes.len() != covariates.num_covariates() {
        return Err(Error::invalid("slope count does not match the covariate spec"));
    }
    let v = covariates.linear_predictor_variance(slopes);
    if !(v > 0.0) {
        return Err(Error::invalid("the linear predictor has zero variance, so no R2 is attainable"));
    }
    Ok(v * (1.0 - r2) / r2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n1: usize,
    pub n2: usize,
    /// Fraction of file 2 with a true link in file 1.
    pub overlap: f64,
    /// Corrupted fields per overlapping file-2 record.
    pub n_error: usize,
    /// Intercept followed by slopes.
    pub beta: Vec<f64>,
    pub noise: NoiseSpec,
    pub covariates: CovariateSpec,
    /// Fraction of file 2 designated as seeds, drawn among true links.
    pub seed_fraction: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            n1: 500,
            n2: 500,
            overlap: 0.5,
            n_error: 1,
            beta: vec![3.0, 3.0],
            noise: NoiseSpec::R2(0.9),
            covariates: CovariateSpec::StandardNormal,
            seed_fraction: 0.0,
            seed: 1,
        }
    }
}

impl ScenarioConfig {
    pub fn n12(&self) -> usize {
        (self.overlap * self.n2 as f64).round() as usize
    }

    pub fn n_seeds(&self) -> usize {
        (self.seed_fraction * self.n2 as f64).round() as usize
    }

    pub fn sigma2(&self) -> Result<f64> {
        match self.noise {
            NoiseSpec::R2(r2) => sigma_for_r2(&self.beta[1..], &self.covariates, r2),
            NoiseSpec::Sigma2(s) if s > 0.0 && s.is_finite() => Ok(s),
            NoiseSpec::Sigma2(_) => Err(Error::invalid("error variance must be positive")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n1 == 0 || self.n2 == 0 {
            return Err(Error::invalid("both files need records"));
        }
        if !(self.overlap > 0.0 && self.overlap <= 1.0) {
            return Err(Error::invalid("overlap must lie in (0, 1]"));
        }
        if self.n12() > self.n1.min(self.n2) {
            return Err(Error::invalid("overlap exceeds the smaller file"));
        }
        if self.n_error > FIELD_NAMES.len() {
            return Err(Error::invalid(format!("n_error cannot exceed {} fields", FIELD_NAMES.len())));
        }
        if self.beta.len() != self.covariates.num_covariates() + 1 {
            return Err(Error::invalid("beta needs an intercept plus one slope per covariate"));
        }
        if !(0.0..=1.0).contains(&self.seed_fraction) || self.n_seeds() > self.n12() {
            return Err(Error::invalid("seed fraction must select at most the true links"));
        }
        self.covariates.validate()?;
        self.sigma2()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    pub i: usize,
    pub j: usize,
    pub fields: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// True links `(i, j)`, sorted by `j`.
    pub links: Vec<(usize, usize)>,
    pub corruptions: Vec<Corruption>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub file1: RecordFile,
    pub file2: RecordFile,
    pub truth: GroundTruth,
    /// Seeds as `j -> i`.
    pub seeds: BTreeMap<usize, usize>,
    pub sigma2: f64,
}

impl Scenario {
    /// Writes `file1.csv`, `file2.csv`, `truth.csv` and, when there are
    /// seeds, `seeds.csv`; returns the written file names.
    pub fn write(&self, dir: &std::path::Path) -> Result<Vec<String>> {
        crate::io::ensure_dir(dir)?;
        crate::io::write_record_file(&dir.join("file1.csv"), &self.file1)?;
        crate::io::write_record_file(&dir.join("file2.csv"), &self.file2)?;
        crate::io::write_pairs(&dir.join("truth.csv"), &self.truth.links)?;
        let mut names = vec!["file1.csv".to_string(), "file2.csv".into(), "truth.csv".into()];
        if !self.seeds.is_empty() {
            let pairs: Vec<(usize, usize)> = self.seeds.iter().map(|(&j, &i)| (i, j)).collect();
            crate::io::write_pairs(&dir.join("seeds.csv"), &pairs)?;
            names.push("seeds.csv".into());
        }
        Ok(names)
    }
}

/// Comparators used for the generated fields: binned name distances and
/// exact age and occupation.
pub fn default_field_specs() -> Vec<FieldSpec> {
    vec![
        FieldSpec::four_level_name(),
        FieldSpec::four_level_name(),
        FieldSpec::exact(),
        FieldSpec::exact(),
    ]
}

/// Independent child seed number `stream` of `base`: the first output of
/// ChaCha stream `stream` keyed by `base`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    rng.next_u64()
}

pub fn generate_scenario(cfg: &ScenarioConfig, tables: &FrequencyTables) -> Result<Scenario> {
    cfg.validate()?;
    let sigma2 = cfg.sigma2()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n12 = cfg.n12();
    let total = cfg.n1 + cfg.n2 - n12;

    let mut seen = HashSet::new();
    let mut entities = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while entities.len() < total {
        attempts += 1;
        if attempts > 50 * total + 1000 {
            return Err(Error::invalid(format!(
                "frequency tables cannot supply {total} distinct entities"
            )));
        }
        let e = tables.entity(&mut rng);
        if seen.insert(e.clone()) {
            entities.push(e);
        }
    }

    let mut pos1: Vec<usize> = (0..cfg.n1).collect();
    let mut pos2: Vec<usize> = (0..cfg.n2).collect();
    pos1.shuffle(&mut rng);
    pos2.shuffle(&mut rng);

    let noise = Normal::new(0.0, sigma2.sqrt()).expect("positive variance");
    let respond = |x: &[f64], rng: &mut ChaCha8Rng| {
        cfg.beta[0] + x.iter().zip(&cfg.beta[1..]).map(|(a, b)| a * b).sum::<f64>() + noise.sample(rng)
    };

    let mut rec1: Vec<Option<Record>> = vec![None; cfg.n1];
    let mut rec2: Vec<Option<Record>> = vec![None; cfg.n2];
    let mut links = Vec::with_capacity(n12);
    let mut corruptions = Vec::with_capacity(n12);
    let as_fields = |e: &[String; 4]| e.iter().map(|v| Some(v.clone())).collect::<Vec<_>>();

    for (k, e) in entities.iter().enumerate() {
        if k < n12 {
            let (i, j) = (pos1[k], pos2[k]);
            let x = cfg.covariates.draw(true, &mut rng);
            let y = respond(&x, &mut rng);
            let mut which: Vec<usize> = (0..FIELD_NAMES.len()).collect();
            which.shuffle(&mut rng);
            let mut chosen = which[..cfg.n_error].to_vec();
            chosen.sort_unstable();
            let mut copy = e.clone();
            for &f in &chosen {
                copy[f] = if f == 2 {
                    corrupt_age(&e[f], &mut rng)
                } else {
                    corrupt_field(&e[f], &mut rng)
                };
            }
            rec1[i] = Some(Record {
                fields: as_fields(e),
                covariates: x,
                response: None,
            });
            rec2[j] = Some(Record {
                fields: as_fields(&copy),
                covariates: Vec::new(),
                response: Some(y),
            });
            links.push((i, j));
            corruptions.push(Corruption { i, j, fields: chosen });
        } else if k < cfg.n1 {
            let x = cfg.covariates.draw(false, &mut rng);
            rec1[pos1[k]] = Some(Record {
                fields: as_fields(e),
                covariates: x,
                response: None,
            });
        } else {
            let j = pos2[k - cfg.n1 + n12];
            let x = cfg.covariates.draw(false, &mut rng);
            let y = respond(&x, &mut rng);
            rec2[j] = Some(Record {
                fields: as_fields(e),
                covariates: Vec::new(),
                response: Some(y),
            });
        }
    }

    let mut by_j: Vec<usize> = (0..links.len()).collect();
    by_j.sort_by_key(|&k| links[k].1);
    let links: Vec<(usize, usize)> = by_j.iter().map(|&k| links[k]).collect();
    let corruptions = by_j.iter().map(|&k| corruptions[k].clone()).collect();

    let mut seed_pairs = links.clone();
    seed_pairs.shuffle(&mut rng);
    let seeds = seed_pairs[..cfg.n_seeds()].iter().map(|&(i, j)| (j, i)).collect();

    let names: Vec<String> = FIELD_NAMES.iter().map(|s| s.to_string()).collect();
    let file1 = RecordFile::new(names.clone(), rec1.into_iter().map(|r| r.expect("filled")).collect())?;
    let file2 = RecordFile::new(names, rec2.into_iter().map(|r| r.expect("filled")).collect())?;
    Ok(Scenario {
        file1,
        file2,
        truth: GroundTruth { links, corruptions },
        seeds,
        sigma2,
    })
}

/// Normalized edit distance between a value and its corruption.
pub fn corruption_distance(original: &str, corrupted: &str) -> f64 {
    normalized_levenshtein(original, corrupted)
}
