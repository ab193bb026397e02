//! Comparison vectors for every cross-file record pair.
//!
//! Each linking field is compared with either an exact-match comparator or a
//! normalized Levenshtein distance binned into ordered agreement levels.
//! Levels run `1..=L_f` with larger meaning more similar; level `0` marks a
//! missing value on either side.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Agreement level stored for a pair where either field value is missing.
pub const MISSING_LEVEL: u8 = 0;

/// Default cap on `n1 * n2 * F` comparison cells.
pub const DEFAULT_CELL_CAP: usize = 200_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    /// Linking field values; `None` is missing.
    pub fields: Vec<Option<String>>,
    /// Covariates (file 1 only, may be empty).
    pub covariates: Vec<f64>,
    /// Response (file 2 only).
    pub response: Option<f64>,
}

impl Record {
    pub fn new(fields: Vec<Option<String>>) -> Self {
        Record {
            fields,
            covariates: Vec::new(),
            response: None,
        }
    }
}

/// A duplicate-free file. Record ids are the positions `0..n`.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordFile {
    pub field_names: Vec<String>,
    pub records: Vec<Record>,
}

impl RecordFile {
    pub fn new(field_names: Vec<String>, records: Vec<Record>) -> Result<Self> {
        let file = RecordFile {
            field_names,
            records,
        };
        file.validate()?;
        Ok(file)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_fields(&self) -> usize {
        self.field_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.field_names.len();
        for (id, rec) in self.records.iter().enumerate() {
            if rec.fields.len() != f {
                return Err(Error::invalid(format!(
                    "record {id} has {} linking fields, expected {f}",
                    rec.fields.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    Exact,
    NormalizedLevenshtein,
}

/// How one linking field is compared and binned.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSpec {
    pub comparator: Comparator,
    /// Upper bin edges for distances in `(0, 1]`; empty for exact match.
    pub thresholds: Vec<f64>,
}

impl FieldSpec {
    pub fn exact() -> Self {
        FieldSpec {
            comparator: Comparator::Exact,
            thresholds: Vec::new(),
        }
    }

    pub fn levenshtein(thresholds: Vec<f64>) -> Result<Self> {
        let spec = FieldSpec {
            comparator: Comparator::NormalizedLevenshtein,
            thresholds,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Exact match at level 4, then `(0, .25]`, `(.25, .5]`, `(.5, 1]`.
    pub fn four_level_name() -> Self {
        FieldSpec {
            comparator: Comparator::NormalizedLevenshtein,
            thresholds: vec![0.25, 0.5, 1.0],
        }
    }

    /// Number of agreement levels `L_f`.
    pub fn levels(&self) -> u8 {
        match self.comparator {
            Comparator::Exact => 2,
            Comparator::NormalizedLevenshtein => self.thresholds.len() as u8 + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.comparator {
            Comparator::Exact => {
                if !self.thresholds.is_empty() {
                    return Err(Error::invalid("exact comparator takes no thresholds"));
                }
            }
            Comparator::NormalizedLevenshtein => {
                let t = &self.thresholds;
                if t.is_empty() {
                    return Err(Error::invalid("distance comparator needs thresholds"));
                }
                if t.len() > 250 {
                    return Err(Error::invalid("too many distance bins"));
                }
                if t.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
                    return Err(Error::invalid("thresholds must lie in (0, 1]"));
                }
                if t.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::invalid("thresholds must be strictly increasing"));
                }
                if *t.last().unwrap() != 1.0 {
                    return Err(Error::invalid("the last threshold must be 1"));
                }
            }
        }
        Ok(())
    }

    /// Level for two present values.
    pub fn level(&self, a: &str, b: &str) -> u8 {
        match self.comparator {
            Comparator::Exact => {
                if a == b {
                    2
                } else {
                    1
                }
            }
            Comparator::NormalizedLevenshtein => self.level_for_distance(normalized_levenshtein(a, b)),
        }
    }

    /// Bins a distance: 0 maps to the top level, `(0, t_1]` one below, etc.
    pub fn level_for_distance(&self, d: f64) -> u8 {
        let top = self.levels();
        if d <= 0.0 {
            return top;
        }
        let bin = self
            .thresholds
            .iter()
            .position(|&t| d <= t)
            .unwrap_or(self.thresholds.len() - 1);
        top - 1 - bin as u8
    }
}

/// Levenshtein edit distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance divided by the longer length; 0 when both are empty.
pub fn normalized_levenshtein(a: &str, b: &str) -> f64 {
    let len = a.chars().count().max(b.chars().count());
    if len == 0 {
        return 0.0;
    }
    levenshtein(a, b) as f64 / len as f64
}

/// Agreement vector for one pair; missing fields yield [`MISSING_LEVEL`].
pub fn compare_pair(a: &Record, b: &Record, specs: &[FieldSpec]) -> Result<Vec<u8>> {
    for rec in [a, b] {
        if rec.fields.len() != specs.len() {
            return Err(Error::FieldCount {
                expected: specs.len(),
                found: rec.fields.len(),
            });
        }
    }
    Ok(specs
        .iter()
        .zip(a.fields.iter().zip(&b.fields))
        .map(|(spec, pair)| match pair {
            (Some(x), Some(y)) => spec.level(x, y),
            _ => MISSING_LEVEL,
        })
        .collect())
}

/// Agreement levels for all `n1 x n2` pairs, stored pair-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonMatrix {
    n1: usize,
    n2: usize,
    levels: Vec<u8>,
    data: Vec<u8>,
}

impl ComparisonMatrix {
    /// Builds a matrix from raw data laid out as `((i * n2) + j) * F + f`.
    pub fn from_raw(n1: usize, n2: usize, levels: Vec<u8>, data: Vec<u8>) -> Result<Self> {
        let f = levels.len();
        if data.len() != n1 * n2 * f {
            return Err(Error::invalid("comparison data has the wrong length"));
        }
        if levels.iter().any(|&l| l < 2) {
            return Err(Error::invalid("every field needs at least two levels"));
        }
        for (idx, &v) in data.iter().enumerate() {
            if v > levels[idx % f] {
                return Err(Error::invalid(format!("level {v} out of range")));
            }
        }
        Ok(ComparisonMatrix {
            n1,
            n2,
            levels,
            data,
        })
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    pub fn n2(&self) -> usize {
        self.n2
    }

    pub fn num_fields(&self) -> usize {
        self.levels.len()
    }

    /// `L_f` for each field.
    pub fn levels(&self) -> &[u8] {
        &self.levels
    }

    pub fn pair(&self, i: usize, j: usize) -> &[u8] {
        let f = self.levels.len();
        let start = (i * self.n2 + j) * f;
        &self.data[start..start + f]
    }

    pub fn get(&self, i: usize, j: usize, f: usize) -> Option<u8> {
        match self.pair(i, j)[f] {
            MISSING_LEVEL => None,
            l => Some(l),
        }
    }
}

/// Compares every record of `f1` against every record of `f2`.
pub fn build_comparison_matrix(
    f1: &RecordFile,
    f2: &RecordFile,
    specs: &[FieldSpec],
    cell_cap: usize,
) -> Result<ComparisonMatrix> {
    f1.validate()?;
    f2.validate()?;
    for spec in specs {
        spec.validate()?;
    }
    for file in [f1, f2] {
        if file.num_fields() != specs.len() {
            return Err(Error::FieldCount {
                expected: specs.len(),
                found: file.num_fields(),
            });
        }
    }
    let (n1, n2, nf) = (f1.len(), f2.len(), specs.len());
    let cells = n1
        .checked_mul(n2)
        .and_then(|v| v.checked_mul(nf))
        .unwrap_or(usize::MAX);
    if cells > cell_cap {
        return Err(Error::TooLarge {
            cells,
            cap: cell_cap,
        });
    }
    let rows: Vec<Vec<u8>> = f1
        .records
        .par_iter()
        .map(|a| {
            let mut row = Vec::with_capacity(n2 * nf);
            for b in &f2.records {
                row.extend(compare_pair(a, b, specs).expect("field counts checked"));
            }
            row
        })
        .collect();
    Ok(ComparisonMatrix {
        n1,
        n2,
        levels: specs.iter().map(FieldSpec::levels).collect(),
        data: rows.concat(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(fields: &[&str]) -> Record {
        Record::new(fields.iter().map(|s| Some(s.to_string())).collect())
    }

    #[test]
    fn normalized_distance_examples() {
        assert_eq!(normalized_levenshtein("john", "john"), 0.0);
        assert_eq!(normalized_levenshtein("john", "jon"), 0.25);
        assert_eq!(normalized_levenshtein("abc", "xyz"), 1.0);
        assert_eq!(normalized_levenshtein("", ""), 0.0);
        assert_eq!(normalized_levenshtein("", "ab"), 1.0);
    }

    #[test]
    fn distance_counts_scalar_values_not_bytes() {
        assert_eq!(levenshtein("josé", "jose"), 1);
        assert_eq!(normalized_levenshtein("zoë", "zoe"), 1.0 / 3.0);
    }

    #[test]
    fn compare_pair_levels() {
        let specs = [FieldSpec::four_level_name(), FieldSpec::exact()];
        assert_eq!(compare_pair(&rec(&["john", "34"]), &rec(&["john", "34"]), &specs).unwrap(), vec![4, 2]);
        assert_eq!(compare_pair(&rec(&["john", "34"]), &rec(&["jon", "35"]), &specs).unwrap(), vec![3, 1]);
        assert_eq!(compare_pair(&rec(&["abc", "34"]), &rec(&["xyz", "34"]), &specs).unwrap(), vec![1, 2]);
        // 2 edits over 5 characters falls in (0.25, 0.5].
        assert_eq!(compare_pair(&rec(&["smith", "1"]), &rec(&["smyte", "1"]), &specs).unwrap(), vec![2, 2]);
    }

    #[test]
    fn compare_pair_missing_and_mismatch() {
        let specs = [FieldSpec::four_level_name(), FieldSpec::exact()];
        let a = Record::new(vec![None, Some("34".into())]);
        assert_eq!(compare_pair(&a, &rec(&["jo", "34"]), &specs).unwrap(), vec![MISSING_LEVEL, 2]);
        assert!(matches!(
            compare_pair(&rec(&["a"]), &rec(&["a", "b"]), &specs),
            Err(Error::FieldCount { .. })
        ));
    }

    #[test]
    fn field_spec_validation() {
        assert!(FieldSpec::levenshtein(vec![0.5, 0.25, 1.0]).is_err());
        assert!(FieldSpec::levenshtein(vec![0.0, 1.0]).is_err());
        assert!(FieldSpec::levenshtein(vec![0.5]).is_err());
        assert!(FieldSpec::levenshtein(vec![]).is_err());
        let s = FieldSpec::levenshtein(vec![0.5, 1.0]).unwrap();
        assert_eq!(s.levels(), 3);
        assert_eq!(FieldSpec::exact().levels(), 2);
    }

    #[test]
    fn matrix_single_pair_and_self_comparison() {
        let specs = vec![FieldSpec::four_level_name(), FieldSpec::exact()];
        let names = vec!["name".to_string(), "age".to_string()];
        let one = RecordFile::new(names.clone(), vec![rec(&["ann", "3"])]).unwrap();
        let other = RecordFile::new(names.clone(), vec![rec(&["anne", "3"])]).unwrap();
        let m = build_comparison_matrix(&one, &other, &specs, DEFAULT_CELL_CAP).unwrap();
        assert_eq!((m.n1(), m.n2(), m.num_fields()), (1, 1, 2));
        assert_eq!(m.pair(0, 0), &[3, 2]);

        let two = RecordFile::new(names, vec![rec(&["ann", "3"]), rec(&["bob", "50"])]).unwrap();
        let m = build_comparison_matrix(&two, &two, &specs, DEFAULT_CELL_CAP).unwrap();
        assert_eq!(m.pair(0, 0), &[4, 2]);
        assert_eq!(m.pair(1, 1), &[4, 2]);
    }

    #[test]
    fn matrix_matches_pairwise_recomputation() {
        let specs = vec![FieldSpec::four_level_name(), FieldSpec::exact()];
        let names = vec!["name".to_string(), "age".to_string()];
        let f1 = RecordFile::new(
            names.clone(),
            vec![rec(&["alice", "30"]), rec(&["carol", "41"]), rec(&["dave", "52"])],
        )
        .unwrap();
        let f2 = RecordFile::new(names, vec![rec(&["zed", "19"]), rec(&["carol", "41"])]).unwrap();
        let m = build_comparison_matrix(&f1, &f2, &specs, DEFAULT_CELL_CAP).unwrap();
        let mut all_top = 0;
        for i in 0..3 {
            for j in 0..2 {
                let direct = compare_pair(&f1.records[i], &f2.records[j], &specs).unwrap();
                assert_eq!(m.pair(i, j), direct.as_slice());
                if direct == vec![4, 2] {
                    all_top += 1;
                }
            }
        }
        assert_eq!(all_top, 1);
        assert_eq!(m.get(1, 1, 0), Some(4));
    }

    #[test]
    fn matrix_rejects_oversized_input() {
        let specs = vec![FieldSpec::exact()];
        let f = RecordFile::new(vec!["a".into()], vec![rec(&["x"]); 10]).unwrap();
        assert!(matches!(
            build_comparison_matrix(&f, &f, &specs, 99),
            Err(Error::TooLarge { cells: 100, cap: 99 })
        ));
    }

    proptest! {
        #[test]
        fn distance_symmetric_and_zero_iff_equal(a in "[a-dé]{0,8}", b in "[a-dé]{0,8}") {
            let d = normalized_levenshtein(&a, &b);
            prop_assert_eq!(d, normalized_levenshtein(&b, &a));
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert_eq!(d == 0.0, a == b);
        }

        #[test]
        fn level_weakly_decreasing_in_distance(d1 in 0.0f64..=1.0, d2 in 0.0f64..=1.0) {
            let spec = FieldSpec::four_level_name();
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            prop_assert!(spec.level_for_distance(lo) >= spec.level_for_distance(hi));
        }

        #[test]
        fn matrix_entries_ignore_record_order(
            names in proptest::collection::vec("[ab]{1,3}", 2..5),
            rot in 0usize..4,
        ) {
            let specs = vec![FieldSpec::four_level_name()];
            let recs: Vec<Record> = names.iter().map(|n| rec(&[n.as_str()])).collect();
            let f1 = RecordFile::new(vec!["n".into()], recs.clone()).unwrap();
            let mut shuffled = recs.clone();
            let k = rot % recs.len();
            shuffled.rotate_left(k);
            let f2 = RecordFile::new(vec!["n".into()], shuffled).unwrap();
            let a = build_comparison_matrix(&f1, &f1, &specs, DEFAULT_CELL_CAP).unwrap();
            let b = build_comparison_matrix(&f1, &f2, &specs, DEFAULT_CELL_CAP).unwrap();
            let n = recs.len();
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(a.pair(i, (j + k) % n), b.pair(i, j));
                }
            }
        }
    }
}
