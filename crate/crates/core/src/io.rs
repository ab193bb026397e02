//! CSV input and output for record files and `(i, j)` pair tables.
//!
//! Record files use one header row. Columns named `x1`, `x2`, ... hold
//! covariates, a column named `y` holds the response, and every other column
//! is a linking field. Empty cells are missing values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::comparison::{Record, RecordFile};
use crate::error::{Error, Result};

fn covariate_index(name: &str) -> Option<usize> {
    let digits = name.strip_prefix('x')?;
    let k: usize = digits.parse().ok()?;
    (k >= 1 && digits == k.to_string()).then_some(k)
}

pub fn read_record_file(path: &Path) -> Result<RecordFile> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let header = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    let mut field_cols = Vec::new();
    let mut cov_cols: Vec<(usize, usize)> = Vec::new();
    let mut y_col = None;
    for (c, name) in header.iter().enumerate() {
        if name == "y" {
            y_col = Some(c);
        } else if let Some(k) = covariate_index(name) {
            cov_cols.push((k, c));
        } else {
            field_cols.push(c);
        }
    }
    cov_cols.sort_unstable();
    if cov_cols.iter().enumerate().any(|(n, &(k, _))| k != n + 1) {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            msg: "covariate columns must be x1, x2, ... without gaps".into(),
        });
    }
    let field_names = field_cols.iter().map(|&c| header[c].to_string()).collect();
    let mut records = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let line = row + 2;
        let number = |c: usize, what: &str| -> Result<Option<f64>> {
            let s = rec.get(c).unwrap_or("").trim();
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<f64>().map(Some).map_err(|_| Error::Parse {
                path: path.into(),
                line,
                msg: format!("{what} `{s}` is not a number"),
            })
        };
        let fields = field_cols
            .iter()
            .map(|&c| {
                let s = rec.get(c).unwrap_or("");
                (!s.is_empty()).then(|| s.to_string())
            })
            .collect();
        let mut covariates = Vec::with_capacity(cov_cols.len());
        for &(k, c) in &cov_cols {
            covariates.push(number(c, &format!("covariate x{k}"))?.ok_or_else(|| Error::Parse {
                path: path.into(),
                line,
                msg: format!("covariate x{k} is empty"),
            })?);
        }
        let response = match y_col {
            Some(c) => number(c, "response")?,
            None => None,
        };
        records.push(Record {
            fields,
            covariates,
            response,
        });
    }
    RecordFile::new(field_names, records)
}

pub fn write_record_file(path: &Path, file: &RecordFile) -> Result<()> {
    let p = file.records.iter().map(|r| r.covariates.len()).max().unwrap_or(0);
    let has_y = file.records.iter().any(|r| r.response.is_some());
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut header: Vec<String> = file.field_names.clone();
    header.extend((1..=p).map(|k| format!("x{k}")));
    if has_y {
        header.push("y".into());
    }
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for r in &file.records {
        let mut row: Vec<String> = r.fields.iter().map(|v| v.clone().unwrap_or_default()).collect();
        row.extend(r.covariates.iter().map(|v| v.to_string()));
        if has_y {
            row.push(r.response.map(|v| v.to_string()).unwrap_or_default());
        }
        w.write_record(&row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads an `i,j` table (file-1 index, file-2 index).
pub fn read_pairs(path: &Path) -> Result<Vec<(usize, usize)>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let header = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    let col = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            path: path.into(),
            line: 1,
            msg: format!("missing `{name}` column"),
        })
    };
    let (ci, cj) = (col("i")?, col("j")?);
    let mut out = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let parse = |c: usize| -> Result<usize> {
            let s = rec.get(c).unwrap_or("").trim();
            s.parse().map_err(|_| Error::Parse {
                path: path.into(),
                line: row + 2,
                msg: format!("`{s}` is not a record index"),
            })
        };
        out.push((parse(ci)?, parse(cj)?));
    }
    Ok(out)
}

pub fn write_pairs(path: &Path, pairs: &[(usize, usize)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["i", "j"]).map_err(|e| Error::csv(path, e))?;
    for (i, j) in pairs {
        w.write_record([i.to_string(), j.to_string()])
            .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Seed pairs as the `j -> i` map used by the sampler; rejects repeats.
pub fn seeds_from_pairs(pairs: &[(usize, usize)]) -> Result<BTreeMap<usize, usize>> {
    let mut map = BTreeMap::new();
    let mut used_i = std::collections::BTreeSet::new();
    for &(i, j) in pairs {
        if map.insert(j, i).is_some() || !used_i.insert(i) {
            return Err(Error::invalid(format!("seed pair ({i}, {j}) repeats a record")));
        }
    }
    Ok(map)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        let file = RecordFile::new(
            vec!["name".into(), "age".into()],
            vec![
                Record {
                    fields: vec![Some("ann".into()), None],
                    covariates: vec![0.5, -1.25],
                    response: Some(2.0),
                },
                Record {
                    fields: vec![Some("bo, jr".into()), Some("40".into())],
                    covariates: vec![1e-17, 3.0],
                    response: None,
                },
            ],
        )
        .unwrap();
        write_record_file(&path, &file).unwrap();
        assert_eq!(read_record_file(&path).unwrap(), file);
    }

    #[test]
    fn columns_are_classified_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        fs::write(&path, "x2,name,y,x1,x10b\n1,a,3,2,z\n").unwrap();
        let f = read_record_file(&path).unwrap();
        assert_eq!(f.field_names, vec!["name", "x10b"]);
        assert_eq!(f.records[0].covariates, vec![2.0, 1.0]);
        assert_eq!(f.records[0].response, Some(3.0));
    }

    #[test]
    fn bad_numbers_report_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        fs::write(&path, "name,x1\na,1\nb,oops\n").unwrap();
        match read_record_file(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        fs::write(&path, "name,x2\na,1\n").unwrap();
        assert!(read_record_file(&path).is_err());
    }

    #[test]
    fn pairs_round_trip_and_seed_checks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        write_pairs(&path, &[(3, 0), (1, 2)]).unwrap();
        let pairs = read_pairs(&path).unwrap();
        assert_eq!(pairs, vec![(3, 0), (1, 2)]);
        assert_eq!(seeds_from_pairs(&pairs).unwrap(), BTreeMap::from([(0, 3), (2, 1)]));
        assert!(seeds_from_pairs(&[(1, 0), (1, 2)]).is_err());
        assert!(seeds_from_pairs(&[(1, 0), (2, 0)]).is_err());
        assert!(read_record_file(&dir.path().join("missing.csv")).is_err());
    }
}
