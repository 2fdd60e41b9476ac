//! Observed samples and the columnar dataset container, with CSV I/O.
//!
//! The on-disk layout is fixed: `y,delta,d,x1,...,xp[,tau_true]`, LF line
//! endings, reals written with 17 significant digits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observed unit: outcome, event indicator, treatment and covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedSample {
    pub y: f64,
    pub delta: u8,
    pub d: u8,
    pub x: Vec<f64>,
}

/// Columnar container for `n` observed samples over `p` covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<f64>,
    delta: Vec<u8>,
    d: Vec<u8>,
    x: Array2<f64>,
    truth: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(y: Vec<f64>, delta: Vec<u8>, d: Vec<u8>, x: Array2<f64>, truth: Option<Vec<f64>>) -> Result<Self> {
        let n = x.nrows();
        if n == 0 || x.ncols() == 0 {
            return Err(Error::Domain("dataset needs n >= 1 and p >= 1".into()));
        }
        for (name, len) in [("y", y.len()), ("delta", delta.len()), ("d", d.len())] {
            if len != n {
                return Err(Error::shape(name, n, len));
            }
        }
        if let Some(t) = &truth {
            if t.len() != n {
                return Err(Error::shape("truth", n, t.len()));
            }
        }
        for i in 0..n {
            if delta[i] > 1 {
                return Err(Error::Domain(format!("delta[{i}] = {} not in {{0,1}}", delta[i])));
            }
            if d[i] > 1 {
                return Err(Error::Domain(format!("d[{i}] = {} not in {{0,1}}", d[i])));
            }
            if !y[i].is_finite() {
                return Err(Error::Domain(format!("y[{i}] is not finite")));
            }
        }
        if let Some((idx, _)) = x.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Domain(format!("x[{}, {}] is not finite", idx.0, idx.1)));
        }
        Ok(Self { y, delta, d, x, truth })
    }

    pub fn from_samples(samples: &[ObservedSample], truth: Option<Vec<f64>>) -> Result<Self> {
        let n = samples.len();
        if n == 0 {
            return Err(Error::Domain("no samples".into()));
        }
        let p = samples[0].x.len();
        let mut x = Array2::zeros((n, p));
        for (i, s) in samples.iter().enumerate() {
            if s.x.len() != p {
                return Err(Error::shape(&format!("sample {i} covariates"), p, s.x.len()));
            }
            x.row_mut(i).assign(&ArrayView1::from(&s.x));
        }
        Self::new(
            samples.iter().map(|s| s.y).collect(),
            samples.iter().map(|s| s.delta).collect(),
            samples.iter().map(|s| s.d).collect(),
            x,
            truth,
        )
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn delta(&self) -> &[u8] {
        &self.delta
    }

    pub fn d(&self) -> &[u8] {
        &self.d
    }

    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn truth(&self) -> Option<&[f64]> {
        self.truth.as_deref()
    }

    pub fn sample(&self, i: usize) -> ObservedSample {
        ObservedSample {
            y: self.y[i],
            delta: self.delta[i],
            d: self.d[i],
            x: self.x.row(i).to_vec(),
        }
    }

    pub fn samples(&self) -> impl Iterator<Item = ObservedSample> + '_ {
        (0..self.n()).map(|i| self.sample(i))
    }

    pub fn with_truth(mut self, truth: Option<Vec<f64>>) -> Result<Self> {
        if let Some(t) = &truth {
            if t.len() != self.n() {
                return Err(Error::shape("truth", self.n(), t.len()));
            }
        }
        self.truth = truth;
        Ok(self)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("y,delta,d");
        for j in 1..=self.p() {
            write!(out, ",x{j}").unwrap();
        }
        if self.truth.is_some() {
            out.push_str(",tau_true");
        }
        out.push('\n');
        for i in 0..self.n() {
            write!(out, "{},{},{}", fmt_real(self.y[i]), self.delta[i], self.d[i]).unwrap();
            for v in self.x.row(i) {
                write!(out, ",{}", fmt_real(*v)).unwrap();
            }
            if let Some(t) = &self.truth {
                write!(out, ",{}", fmt_real(t[i])).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format {
            column: "<header>".into(),
            message: "empty file".into(),
        })?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let has_truth = cols.last() == Some(&"tau_true");
        let n_cov = cols.len().saturating_sub(3 + usize::from(has_truth));
        for (k, expected) in ["y", "delta", "d"].iter().enumerate() {
            match cols.get(k) {
                Some(c) if c == expected => {}
                Some(c) => {
                    return Err(Error::Format {
                        column: (*c).to_string(),
                        message: format!("expected `{expected}` at position {}", k + 1),
                    })
                }
                None => {
                    return Err(Error::Format {
                        column: (*expected).to_string(),
                        message: "missing column".into(),
                    })
                }
            }
        }
        if n_cov == 0 {
            return Err(Error::Format {
                column: "x1".into(),
                message: "no covariate columns".into(),
            });
        }
        for j in 0..n_cov {
            let expected = format!("x{}", j + 1);
            if cols[3 + j] != expected {
                return Err(Error::Format {
                    column: cols[3 + j].to_string(),
                    message: format!("expected `{expected}`"),
                });
            }
        }

        let width = cols.len();
        let mut y = Vec::new();
        let mut delta = Vec::new();
        let mut d = Vec::new();
        let mut xs = Vec::new();
        let mut truth = Vec::new();
        for (r, line) in lines.enumerate() {
            let row = r + 1;
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != width {
                return Err(Error::Parse {
                    row,
                    message: format!("expected {width} fields, found {}", cells.len()),
                });
            }
            let mut vals = Vec::with_capacity(width);
            for (c, cell) in cells.iter().enumerate() {
                let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                    row,
                    message: format!("column `{}`: cannot parse `{cell}`", cols[c]),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        row,
                        message: format!("column `{}`: non-finite value", cols[c]),
                    });
                }
                vals.push(v);
            }
            y.push(vals[0]);
            delta.push(binary(vals[1], "delta", row)?);
            d.push(binary(vals[2], "d", row)?);
            xs.extend_from_slice(&vals[3..3 + n_cov]);
            if has_truth {
                truth.push(vals[width - 1]);
            }
        }
        let n = y.len();
        if n == 0 {
            return Err(Error::Parse {
                row: 0,
                message: "no data rows".into(),
            });
        }
        let x = Array2::from_shape_vec((n, n_cov), xs).expect("row-major buffer sized n*p");
        Self::new(y, delta, d, x, has_truth.then_some(truth))
    }
}

fn binary(v: f64, column: &str, row: usize) -> Result<u8> {
    if v == 0.0 {
        Ok(0)
    } else if v == 1.0 {
        Ok(1)
    } else {
        Err(Error::Domain(format!("row {row}: {column} = {v} not in {{0,1}}")))
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::from_csv_str(&fs::read_to_string(path)?)
}

pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, ds.to_csv_string())?;
    Ok(())
}

/// Reads a headed numeric matrix (e.g. latent codes) from CSV.
pub fn load_matrix_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, Array2<f64>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Format {
            column: "<header>".into(),
            message: "empty file".into(),
        })?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let mut buf = Vec::new();
    let mut rows = 0;
    for (r, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(Error::Parse {
                row: r + 1,
                message: format!("expected {} fields, found {}", header.len(), cells.len()),
            });
        }
        for cell in cells {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row: r + 1,
                message: format!("cannot parse `{cell}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: r + 1,
                    message: "non-finite value".into(),
                });
            }
            buf.push(v);
        }
        rows += 1;
    }
    let m = Array2::from_shape_vec((rows, header.len()), buf).expect("sized rows*cols");
    Ok((header, m))
}

pub fn matrix_to_csv(header: &[String], m: &Array2<f64>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| fmt_real(*v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny() -> Dataset {
        Dataset::new(
            vec![1.5, -0.25, 3.0],
            vec![1, 0, 1],
            vec![0, 1, 1],
            array![[0.1, 0.2], [1.0, -1.0], [2.5, 0.0]],
            None,
        )
        .unwrap()
    }

    #[test]
    fn parses_minimal_file() {
        let text = "y,delta,d,x1,x2\n1,1,0,0.5,0.25\n2,0,1,1,2\n3,1,1,-1,0\n";
        let ds = Dataset::from_csv_str(text).unwrap();
        assert_eq!((ds.n(), ds.p()), (3, 2));
        assert!(ds.truth().is_none());
    }

    #[test]
    fn ragged_row_reports_row_index() {
        let text = "y,delta,d,x1,x2\n1,1,0,0.5,0.25\n2,0,1,1\n";
        match Dataset::from_csv_str(text) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truth_column_is_read() {
        let text = "y,delta,d,x1,tau_true\n1,1,0,0.5,2.0\n2,0,1,1,2.0\n3,1,1,-1,2.0\n";
        let ds = Dataset::from_csv_str(text).unwrap();
        assert_eq!(ds.truth().unwrap(), &[2.0, 2.0, 2.0]);
        assert_eq!(ds.p(), 1);
    }

    #[test]
    fn bad_header_names_column() {
        let text = "y,delta,d,x1,z2\n1,1,0,0.5,0.25\n";
        match Dataset::from_csv_str(text) {
            Err(Error::Format { column, .. }) => assert_eq!(column, "z2"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_binary_treatment_is_domain_error() {
        let text = "y,delta,d,x1\n1,1,2,0.5\n";
        assert!(matches!(Dataset::from_csv_str(text), Err(Error::Domain(_))));
    }

    #[test]
    fn non_finite_cell_is_parse_error() {
        let text = "y,delta,d,x1\n1,1,0,NaN\n";
        assert!(matches!(Dataset::from_csv_str(text), Err(Error::Parse { row: 1, .. })));
    }

    #[test]
    fn single_row_writes_two_lines() {
        let ds = Dataset::new(vec![1.0], vec![1], vec![0], array![[0.3]], None).unwrap();
        assert_eq!(ds.to_csv_string().lines().count(), 2);
    }

    #[test]
    fn truth_header_suffix() {
        let ds = tiny().with_truth(Some(vec![1.0, 2.0, 3.0])).unwrap();
        let text = ds.to_csv_string();
        assert!(text.lines().next().unwrap().ends_with(",tau_true"));
    }

    #[test]
    fn round_trip_through_file() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        save_csv(&ds, &path).unwrap();
        assert_eq!(load_csv(&path).unwrap(), ds);
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let ds = tiny();
        let err = save_csv(&ds, "/nonexistent-dir/x/y.csv").unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }
}
