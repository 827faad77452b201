//! CSV tables of positive-unlabeled data.
//!
//! A header row names the columns. `role` (`source` or `target`) marks the
//! sample of each row, an optional `y` column carries 0/1 labels for
//! validation files, and every other column is a numeric feature.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use pudetm_core::{Dataset, Matrix};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Source,
    Target,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Source => "source",
            Role::Target => "target",
        }
    }
}

/// A parsed CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub feature_names: Vec<String>,
    pub roles: Option<Vec<Role>>,
    pub features: Matrix,
    pub labels: Option<Vec<u8>>,
}

impl Table {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Splits the rows by role. Labels, if any, are ignored.
    pub fn to_dataset(&self) -> Result<Dataset> {
        let roles = self
            .roles
            .as_ref()
            .ok_or_else(|| Error::csv(1, "a `role` column is required for fitting"))?;
        let p = self.features.ncols();
        let (mut src, mut tgt) = (Vec::new(), Vec::new());
        for (row, role) in self.features.rows().zip(roles) {
            match role {
                Role::Source => src.extend_from_slice(row),
                Role::Target => tgt.extend_from_slice(row),
            }
        }
        let (n, m) = (src.len() / p.max(1), tgt.len() / p.max(1));
        Ok(Dataset::new(
            Matrix::from_vec(n, p, src)?,
            Matrix::from_vec(m, p, tgt)?,
        )?)
    }

    /// Rows with role `target`, or all rows when there is no role column.
    pub fn target_features(&self) -> Result<Matrix> {
        let Some(roles) = &self.roles else {
            return Ok(self.features.clone());
        };
        let p = self.features.ncols();
        let data: Vec<f64> = self
            .features
            .rows()
            .zip(roles)
            .filter(|(_, r)| **r == Role::Target)
            .flat_map(|(row, _)| row.iter().copied())
            .collect();
        Ok(Matrix::from_vec(data.len() / p.max(1), p, data)?)
    }
}

pub fn read_table_path(path: &Path) -> Result<Table> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_table(file)
}

pub fn read_table<R: Read>(reader: R) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::csv(1, e.to_string()))?
        .clone();
    let mut role_col = None;
    let mut y_col = None;
    let mut feature_cols = Vec::new();
    for (j, h) in headers.iter().enumerate() {
        match h {
            "role" if role_col.is_none() => role_col = Some(j),
            "y" if y_col.is_none() => y_col = Some(j),
            "role" | "y" => return Err(Error::csv(1, format!("duplicate `{h}` column"))),
            "" => return Err(Error::csv(1, format!("column {} has an empty name", j + 1))),
            _ => feature_cols.push(j),
        }
    }
    if feature_cols.is_empty() {
        return Err(Error::csv(1, "no feature columns"));
    }
    let p = feature_cols.len();
    let mut data = Vec::new();
    let mut roles = role_col.map(|_| Vec::new());
    let mut labels = y_col.map(|_| Vec::new());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::csv(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if let (Some(j), Some(out)) = (role_col, roles.as_mut()) {
            out.push(match &rec[j] {
                "source" => Role::Source,
                "target" => Role::Target,
                other => {
                    return Err(Error::csv(
                        line,
                        format!("role must be `source` or `target`, found `{other}`"),
                    ))
                }
            });
        }
        if let (Some(j), Some(out)) = (y_col, labels.as_mut()) {
            out.push(match &rec[j] {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(Error::csv(
                        line,
                        format!("y must be 0 or 1, found `{other}`"),
                    ))
                }
            });
        }
        for &j in &feature_cols {
            let v: f64 = rec[j].parse().map_err(|_| {
                Error::csv(
                    line,
                    format!("column `{}`: `{}` is not a number", &headers[j], &rec[j]),
                )
            })?;
            if !v.is_finite() {
                return Err(Error::csv(
                    line,
                    format!("column `{}` is not finite", &headers[j]),
                ));
            }
            data.push(v);
        }
    }
    let rows = data.len() / p;
    if rows == 0 {
        return Err(Error::csv(2, "no data rows"));
    }
    Ok(Table {
        feature_names: feature_cols
            .iter()
            .map(|&j| headers[j].to_string())
            .collect(),
        roles,
        features: Matrix::from_vec(rows, p, data)?,
        labels,
    })
}

/// Writes `ds` in the input format, optionally with target labels.
pub fn write_dataset<W: Write>(
    writer: W,
    ds: &Dataset,
    names: &[String],
    target_labels: Option<&[u8]>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["role".to_string()];
    if target_labels.is_some() {
        header.push("y".into());
    }
    header.extend(names.iter().cloned());
    w.write_record(&header).map_err(csv_write)?;
    for i in 0..ds.total() {
        let role = if ds.is_source(i) {
            Role::Source
        } else {
            Role::Target
        };
        let mut rec = vec![role.as_str().to_string()];
        if let Some(labels) = target_labels {
            rec.push(if ds.is_source(i) {
                "1".into()
            } else {
                labels[i - ds.n()].to_string()
            });
        }
        rec.extend(ds.row(i).iter().map(|v| format_float(*v)));
        w.write_record(&rec).map_err(csv_write)?;
    }
    w.flush().map_err(|e| Error::io("<output>", e))
}

fn csv_write(e: csv::Error) -> Error {
    Error::csv(0, e.to_string())
}

/// Shortest decimal form that parses back to the same `f64`.
pub fn format_float(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{v:?}")
    }
}

/// Default feature names `x0, x1, ...`.
pub fn default_names(p: usize) -> Vec<String> {
    (0..p).map(|j| format!("x{j}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "role,a,b\nsource,1.0,2\ntarget,0.5,-1\ntarget,3,4e-1\nsource,0,0\n";

    #[test]
    fn reads_roles_and_features() {
        let t = read_table(SAMPLE.as_bytes()).unwrap();
        assert_eq!(t.feature_names, ["a", "b"]);
        assert_eq!(t.len(), 4);
        let ds = t.to_dataset().unwrap();
        assert_eq!((ds.n(), ds.m(), ds.p()), (2, 2, 2));
        assert_eq!(ds.row(1), &[0.0, 0.0]);
        assert_eq!(ds.row(3), &[3.0, 0.4]);
    }

    #[test]
    fn column_order_does_not_matter() {
        let t = read_table("a,y,role\n1,1,target\n2,0,target\n".as_bytes()).unwrap();
        assert_eq!(t.labels.as_deref(), Some(&[1u8, 0][..]));
        assert_eq!(t.feature_names, ["a"]);
    }

    #[test]
    fn reports_line_numbers() {
        let err = read_table("role,a\nsource,1\ntarget,x\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Csv { line: 3, .. }), "{err}");
        let err = read_table("role,a\nsauce,1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Csv { line: 2, .. }), "{err}");
        assert!(read_table("role,a\nsource,1,2\n".as_bytes()).is_err());
        assert!(read_table("role,y\nsource,1\n".as_bytes()).is_err());
        assert!(read_table("role,a\n".as_bytes()).is_err());
        assert!(read_table("role,a\nsource,nan\n".as_bytes()).is_err());
    }

    #[test]
    fn fitting_needs_roles() {
        let t = read_table("a\n1\n2\n".as_bytes()).unwrap();
        assert!(t.to_dataset().is_err());
        assert_eq!(t.target_features().unwrap().nrows(), 2);
    }

    #[test]
    fn write_read_round_trip() {
        let t = read_table(SAMPLE.as_bytes()).unwrap();
        let ds = t.to_dataset().unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds, &t.feature_names, Some(&[1, 0])).unwrap();
        let back = read_table(buf.as_slice()).unwrap();
        assert_eq!(back.to_dataset().unwrap(), ds);
        assert_eq!(back.labels.unwrap(), [1, 1, 1, 0]);
    }

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 1e21, 123_456_789.123_456_79] {
            assert_eq!(format_float(v).parse::<f64>().unwrap(), v);
        }
    }

    proptest::proptest! {
        #[test]
        fn written_floats_read_back_exactly(bits in proptest::num::u64::ANY) {
            let v = f64::from_bits(bits);
            proptest::prop_assume!(v.is_finite());
            proptest::prop_assert_eq!(format_float(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }
}
