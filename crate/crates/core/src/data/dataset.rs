use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::expr::format_number;
use crate::ode::{ExogenousSignal, StateVector};

/// Column order of the dataset CSV files.
pub const HEADER: [&str; 8] = ["ks", "T", "t", "p1dot", "p2dot", "p3dot", "p4dot", "ra"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Row {
    /// Seconds.
    pub t: f64,
    /// Degrees Celsius.
    pub temp: f64,
    pub p1dot: f64,
    pub p2dot: f64,
    pub p3dot: f64,
    pub p4dot: f64,
    pub ra: f64,
}

impl Row {
    /// `[P1dot, P2dot, P3dot, RA]`, the simulated state.
    pub fn state(&self) -> StateVector {
        [self.p1dot, self.p2dot, self.p3dot, self.ra]
    }
}

/// One cooling trajectory at constant cooling rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Cooling rate in K/s.
    pub ks: f64,
    pub rows: Vec<Row>,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed CSV: {0}")]
    Csv(String),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("unexpected column `{0}`")]
    ExtraColumn(String),
    #[error("dataset has no data rows")]
    EmptyDataset,
    #[error("row {row}: expected {expected} fields, found {found}")]
    FieldCount {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    Parse {
        row: usize,
        column: &'static str,
        value: String,
    },
    #[error("row {row}, column `{column}`: value is not finite")]
    NonFinite { row: usize, column: &'static str },
    #[error("row {row}: time does not increase strictly")]
    NonMonotoneTime { row: usize },
    #[error("row {row}: ra = {value} is outside [0, 1]")]
    RaOutOfRange { row: usize, value: f64 },
    #[error("row {row}: cooling rate differs from the first row")]
    InconsistentKs { row: usize },
    #[error("row {row}: cooling rate must be positive")]
    NonPositiveKs { row: usize },
}

impl Dataset {
    /// Checks every invariant, reporting the first violation with its 0-based data row.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.rows.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        let mut previous_t = f64::NEG_INFINITY;
        for (row, r) in self.rows.iter().enumerate() {
            let values = [
                ("t", r.t),
                ("T", r.temp),
                ("p1dot", r.p1dot),
                ("p2dot", r.p2dot),
                ("p3dot", r.p3dot),
                ("p4dot", r.p4dot),
                ("ra", r.ra),
            ];
            for (column, v) in values {
                if !v.is_finite() {
                    return Err(DataError::NonFinite { row, column });
                }
            }
            if r.t <= previous_t {
                return Err(DataError::NonMonotoneTime { row });
            }
            previous_t = r.t;
            if !(0.0..=1.0).contains(&r.ra) {
                return Err(DataError::RaOutOfRange { row, value: r.ra });
            }
        }
        if !self.ks.is_finite() {
            return Err(DataError::NonFinite {
                row: 0,
                column: "ks",
            });
        }
        if self.ks <= 0.0 {
            return Err(DataError::NonPositiveKs { row: 0 });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn initial_state(&self) -> StateVector {
        self.rows[0].state()
    }

    pub fn signal(&self) -> ExogenousSignal {
        ExogenousSignal::new(
            self.rows.iter().map(|r| r.t).collect(),
            self.rows.iter().map(|r| r.temp).collect(),
            self.ks,
        )
        .expect("validated dataset has a strictly increasing grid")
    }

    /// Target series for state entry `index` (0..4: P1dot, P2dot, P3dot, RA).
    pub fn target(&self, index: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.state()[index]).collect()
    }

    /// Leading share of the rows, at least one.
    pub fn head_fraction(&self, fraction: f64) -> Dataset {
        let n = ((self.rows.len() as f64 * fraction).ceil() as usize).clamp(1, self.rows.len());
        Dataset {
            ks: self.ks,
            rows: self.rows[..n].to_vec(),
        }
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = HEADER.join(",");
        out.push('\n');
        let ks = format_number(self.ks);
        for r in &self.rows {
            let fields = [r.temp, r.t, r.p1dot, r.p2dot, r.p3dot, r.p4dot, r.ra];
            out.push_str(&ks);
            for v in fields {
                out.push(',');
                out.push_str(&format_number(v));
            }
            out.push('\n');
        }
        out
    }
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<(), DataError> {
    fs::write(path, dataset.to_csv_string()).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_dataset(&text)
}

/// Parses dataset CSV text. Columns may come in any order but must be exactly
/// the eight named in [`HEADER`].
pub fn parse_dataset(text: &str) -> Result<Dataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| DataError::Csv(e.to_string()))?
        .clone();
    let mut position = [usize::MAX; HEADER.len()];
    for (i, name) in header.iter().enumerate() {
        match HEADER.iter().position(|h| *h == name) {
            Some(k) if position[k] == usize::MAX => position[k] = i,
            _ => return Err(DataError::ExtraColumn(name.to_string())),
        }
    }
    if let Some(k) = position.iter().position(|&p| p == usize::MAX) {
        return Err(DataError::MissingColumn(HEADER[k].to_string()));
    }

    let mut ks = None;
    let mut rows = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DataError::Csv(e.to_string()))?;
        if record.len() != HEADER.len() {
            return Err(DataError::FieldCount {
                row,
                expected: HEADER.len(),
                found: record.len(),
            });
        }
        let mut v = [0.0; HEADER.len()];
        for (k, column) in HEADER.iter().enumerate() {
            let raw = &record[position[k]];
            let value: f64 = raw.parse().map_err(|_| DataError::Parse {
                row,
                column,
                value: raw.to_string(),
            })?;
            if !value.is_finite() {
                return Err(DataError::NonFinite { row, column });
            }
            v[k] = value;
        }
        match ks {
            None => {
                if v[0] <= 0.0 {
                    return Err(DataError::NonPositiveKs { row });
                }
                ks = Some(v[0]);
            }
            Some(k) if k != v[0] => return Err(DataError::InconsistentKs { row }),
            _ => {}
        }
        rows.push(Row {
            temp: v[1],
            t: v[2],
            p1dot: v[3],
            p2dot: v[4],
            p3dot: v[5],
            p4dot: v[6],
            ra: v[7],
        });
    }
    let dataset = Dataset {
        ks: ks.ok_or(DataError::EmptyDataset)?,
        rows,
    };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = "ks,T,t,p1dot,p2dot,p3dot,p4dot,ra\n\
        0.6,830,0,0,0,0,0,1\n\
        0.6,829.4,1,1e-3,2.5E-4,0,0,0.99\n\
        0.6,828.8,2,-1e-5,0,0,0,0.98\n";

    #[test]
    fn parses_valid_file() {
        let d = parse_dataset(GOOD).unwrap();
        assert_eq!(d.ks, 0.6);
        assert_eq!(d.len(), 3);
        assert_eq!(d.rows[1].p2dot, 2.5e-4);
        assert_eq!(d.initial_state(), [0.0, 0.0, 0.0, 1.0]);
        assert_eq!(d.target(3), vec![1.0, 0.99, 0.98]);
    }

    #[test]
    fn reordered_columns_are_accepted() {
        let text = "t,ks,T,ra,p4dot,p3dot,p2dot,p1dot\n0,2,800,1,0,0,0,0.5\n";
        let d = parse_dataset(text).unwrap();
        assert_eq!(d.ks, 2.0);
        assert_eq!(d.rows[0].temp, 800.0);
        assert_eq!(d.rows[0].p1dot, 0.5);
    }

    #[test]
    fn csv_text_round_trips() {
        let d = parse_dataset(GOOD).unwrap();
        assert_eq!(parse_dataset(&d.to_csv_string()).unwrap(), d);
    }

    #[test]
    fn repeated_time_is_rejected_with_row() {
        let text = GOOD.replace("828.8,2,", "828.8,1,");
        assert!(matches!(
            parse_dataset(&text),
            Err(DataError::NonMonotoneTime { row: 2 })
        ));
    }

    #[test]
    fn every_corruption_class_is_rejected() {
        type Check = fn(&DataError) -> bool;
        let cases: Vec<(String, Check)> = vec![
            (
                "ks,T,t,p1dot,p2dot,p3dot,p4dot\n0.6,1,0,0,0,0,0\n".into(),
                |e| matches!(e, DataError::MissingColumn(c) if c == "ra"),
            ),
            (
                GOOD.replace("ra\n", "ra,extra\n"),
                |e| matches!(e, DataError::ExtraColumn(c) if c == "extra"),
            ),
            ("ks,T,t,p1dot,p2dot,p3dot,p4dot,ra\n".into(), |e| {
                matches!(e, DataError::EmptyDataset)
            }),
            (GOOD.replace("0.6,829.4", "0.7,829.4"), |e| {
                matches!(e, DataError::InconsistentKs { row: 1 })
            }),
            (GOOD.replace("0.99", "1.5"), |e| {
                matches!(e, DataError::RaOutOfRange { row: 1, .. })
            }),
            (GOOD.replace("2.5E-4", "NaN"), |e| {
                matches!(
                    e,
                    DataError::NonFinite {
                        row: 1,
                        column: "p2dot"
                    }
                )
            }),
            (GOOD.replace("2.5E-4", "2,5E-4"), |e| {
                matches!(e, DataError::FieldCount { row: 1, .. })
            }),
            (GOOD.replace("2.5E-4", "abc"), |e| {
                matches!(
                    e,
                    DataError::Parse {
                        row: 1,
                        column: "p2dot",
                        ..
                    }
                )
            }),
            (GOOD.replace("0.6,", "-0.6,"), |e| {
                matches!(e, DataError::NonPositiveKs { row: 0 })
            }),
        ];
        for (text, check) in cases {
            let err = parse_dataset(&text).expect_err(&text);
            assert!(check(&err), "unexpected {err:?} for\n{text}");
        }
    }

    #[test]
    fn head_fraction_keeps_at_least_one_row() {
        let d = parse_dataset(GOOD).unwrap();
        assert_eq!(d.head_fraction(1.0).len(), 3);
        assert_eq!(d.head_fraction(0.5).len(), 2);
        assert_eq!(d.head_fraction(1e-9).len(), 1);
    }
}
