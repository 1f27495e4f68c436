//! CSV cohorts: loading with a missing-value policy, exporting with exact
//! float round-trip, and optional z-scoring of continuous features.
//!
//! Dialect: comma-separated, header row required, UTF-8, `.` decimal point.

use std::collections::HashSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{FedError, Result};
use crate::model::Dataset;

/// Which columns to read and how to treat them.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortSchema {
    pub outcome_column: String,
    pub feature_columns: Vec<String>,
    /// Features that must hold 0 or 1; never standardised.
    pub binary_columns: Vec<String>,
    pub standardize: bool,
}

impl CohortSchema {
    pub fn new(outcome: impl Into<String>, features: &[&str]) -> Self {
        Self {
            outcome_column: outcome.into(),
            feature_columns: features.iter().map(|s| s.to_string()).collect(),
            binary_columns: Vec::new(),
            standardize: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_columns.is_empty() {
            return Err(FedError::InvalidConfig("schema has no feature columns".into()));
        }
        if self.feature_columns.contains(&self.outcome_column) {
            return Err(FedError::InvalidConfig(format!(
                "outcome column '{}' is also listed as a feature",
                self.outcome_column
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.feature_columns.iter().find(|c| !seen.insert(*c)) {
            return Err(FedError::InvalidConfig(format!(
                "feature column '{dup}' listed twice"
            )));
        }
        if let Some(b) = self
            .binary_columns
            .iter()
            .find(|b| !self.feature_columns.contains(b))
        {
            return Err(FedError::InvalidConfig(format!(
                "binary column '{b}' is not a feature column"
            )));
        }
        Ok(())
    }

    /// Per feature column, whether it is declared binary.
    pub fn binary_mask(&self) -> Vec<bool> {
        self.feature_columns
            .iter()
            .map(|c| self.binary_columns.contains(c))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LoadMode {
    /// Any incomplete row is an error.
    Strict,
    /// Incomplete rows are dropped and counted.
    #[default]
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadReport {
    pub raw_rows: usize,
    pub kept_rows: usize,
    /// File line numbers (header is line 1) of dropped rows.
    pub dropped_lines: Vec<u64>,
}

impl LoadReport {
    pub fn dropped(&self) -> usize {
        self.dropped_lines.len()
    }
}

impl std::fmt::Display for LoadReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "kept: {}, dropped: {}", self.kept_rows, self.dropped())
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CohortSchema, mode: LoadMode) -> Result<(Dataset, LoadReport)> {
    read_csv(File::open(path)?, schema, mode)
}

/// Parses a cell; `None` for blank, non-numeric or non-finite content.
fn parse_cell(raw: &str) -> Option<f64> {
    let t = raw.trim();
    if t.is_empty() {
        return None;
    }
    t.parse::<f64>().ok().filter(|v| v.is_finite())
}

pub fn read_csv<R: Read>(input: R, schema: &CohortSchema, mode: LoadMode) -> Result<(Dataset, LoadReport)> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = reader.headers()?.clone();
    let locate = |name: &str| headers.iter().position(|h| h.trim() == name);

    let mut missing = Vec::new();
    let outcome_idx = locate(&schema.outcome_column);
    if outcome_idx.is_none() {
        missing.push(schema.outcome_column.clone());
    }
    let feature_idx: Vec<Option<usize>> =
        schema.feature_columns.iter().map(|c| locate(c)).collect();
    for (c, i) in schema.feature_columns.iter().zip(&feature_idx) {
        if i.is_none() {
            missing.push(c.clone());
        }
    }
    if !missing.is_empty() {
        return Err(FedError::InvalidData(format!(
            "missing columns: {}",
            missing.join(", ")
        )));
    }
    let outcome_idx = outcome_idx.expect("checked above");
    let feature_idx: Vec<usize> = feature_idx.into_iter().map(|i| i.expect("checked")).collect();
    let binary = schema.binary_mask();

    let mut features = Vec::new();
    let mut outcomes = Vec::new();
    let mut raw_rows = 0;
    let mut incomplete = Vec::new();

    for record in reader.records() {
        let record = record?;
        raw_rows += 1;
        let line = record.position().map_or(raw_rows as u64 + 1, |p| p.line());
        let cell = |i: usize| record.get(i).and_then(parse_cell);

        let y = cell(outcome_idx);
        let xs: Vec<Option<f64>> = feature_idx.iter().map(|&i| cell(i)).collect();
        if let Some(v) = y {
            if v != 0.0 && v != 1.0 {
                return Err(FedError::InvalidData(format!(
                    "line {line}: outcome '{}' is {v}, expected 0 or 1",
                    schema.outcome_column
                )));
            }
        }
        for ((x, &is_bin), name) in xs.iter().zip(&binary).zip(&schema.feature_columns) {
            if let (Some(v), true) = (x, is_bin) {
                if *v != 0.0 && *v != 1.0 {
                    return Err(FedError::InvalidData(format!(
                        "line {line}: binary column '{name}' is {v}, expected 0 or 1"
                    )));
                }
            }
        }
        match (y, xs.iter().copied().collect::<Option<Vec<f64>>>()) {
            (Some(y), Some(xs)) => {
                features.extend(xs);
                outcomes.push(y);
            }
            _ => incomplete.push(line),
        }
    }

    if mode == LoadMode::Strict && !incomplete.is_empty() {
        let lines: Vec<String> = incomplete.iter().map(u64::to_string).collect();
        return Err(FedError::InvalidData(format!(
            "missing or non-numeric values on lines {}",
            lines.join(", ")
        )));
    }
    if outcomes.is_empty() {
        return Err(FedError::InvalidData(format!(
            "no usable rows ({raw_rows} read, {} incomplete)",
            incomplete.len()
        )));
    }
    let report = LoadReport {
        raw_rows,
        kept_rows: outcomes.len(),
        dropped_lines: incomplete,
    };
    Ok((Dataset::new(schema.feature_columns.len(), features, outcomes)?, report))
}

/// 17 significant digits: enough for any f64 to parse back to the same bits.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `data` with the given column names; outcome last.
pub fn write_csv<W: Write>(
    out: W,
    data: &Dataset,
    feature_names: &[String],
    outcome_name: &str,
) -> Result<()> {
    if feature_names.len() != data.n_features() {
        return Err(FedError::DimensionMismatch {
            expected: data.n_features(),
            found: feature_names.len(),
        });
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = feature_names.iter().map(String::as_str).collect();
    header.push(outcome_name);
    w.write_record(&header)?;
    let mut rec = Vec::with_capacity(header.len());
    for i in 0..data.n_rows() {
        rec.clear();
        rec.extend(data.row(i).iter().map(|&v| format_f64(v)));
        rec.push(if data.outcome(i) == 1.0 { "1" } else { "0" }.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_csv(
    path: impl AsRef<Path>,
    data: &Dataset,
    feature_names: &[String],
    outcome_name: &str,
) -> Result<()> {
    write_csv(File::create(path)?, data, feature_names, outcome_name)
}

/// `x1..xd` style default column names.
pub fn default_feature_names(d: usize) -> Vec<String> {
    (1..=d).map(|j| format!("x{j}")).collect()
}

/// Column means and SDs for z-scoring continuous features.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    means: Vec<f64>,
    sds: Vec<f64>,
    binary: Vec<bool>,
}

impl Standardizer {
    /// Pooled statistics over `parts` (training splits). Zero-variance
    /// columns are centred but not scaled.
    pub fn fit(parts: &[&Dataset], binary: &[bool]) -> Result<Self> {
        let d = parts.first().ok_or(FedError::EmptyDataset)?.n_features();
        if binary.len() != d {
            return Err(FedError::DimensionMismatch {
                expected: d,
                found: binary.len(),
            });
        }
        let n: usize = parts.iter().map(|p| p.n_rows()).sum();
        let mut means = vec![0.0; d];
        for p in parts {
            for i in 0..p.n_rows() {
                for (m, x) in means.iter_mut().zip(p.row(i)) {
                    *m += x;
                }
            }
        }
        means.iter_mut().for_each(|m| *m /= n as f64);
        let mut sds = vec![0.0; d];
        for p in parts {
            for i in 0..p.n_rows() {
                for ((s, x), m) in sds.iter_mut().zip(p.row(i)).zip(&means) {
                    *s += (x - m).powi(2);
                }
            }
        }
        let denom = (n.max(2) - 1) as f64;
        for s in &mut sds {
            *s = (*s / denom).sqrt();
            if *s == 0.0 {
                *s = 1.0;
            }
        }
        Ok(Self {
            means,
            sds,
            binary: binary.to_vec(),
        })
    }

    pub fn apply(&self, data: &mut Dataset) {
        data.map_features(|j, v| {
            if self.binary[j] {
                v
            } else {
                (v - self.means[j]) / self.sds[j]
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> CohortSchema {
        let mut s = CohortSchema::new("died", &["age", "pulse", "male"]);
        s.binary_columns = vec!["male".into()];
        s
    }

    #[test]
    fn lenient_drops_incomplete_rows() {
        let text = "age,pulse,male,died\n\
                    61,80,1,0\n\
                    70,,0,1\n\
                    55,90,0,0\n\
                    48,72,1,1\n\
                    80,101,0,1\n";
        let (data, report) = read_csv(text.as_bytes(), &schema(), LoadMode::Lenient).unwrap();
        assert_eq!(data.n_rows(), 4);
        assert_eq!(report.dropped(), 1);
        assert_eq!(report.dropped_lines, vec![3]);
        assert_eq!(report.kept_rows + report.dropped(), report.raw_rows);
        assert_eq!(report.to_string(), "kept: 4, dropped: 1");
    }

    #[test]
    fn strict_names_offending_lines() {
        let text = "age,pulse,male,died\n61,80,1,0\n70,abc,0,1\n55,,0,0\n";
        let err = read_csv(text.as_bytes(), &schema(), LoadMode::Strict).unwrap_err();
        assert!(err.to_string().contains("lines 3, 4"), "{err}");
    }

    #[test]
    fn out_of_range_outcome_is_hard_error() {
        let text = "age,pulse,male,died\n61,80,1,0\n70,88,0,2\n";
        let err = read_csv(text.as_bytes(), &schema(), LoadMode::Lenient).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let text = "age,pulse,male,died\n61,80,3,0\n";
        let err = read_csv(text.as_bytes(), &schema(), LoadMode::Lenient).unwrap_err();
        assert!(err.to_string().contains("male"), "{err}");
    }

    #[test]
    fn missing_columns_and_empty_input() {
        let text = "age,male,died\n61,1,0\n";
        let err = read_csv(text.as_bytes(), &schema(), LoadMode::Lenient).unwrap_err();
        assert!(err.to_string().contains("pulse"));
        let text = "age,pulse,male,died\n,80,1,0\n";
        assert!(read_csv(text.as_bytes(), &schema(), LoadMode::Lenient).is_err());
    }

    #[test]
    fn schema_validation() {
        let mut s = schema();
        s.feature_columns.push("died".into());
        assert!(s.validate().is_err());
        let mut s = schema();
        s.binary_columns.push("sex".into());
        assert!(s.validate().is_err());
        let mut s = schema();
        s.feature_columns.push("age".into());
        assert!(s.validate().is_err());
    }

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, -2.0 / 3.0, 1e-300, 123456.789, f64::MAX, 5e-324] {
            assert_eq!(format_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn standardizer_skips_binary_columns() {
        let data = Dataset::from_rows(
            &[vec![1.0, 0.0], vec![3.0, 1.0], vec![5.0, 1.0]],
            vec![0.0, 1.0, 1.0],
        )
        .unwrap();
        let st = Standardizer::fit(&[&data], &[false, true]).unwrap();
        let mut z = data.clone();
        st.apply(&mut z);
        assert_eq!(z.column(0), vec![-1.0, 0.0, 1.0]);
        assert_eq!(z.column(1), data.column(1));
    }
}
