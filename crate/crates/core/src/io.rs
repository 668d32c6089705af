//! CSV input and provenance headers for outputs.

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grid::Grid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CsvError {
    #[error("{source_name}: row {row}, column {col}: `{text}` is not a number")]
    NotANumber { source_name: String, row: usize, col: usize, text: String },
    #[error("{source_name}: row {row} has {found} columns, expected {expected}")]
    Ragged { source_name: String, row: usize, found: usize, expected: usize },
    #[error("{source_name}: no data rows")]
    Empty { source_name: String },
    #[error("{source_name}: {message}")]
    Malformed { source_name: String, message: String },
}

/// Reads a row-major numeric matrix. `#` lines are comments; a first row
/// that does not parse as numbers is taken as a header. Rows and columns in
/// errors are 1-based positions in the file.
pub fn parse_matrix(text: &str, source_name: &str) -> Result<Grid<f64>, CsvError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut first = true;
    for record in reader.records() {
        let record = record.map_err(|e| CsvError::Malformed { source_name: source_name.into(), message: e.to_string() })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.iter().all(str::is_empty) {
            continue;
        }
        let parsed: Vec<Result<f64, &str>> = record.iter().map(|f| f.parse::<f64>().map_err(|_| f)).collect();
        if first && parsed.iter().all(Result::is_err) {
            first = false;
            continue;
        }
        first = false;
        let mut row = Vec::with_capacity(parsed.len());
        for (k, v) in parsed.into_iter().enumerate() {
            match v {
                Ok(x) => row.push(x),
                Err(text) => {
                    return Err(CsvError::NotANumber { source_name: source_name.into(), row: line, col: k + 1, text: text.into() })
                }
            }
        }
        if let Some(prev) = rows.first() {
            if prev.len() != row.len() {
                return Err(CsvError::Ragged { source_name: source_name.into(), row: line, found: row.len(), expected: prev.len() });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CsvError::Empty { source_name: source_name.into() });
    }
    Ok(Grid::from_rows(rows).expect("rows checked for equal length"))
}

/// Reads a vector given either as one row or as one column.
pub fn parse_vector(text: &str, source_name: &str) -> Result<Vec<f64>, CsvError> {
    let m = parse_matrix(text, source_name)?;
    match m.dims() {
        (1, _) | (_, 1) => Ok(m.values().copied().collect()),
        (r, c) => Err(CsvError::Malformed { source_name: source_name.into(), message: format!("expected a vector, got {r}x{c}") }),
    }
}

pub fn matrix_csv(m: &Grid<f64>) -> String {
    let mut s = String::new();
    for r in 0..m.rows() {
        let line: Vec<String> = (0..m.cols()).map(|c| format!("{:e}", m[(r, c)])).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

/// Hex SHA-256 of the canonical configuration text.
pub fn config_hash(canonical: &str) -> String {
    Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// `#` comment lines naming the tool, its version and the configuration.
pub fn provenance_header(tool: &str, version: &str, canonical_config: &str, extra: &[(&str, String)]) -> String {
    let mut s = format!("# {tool} {version}\n# config_sha256 {}\n", config_hash(canonical_config));
    for (k, v) in extra {
        s.push_str(&format!("# {k} {v}\n"));
    }
    s
}
