//! Text matrix format: whitespace-separated decimal reals, one row per line.
//! Blank lines and lines starting with '#' are skipped. Parse errors carry
//! the offending line number.

use std::fs;
use std::path::Path;

use potalign::tensor::DenseTensor;

pub fn read_matrix(path: &Path) -> Result<DenseTensor, String> {
    let text = fs::read_to_string(path)
        .map_err(|e| format!("io error: cannot read {}: {e}", path.display()))?;
    parse_matrix(&text).map_err(|e| format!("{}: {e}", path.display()))
}

pub fn parse_matrix(text: &str) -> Result<DenseTensor, String> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut row = Vec::new();
        for tok in trimmed.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| format!("line {}: '{tok}' is not a number", lineno + 1))?;
            row.push(v);
        }
        if let Some(w) = width {
            if row.len() != w {
                return Err(format!(
                    "line {}: row has {} values, expected {w}",
                    lineno + 1,
                    row.len()
                ));
            }
        } else {
            width = Some(row.len());
        }
        rows.push(row);
    }
    let w = width.ok_or_else(|| "no data rows".to_string())?;
    let n = rows.len();
    DenseTensor::from_vec(vec![n, w], rows.into_iter().flatten().collect())
        .map_err(|e| e.to_string())
}

/// A marginal vector: a single row or a single column of reals.
pub fn read_vector(path: &Path) -> Result<Vec<f64>, String> {
    let m = read_matrix(path)?;
    if m.rows() != 1 && m.cols() != 1 {
        return Err(format!(
            "{}: expected a vector (one row or one column), got {}x{}",
            path.display(),
            m.rows(),
            m.cols()
        ));
    }
    Ok(m.into_data())
}

/// Plan matrix as CSV rows.
pub fn matrix_csv(m: &DenseTensor) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = (0..m.cols()).map(|j| format!("{}", m.at(i, j))).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
