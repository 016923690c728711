//! Reading matrices, vectors and active sets from text.

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Parses comma-separated numbers, one observation per line. A first row
/// containing any non-numeric field is taken as a header and skipped.
pub fn parse_matrix_csv(text: &str) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(|f| f.parse::<f64>()).collect();
        match parsed {
            Ok(vals) => rows.push(vals),
            Err(_) if line == 0 => continue,
            Err(e) => return Err(Error::Parse(format!("line {}: {e}", line + 1))),
        }
    }
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.is_empty() || ncols == 0 {
        return Err(Error::Parse("no numeric rows".into()));
    }
    if let Some(i) = rows.iter().position(|r| r.len() != ncols) {
        return Err(Error::Parse(format!("row {} has {} fields, expected {ncols}", i + 1, rows[i].len())));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_matrix_csv(&text)
}

/// A single column or a single row of numbers.
pub fn read_vector_csv(path: &Path) -> Result<Vec<f64>> {
    let m = read_matrix_csv(path)?;
    if m.ncols() == 1 || m.nrows() == 1 {
        Ok(m.iter().copied().collect())
    } else {
        Err(Error::Parse(format!(
            "{}: expected a single column, found {}x{}",
            path.display(),
            m.nrows(),
            m.ncols()
        )))
    }
}

fn indices_from_json(v: &serde_json::Value) -> Result<Vec<usize>> {
    let arr = match v {
        serde_json::Value::Array(a) => a,
        serde_json::Value::Object(o) => match o.get("active") {
            Some(serde_json::Value::Array(a)) => a,
            _ => return Err(Error::Parse("JSON object has no \"active\" array".into())),
        },
        _ => return Err(Error::Parse("expected a JSON array of indices".into())),
    };
    arr.iter()
        .map(|x| x.as_u64().map(|i| i as usize).ok_or_else(|| Error::Parse(format!("not an index: {x}"))))
        .collect()
}

/// Parses an index list: "1,4,7", a JSON array, or a JSON object with an
/// "active" array. Indices are returned as written (no base conversion).
pub fn parse_index_list(text: &str) -> Result<Vec<usize>> {
    let t = text.trim();
    if t.starts_with('[') || t.starts_with('{') {
        return indices_from_json(&serde_json::from_str(t)?);
    }
    t.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|f| !f.is_empty())
        .map(|f| f.parse::<usize>().map_err(|e| Error::Parse(format!("bad index '{f}': {e}"))))
        .collect()
}

/// Like [`parse_index_list`], but an argument naming an existing file is read
/// first.
pub fn read_index_list(arg: &str) -> Result<Vec<usize>> {
    let path = Path::new(arg);
    if path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        parse_index_list(&text)
    } else {
        parse_index_list(arg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_with_and_without_header() {
        let a = parse_matrix_csv("1,2\n3,4\n").unwrap();
        let b = parse_matrix_csv("x1, x2\n1, 2\n\n3, 4").unwrap();
        assert_eq!(a, b);
        assert_eq!(a[(1, 0)], 3.0);
    }

    #[test]
    fn malformed_matrices() {
        assert!(matches!(parse_matrix_csv("1,2\n3\n"), Err(Error::Parse(_))));
        assert!(matches!(parse_matrix_csv("1,2\n3,abc\n"), Err(Error::Parse(_))));
        assert!(matches!(parse_matrix_csv("1,NaN\n"), Err(Error::NonFiniteInput)));
        assert!(matches!(parse_matrix_csv(""), Err(Error::Parse(_))));
    }

    #[test]
    fn index_lists() {
        assert_eq!(parse_index_list("1,4,7").unwrap(), vec![1, 4, 7]);
        assert_eq!(parse_index_list(" [2, 3] ").unwrap(), vec![2, 3]);
        assert_eq!(parse_index_list(r#"{"active": [5], "sigma_sq_hat": 1.0}"#).unwrap(), vec![5]);
        assert!(parse_index_list("1,x").is_err());
        assert!(parse_index_list("[-1]").is_err());
    }
}
