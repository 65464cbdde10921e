//! CSV ingestion with row/column error reporting.
//!
//! The expected layout is a header row (`x1..xp`) followed by one numeric
//! observation per line; truth files carry a single `label` column of
//! 0/1. Values are plain decimal, no quoting or thousands separators.

use std::path::Path;

use vscout_core::DataMatrix;

use crate::error::{CliError, CliResult};

pub fn read_matrix_csv(path: &Path) -> CliResult<DataMatrix> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| CliError::input(format!("{}: empty file", path.display())))?;
    let cols = header.split(',').count();
    if cols == 0 || header.trim().is_empty() {
        return Err(CliError::input(format!("{}: empty header row", path.display())));
    }
    let mut values = Vec::new();
    let mut rows = 0usize;
    for (line_idx, line) in lines {
        let file_line = line_idx + 1; // 1-based, header is line 1
        if line.trim().is_empty() {
            return Err(CliError::input(format!(
                "{}: line {file_line} is blank",
                path.display()
            )));
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols {
            return Err(CliError::input(format!(
                "{}: line {file_line} has {} fields, expected {cols}",
                path.display(),
                fields.len()
            )));
        }
        for (col_idx, field) in fields.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                CliError::input(format!(
                    "{}: line {file_line}, column {}: not numeric: '{field}'",
                    path.display(),
                    col_idx + 1
                ))
            })?;
            if !v.is_finite() {
                return Err(CliError::input(format!(
                    "{}: line {file_line}, column {}: non-finite value",
                    path.display(),
                    col_idx + 1
                )));
            }
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(CliError::input(format!(
            "{}: no data rows after the header",
            path.display()
        )));
    }
    DataMatrix::new(rows, cols, values)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

pub fn read_labels_csv(path: &Path) -> CliResult<Vec<bool>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    lines
        .next()
        .ok_or_else(|| CliError::input(format!("{}: empty file", path.display())))?;
    let mut labels = Vec::new();
    for (line_idx, line) in lines {
        let file_line = line_idx + 1;
        match line.trim() {
            "0" => labels.push(false),
            "1" => labels.push(true),
            other => {
                return Err(CliError::input(format!(
                    "{}: line {file_line}: expected 0 or 1, got '{other}'",
                    path.display()
                )))
            }
        }
    }
    if labels.is_empty() {
        return Err(CliError::input(format!(
            "{}: no labels after the header",
            path.display()
        )));
    }
    Ok(labels)
}
