use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

/// Which columns form the label and which are ignored. Defaults to "last column is the label".
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ColumnSelection {
    /// Zero-based label column; `None` means the last column.
    pub label_column: Option<usize>,
    /// Zero-based columns excluded from the features (other label candidates, ids).
    pub drop_columns: Vec<usize>,
}

/// Numeric CSV, optional header row, last column is the label.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    load_csv_with(path, &ColumnSelection::default())
}

pub fn load_csv_with(path: impl AsRef<Path>, selection: &ColumnSelection) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let csv_err = |row: usize, column: Option<usize>, message: String| Error::Csv {
        path: path.to_path_buf(),
        row,
        column,
        message,
    };

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());

    let mut table: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| csv_err(row, None, e.to_string()))?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        let parsed: Vec<std::result::Result<f64, usize>> = record
            .iter()
            .enumerate()
            .map(|(c, cell)| cell.parse::<f64>().map_err(|_| c))
            .collect();
        if idx == 0 && parsed.iter().any(|p| p.is_err()) {
            // Non-numeric first row: header.
            width = Some(record.len());
            continue;
        }
        match width {
            Some(w) if w != record.len() => {
                return Err(csv_err(
                    row,
                    None,
                    format!("expected {w} columns, found {}", record.len()),
                ))
            }
            None => width = Some(record.len()),
            _ => {}
        }
        let mut values = Vec::with_capacity(parsed.len());
        for p in parsed {
            match p {
                Ok(v) if v.is_finite() => values.push(v),
                Ok(_) => return Err(csv_err(row, None, "non-finite value".into())),
                Err(c) => {
                    return Err(csv_err(
                        row,
                        Some(c + 1),
                        format!("not a number: {:?}", &record[c]),
                    ))
                }
            }
        }
        table.push(values);
    }

    let cols = width.unwrap_or(0);
    if table.is_empty() {
        return Err(csv_err(0, None, "no data rows".into()));
    }
    if cols < 2 {
        return Err(csv_err(
            1,
            None,
            "need at least one feature and a label".into(),
        ));
    }
    let label_col = selection.label_column.unwrap_or(cols - 1);
    if label_col >= cols {
        return Err(Error::invalid(format!(
            "label column {label_col} out of range for {cols} columns"
        )));
    }
    let feature_cols: Vec<usize> = (0..cols)
        .filter(|c| *c != label_col && !selection.drop_columns.contains(c))
        .collect();
    if feature_cols.is_empty() {
        return Err(Error::invalid("no feature columns left after selection"));
    }
    let mut features = Vec::with_capacity(table.len() * feature_cols.len());
    let mut labels = Vec::with_capacity(table.len());
    for row in &table {
        features.extend(feature_cols.iter().map(|&c| row[c]));
        labels.push(row[label_col]);
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, features, feature_cols.len(), labels)
}
