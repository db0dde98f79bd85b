use std::path::Path;

use super::{Dataset, LabeledExample};
use crate::error::{Error, Result};
use crate::nn::FeatureShape;

/// Reads a numeric CSV with a header row. Every column except `label_column`
/// is a feature; labels are integer class indices and the class count is
/// `max(label) + 1`.
pub fn load_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    load_csv_with_classes(path, label_column, None)
}

pub fn load_csv_with_classes(
    path: &Path,
    label_column: &str,
    num_classes: Option<usize>,
) -> Result<Dataset> {
    let csv_err = |line: u64, detail: String| Error::Csv {
        path: path.to_path_buf(),
        line,
        detail,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| csv_err(0, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| csv_err(1, e.to_string()))?
        .clone();
    let label_idx = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| csv_err(1, format!("label column {label_column:?} not found")))?;
    let dim = headers.len() - 1;

    let mut rows: Vec<(Vec<f64>, usize)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            csv_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let mut features = Vec::with_capacity(dim);
        let mut label = None;
        for (i, cell) in record.iter().enumerate() {
            let value: f64 = cell.trim().parse().map_err(|_| {
                csv_err(
                    line,
                    format!("non-numeric cell {cell:?} in column {}", i + 1),
                )
            })?;
            if i == label_idx {
                if value < 0.0 || value.fract() != 0.0 || !value.is_finite() {
                    return Err(csv_err(
                        line,
                        format!("label {cell:?} is not a nonnegative integer"),
                    ));
                }
                label = Some(value as usize);
            } else {
                features.push(value);
            }
        }
        rows.push((
            features,
            label.expect("label column present in every record"),
        ));
    }

    let max_label = rows.iter().map(|r| r.1).max().unwrap_or(0);
    let k = match num_classes {
        Some(k) if max_label >= k => {
            return Err(Error::invalid(format!(
                "{}: label {max_label} out of range for {k} classes",
                path.display()
            )))
        }
        Some(k) => k,
        None => (max_label + 1).max(2),
    };
    let examples = rows
        .into_iter()
        .map(|(f, l)| LabeledExample::one_hot(f, l, k))
        .collect();
    Dataset::new(examples, k, FeatureShape::Flat { dim })
}

/// Writes features `x0..x{d-1}` and the hard class in a `label` column.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv {
        path: path.to_path_buf(),
        line: 0,
        detail: e.to_string(),
    })?;
    let d = dataset.shape.len();
    let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    header.push("label".into());
    let io = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        line: 0,
        detail: e.to_string(),
    };
    w.write_record(&header).map_err(io)?;
    for ex in &dataset.examples {
        let mut row: Vec<String> = ex.features.iter().map(|v| format!("{v:?}")).collect();
        row.push(ex.class().to_string());
        w.write_record(&row).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
