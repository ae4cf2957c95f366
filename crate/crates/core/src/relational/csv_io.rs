use std::fs::File;
use std::path::Path;

use ndarray::Array2;

use super::{ClientId, HorizontalPartition, TableSchema};
use crate::error::{Error, Result};

/// Reads one horizontal partition from a headered CSV file.
///
/// Keys are kept as opaque strings; features and labels are parsed as `f64`.
/// Parse errors report the 1-based data row (the header is not counted).
pub fn load_csv(path: impl AsRef<Path>, schema: &TableSchema, owner: ClientId) -> Result<HorizontalPartition> {
    let path = path.as_ref();
    schema.validate()?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(file);
    let headers = reader.headers()?.clone();
    if headers.is_empty() {
        return HorizontalPartition::new(
            owner,
            schema.clone(),
            Vec::new(),
            Array2::zeros((0, schema.num_features())),
            schema.label_col.as_ref().map(|_| Vec::new()),
        );
    }
    let column = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| {
            Error::Schema(format!(
                "{}: missing column `{name}` declared by table `{}`",
                path.display(),
                schema.table_name
            ))
        })
    };
    let key_idx = schema
        .join_key_cols
        .iter()
        .map(|c| column(c))
        .collect::<Result<Vec<_>>>()?;
    let feat_idx = schema
        .feature_cols
        .iter()
        .map(|c| column(c))
        .collect::<Result<Vec<_>>>()?;
    let label_idx = schema.label_col.as_deref().map(column).transpose()?;

    let mut keys = Vec::new();
    let mut values = Vec::new();
    let mut labels = label_idx.map(|_| Vec::new());
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        keys.push(
            key_idx
                .iter()
                .map(|&c| record.get(c).unwrap_or("").trim().to_string())
                .collect(),
        );
        for (&c, name) in feat_idx.iter().zip(&schema.feature_cols) {
            values.push(parse_cell(record.get(c).unwrap_or(""), row, name)?);
        }
        if let (Some(c), Some(y)) = (label_idx, labels.as_mut()) {
            y.push(parse_cell(
                record.get(c).unwrap_or(""),
                row,
                schema.label_col.as_deref().unwrap(),
            )?);
        }
    }
    let features = Array2::from_shape_vec((keys.len(), schema.num_features()), values)
        .expect("row-major feature buffer");
    HorizontalPartition::new(owner, schema.clone(), keys, features, labels)
}

fn parse_cell(cell: &str, row: usize, column: &str) -> Result<f64> {
    let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
        row,
        column: column.to_string(),
        message: format!("`{cell}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            row,
            column: column.to_string(),
            message: format!("`{cell}` is not finite"),
        });
    }
    Ok(v)
}

/// Writes a partition with columns `keys..., features..., label`.
pub fn write_csv(path: impl AsRef<Path>, part: &HorizontalPartition) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let schema = &part.schema;
    let mut header: Vec<&str> = schema.join_key_cols.iter().map(String::as_str).collect();
    header.extend(schema.feature_cols.iter().map(String::as_str));
    if let Some(l) = &schema.label_col {
        header.push(l);
    }
    w.write_record(&header)?;
    for r in 0..part.num_rows() {
        let mut rec: Vec<String> = part.keys[r].clone();
        rec.extend(part.features.row(r).iter().map(|v| v.to_string()));
        if let Some(y) = &part.labels {
            rec.push(y[r].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
