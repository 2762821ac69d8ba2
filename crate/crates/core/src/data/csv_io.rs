use std::path::Path;

use super::{SeriesDataset, Split, TaskPayload};
use crate::error::{contract, Error, Result};
use crate::numerics::NdArray;

/// Reads a comma-separated series with one row per step and one column per
/// dimension. Rows are counted from 1, excluding the header.
pub fn load_csv(path: impl AsRef<Path>, has_header: bool, timestamp_col: Option<usize>) -> Result<SeriesDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())
        .map_err(csv_error)?;

    let header: Option<Vec<String>> = if has_header {
        Some(reader.headers().map_err(csv_error)?.iter().map(str::to_string).collect())
    } else {
        None
    };

    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(csv_error)?;
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(Error::Parse {
                row,
                col: record.len().min(w) + 1,
                message: format!("expected {w} fields, found {}", record.len()),
            });
        }
        if columns.is_empty() {
            let kept = w - usize::from(timestamp_col.is_some_and(|t| t < w));
            columns = vec![Vec::new(); kept];
        }
        let mut c = 0;
        for (col, field) in record.iter().enumerate() {
            if Some(col) == timestamp_col {
                continue;
            }
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                row,
                col: col + 1,
                message: format!("non-numeric cell {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    col: col + 1,
                    message: format!("non-finite cell {field:?}"),
                });
            }
            columns[c].push(v);
            c += 1;
        }
    }
    if columns.is_empty() || columns[0].is_empty() {
        return contract("csv file holds no numeric columns");
    }

    let names = match header {
        Some(h) => h
            .into_iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != timestamp_col)
            .map(|(_, n)| n)
            .collect(),
        None => (0..columns.len()).map(|d| format!("dim{d}")).collect(),
    };
    let (m, l) = (columns.len(), columns[0].len());
    let values = NdArray::new(vec![m, l], columns.concat())?;
    let split = Split::default_for(l)?;
    SeriesDataset::new(values, names, split)
}

/// Reads a 0/1 mask laid out like the series file (steps as rows) and
/// attaches it to `ds` as an imputation mask. `1` marks a hidden entry.
pub fn load_mask_csv(path: impl AsRef<Path>, has_header: bool, ds: &SeriesDataset) -> Result<SeriesDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())
        .map_err(csv_error)?;
    let (m, l) = (ds.dims(), ds.len());
    let mut mask = vec![false; m * l];
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(csv_error)?;
        if record.len() != m || r >= l {
            return contract(format!("mask shape does not match series {m} x {l}"));
        }
        for (d, field) in record.iter().enumerate() {
            mask[d * l + r] = match field {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::Parse {
                        row: r + 1,
                        col: d + 1,
                        message: format!("mask cell {other:?} is not 0 or 1"),
                    })
                }
            };
        }
        rows += 1;
    }
    if rows != l {
        return contract(format!("mask has {rows} rows, series has {l}"));
    }
    Ok(SeriesDataset {
        payload: TaskPayload::Imputation { mask },
        ..ds.clone()
    })
}

/// Writes a mask in the layout read by [`load_mask_csv`], without header.
pub fn write_mask_csv(path: impl AsRef<Path>, mask: &[bool], dims: usize) -> Result<()> {
    let l = mask.len() / dims;
    let mut out = String::with_capacity(mask.len() * 2);
    for t in 0..l {
        let row: Vec<&str> = (0..dims).map(|d| if mask[d * l + t] { "1" } else { "0" }).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    let row = e.position().map_or(0, |p| p.record() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            row,
            col: 0,
            message: format!("{other:?}"),
        },
    }
}
