use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::schema::{ColumnKind, DatasetSchema, MissingPolicy, SplitPlan};
use super::split::stratified_split;
use super::{Dataset, LoadReport, SplitTag};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Git-style content hash: SHA-256 over `"blob <len>\0"` followed by the bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// One input column after fitting on the training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EncodedColumn {
    Numeric { name: String, mean: f64, std: f64 },
    Categorical { name: String, levels: Vec<String> },
}

impl EncodedColumn {
    pub fn width(&self) -> usize {
        match self {
            EncodedColumn::Numeric { .. } => 1,
            EncodedColumn::Categorical { levels, .. } => levels.len(),
        }
    }
}

/// Feature map fitted on the training split only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEncoder {
    pub columns: Vec<EncodedColumn>,
}

/// A parsed but not yet encoded cell.
#[derive(Debug, Clone)]
enum Cell {
    Num(Option<f64>),
    Cat(Option<String>),
}

impl FeatureEncoder {
    fn fit(cols: &[(String, ColumnKind)], rows: &[Vec<Cell>], train: &[usize]) -> Self {
        let columns = cols
            .iter()
            .enumerate()
            .map(|(c, (name, kind))| match kind {
                ColumnKind::Categorical => {
                    let levels: BTreeSet<String> = train
                        .iter()
                        .filter_map(|&i| match &rows[i][c] {
                            Cell::Cat(v) => Some(v.clone().unwrap_or_else(|| MISSING_LEVEL.into())),
                            Cell::Num(_) => None,
                        })
                        .collect();
                    EncodedColumn::Categorical {
                        name: name.clone(),
                        levels: levels.into_iter().collect(),
                    }
                }
                _ => {
                    let vals: Vec<f64> = train
                        .iter()
                        .filter_map(|&i| match rows[i][c] {
                            Cell::Num(v) => v,
                            Cell::Cat(_) => None,
                        })
                        .collect();
                    let n = vals.len().max(1) as f64;
                    let mean = vals.iter().sum::<f64>() / n;
                    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
                    EncodedColumn::Numeric {
                        name: name.clone(),
                        mean,
                        std,
                    }
                }
            })
            .collect();
        FeatureEncoder { columns }
    }

    pub fn dim(&self) -> usize {
        self.columns.iter().map(EncodedColumn::width).sum()
    }

    pub fn feature_names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.dim());
        for col in &self.columns {
            match col {
                EncodedColumn::Numeric { name, .. } => out.push(name.clone()),
                EncodedColumn::Categorical { name, levels } => {
                    out.extend(levels.iter().map(|l| format!("{name}={l}")))
                }
            }
        }
        out
    }

    /// Encodes one row; returns the number of unseen categorical values.
    fn encode(&self, row: &[Cell], out: &mut Vec<f64>) -> usize {
        let mut unknown = 0;
        for (col, cell) in self.columns.iter().zip(row) {
            match (col, cell) {
                (EncodedColumn::Numeric { mean, std, .. }, Cell::Num(v)) => {
                    // imputed values sit at the training mean
                    out.push(v.map_or(0.0, |v| (v - mean) / std));
                }
                (EncodedColumn::Categorical { levels, .. }, Cell::Cat(v)) => {
                    let v = v.as_deref().unwrap_or(MISSING_LEVEL);
                    let start = out.len();
                    out.resize(start + levels.len(), 0.0);
                    match levels.binary_search_by(|l| l.as_str().cmp(v)) {
                        Ok(j) => out[start + j] = 1.0,
                        Err(_) => unknown += 1,
                    }
                }
                _ => unreachable!("cell kinds follow the column kinds"),
            }
        }
        unknown
    }
}

const MISSING_LEVEL: &str = "<missing>";

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: line as usize,
        msg: msg.into(),
    }
}

/// Reads a headered, comma-delimited file and preprocesses it per `schema`.
pub fn load_csv(path: &Path, schema: &DatasetSchema) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_csv_bytes(&bytes, path, schema)
}

/// As [`load_csv`], from an in-memory buffer; `path` is used for messages.
pub fn load_csv_bytes(bytes: &[u8], path: &Path, schema: &DatasetSchema) -> Result<Dataset> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::Schema(format!("column {name:?} not found in {}", path.display()))
        })
    };
    let y_col = find(&schema.target.column)?;
    let s_col = find(&schema.sensitive.column)?;
    let split_col = match &schema.split {
        SplitPlan::Column { column, .. } => Some(find(column)?),
        SplitPlan::Stratified { .. } => None,
    };
    for name in schema.columns.keys() {
        find(name)?;
    }

    // (csv index, name, kind) of every feature column, in file order
    let mut features = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        if i == y_col || i == s_col || Some(i) == split_col {
            continue;
        }
        match schema.columns.get(h) {
            Some(ColumnKind::Drop) => {}
            Some(&kind) => features.push((i, h.clone(), kind)),
            None => {
                return Err(Error::Schema(format!(
                    "column {h:?} has no kind; list it under [columns] (numeric, categorical or drop)"
                )))
            }
        }
    }

    let mut report = LoadReport::default();
    let mut cells: Vec<Vec<Cell>> = Vec::new();
    let (mut y, mut s, mut tags) = (Vec::new(), Vec::new(), Vec::new());
    let mut record = csv::StringRecord::new();
    loop {
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                return Err(parse_err(path, line, e.to_string()));
            }
        }
        let line = record.position().map_or(0, |p| p.line());
        report.rows_read += 1;

        let used = features
            .iter()
            .map(|f| f.0)
            .chain([y_col, s_col])
            .chain(split_col);
        let has_missing = used.clone().any(|i| schema.is_missing(&record[i]));
        if has_missing && schema.missing_policy == MissingPolicy::Drop {
            report.dropped_missing += 1;
            continue;
        }

        let label = |col: usize, spec: &super::schema::LabelSpec| {
            let raw = &record[col];
            spec.classes.get(raw).copied().ok_or_else(|| {
                parse_err(
                    path,
                    line,
                    format!("value {raw:?} of column {:?} is not in the class map", spec.column),
                )
            })
        };
        y.push(label(y_col, &schema.target)?);
        s.push(label(s_col, &schema.sensitive)?);

        if let (Some(c), SplitPlan::Column { train, test, .. }) = (split_col, &schema.split) {
            let raw = &record[c];
            tags.push(if raw == train {
                SplitTag::Train
            } else if raw == test {
                SplitTag::Test
            } else {
                return Err(parse_err(path, line, format!("unknown split tag {raw:?}")));
            });
        }

        let mut row = Vec::with_capacity(features.len());
        for (i, name, kind) in &features {
            let raw = &record[*i];
            let missing = schema.is_missing(raw);
            row.push(match kind {
                ColumnKind::Numeric if missing => Cell::Num(None),
                ColumnKind::Numeric => Cell::Num(Some(raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(
                    || parse_err(path, line, format!("column {name:?}: {raw:?} is not a finite number")),
                )?)),
                ColumnKind::Categorical => Cell::Cat((!missing).then(|| raw.to_string())),
                ColumnKind::Drop => unreachable!(),
            });
        }
        cells.push(row);
    }
    if cells.is_empty() {
        return Err(Error::Data(format!("{}: no usable rows", path.display())));
    }

    if let SplitPlan::Stratified {
        train_fraction,
        seed,
        stratify,
    } = schema.split
    {
        let (train, _) = stratified_split(&y, &s, train_fraction, seed, stratify)?;
        tags = vec![SplitTag::Test; y.len()];
        for i in train {
            tags[i] = SplitTag::Train;
        }
    }
    let train_rows: Vec<usize> = (0..tags.len()).filter(|&i| tags[i] == SplitTag::Train).collect();
    if train_rows.is_empty() {
        return Err(Error::Data(format!("{}: the train split is empty", path.display())));
    }

    let kinds: Vec<(String, ColumnKind)> = features.iter().map(|f| (f.1.clone(), f.2)).collect();
    let encoder = FeatureEncoder::fit(&kinds, &cells, &train_rows);
    let dim = encoder.dim();
    let mut data = Vec::with_capacity(cells.len() * dim);
    for row in &cells {
        report.unknown_categories += encoder.encode(row, &mut data);
    }
    if report.unknown_categories > 0 {
        log::warn!(
            "{}: {} categorical values unseen in training were encoded as all-zeros",
            path.display(),
            report.unknown_categories
        );
    }

    let schema_json = serde_json::to_string(schema).map_err(|e| Error::Schema(e.to_string()))?;
    let provenance = {
        let mut h = Sha256::new();
        h.update(content_hash(bytes).as_bytes());
        h.update(content_hash(schema_json.as_bytes()).as_bytes());
        hex::encode(h.finalize())
    };

    Ok(Dataset {
        name: schema.name.clone(),
        x: Tensor::matrix(cells.len(), dim, data)?,
        y,
        s,
        split: tags,
        target_classes: schema.target.num_classes(),
        sensitive_classes: schema.sensitive.num_classes(),
        feature_names: encoder.feature_names(),
        provenance,
        report,
        encoder: Some(encoder),
    })
}
