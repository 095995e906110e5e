//! Tabular ingestion, splits, a synthetic generator and the dataset cache.

mod load;
mod schema;
mod split;
mod synthetic;

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use load::{content_hash, load_csv, load_csv_bytes, EncodedColumn, FeatureEncoder};
pub use schema::{ColumnKind, DatasetSchema, LabelSpec, MissingPolicy, SplitPlan, Stratify};
pub use split::stratified_split;
pub use synthetic::{gen_synthetic, gen_synthetic_with_latents, Synthetic, SyntheticSpec};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::Batch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

/// Row accounting of a load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LoadReport {
    pub rows_read: usize,
    pub dropped_missing: usize,
    /// Categorical values absent from the training split, encoded as all-zeros.
    pub unknown_categories: usize,
}

/// Preprocessed features with target and sensitive labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    /// `rows × D`, standardized with training statistics.
    pub x: Tensor,
    pub y: Vec<usize>,
    pub s: Vec<usize>,
    pub split: Vec<SplitTag>,
    pub target_classes: usize,
    pub sensitive_classes: usize,
    pub feature_names: Vec<String>,
    pub provenance: String,
    pub report: LoadReport,
    pub encoder: Option<FeatureEncoder>,
}

impl Dataset {
    pub fn rows(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn indices(&self, tag: SplitTag) -> Vec<usize> {
        (0..self.rows()).filter(|&i| self.split[i] == tag).collect()
    }

    /// Copy of the given rows, split tags included.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(rows),
            y: rows.iter().map(|&i| self.y[i]).collect(),
            s: rows.iter().map(|&i| self.s[i]).collect(),
            split: rows.iter().map(|&i| self.split[i]).collect(),
            ..self.clone_meta()
        }
    }

    pub fn part(&self, tag: SplitTag) -> Dataset {
        self.subset(&self.indices(tag))
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            name: self.name.clone(),
            x: Tensor::zeros(&[0, self.dim()]),
            y: Vec::new(),
            s: Vec::new(),
            split: Vec::new(),
            target_classes: self.target_classes,
            sensitive_classes: self.sensitive_classes,
            feature_names: self.feature_names.clone(),
            provenance: self.provenance.clone(),
            report: self.report,
            encoder: self.encoder.clone(),
        }
    }

    pub fn batch(&self, rows: &[usize]) -> Batch {
        Batch {
            x: self.x.select_rows(rows),
            y: rows.iter().map(|&i| self.y[i]).collect(),
            s: rows.iter().map(|&i| self.s[i]).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.rows();
        if self.x.rank() != 2 || self.x.rows() != n || self.s.len() != n || self.split.len() != n {
            return Err(Error::Data(format!(
                "inconsistent dataset: x {:?}, {} targets, {} sensitive, {} split tags",
                self.x.shape(),
                n,
                self.s.len(),
                self.split.len()
            )));
        }
        if !self.x.is_finite() {
            return Err(Error::Data("feature matrix contains non-finite values".into()));
        }
        if let Some(&bad) = self.y.iter().find(|&&v| v >= self.target_classes) {
            return Err(Error::Data(format!("target label {bad} >= n = {}", self.target_classes)));
        }
        if let Some(&bad) = self.s.iter().find(|&&v| v >= self.sensitive_classes) {
            return Err(Error::Data(format!(
                "sensitive label {bad} >= m = {}",
                self.sensitive_classes
            )));
        }
        Ok(())
    }

    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(64 + self.x.len() * 8 + self.rows() * 9);
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        for v in [self.dim(), self.target_classes, self.sensitive_classes, self.rows()] {
            buf.extend_from_slice(&(v as u64).to_le_bytes());
        }
        let meta = CacheMeta {
            name: self.name.clone(),
            provenance: self.provenance.clone(),
            feature_names: self.feature_names.clone(),
            report: self.report,
        };
        let meta = serde_json::to_vec(&meta).map_err(|e| Error::Data(e.to_string()))?;
        buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        buf.extend_from_slice(&meta);
        for v in self.x.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &v in self.y.iter().chain(&self.s) {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        buf.extend(self.split.iter().map(|t| *t as u8));
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_cache(path: &Path) -> Result<Dataset> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |what: &str| Error::Data(format!("{}: {what}", path.display()));
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4).ok_or_else(|| bad("truncated header"))? != CACHE_MAGIC {
            return Err(bad("not a dataset cache (bad magic)"));
        }
        let version = u32::from_le_bytes(cur.array().ok_or_else(|| bad("truncated header"))?);
        if version != CACHE_VERSION {
            return Err(bad(&format!("unsupported cache version {version}")));
        }
        let mut header = [0usize; 5];
        for h in &mut header {
            *h = u64::from_le_bytes(cur.array().ok_or_else(|| bad("truncated header"))?) as usize;
        }
        let [dim, n, m, rows, meta_len] = header;
        let meta: CacheMeta = serde_json::from_slice(cur.take(meta_len).ok_or_else(|| bad("truncated metadata"))?)
            .map_err(|e| bad(&e.to_string()))?;
        let body = rows
            .checked_mul(dim * 8 + 9)
            .ok_or_else(|| bad("header overflow"))?;
        if bytes.len() - cur.pos != body {
            return Err(bad("payload length does not match header"));
        }
        let mut x = Vec::with_capacity(rows * dim);
        for _ in 0..rows * dim {
            x.push(f64::from_le_bytes(cur.array().expect("length checked")));
        }
        let mut labels = Vec::with_capacity(2 * rows);
        for _ in 0..2 * rows {
            labels.push(u32::from_le_bytes(cur.array().expect("length checked")) as usize);
        }
        let s = labels.split_off(rows);
        let split = cur
            .take(rows)
            .expect("length checked")
            .iter()
            .map(|&b| match b {
                0 => Ok(SplitTag::Train),
                1 => Ok(SplitTag::Test),
                _ => Err(bad("invalid split tag")),
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = Dataset {
            name: meta.name,
            x: Tensor::matrix(rows, dim, x)?,
            y: labels,
            s,
            split,
            target_classes: n,
            sensitive_classes: m,
            feature_names: meta.feature_names,
            provenance: meta.provenance,
            report: meta.report,
            encoder: None,
        };
        ds.validate()?;
        Ok(ds)
    }
}

const CACHE_MAGIC: &[u8; 4] = b"OFDS";
const CACHE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    name: String,
    provenance: String,
    feature_names: Vec<String>,
    report: LoadReport,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn array<const N: usize>(&mut self) -> Option<[u8; N]> {
        self.take(N).map(|b| b.try_into().expect("slice length"))
    }
}

/// Accuracy of always predicting the most frequent label.
pub fn majority_baseline(labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Data("majority baseline of an empty label set".into()));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    Ok(*counts.iter().max().expect("nonempty") as f64 / labels.len() as f64)
}

/// Standardizes every column with mean and population std of the train rows.
pub(crate) fn standardize_on_train(x: &mut Tensor, split: &[SplitTag]) {
    let (rows, cols) = (x.rows(), x.cols());
    let train: Vec<usize> = (0..rows).filter(|&i| split[i] == SplitTag::Train).collect();
    let n = train.len().max(1) as f64;
    let data = x.data_mut();
    for c in 0..cols {
        let mean = train.iter().map(|&i| data[i * cols + c]).sum::<f64>() / n;
        let var = train.iter().map(|&i| (data[i * cols + c] - mean).powi(2)).sum::<f64>() / n;
        let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        for r in 0..rows {
            data[r * cols + c] = (data[r * cols + c] - mean) / std;
        }
    }
}
