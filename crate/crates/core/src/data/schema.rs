use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MissingPolicy {
    /// Discard rows containing a missing token in any used column.
    #[default]
    Drop,
    /// Keep rows; categorical missing values become their own level and
    /// numeric ones are imputed with the training mean.
    Keep,
}

/// A label column and the many-to-one map from raw values to class indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSpec {
    pub column: String,
    pub classes: BTreeMap<String, usize>,
}

impl LabelSpec {
    pub fn num_classes(&self) -> usize {
        self.classes.values().max().map_or(0, |m| m + 1)
    }

    fn validate(&self, role: &str) -> Result<()> {
        let n = self.num_classes();
        if n < 2 {
            return Err(Error::Schema(format!(
                "{role} column {:?} needs at least two classes",
                self.column
            )));
        }
        for k in 0..n {
            if !self.classes.values().any(|&v| v == k) {
                return Err(Error::Schema(format!(
                    "{role} classes must be contiguous from 0; index {k} is unused"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Stratify {
    Target,
    Sensitive,
    #[default]
    Both,
}

/// How rows are assigned to the train and test splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SplitPlan {
    /// A column names each row's split.
    Column {
        column: String,
        #[serde(default = "default_train_tag")]
        train: String,
        #[serde(default = "default_test_tag")]
        test: String,
    },
    /// Seeded stratified split.
    Stratified {
        #[serde(default = "default_fraction")]
        train_fraction: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        stratify: Stratify,
    },
}

fn default_train_tag() -> String {
    "train".into()
}

fn default_test_tag() -> String {
    "test".into()
}

fn default_fraction() -> f64 {
    0.8
}

fn default_missing() -> Vec<String> {
    vec!["?".into()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSchema {
    pub name: String,
    #[serde(default = "default_missing")]
    pub missing_tokens: Vec<String>,
    #[serde(default)]
    pub missing_policy: MissingPolicy,
    pub target: LabelSpec,
    pub sensitive: LabelSpec,
    pub split: SplitPlan,
    /// Kind of every other column. Columns absent here are an error.
    pub columns: BTreeMap<String, ColumnKind>,
}

impl DatasetSchema {
    pub fn from_toml(text: &str) -> Result<Self> {
        let schema: DatasetSchema =
            toml::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Schema(msg) => Error::Schema(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.target.validate("target")?;
        self.sensitive.validate("sensitive")?;
        if self.target.column == self.sensitive.column {
            return Err(Error::Schema("target and sensitive columns must differ".into()));
        }
        for label in [&self.target.column, &self.sensitive.column] {
            if let Some(kind) = self.columns.get(label) {
                if *kind != ColumnKind::Drop {
                    return Err(Error::Schema(format!(
                        "label column {label:?} cannot also be a feature"
                    )));
                }
            }
        }
        if let SplitPlan::Stratified { train_fraction, .. } = self.split {
            if !(train_fraction > 0.0 && train_fraction < 1.0) {
                return Err(Error::Schema(format!(
                    "split.train_fraction must lie in (0, 1), got {train_fraction}"
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn is_missing(&self, field: &str) -> bool {
        field.is_empty() || self.missing_tokens.iter().any(|t| t == field)
    }
}
