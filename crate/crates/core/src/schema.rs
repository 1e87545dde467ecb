//! Column schemas: the discretized domain of every column, plus the
//! preprocessing spec that produced it.
//!
//! A [`Schema`] records, per column, either the full categorical label list
//! or the numeric range and bin count used for uniform discretization. It is
//! persisted alongside trained models so generated tables can be decoded back
//! to source labels (or bin midpoints for numeric columns).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ColumnKind {
    /// Encoded as dense indices into `labels`.
    Categorical { labels: Vec<String> },
    /// Uniformly discretized: bin = floor((v - min) / ((max - min) / bins)),
    /// clamped to [0, bins-1].
    Numeric { min: f64, max: f64, bins: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    #[serde(flatten)]
    pub kind: ColumnKind,
}

impl Column {
    pub fn cardinality(&self) -> usize {
        match &self.kind {
            ColumnKind::Categorical { labels } => labels.len(),
            ColumnKind::Numeric { bins, .. } => *bins,
        }
    }

    /// The source-space representative of a category index: the label for
    /// categorical columns, the bin midpoint for numeric ones.
    pub fn decode(&self, value: usize) -> String {
        match &self.kind {
            ColumnKind::Categorical { labels } => labels[value].clone(),
            ColumnKind::Numeric { min, max, bins } => {
                let width = (max - min) / *bins as f64;
                let mid = if width > 0.0 {
                    min + (value as f64 + 0.5) * width
                } else {
                    *min
                };
                format!("{mid}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<Column>,
}

impl Schema {
    pub fn new(columns: Vec<Column>) -> Result<Self> {
        let schema = Schema { columns };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for col in &self.columns {
            if !seen.insert(col.name.as_str()) {
                return Err(Error::config(format!("duplicate column name `{}`", col.name)));
            }
            if col.cardinality() == 0 {
                return Err(Error::config(format!(
                    "column `{}` has cardinality 0",
                    col.name
                )));
            }
            if let ColumnKind::Numeric { min, max, .. } = col.kind {
                if !(min.is_finite() && max.is_finite() && min <= max) {
                    return Err(Error::config(format!(
                        "column `{}` has invalid range [{min}, {max}]",
                        col.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of columns.
    pub fn arity(&self) -> usize {
        self.columns.len()
    }

    pub fn cardinality(&self, col: usize) -> usize {
        self.columns[col].cardinality()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.columns.iter().map(Column::cardinality).collect()
    }

    /// Sum of per-column cardinalities (the generator's output width).
    pub fn total_width(&self) -> usize {
        self.columns.iter().map(Column::cardinality).sum()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }
}

/// Versioned on-disk wrapper for a schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemaFile {
    pub format_version: u32,
    #[serde(flatten)]
    pub schema: Schema,
}

impl SchemaFile {
    pub fn wrap(schema: Schema) -> Self {
        SchemaFile {
            format_version: SCHEMA_FORMAT_VERSION,
            schema,
        }
    }
}

/// How a raw CSV column should be preprocessed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnSpec {
    /// Categorical encoding. When `categories` is given it is the exact
    /// label list (values outside it fail); otherwise labels are inferred
    /// from the data in first-appearance order. Nulls map to index 0.
    Categorical {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        categories: Option<Vec<String>>,
    },
    /// Uniform binning. `min`/`max` default to the observed data range
    /// (after zero-imputation of nulls); `bins` defaults to 32.
    Numeric {
        #[serde(default = "default_bins")]
        bins: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        min: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max: Option<f64>,
    },
}

fn default_bins() -> usize {
    32
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreprocSpec {
    pub columns: Vec<NamedColumnSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedColumnSpec {
    pub name: String,
    #[serde(flatten)]
    pub spec: ColumnSpec,
}

impl PreprocSpec {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for col in &self.columns {
            if !seen.insert(col.name.as_str()) {
                return Err(Error::config(format!(
                    "duplicate column `{}` in preprocessing spec",
                    col.name
                )));
            }
            match &col.spec {
                ColumnSpec::Numeric { bins, min, max } => {
                    if *bins == 0 {
                        return Err(Error::config(format!(
                            "column `{}`: bins must be >= 1",
                            col.name
                        )));
                    }
                    if let (Some(lo), Some(hi)) = (min, max) {
                        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                            return Err(Error::config(format!(
                                "column `{}`: invalid explicit range [{lo}, {hi}]",
                                col.name
                            )));
                        }
                    }
                }
                ColumnSpec::Categorical { categories } => {
                    if let Some(cats) = categories {
                        if cats.is_empty() {
                            return Err(Error::config(format!(
                                "column `{}`: explicit category list is empty",
                                col.name
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
