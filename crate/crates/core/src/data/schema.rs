use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoricalFeature {
    pub name: String,
    pub cardinality: usize,
    /// Optional fixed value-to-code table (code = position). Without it,
    /// codes are assigned by first appearance during ingestion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<String>>,
}

/// Declares which columns are continuous, which are categorical, and which
/// one holds the class label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub continuous: Vec<String>,
    pub categorical: Vec<CategoricalFeature>,
    pub target: String,
    pub classes: usize,
}

impl FeatureSchema {
    pub fn new(
        continuous: Vec<String>,
        categorical: Vec<CategoricalFeature>,
        target: impl Into<String>,
        classes: usize,
    ) -> Result<Self> {
        let schema = Self {
            continuous,
            categorical,
            target: target.into(),
            classes,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.continuous.len() + self.categorical.len() == 0 {
            return Err(Error::Schema("schema declares no features".into()));
        }
        if self.classes < 2 {
            return Err(Error::Schema(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        let mut seen = HashSet::new();
        let names = self
            .continuous
            .iter()
            .chain(self.categorical.iter().map(|c| &c.name))
            .chain(std::iter::once(&self.target));
        for name in names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Schema(format!("duplicate column name `{name}`")));
            }
        }
        for c in &self.categorical {
            if c.cardinality < 2 {
                return Err(Error::Schema(format!(
                    "categorical `{}` has cardinality {} (< 2)",
                    c.name, c.cardinality
                )));
            }
            if let Some(values) = &c.values {
                if values.len() != c.cardinality {
                    return Err(Error::Schema(format!(
                        "categorical `{}` lists {} values for cardinality {}",
                        c.name,
                        values.len(),
                        c.cardinality
                    )));
                }
            }
        }
        Ok(())
    }

    /// J
    pub fn n_continuous(&self) -> usize {
        self.continuous.len()
    }

    /// M
    pub fn n_categorical(&self) -> usize {
        self.categorical.len()
    }

    /// Width of the flow's full vector: M dequantized codes then J continuous values.
    pub fn full_dim(&self) -> usize {
        self.n_categorical() + self.n_continuous()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.categorical.iter().map(|c| c.cardinality).collect()
    }

    /// Sum of cardinalities, the width of the one-hot block.
    pub fn one_hot_width(&self) -> usize {
        self.categorical.iter().map(|c| c.cardinality).sum()
    }

    /// Structural equality, ignoring optional value tables.
    pub fn same_layout(&self, other: &FeatureSchema) -> bool {
        self.continuous == other.continuous
            && self.target == other.target
            && self.classes == other.classes
            && self.categorical.len() == other.categorical.len()
            && self
                .categorical
                .iter()
                .zip(&other.categorical)
                .all(|(a, b)| a.name == b.name && a.cardinality == b.cardinality)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schema: FeatureSchema = serde_json::from_str(&text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn to_json_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        crate::persist::write_atomic(path.as_ref(), text.as_bytes())
    }
}
