//! Exported embedding tables on disk.
//!
//! Each table is one archive `<attribute>.emb` holding a `vectors` tensor
//! and, in its header, the row tokens and per-row metadata columns.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use txn_foundry::archive::{Archive, DType};
use txn_foundry::tensor::Matrix;

use crate::SvcError;

pub const TABLE_EXTENSION: &str = "emb";

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub attribute: String,
    /// Label of each row.
    pub tokens: Vec<String>,
    pub vectors: Matrix<f32>,
    /// Metadata key → one value per row.
    pub metadata: BTreeMap<String, Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    attribute: String,
    tokens: Vec<String>,
    metadata: BTreeMap<String, Vec<String>>,
}

impl Table {
    pub fn new(attribute: &str, tokens: Vec<String>, vectors: Matrix<f32>) -> Result<Self, SvcError> {
        if tokens.len() != vectors.rows {
            return Err(SvcError::BadRequest(format!(
                "{} tokens for {} rows",
                tokens.len(),
                vectors.rows
            )));
        }
        Ok(Table {
            attribute: attribute.to_string(),
            tokens,
            vectors,
            metadata: BTreeMap::new(),
        })
    }

    pub fn with_metadata(mut self, key: &str, values: Vec<String>) -> Result<Self, SvcError> {
        if values.len() != self.tokens.len() {
            return Err(SvcError::BadRequest(format!(
                "metadata `{key}` has {} values for {} rows",
                values.len(),
                self.tokens.len()
            )));
        }
        self.metadata.insert(key.to_string(), values);
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.vectors.rows
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.vectors.row(i).iter().map(|&v| v as f64).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<(), SvcError> {
        let header = Header {
            attribute: self.attribute.clone(),
            tokens: self.tokens.clone(),
            metadata: self.metadata.clone(),
        };
        let mut a = Archive::new(serde_json::to_value(header).map_err(txn_foundry::Error::from)?);
        a.push("vectors".to_string(), self.vectors.clone());
        a.write(&dir.join(format!("{}.{TABLE_EXTENSION}", self.attribute)), DType::F32)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, SvcError> {
        let a = Archive::read(path)?;
        let h: Header = serde_json::from_value(a.header.clone()).map_err(txn_foundry::Error::from)?;
        let vectors = a
            .get("vectors")
            .cloned()
            .ok_or_else(|| SvcError::BadRequest(format!("{} has no vectors", path.display())))?;
        let mut t = Table::new(&h.attribute, h.tokens, vectors)?;
        for (k, v) in h.metadata {
            t = t.with_metadata(&k, v)?;
        }
        Ok(t)
    }
}

/// Every table found in a directory, keyed by attribute.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Store {
    pub tables: BTreeMap<String, Table>,
}

impl Store {
    pub fn load(dir: &Path) -> Result<Self, SvcError> {
        let entries = std::fs::read_dir(dir).map_err(|e| txn_foundry::Error::io(dir, e))?;
        let mut paths: Vec<_> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == TABLE_EXTENSION))
            .collect();
        paths.sort();
        let mut tables = BTreeMap::new();
        for p in paths {
            let t = Table::read(&p)?;
            tables.insert(t.attribute.clone(), t);
        }
        Ok(Store { tables })
    }

    pub fn insert(&mut self, table: Table) {
        self.tables.insert(table.attribute.clone(), table);
    }
}
