//! Category vocabularies and the category embedding registry.
//!
//! A category's identity is its string key. Index positions inside a
//! [`LabelSpace`] are local views and are never compared across spaces.

use std::collections::{BTreeMap, HashSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub key: String,
    pub name: String,
    pub semantic_vector: Vec<f64>,
}

/// Ordered list of unique category keys.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct LabelSpace {
    keys: Vec<String>,
}

impl<'de> Deserialize<'de> for LabelSpace {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            keys: Vec<String>,
        }
        let raw = Raw::deserialize(d)?;
        LabelSpace::new(raw.keys).map_err(serde::de::Error::custom)
    }
}

impl LabelSpace {
    pub fn new<S: Into<String>>(keys: impl IntoIterator<Item = S>) -> Result<Self> {
        let keys: Vec<String> = keys.into_iter().map(Into::into).collect();
        let mut seen = HashSet::with_capacity(keys.len());
        for k in &keys {
            if k.is_empty() {
                return Err(Error::Format("empty category key".into()));
            }
            if !seen.insert(k.as_str()) {
                return Err(Error::DuplicateCategory(k.clone()));
            }
        }
        Ok(LabelSpace { keys })
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn contains(&self, key: &str) -> bool {
        self.keys.iter().any(|k| k == key)
    }

    pub fn index_of(&self, key: &str) -> Option<usize> {
        self.keys.iter().position(|k| k == key)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.keys.iter().map(String::as_str)
    }
}

/// Deduplicated union keeping first-occurrence order.
pub fn union_spaces(spaces: &[LabelSpace]) -> LabelSpace {
    let mut seen = HashSet::new();
    let mut keys = Vec::new();
    for k in spaces.iter().flat_map(|s| s.keys.iter()) {
        if seen.insert(k.as_str()) {
            keys.push(k.clone());
        }
    }
    LabelSpace { keys }
}

/// Split a test vocabulary into categories seen in some training space and
/// categories seen in none. Both halves keep the test ordering.
pub fn novel_split(test: &LabelSpace, train_spaces: &[LabelSpace]) -> (LabelSpace, LabelSpace) {
    let seen: HashSet<&str> = train_spaces.iter().flat_map(|s| s.iter()).collect();
    let (base, novel): (Vec<String>, Vec<String>) =
        test.keys.iter().cloned().partition(|k| seen.contains(k.as_str()));
    (LabelSpace { keys: base }, LabelSpace { keys: novel })
}

/// Unit-norm embedding per registered category key.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl<'de> Deserialize<'de> for EmbeddingTable {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            dim: usize,
            vectors: BTreeMap<String, Vec<f64>>,
        }
        let raw = Raw::deserialize(d)?;
        let mut table = EmbeddingTable::new(raw.dim);
        for (k, v) in raw.vectors {
            table.insert(k, v).map_err(serde::de::Error::custom)?;
        }
        Ok(table)
    }
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn from_categories(dim: usize, categories: &[Category]) -> Result<Self> {
        let mut t = EmbeddingTable::new(dim);
        for c in categories {
            t.insert(c.key.clone(), c.semantic_vector.clone())?;
        }
        Ok(t)
    }

    /// Register a vector; it must already be unit-norm.
    pub fn insert(&mut self, key: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        let key = key.into();
        if key.is_empty() {
            return Err(Error::Format("empty category key".into()));
        }
        if vector.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                actual: vector.len(),
            });
        }
        let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::Format(format!(
                "embedding for `{key}` has norm {norm}, expected 1"
            )));
        }
        self.vectors.insert(key, vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, key: &str) -> Result<&[f64]> {
        self.vectors
            .get(key)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingEmbedding(key.to_string()))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.vectors.keys().map(String::as_str)
    }
}

/// Rows of the embedding table in label-space order, shape `|space| x dim`.
pub fn embedding_matrix(space: &LabelSpace, table: &EmbeddingTable) -> Result<Array2<f64>> {
    let mut m = Array2::zeros((space.len(), table.dim()));
    for (i, key) in space.iter().enumerate() {
        let v = table.get(key)?;
        m.row_mut(i).iter_mut().zip(v).for_each(|(dst, src)| *dst = *src);
    }
    Ok(m)
}
