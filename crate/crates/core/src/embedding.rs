//! Embedding and label-space domain types.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Where a feature vector came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingSource {
    ImageEncoder,
    TextEncoder,
    DiffusionTextEncoder,
}

/// A unit-norm feature vector. Cosine similarity between two of these is
/// just a dot product.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Array1<f64>,
    source: EmbeddingSource,
}

impl EmbeddingVector {
    /// Normalize `values` to unit length. A zero vector maps to the first
    /// basis vector so downstream cosines stay finite.
    pub fn normalized(values: Array1<f64>, source: EmbeddingSource) -> Self {
        let norm = values.dot(&values).sqrt();
        let values = if norm > 0.0 {
            values / norm
        } else {
            let mut e = Array1::zeros(values.len());
            e[0] = 1.0;
            e
        };
        EmbeddingVector { values, source }
    }

    /// Wrap values that are already unit norm (within tolerance).
    pub fn from_unit(values: Array1<f64>, source: EmbeddingSource) -> Result<Self> {
        let norm = values.dot(&values).sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::ShapeMismatch {
                expected: vec![1],
                got: vec![0],
                context: "embedding is not unit norm",
            });
        }
        Ok(EmbeddingVector { values, source })
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn source(&self) -> EmbeddingSource {
        self.source
    }

    /// Cosine similarity; both sides are unit norm by construction.
    pub fn cosine(&self, other: &EmbeddingVector) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
                context: "cosine similarity",
            });
        }
        Ok(self.values.dot(&other.values))
    }
}

/// In-distribution labels, negative labels, and the learnable subset mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub ind_labels: Vec<String>,
    pub neg_labels: Vec<String>,
    /// True where the negative label's text feature is trainable.
    pub learnable_mask: Vec<bool>,
}

impl LabelSpace {
    /// Build with an all-frozen mask.
    pub fn new(ind_labels: Vec<String>, neg_labels: Vec<String>) -> Result<Self> {
        let mask = vec![false; neg_labels.len()];
        let space = LabelSpace {
            ind_labels,
            neg_labels,
            learnable_mask: mask,
        };
        space.validate()?;
        Ok(space)
    }

    /// Check disjointness (case-folded) and mask length.
    pub fn validate(&self) -> Result<()> {
        let fold = |s: &String| s.to_lowercase();
        let ind: std::collections::BTreeSet<String> = self.ind_labels.iter().map(fold).collect();
        for neg in &self.neg_labels {
            if ind.contains(&neg.to_lowercase()) {
                return Err(Error::DuplicateLexiconEntry(neg.clone()));
            }
        }
        if self.learnable_mask.len() != self.neg_labels.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.neg_labels.len()],
                got: vec![self.learnable_mask.len()],
                context: "learnable mask length",
            });
        }
        Ok(())
    }

    /// Number of in-distribution categories C.
    pub fn num_ind(&self) -> usize {
        self.ind_labels.len()
    }

    /// Number of negative labels M.
    pub fn num_neg(&self) -> usize {
        self.neg_labels.len()
    }

    /// Number of learnable negative labels M'.
    pub fn num_learnable(&self) -> usize {
        self.learnable_mask.iter().filter(|&&b| b).count()
    }

    pub fn learnable_indices(&self) -> Vec<usize> {
        self.learnable_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn neg_index(&self, label: &str) -> Option<usize> {
        self.neg_labels.iter().position(|l| l == label)
    }

    pub fn from_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let space: LabelSpace = serde_json::from_str(&text)?;
        space.validate()?;
        Ok(space)
    }

    pub fn to_path(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
