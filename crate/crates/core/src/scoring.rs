//! Negative-label detection score and the energy generation loss.
//!
//! An image is scored by the ratio of its aggregated similarity to the
//! in-distribution labels over its aggregated similarity to all labels,
//! `S(x) = sim(x, Y) / (sim(x, Y) + sim(x, Y-))`, and classified InD when
//! `S(x) >= eta`. Aggregation defaults to exponentiated cosines so both
//! masses are strictly positive; raw cosine sums are kept behind
//! [`SimMode::RawCosine`] for comparison runs.
//!
//! The energy loss `m_out - tau * log sum_i exp(g_i / tau)` doubles as the
//! objective that steers image generation toward the decision boundary.

use ndarray::{Array1, Array2};

use crate::config::SimMode;
use crate::embedding::{EmbeddingVector, LabelSpace};
use crate::error::{Error, Result};

/// Classifier outputs for one image; length equals the label count C.
pub type LogitsVector = Array1<f64>;

/// Aggregated similarity masses for one input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityAggregate {
    pub ind_mass: f64,
    pub neg_mass: f64,
}

impl SimilarityAggregate {
    pub fn score(&self) -> f64 {
        self.ind_mass / (self.ind_mass + self.neg_mass)
    }
}

/// Detector output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Detection {
    InD,
    OOD,
}

/// One scored image.
#[derive(Debug, Clone, PartialEq)]
pub struct OODScoreRecord {
    pub score: f64,
    pub is_ind_prediction: bool,
    pub source_dataset: String,
}

impl OODScoreRecord {
    pub fn at_threshold(score: f64, eta: f64, source_dataset: impl Into<String>) -> Self {
        OODScoreRecord {
            score,
            is_ind_prediction: detect(score, eta) == Detection::InD,
            source_dataset: source_dataset.into(),
        }
    }
}

/// Text-feature bank consumed by the detector: one row per label, ordered
/// `[Y | Y-]`, every row unit norm.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelBank {
    pub ind: Array2<f64>,
    pub neg: Array2<f64>,
}

impl LabelBank {
    pub fn dim(&self) -> usize {
        self.ind.ncols()
    }

    /// Validate row counts against a label space and column agreement.
    pub fn check_against(&self, labels: &LabelSpace) -> Result<()> {
        if self.ind.nrows() != labels.num_ind() {
            return Err(Error::ShapeMismatch {
                expected: vec![labels.num_ind()],
                got: vec![self.ind.nrows()],
                context: "label bank InD rows",
            });
        }
        if self.neg.nrows() != labels.num_neg() {
            return Err(Error::ShapeMismatch {
                expected: vec![labels.num_neg()],
                got: vec![self.neg.nrows()],
                context: "label bank negative rows",
            });
        }
        if self.ind.ncols() != self.neg.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.ind.ncols(),
                got: self.neg.ncols(),
                context: "label bank columns",
            });
        }
        Ok(())
    }
}

/// Aggregate similarity of one embedding against a label list.
///
/// Exponential mode returns `sum_j exp(cos(x, label_j) / tau)`; raw mode
/// returns the plain cosine sum. Invariant under label permutation.
pub fn aggregate_similarity(
    x: &EmbeddingVector,
    labels: &[EmbeddingVector],
    tau: f64,
    mode: SimMode,
) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyLabelSet("labels"));
    }
    let mut total = 0.0;
    for label in labels {
        let c = x.cosine(label)?;
        total += match mode {
            SimMode::Exponential => (c / tau).exp(),
            SimMode::RawCosine => c,
        };
    }
    Ok(total)
}

/// Aggregate masses from precomputed cosine lists. The detection score is a
/// function of cosines only, which keeps oracle evaluation independent of
/// embedding plumbing.
pub fn masses_from_cosines(
    ind_cosines: &[f64],
    neg_cosines: &[f64],
    tau: f64,
    mode: SimMode,
) -> Result<SimilarityAggregate> {
    if ind_cosines.is_empty() {
        return Err(Error::EmptyLabelSet("ind"));
    }
    if neg_cosines.is_empty() {
        return Err(Error::EmptyLabelSet("neg"));
    }
    let agg = |cs: &[f64]| -> f64 {
        cs.iter()
            .map(|&c| match mode {
                SimMode::Exponential => (c / tau).exp(),
                SimMode::RawCosine => c,
            })
            .sum()
    };
    Ok(SimilarityAggregate {
        ind_mass: agg(ind_cosines),
        neg_mass: agg(neg_cosines),
    })
}

/// Detection score of one embedding against a full label bank.
pub fn ood_score(
    x: &EmbeddingVector,
    labels: &LabelSpace,
    bank: &LabelBank,
    tau: f64,
    mode: SimMode,
) -> Result<f64> {
    if labels.num_ind() == 0 {
        return Err(Error::EmptyLabelSet("ind"));
    }
    if labels.num_neg() == 0 {
        return Err(Error::EmptyLabelSet("neg"));
    }
    bank.check_against(labels)?;
    if bank.dim() != x.dim() {
        return Err(Error::DimensionMismatch {
            expected: bank.dim(),
            got: x.dim(),
            context: "score embedding",
        });
    }
    let ind_cos: Vec<f64> = bank.ind.rows().into_iter().map(|r| r.dot(x.values())).collect();
    let neg_cos: Vec<f64> = bank.neg.rows().into_iter().map(|r| r.dot(x.values())).collect();
    Ok(masses_from_cosines(&ind_cos, &neg_cos, tau, mode)?.score())
}

/// Threshold rule: InD exactly when `score >= eta`.
pub fn detect(score: f64, eta: f64) -> Detection {
    if score >= eta {
        Detection::InD
    } else {
        Detection::OOD
    }
}

/// Energy loss `m_out - tau * log sum_i exp(g_i / tau)`, computed with a
/// max shift so logits of magnitude 1e4 stay finite.
pub fn energy_loss(logits: &LogitsVector, m_out: f64, tau: f64) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::EmptyLogits);
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&g| ((g - max) / tau).exp()).sum();
    Ok(m_out - max - tau * sum.ln())
}

/// Gradient of [`energy_loss`] with respect to the logits:
/// `-softmax(logits / tau)`.
pub fn energy_loss_grad(logits: &LogitsVector, tau: f64) -> Result<Array1<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyLogits);
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Array1<f64> = logits.mapv(|g| ((g - max) / tau).exp());
    let sum = exps.sum();
    Ok(exps.mapv(|e| -e / sum))
}
