//! Token distributions over a fixed vocabulary.
//!
//! Distributions are stored as natural-log weights so that very small
//! probabilities keep their range. Fusion arithmetic is done in probability
//! space through [`Weights`], which may carry negative entries until they
//! are clamped.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistError {
    #[error("every entry of the distribution is masked")]
    AllMasked,
    #[error("vocabulary size mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("distribution must have at least one entry")]
    Empty,
    #[error("invalid log-weight {value} at index {index}")]
    InvalidEntry { index: usize, value: f64 },
    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
}

/// Index into a vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<u32> for TokenId {
    fn from(id: u32) -> Self {
        TokenId(id)
    }
}

impl std::fmt::Display for TokenId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

/// A distribution over `vocab_size` tokens, stored as log-weights.
///
/// Entries are finite or negative infinity (masked). At least one entry is
/// finite. The `normalized` flag records whether the weights were produced by
/// [`TokenDistribution::normalize`], which makes normalization idempotent bit
/// for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    log_weights: Vec<f64>,
    normalized: bool,
}

impl TokenDistribution {
    /// Builds a distribution from raw log-weights. The result is not marked
    /// normalized even if the weights happen to sum to one.
    pub fn from_log_weights(log_weights: Vec<f64>) -> Result<Self, DistError> {
        if log_weights.is_empty() {
            return Err(DistError::Empty);
        }
        for (index, &value) in log_weights.iter().enumerate() {
            if value.is_nan() || value == f64::INFINITY {
                return Err(DistError::InvalidEntry { index, value });
            }
        }
        if log_weights.iter().all(|w| *w == f64::NEG_INFINITY) {
            return Err(DistError::AllMasked);
        }
        Ok(Self {
            log_weights,
            normalized: false,
        })
    }

    /// Builds a distribution from non-negative probability-space weights.
    /// Zero weights become masked entries.
    pub fn from_probs(probs: &[f64]) -> Result<Self, DistError> {
        let mut logs = Vec::with_capacity(probs.len());
        for (index, &p) in probs.iter().enumerate() {
            if p.is_nan() || p < 0.0 || p.is_infinite() {
                return Err(DistError::InvalidEntry { index, value: p });
            }
            logs.push(p.ln());
        }
        Self::from_log_weights(logs)
    }

    pub fn vocab_size(&self) -> usize {
        self.log_weights.len()
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn is_masked(&self, id: TokenId) -> bool {
        self.log_weights[id.index()] == f64::NEG_INFINITY
    }

    /// Probability-space weights, `exp` of every entry.
    pub fn probs(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    pub fn prob(&self, id: TokenId) -> f64 {
        self.log_weights[id.index()].exp()
    }

    /// Log-sum-exp normalization. Masked entries stay masked.
    pub fn normalize(&self) -> Result<Self, DistError> {
        if self.normalized {
            return Ok(self.clone());
        }
        let max = self
            .log_weights
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(DistError::AllMasked);
        }
        let sum: f64 = self.log_weights.iter().map(|w| (w - max).exp()).sum();
        let shift = max + sum.ln();
        let log_weights = self
            .log_weights
            .iter()
            .map(|&w| if w == f64::NEG_INFINITY { w } else { w - shift })
            .collect();
        Ok(Self {
            log_weights,
            normalized: true,
        })
    }

    /// Lowest token id among the entries attaining the maximum.
    pub fn argmax(&self) -> Result<TokenId, DistError> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &w) in self.log_weights.iter().enumerate() {
            if w == f64::NEG_INFINITY {
                continue;
            }
            match best {
                Some((_, b)) if w <= b => {}
                _ => best = Some((i, w)),
            }
        }
        best.map(|(i, _)| TokenId(i as u32))
            .ok_or(DistError::AllMasked)
    }

    /// The `k` most probable entries as `(id, probability)`, ordered by
    /// descending probability then ascending id. Masked entries are skipped.
    pub fn top_k(&self, k: usize) -> Vec<(TokenId, f64)> {
        let mut entries: Vec<(usize, f64)> = self
            .log_weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != f64::NEG_INFINITY)
            .map(|(i, w)| (i, *w))
            .collect();
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        entries
            .into_iter()
            .take(k)
            .map(|(i, w)| (TokenId(i as u32), w.exp()))
            .collect()
    }

    pub fn check_token(&self, id: TokenId) -> Result<(), DistError> {
        if id.index() < self.vocab_size() {
            Ok(())
        } else {
            Err(DistError::TokenOutOfRange {
                id: id.0,
                vocab_size: self.vocab_size(),
            })
        }
    }
}

/// Probability-space weights produced by a linear combination of
/// distributions. Entries may be negative until [`Weights::clamp_negative`]
/// runs; masked entries are excluded from every later step.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    values: Vec<f64>,
    masked: Vec<bool>,
}

impl Weights {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn masked(&self) -> &[bool] {
        &self.masked
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn clamp_negative(mut self) -> Self {
        for v in &mut self.values {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self
    }

    /// Marks every entry where `mask[i]` is false as excluded.
    pub fn restrict(mut self, allowed: &[bool]) -> Result<Self, DistError> {
        if allowed.len() != self.values.len() {
            return Err(DistError::ShapeMismatch {
                expected: self.values.len(),
                actual: allowed.len(),
            });
        }
        for (m, ok) in self.masked.iter_mut().zip(allowed) {
            if !ok {
                *m = true;
            }
        }
        Ok(self)
    }

    /// Clamps, takes logs and normalizes. Non-positive and masked entries
    /// become negative infinity.
    pub fn into_distribution(self) -> Result<TokenDistribution, DistError> {
        let logs: Vec<f64> = self
            .values
            .iter()
            .zip(&self.masked)
            .map(|(&v, &m)| if m || v <= 0.0 { f64::NEG_INFINITY } else { v.ln() })
            .collect();
        if logs.iter().all(|w| *w == f64::NEG_INFINITY) {
            return Err(DistError::AllMasked);
        }
        TokenDistribution::from_log_weights(logs)?.normalize()
    }
}

/// Entry-wise `Σ cᵢ · exp(dᵢ)` in probability space. Entries masked in the
/// first term (the mask source) stay masked in the result.
pub fn linear_combine(terms: &[(f64, &TokenDistribution)]) -> Result<Weights, DistError> {
    let (_, source) = terms.first().ok_or(DistError::Empty)?;
    let mut w = combine_unmasked(terms)?;
    w.masked = source
        .log_weights()
        .iter()
        .map(|w| *w == f64::NEG_INFINITY)
        .collect();
    Ok(w)
}

/// Like [`linear_combine`] but with no mask source: a zero-probability entry
/// in any term is just a zero. For combining already-fused distributions,
/// where the caller supplies the mask.
pub fn combine_unmasked(terms: &[(f64, &TokenDistribution)]) -> Result<Weights, DistError> {
    let (_, first) = terms.first().ok_or(DistError::Empty)?;
    let n = first.vocab_size();
    let mut values = vec![0.0; n];
    for (coef, d) in terms {
        if d.vocab_size() != n {
            return Err(DistError::ShapeMismatch {
                expected: n,
                actual: d.vocab_size(),
            });
        }
        if *coef == 0.0 {
            continue;
        }
        for (v, w) in values.iter_mut().zip(d.log_weights()) {
            *v += coef * w.exp();
        }
    }
    Ok(Weights {
        values,
        masked: vec![false; n],
    })
}
