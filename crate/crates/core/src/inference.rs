//! Aspect and term selection from a trained model.
//!
//! Both selections use the same rule: compute a quantile of the candidate
//! weights, keep the values strictly above it, and retain at most N of those
//! by descending weight. Quantiles use linear interpolation between order
//! statistics (`h = q·(n−1)`), so thresholds depend on that definition.

use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedSentence, UNK_ID};
use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::model::{self, CmamParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub q_as: f64,
    pub n_as: usize,
    pub q_at: f64,
    pub n_at: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            q_as: 0.9,
            n_as: 2,
            q_at: 0.9,
            n_at: 3,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.q_as) || !(0.0..=1.0).contains(&self.q_at) {
            return Err(Error::Config("quantiles must lie in [0, 1]".into()));
        }
        if self.n_as < 1 || self.n_at < 1 {
            return Err(Error::Config("n_as and n_at must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Invalid("quantile of an empty sequence".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Invalid(format!("quantile level {q} outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Indices strictly above the `q` quantile, best `n` by descending value
/// (ties to the lower index).
fn select_above(values: &[f64], q: f64, n: usize) -> Result<Vec<usize>> {
    let threshold = quantile(values, q)?;
    let mut picked: Vec<usize> = (0..values.len()).filter(|&i| values[i] > threshold).collect();
    picked.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    picked.truncate(n);
    Ok(picked)
}

pub fn select_aspects(probs: &[f64], cfg: &InferenceConfig) -> Result<Vec<(usize, f64)>> {
    Ok(select_above(probs, cfg.q_as, cfg.n_as)?
        .into_iter()
        .map(|k| (k, probs[k]))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub pos: usize,
    pub token: String,
    pub weight: f64,
    /// Set when the token is outside the vocabulary; such terms always count as errors.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub oov: bool,
}

/// Term tokens for one attention column, returned in sentence order.
pub fn select_terms(column: &[f64], tokens: &[String], cfg: &InferenceConfig) -> Result<Vec<Term>> {
    if column.len() != tokens.len() {
        return Err(Error::Invalid("attention column and token list differ in length".into()));
    }
    let mut picked = select_above(column, cfg.q_at, cfg.n_at)?;
    picked.sort_unstable();
    Ok(picked
        .into_iter()
        .map(|pos| Term {
            pos,
            token: tokens[pos].clone(),
            weight: column[pos],
            oov: false,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectPrediction {
    pub id: usize,
    pub label: Option<String>,
    pub weight: f64,
    pub terms: Vec<Term>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Prediction {
    pub sentence: String,
    pub aspects: Vec<AspectPrediction>,
}

pub fn predict(
    sentence: &EncodedSentence,
    embeddings: &EmbeddingMatrix,
    params: &CmamParams,
    cfg: &InferenceConfig,
) -> Result<Prediction> {
    cfg.validate()?;
    if sentence.is_empty() {
        return Err(Error::Invalid("cannot predict on an empty sentence".into()));
    }
    let state = model::forward(sentence, embeddings, params)?;
    let mut aspects = Vec::new();
    for (id, weight) in select_aspects(&state.probs, cfg)? {
        let column: Vec<f64> = (0..sentence.len()).map(|i| state.attention.get(i, id)).collect();
        let mut terms = select_terms(&column, &sentence.raw_tokens, cfg)?;
        for t in &mut terms {
            t.oov = sentence.ids[t.pos] == UNK_ID;
        }
        aspects.push(AspectPrediction {
            id,
            label: None,
            weight,
            terms,
        });
    }
    Ok(Prediction {
        sentence: sentence.raw_tokens.join(" "),
        aspects,
    })
}
