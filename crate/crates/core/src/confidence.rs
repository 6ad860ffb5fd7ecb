//! Algebraic token confidences (TLC-A): measures computed directly from a
//! step's logit distribution, plus span / sequence aggregation with the
//! EOS-exclusion rule.

use serde::{Deserialize, Serialize};

use crate::domain::{CandidateBeam, Caption, ConceptSpan, TokenDistribution};
use crate::error::{CoreError, Result};
use crate::Float;

/// Algebraic function of the logit distribution used as token confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum ConfidenceMeasure {
    /// Raw logit at the chosen token.
    Logit,
    /// Softmax value at the chosen token.
    Softmax,
    /// Negative entropy of the softmax distribution (index-independent).
    Entropy,
    /// Negated energy score `T·logsumexp(z/T)`; higher means more confident.
    Energy { temperature: f64 },
}

impl ConfidenceMeasure {
    pub fn energy() -> Self {
        ConfidenceMeasure::Energy { temperature: 1.0 }
    }
}

impl std::str::FromStr for ConfidenceMeasure {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logit" => Ok(ConfidenceMeasure::Logit),
            "softmax" => Ok(ConfidenceMeasure::Softmax),
            "entropy" => Ok(ConfidenceMeasure::Entropy),
            "energy" => Ok(ConfidenceMeasure::energy()),
            other => Err(CoreError::InvalidConfig(format!(
                "unknown confidence measure {other:?}"
            ))),
        }
    }
}

/// How token confidences are pooled over a span or sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMethod {
    Min,
    Mean,
}

impl std::str::FromStr for AggregationMethod {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min" => Ok(AggregationMethod::Min),
            "mean" => Ok(AggregationMethod::Mean),
            other => Err(CoreError::InvalidConfig(format!(
                "unknown aggregation method {other:?}"
            ))),
        }
    }
}

/// What to aggregate over: a concept span or the whole caption.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationSpan {
    Span(ConceptSpan),
    FullSequence,
}

/// Numerically stable softmax value at `idx`.
pub fn softmax_conf<T: Float>(dist: &TokenDistribution<T>, idx: usize) -> Result<T> {
    if idx >= dist.len() {
        return Err(CoreError::TokenOutOfRange {
            index: idx,
            size: dist.len(),
        });
    }
    Ok(dist.log_prob(idx).exp())
}

/// The raw logit at `idx`.
pub fn logit_conf<T: Float>(dist: &TokenDistribution<T>, idx: usize) -> Result<T> {
    if idx >= dist.len() {
        return Err(CoreError::TokenOutOfRange {
            index: idx,
            size: dist.len(),
        });
    }
    Ok(dist.logits()[idx])
}

/// Negative entropy `−H(softmax(z))`, always ≤ 0 and independent of the
/// chosen index.
pub fn entropy_conf<T: Float>(dist: &TokenDistribution<T>) -> T {
    let lse = dist.log_sum_exp();
    dist.logits()
        .iter()
        .map(|&z| {
            let logp = z - lse;
            logp.exp() * logp
        })
        .sum()
}

/// Negated energy score `T·logsumexp(z/T)`.
pub fn energy_conf<T: Float>(dist: &TokenDistribution<T>, temperature: T) -> Result<T> {
    if temperature <= T::zero() {
        return Err(CoreError::InvalidConfig(
            "energy temperature must be positive".into(),
        ));
    }
    let m = dist.max_logit();
    let sum: T = dist
        .logits()
        .iter()
        .map(|&z| ((z - m) / temperature).exp())
        .sum();
    Ok(m + temperature * sum.ln())
}

fn measure_at<T: Float>(
    measure: ConfidenceMeasure,
    dist: &TokenDistribution<T>,
    idx: usize,
) -> Result<T> {
    match measure {
        ConfidenceMeasure::Logit => logit_conf(dist, idx),
        ConfidenceMeasure::Softmax => softmax_conf(dist, idx),
        ConfidenceMeasure::Entropy => Ok(entropy_conf(dist)),
        ConfidenceMeasure::Energy { temperature } => {
            energy_conf(dist, T::from_f64_lossy(temperature))
        }
    }
}

/// Applies `measure` at each position's chosen token; the result has one
/// entry per caption position.
pub fn token_confidences<T: Float>(
    beam: &CandidateBeam<T>,
    measure: ConfidenceMeasure,
) -> Result<Vec<T>> {
    beam.caption
        .tokens()
        .iter()
        .zip(&beam.steps)
        .map(|(&tok, dist)| measure_at(measure, dist, tok))
        .collect()
}

/// Min or mean of the confidences over `span`. Full-sequence aggregation
/// always drops the EOS position; concept spans never contain it.
pub fn aggregate<T: Float>(
    confs: &[T],
    span: AggregationSpan,
    caption: &Caption,
    method: AggregationMethod,
) -> Result<T> {
    let positions: Vec<usize> = match span {
        AggregationSpan::Span(s) => {
            if s.end > caption.len() || s.is_empty() {
                return Err(CoreError::SpanOutOfBounds {
                    start: s.start,
                    end: s.end,
                    len: caption.len(),
                });
            }
            s.positions().collect()
        }
        AggregationSpan::FullSequence => (0..caption.body().len()).collect(),
    };
    if positions.is_empty() {
        return Err(CoreError::EmptyAggregationSpan);
    }
    let values = positions.iter().map(|&p| confs[p]);
    Ok(match method {
        AggregationMethod::Min => values.fold(T::infinity(), T::min),
        AggregationMethod::Mean => {
            values.sum::<T>() / T::from_usize(positions.len()).unwrap()
        }
    })
}

/// Full-sequence aggregate of a beam's token confidences, used for
/// whole-caption comparisons.
pub fn sequence_confidence<T: Float>(
    beam: &CandidateBeam<T>,
    measure: ConfidenceMeasure,
    method: AggregationMethod,
) -> Result<T> {
    let confs = token_confidences(beam, measure)?;
    aggregate(
        &confs,
        AggregationSpan::FullSequence,
        &beam.caption,
        method,
    )
}

/// Aggregated confidence for one concept span of a beam.
pub fn span_confidence<T: Float>(
    beam: &CandidateBeam<T>,
    span: ConceptSpan,
    measure: ConfidenceMeasure,
    method: AggregationMethod,
) -> Result<T> {
    let confs = token_confidences(beam, measure)?;
    aggregate(&confs, AggregationSpan::Span(span), &beam.caption, method)
}
