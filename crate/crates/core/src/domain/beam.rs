use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Caption, Vocabulary};
use crate::error::{CoreError, Result};
use crate::Float;

/// Absolute tolerance for the cumulative log-likelihood invariant.
pub const LOG_LIKELIHOOD_TOL: f64 = 1e-9;

/// Logit vector over the vocabulary at one decoding step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent, bound(serialize = "T: Float", deserialize = "T: Float"))]
pub struct TokenDistribution<T: Float> {
    logits: Vec<T>,
}

impl<T: Float> TokenDistribution<T> {
    pub fn new(logits: Vec<T>, vocab_len: usize) -> Result<Self> {
        if logits.len() != vocab_len {
            return Err(CoreError::ShapeMismatch(format!(
                "distribution of length {} for vocabulary of size {vocab_len}",
                logits.len()
            )));
        }
        if let Some(pos) = logits.iter().position(|z| !z.is_finite()) {
            return Err(CoreError::InvalidConfig(format!(
                "non-finite logit at index {pos}"
            )));
        }
        Ok(TokenDistribution { logits })
    }

    pub fn logits(&self) -> &[T] {
        &self.logits
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn max_logit(&self) -> T {
        self.logits
            .iter()
            .copied()
            .fold(T::neg_infinity(), T::max)
    }

    /// `log Σ exp(z_v)`, max-subtracted for stability.
    pub fn log_sum_exp(&self) -> T {
        let m = self.max_logit();
        let sum: T = self.logits.iter().map(|&z| (z - m).exp()).sum();
        m + sum.ln()
    }

    /// Log-softmax value at `idx`.
    pub fn log_prob(&self, idx: usize) -> T {
        self.logits[idx] - self.log_sum_exp()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &z) in self.logits.iter().enumerate() {
            if z > self.logits[best] {
                best = i;
            }
        }
        best
    }
}

/// A decoded candidate: the caption, the per-step logit distributions it
/// was read off, and the cumulative log-likelihood used for ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Float", deserialize = "T: Float"))]
pub struct CandidateBeam<T: Float> {
    pub caption: Caption,
    pub steps: Vec<TokenDistribution<T>>,
    pub log_likelihood: T,
}

impl<T: Float> CandidateBeam<T> {
    /// Builds a beam from its steps, computing the cumulative
    /// log-likelihood of the caption tokens.
    pub fn from_steps(caption: Caption, steps: Vec<TokenDistribution<T>>) -> Self {
        let log_likelihood = caption
            .tokens()
            .iter()
            .zip(&steps)
            .map(|(&tok, dist)| dist.log_prob(tok))
            .sum();
        CandidateBeam {
            caption,
            steps,
            log_likelihood,
        }
    }

    pub fn len(&self) -> usize {
        self.caption.len()
    }

    pub fn is_empty(&self) -> bool {
        self.caption.is_empty()
    }
}

/// First rule a malformed beam breaks.
#[derive(Debug, Clone, PartialEq)]
pub enum BeamViolation {
    EmptyCaption,
    StepCountMismatch { steps: usize, tokens: usize },
    TokenOutOfRange { position: usize, token: usize },
    SpecialTokenInside { position: usize, token: usize },
    InteriorEos { position: usize },
    TerminatedFlagMismatch,
    WrongDistributionLength { position: usize, len: usize },
    NonFiniteLogit { position: usize },
    LogLikelihoodMismatch { position: usize, mismatch: f64 },
}

impl fmt::Display for BeamViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BeamViolation::EmptyCaption => write!(f, "caption is empty"),
            BeamViolation::StepCountMismatch { steps, tokens } => {
                write!(f, "{steps} steps for {tokens} tokens")
            }
            BeamViolation::TokenOutOfRange { position, token } => {
                write!(f, "token {token} out of range at position {position}")
            }
            BeamViolation::SpecialTokenInside { position, token } => {
                write!(f, "BOS/PAD token {token} at position {position}")
            }
            BeamViolation::InteriorEos { position } => {
                write!(f, "interior EOS at position {position}")
            }
            BeamViolation::TerminatedFlagMismatch => {
                write!(f, "terminated flag inconsistent with final token")
            }
            BeamViolation::WrongDistributionLength { position, len } => {
                write!(f, "distribution of length {len} at position {position}")
            }
            BeamViolation::NonFiniteLogit { position } => {
                write!(f, "non-finite logit at position {position}")
            }
            BeamViolation::LogLikelihoodMismatch { position, mismatch } => {
                write!(
                    f,
                    "log-likelihood off by {mismatch:.6e} after position {position}"
                )
            }
        }
    }
}

/// Checks the structural caption invariants and the cumulative
/// log-likelihood invariant, returning the first violation found.
pub fn validate_beam<T: Float>(
    beam: &CandidateBeam<T>,
    vocab: &Vocabulary,
) -> std::result::Result<(), BeamViolation> {
    let tokens = beam.caption.tokens();
    if tokens.is_empty() {
        return Err(BeamViolation::EmptyCaption);
    }
    if beam.steps.len() != tokens.len() {
        return Err(BeamViolation::StepCountMismatch {
            steps: beam.steps.len(),
            tokens: tokens.len(),
        });
    }
    let last = tokens.len() - 1;
    for (pos, &tok) in tokens.iter().enumerate() {
        if tok >= vocab.len() {
            return Err(BeamViolation::TokenOutOfRange {
                position: pos,
                token: tok,
            });
        }
        if tok == vocab.bos() || tok == vocab.pad() {
            return Err(BeamViolation::SpecialTokenInside {
                position: pos,
                token: tok,
            });
        }
        if tok == vocab.eos() && pos != last {
            return Err(BeamViolation::InteriorEos { position: pos });
        }
    }
    if beam.caption.terminated() != (tokens[last] == vocab.eos()) {
        return Err(BeamViolation::TerminatedFlagMismatch);
    }
    for (pos, dist) in beam.steps.iter().enumerate() {
        if dist.len() != vocab.len() {
            return Err(BeamViolation::WrongDistributionLength {
                position: pos,
                len: dist.len(),
            });
        }
        if dist.logits().iter().any(|z| !z.is_finite()) {
            return Err(BeamViolation::NonFiniteLogit { position: pos });
        }
    }
    let expected: T = tokens
        .iter()
        .zip(&beam.steps)
        .map(|(&tok, dist)| dist.log_prob(tok))
        .sum();
    let mismatch = (beam.log_likelihood - expected).abs();
    if mismatch > T::from_f64_lossy(LOG_LIKELIHOOD_TOL) {
        return Err(BeamViolation::LogLikelihoodMismatch {
            position: last,
            mismatch: mismatch.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(())
}
