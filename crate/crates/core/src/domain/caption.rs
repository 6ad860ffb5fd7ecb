use serde::{Deserialize, Serialize};

use super::Vocabulary;
use crate::error::{CoreError, Result};

/// A token sequence `t_1..t_n`. Terminated captions end with EOS; EOS may
/// appear nowhere else, and BOS/PAD may not appear at all.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Caption {
    tokens: Vec<usize>,
    terminated: bool,
}

impl Caption {
    pub fn new(tokens: Vec<usize>, vocab: &Vocabulary) -> Result<Self> {
        if tokens.is_empty() {
            return Err(CoreError::InvalidCaption("empty token sequence".into()));
        }
        let last = tokens.len() - 1;
        for (pos, &tok) in tokens.iter().enumerate() {
            if tok >= vocab.len() {
                return Err(CoreError::TokenOutOfRange {
                    index: tok,
                    size: vocab.len(),
                });
            }
            if tok == vocab.bos() || tok == vocab.pad() {
                return Err(CoreError::InvalidCaption(format!(
                    "special token at position {pos}"
                )));
            }
            if tok == vocab.eos() && pos != last {
                return Err(CoreError::InvalidCaption(format!(
                    "interior EOS at position {pos}"
                )));
            }
        }
        let terminated = tokens[last] == vocab.eos();
        Ok(Caption { tokens, terminated })
    }

    /// Re-checks the structural invariants, used after deserialization.
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        let rebuilt = Caption::new(self.tokens.clone(), vocab)?;
        if rebuilt.terminated != self.terminated {
            return Err(CoreError::InvalidCaption(
                "terminated flag inconsistent with final token".into(),
            ));
        }
        Ok(())
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn terminated(&self) -> bool {
        self.terminated
    }

    /// Tokens with the trailing EOS stripped (all tokens if unterminated).
    pub fn body(&self) -> &[usize] {
        if self.terminated {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }
}

/// Reference captions paired with a scene, the supervision source for the
/// learned confidence estimator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceSet {
    pub scene_id: u64,
    references: Vec<Caption>,
}

impl ReferenceSet {
    pub fn new(scene_id: u64, references: Vec<Caption>) -> Result<Self> {
        if references.is_empty() {
            return Err(CoreError::EmptyInput("reference set".into()));
        }
        for r in &references {
            if !r.terminated() {
                return Err(CoreError::InvalidCaption(
                    "unterminated reference caption".into(),
                ));
            }
        }
        Ok(ReferenceSet {
            scene_id,
            references,
        })
    }

    pub fn references(&self) -> &[Caption] {
        &self.references
    }

    pub fn len(&self) -> usize {
        self.references.len()
    }

    pub fn is_empty(&self) -> bool {
        self.references.is_empty()
    }
}
