use serde::{Deserialize, Serialize};

use super::{Caption, Vocabulary};

/// Half-open token range `[start, end)` tagged with the object-inventory
/// concept it mentions. The toy vocabulary makes every concept a single
/// token, but the range survives so real tokenizers can plug in later.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSpan {
    pub start: usize,
    pub end: usize,
    pub concept: usize,
}

impl ConceptSpan {
    pub fn positions(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// One span per occurrence of an object-inventory token, in caption
/// order. EOS is never part of a span; a caption without concept words
/// yields an empty list.
pub fn extract_concept_spans(caption: &Caption, vocab: &Vocabulary) -> Vec<ConceptSpan> {
    caption
        .body()
        .iter()
        .enumerate()
        .filter(|(_, &tok)| vocab.is_object(tok))
        .map(|(pos, &tok)| ConceptSpan {
            start: pos,
            end: pos + 1,
            concept: tok,
        })
        .collect()
}
