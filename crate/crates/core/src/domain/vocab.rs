use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Token table plus the designated special tokens, the object-word
/// inventory (the concept set checked during re-ranking), the attribute
/// inventory, and synonym classes used only by the reference grammar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawVocabulary", into = "RawVocabulary")]
pub struct Vocabulary {
    tokens: Vec<String>,
    bos: usize,
    eos: usize,
    pad: usize,
    object_inventory: BTreeSet<usize>,
    attribute_inventory: BTreeSet<usize>,
    synonym_classes: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct RawVocabulary {
    tokens: Vec<String>,
    bos: usize,
    eos: usize,
    pad: usize,
    object_inventory: Vec<usize>,
    attribute_inventory: Vec<usize>,
    synonym_classes: Vec<Vec<usize>>,
}

impl From<Vocabulary> for RawVocabulary {
    fn from(v: Vocabulary) -> Self {
        RawVocabulary {
            tokens: v.tokens,
            bos: v.bos,
            eos: v.eos,
            pad: v.pad,
            object_inventory: v.object_inventory.into_iter().collect(),
            attribute_inventory: v.attribute_inventory.into_iter().collect(),
            synonym_classes: v.synonym_classes,
        }
    }
}

impl TryFrom<RawVocabulary> for Vocabulary {
    type Error = CoreError;

    fn try_from(raw: RawVocabulary) -> Result<Self> {
        Vocabulary::new(
            raw.tokens,
            raw.bos,
            raw.eos,
            raw.pad,
            raw.object_inventory,
            raw.attribute_inventory,
            raw.synonym_classes,
        )
    }
}

impl Vocabulary {
    pub fn new(
        tokens: Vec<String>,
        bos: usize,
        eos: usize,
        pad: usize,
        object_inventory: impl IntoIterator<Item = usize>,
        attribute_inventory: impl IntoIterator<Item = usize>,
        synonym_classes: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let n = tokens.len();
        let invalid = |msg: String| CoreError::InvalidVocabulary(msg);

        let mut seen = HashSet::new();
        for t in &tokens {
            if !seen.insert(t.as_str()) {
                return Err(invalid(format!("duplicate token string {t:?}")));
            }
        }
        for (name, idx) in [("bos", bos), ("eos", eos), ("pad", pad)] {
            if idx >= n {
                return Err(invalid(format!("{name} index {idx} out of range")));
            }
        }
        if bos == eos || bos == pad || eos == pad {
            return Err(invalid("bos/eos/pad indices must be distinct".into()));
        }

        let object_inventory: BTreeSet<usize> = object_inventory.into_iter().collect();
        let attribute_inventory: BTreeSet<usize> = attribute_inventory.into_iter().collect();
        for &idx in object_inventory.iter().chain(&attribute_inventory) {
            if idx >= n {
                return Err(invalid(format!("inventory index {idx} out of range")));
            }
            if idx == bos || idx == eos || idx == pad {
                return Err(invalid(format!("inventory index {idx} is a special token")));
            }
        }
        if !object_inventory.is_disjoint(&attribute_inventory) {
            return Err(invalid("object and attribute inventories overlap".into()));
        }

        let mut class_members = HashSet::new();
        for class in &synonym_classes {
            if class.is_empty() {
                return Err(invalid("empty synonym class".into()));
            }
            for &idx in class {
                if idx >= n {
                    return Err(invalid(format!("synonym index {idx} out of range")));
                }
                if !class_members.insert(idx) {
                    return Err(invalid(format!("token {idx} in two synonym classes")));
                }
            }
        }

        Ok(Vocabulary {
            tokens,
            bos,
            eos,
            pad,
            object_inventory,
            attribute_inventory,
            synonym_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bos(&self) -> usize {
        self.bos
    }

    pub fn eos(&self) -> usize {
        self.eos
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn token(&self, idx: usize) -> &str {
        &self.tokens[idx]
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    pub fn object_inventory(&self) -> &BTreeSet<usize> {
        &self.object_inventory
    }

    pub fn attribute_inventory(&self) -> &BTreeSet<usize> {
        &self.attribute_inventory
    }

    pub fn is_object(&self, idx: usize) -> bool {
        self.object_inventory.contains(&idx)
    }

    pub fn is_attribute(&self, idx: usize) -> bool {
        self.attribute_inventory.contains(&idx)
    }

    pub fn is_special(&self, idx: usize) -> bool {
        idx == self.bos || idx == self.eos || idx == self.pad
    }

    /// Synonym class containing `idx`, if it belongs to one.
    pub fn synonym_class_of(&self, idx: usize) -> Option<&[usize]> {
        self.synonym_classes
            .iter()
            .find(|class| class.contains(&idx))
            .map(|class| class.as_slice())
    }

    pub fn synonym_classes(&self) -> &[Vec<usize>] {
        &self.synonym_classes
    }

    /// Renders token indices as a space-joined string, mostly for logs.
    pub fn render(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .map(|&t| self.token(t))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn rejects_duplicate_tokens() {
        let err = Vocabulary::new(toks(&["a", "a", "b"]), 0, 1, 2, [], [], vec![]);
        assert!(err.is_err());
    }

    #[test]
    fn rejects_overlapping_inventories() {
        let err = Vocabulary::new(toks(&["<b>", "<e>", "<p>", "dog"]), 0, 1, 2, [3], [3], vec![]);
        assert!(err.is_err());
    }

    #[test]
    fn rejects_empty_synonym_class() {
        let err = Vocabulary::new(toks(&["<b>", "<e>", "<p>", "dog"]), 0, 1, 2, [3], [], vec![vec![]]);
        assert!(err.is_err());
    }

    #[test]
    fn json_round_trip_revalidates() {
        let vocab = Vocabulary::new(
            toks(&["<b>", "<e>", "<p>", "dog", "red"]),
            0,
            1,
            2,
            [3],
            [4],
            vec![vec![4]],
        )
        .unwrap();
        let json = serde_json::to_string(&vocab).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(vocab, back);

        let bad = json.replace("\"eos\":1", "\"eos\":0");
        assert!(serde_json::from_str::<Vocabulary>(&bad).is_err());
    }
}
