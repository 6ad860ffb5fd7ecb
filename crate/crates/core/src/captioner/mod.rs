//! Deterministic-under-seed synthetic world standing in for a finetuned
//! captioning model: scene sampling, a template grammar that supplies
//! reference captions, a noisy autoregressive model with a controllable
//! hallucination rate, and beam search over it.

mod beam_search;
mod grammar;
mod model;

pub use beam_search::beam_search;
pub use grammar::{
    canonical_caption, generate_references, generate_scene, GrammarConfig, PatternToken,
    SceneGenConfig, Template,
};
pub use model::{Captioner, StepTarget};

use serde::{Deserialize, Serialize};

use crate::domain::Vocabulary;
use crate::error::{CoreError, Result};

/// Knobs of the synthetic captioning model. Hallucination is injected at
/// the logit level: with probability `hallucination_prob` an object
/// emission's peak moves to a non-scene object with the (smaller)
/// corrupted margin, so confidence stays informative about correctness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaptionerParams {
    /// Probability that an object emission is corrupted.
    pub hallucination_prob: f64,
    /// Mean logit margin of the peak token on faithful emissions.
    pub faithful_margin: f64,
    /// Mean logit margin of the peak token on corrupted emissions.
    pub corrupted_margin: f64,
    /// Standard deviation of the additive Gaussian logit noise.
    pub margin_noise_sd: f64,
    /// Softmax temperature applied to all logits.
    pub temperature: f64,
}

impl Default for CaptionerParams {
    fn default() -> Self {
        CaptionerParams {
            hallucination_prob: 0.1,
            faithful_margin: 6.0,
            corrupted_margin: 2.5,
            margin_noise_sd: 1.0,
            temperature: 1.0,
        }
    }
}

impl CaptionerParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hallucination_prob) {
            return Err(CoreError::InvalidConfig(format!(
                "hallucination_prob {} outside [0, 1]",
                self.hallucination_prob
            )));
        }
        if !(self.faithful_margin > self.corrupted_margin && self.corrupted_margin > 0.0) {
            return Err(CoreError::InvalidConfig(
                "margins must satisfy faithful > corrupted > 0".into(),
            ));
        }
        if self.margin_noise_sd < 0.0 || !self.margin_noise_sd.is_finite() {
            return Err(CoreError::InvalidConfig(
                "margin_noise_sd must be a finite non-negative value".into(),
            ));
        }
        if self.temperature <= 0.0 {
            return Err(CoreError::InvalidConfig(
                "temperature must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// The default toy vocabulary: 8 object words, 6 attribute words with two
/// synonym pairs, and the structural tokens of the template grammar.
pub fn toy_vocabulary() -> Vocabulary {
    let tokens = [
        "<bos>", "<eos>", "<pad>", "a", "and", // structure
        "dog", "cat", "bird", "fish", "horse", "cow", "sheep", "frog", // objects
        "sleeping", "asleep", "large", "big", "spotted", "striped", // attributes
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    Vocabulary::new(
        tokens,
        0,
        1,
        2,
        5..=12,
        13..=18,
        vec![vec![13, 14], vec![15, 16]],
    )
    .expect("toy vocabulary is well-formed")
}

/// A minimal vocabulary for exhaustive-search oracles: the structural
/// token "a" plus `n_objects` object words and no attributes.
pub fn tiny_vocabulary(n_objects: usize) -> Vocabulary {
    let mut tokens: Vec<String> = ["<bos>", "<eos>", "<pad>", "a"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let names = ["dog", "cat", "bird", "fish"];
    for name in names.iter().take(n_objects) {
        tokens.push(name.to_string());
    }
    Vocabulary::new(tokens, 0, 1, 2, 4..4 + n_objects, [], vec![])
        .expect("tiny vocabulary is well-formed")
}
