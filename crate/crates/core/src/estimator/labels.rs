//! Binary correctness labels built from reference captions: a predicted
//! token is correct when it matches the token at the same position of any
//! reference sharing the exact prefix.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::network::EstimatorInput;
use crate::captioner::Captioner;
use crate::domain::{ReferenceSet, Scene};
use crate::error::{CoreError, Result};

/// One labeled supervision example for the estimator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub scene_id: u64,
    pub reference_index: usize,
    /// One-based position k within the chosen reference.
    pub position: usize,
    pub prefix: Vec<usize>,
    pub predicted: usize,
    pub postfix: Vec<usize>,
    pub label: bool,
}

impl TrainingExample {
    /// The full token sequence the estimator sees: prefix, predicted
    /// token, reference postfix.
    pub fn tokens(&self) -> Vec<usize> {
        let mut tokens = Vec::with_capacity(self.prefix.len() + 1 + self.postfix.len());
        tokens.extend_from_slice(&self.prefix);
        tokens.push(self.predicted);
        tokens.extend_from_slice(&self.postfix);
        tokens
    }

    pub fn to_input(&self, scene: &Scene) -> EstimatorInput {
        EstimatorInput::from_scene(scene, self.tokens(), self.position - 1)
    }
}

/// Labels `predicted` at position `k` (one-based): correct iff some
/// reference whose first k−1 tokens equal `prefix` exactly has
/// `predicted` as its k-th token. Exact token identity, no synonym
/// credit. Errors when no reference shares the prefix.
pub fn make_label(
    refs: &ReferenceSet,
    prefix: &[usize],
    k: usize,
    predicted: usize,
) -> Result<bool> {
    if k < 1 {
        return Err(CoreError::InvalidConfig("position k must be ≥ 1".into()));
    }
    if prefix.len() != k - 1 {
        return Err(CoreError::InvalidConfig(format!(
            "prefix of length {} for position k = {k}",
            prefix.len()
        )));
    }
    let mut prefix_found = false;
    let mut matched = false;
    for reference in refs.references() {
        let tokens = reference.tokens();
        if tokens.len() < k || tokens[..k - 1] != *prefix {
            continue;
        }
        prefix_found = true;
        if tokens[k - 1] == predicted {
            matched = true;
        }
    }
    if !prefix_found {
        return Err(CoreError::NoMatchingPrefix { k });
    }
    Ok(matched)
}

/// Samples one training example: a uniform reference, a uniform position
/// k in 1..=n, the captioner's prediction after the reference prefix, and
/// its label under `make_label`.
pub fn sample_training_example(
    scene: &Scene,
    refs: &ReferenceSet,
    captioner: &Captioner,
    rng: &mut impl Rng,
) -> Result<TrainingExample> {
    if refs.is_empty() {
        return Err(CoreError::EmptyInput("reference set".into()));
    }
    let reference_index = rng.gen_range(0..refs.len());
    let reference = &refs.references()[reference_index];
    let n = reference.len();
    let k = rng.gen_range(1..=n);
    let prefix = reference.tokens()[..k - 1].to_vec();
    let predicted = captioner.predict_next(scene, &prefix)?;
    let label = make_label(refs, &prefix, k, predicted)?;
    let postfix = reference.tokens()[k..].to_vec();
    Ok(TrainingExample {
        scene_id: scene.scene_id,
        reference_index,
        position: k,
        prefix,
        predicted,
        postfix,
        label,
    })
}
