use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::Vocabulary;
use crate::error::{CoreError, Result};

/// One object in a scene, optionally carrying an attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneInstance {
    pub object: usize,
    pub attribute: Option<usize>,
}

/// Symbolic stand-in for an image: the set of object instances the
/// captioner is supposed to describe, and the ground truth against which
/// hallucinations are scored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: u64,
    instances: Vec<SceneInstance>,
}

impl Scene {
    pub fn new(
        scene_id: u64,
        instances: Vec<SceneInstance>,
        vocab: &Vocabulary,
        max_instances: usize,
    ) -> Result<Self> {
        if instances.is_empty() {
            return Err(CoreError::InvalidScene("scene has no instances".into()));
        }
        if instances.len() > max_instances {
            return Err(CoreError::InvalidScene(format!(
                "{} instances exceeds limit {max_instances}",
                instances.len()
            )));
        }
        for inst in &instances {
            if !vocab.is_object(inst.object) {
                return Err(CoreError::InvalidScene(format!(
                    "token {} is not in the object inventory",
                    inst.object
                )));
            }
            if let Some(attr) = inst.attribute {
                if !vocab.is_attribute(attr) {
                    return Err(CoreError::InvalidScene(format!(
                        "token {attr} is not in the attribute inventory"
                    )));
                }
            }
        }
        Ok(Scene {
            scene_id,
            instances,
        })
    }

    pub fn instances(&self) -> &[SceneInstance] {
        &self.instances
    }

    /// Set of object tokens present in the scene.
    pub fn object_set(&self) -> BTreeSet<usize> {
        self.instances.iter().map(|i| i.object).collect()
    }

    pub fn contains_object(&self, token: usize) -> bool {
        self.instances.iter().any(|i| i.object == token)
    }
}
