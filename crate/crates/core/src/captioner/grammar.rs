use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Caption, ReferenceSet, Scene, SceneInstance, Vocabulary};
use crate::error::{CoreError, Result};
use crate::stream::stream_seed;

/// One element of an instance phrase pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatternToken {
    /// Fixed token, e.g. the article "a".
    Literal(usize),
    /// The instance's object word.
    ObjectSlot,
    /// The instance's attribute word, skipped when the instance has none.
    AttributeSlot,
}

/// Caption pattern: one phrase per scene instance, joined by a separator,
/// always terminated with EOS.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub instance_phrase: Vec<PatternToken>,
    pub separator: Vec<PatternToken>,
}

impl Template {
    fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if !self
            .instance_phrase
            .iter()
            .any(|p| matches!(p, PatternToken::ObjectSlot))
        {
            return Err(CoreError::InvalidConfig(
                "template phrase has no object slot".into(),
            ));
        }
        for part in self.instance_phrase.iter().chain(&self.separator) {
            if let PatternToken::Literal(tok) = part {
                if *tok >= vocab.len() {
                    return Err(CoreError::TokenOutOfRange {
                        index: *tok,
                        size: vocab.len(),
                    });
                }
                if vocab.is_special(*tok) {
                    return Err(CoreError::InvalidConfig(format!(
                        "template literal {tok} is a special token"
                    )));
                }
            }
        }
        if self
            .separator
            .iter()
            .any(|p| !matches!(p, PatternToken::Literal(_)))
        {
            return Err(CoreError::InvalidConfig(
                "separator may only contain literals".into(),
            ));
        }
        Ok(())
    }

    fn expand(&self, instance: &SceneInstance, out: &mut Vec<usize>) {
        for part in &self.instance_phrase {
            match part {
                PatternToken::Literal(tok) => out.push(*tok),
                PatternToken::ObjectSlot => out.push(instance.object),
                PatternToken::AttributeSlot => {
                    if let Some(attr) = instance.attribute {
                        out.push(attr);
                    }
                }
            }
        }
    }
}

/// Reference-grammar settings. The first template defines the canonical
/// caption the synthetic model targets; any further templates only add
/// variety to generated references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarConfig {
    pub templates: Vec<Template>,
    /// Substitute attribute words with synonym-class members when
    /// generating references.
    pub use_synonyms: bool,
    pub max_references: usize,
}

impl GrammarConfig {
    /// The default grammar over `vocab`: phrases of the form
    /// "a <object> [<attribute>]" joined by "and".
    pub fn standard(vocab: &Vocabulary) -> Self {
        let a = vocab.index_of("a").expect("vocabulary has token \"a\"");
        let separator = vocab
            .index_of("and")
            .map(|and| vec![PatternToken::Literal(and)])
            .unwrap_or_default();
        GrammarConfig {
            templates: vec![Template {
                instance_phrase: vec![
                    PatternToken::Literal(a),
                    PatternToken::ObjectSlot,
                    PatternToken::AttributeSlot,
                ],
                separator,
            }],
            use_synonyms: true,
            max_references: 16,
        }
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if self.templates.is_empty() {
            return Err(CoreError::InvalidConfig("no templates".into()));
        }
        if self.max_references == 0 {
            return Err(CoreError::InvalidConfig(
                "max_references must be at least 1".into(),
            ));
        }
        for t in &self.templates {
            t.validate(vocab)?;
        }
        Ok(())
    }

    pub fn canonical_template(&self) -> &Template {
        &self.templates[0]
    }
}

/// Scene sampling settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneGenConfig {
    pub max_instances: usize,
    /// Probability that an instance carries an attribute.
    pub attribute_prob: f64,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        SceneGenConfig {
            max_instances: 3,
            attribute_prob: 0.75,
        }
    }
}

impl SceneGenConfig {
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if self.max_instances == 0 {
            return Err(CoreError::InvalidConfig(
                "max_instances must be at least 1".into(),
            ));
        }
        if vocab.object_inventory().is_empty() {
            return Err(CoreError::InvalidConfig(
                "vocabulary has an empty object inventory".into(),
            ));
        }
        if self.max_instances > vocab.object_inventory().len() {
            return Err(CoreError::InvalidConfig(format!(
                "max_instances {} exceeds object inventory size {}",
                self.max_instances,
                vocab.object_inventory().len()
            )));
        }
        if !(0.0..=1.0).contains(&self.attribute_prob) {
            return Err(CoreError::InvalidConfig(
                "attribute_prob outside [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Samples a scene: 1..=max_instances instances with object categories
/// drawn uniformly without replacement. Deterministic given the seed.
pub fn generate_scene(
    seed: u64,
    scene_id: u64,
    vocab: &Vocabulary,
    config: &SceneGenConfig,
) -> Result<Scene> {
    config.validate(vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, scene_id]));
    let count = rng.gen_range(1..=config.max_instances);

    let mut objects: Vec<usize> = vocab.object_inventory().iter().copied().collect();
    let (chosen, _) = objects.partial_shuffle(&mut rng, count);

    let attributes: Vec<usize> = vocab.attribute_inventory().iter().copied().collect();
    let instances = chosen
        .iter()
        .map(|&object| {
            let attribute = if !attributes.is_empty() && rng.gen::<f64>() < config.attribute_prob {
                Some(*attributes.choose(&mut rng).expect("non-empty"))
            } else {
                None
            };
            SceneInstance { object, attribute }
        })
        .collect();
    Scene::new(scene_id, instances, vocab, config.max_instances)
}

/// The grammar-correct description of a scene under the canonical
/// template: every instance in order, terminated with EOS.
pub fn canonical_caption(scene: &Scene, vocab: &Vocabulary, grammar: &GrammarConfig) -> Vec<usize> {
    let template = grammar.canonical_template();
    let mut tokens = Vec::new();
    for (i, instance) in scene.instances().iter().enumerate() {
        if i > 0 {
            for part in &template.separator {
                if let PatternToken::Literal(tok) = part {
                    tokens.push(*tok);
                }
            }
        }
        template.expand(instance, &mut tokens);
    }
    tokens.push(vocab.eos());
    tokens
}

/// Generates `count` reference captions for a scene. References mention
/// exactly the scene's objects; attribute slots may swap in synonym-class
/// members, which makes references share a prefix and diverge at one
/// position.
pub fn generate_references(
    scene: &Scene,
    seed: u64,
    grammar: &GrammarConfig,
    count: usize,
    vocab: &Vocabulary,
) -> Result<ReferenceSet> {
    grammar.validate(vocab)?;
    if count == 0 || count > grammar.max_references {
        return Err(CoreError::InvalidConfig(format!(
            "reference count {count} outside 1..={}",
            grammar.max_references
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, scene.scene_id, 0x5ef5]));
    let mut references = Vec::with_capacity(count);
    for _ in 0..count {
        let template = grammar
            .templates
            .choose(&mut rng)
            .expect("validated non-empty");
        let mut tokens = Vec::new();
        for (i, instance) in scene.instances().iter().enumerate() {
            if i > 0 {
                for part in &template.separator {
                    if let PatternToken::Literal(tok) = part {
                        tokens.push(*tok);
                    }
                }
            }
            let mut phrase_instance = *instance;
            if grammar.use_synonyms {
                if let Some(attr) = instance.attribute {
                    if let Some(class) = vocab.synonym_class_of(attr) {
                        phrase_instance.attribute = Some(*class.choose(&mut rng).expect("≥ 1"));
                    }
                }
            }
            template.expand(&phrase_instance, &mut tokens);
        }
        tokens.push(vocab.eos());
        references.push(Caption::new(tokens, vocab)?);
    }
    ReferenceSet::new(scene.scene_id, references)
}
