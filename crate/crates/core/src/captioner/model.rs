use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{CaptionerParams, GrammarConfig};
use crate::domain::{CandidateBeam, Caption, Scene, TokenDistribution, Vocabulary};
use crate::error::{CoreError, Result};
use crate::stream::{hash_tokens, stream_seed};
use crate::Float;

/// Margins are clamped above this floor so the intended peak always wins
/// the argmax, keeping the hallucination oracle exact.
const MIN_MARGIN: f64 = 1e-3;

/// What the model aimed at during one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepTarget {
    /// Peak token of the emitted distribution.
    pub token: usize,
    /// Whether this emission was a corrupted object slot.
    pub corrupted: bool,
}

/// The synthetic autoregressive captioning model. Targets the canonical
/// caption of a scene position by position; every step's distribution is
/// a pure function of (seed, scene, prefix).
#[derive(Debug, Clone)]
pub struct Captioner {
    vocab: Vocabulary,
    grammar: GrammarConfig,
    params: CaptionerParams,
    seed: u64,
}

impl Captioner {
    pub fn new(
        vocab: Vocabulary,
        grammar: GrammarConfig,
        params: CaptionerParams,
        seed: u64,
    ) -> Result<Self> {
        params.validate()?;
        grammar.validate(&vocab)?;
        Ok(Captioner {
            vocab,
            grammar,
            params,
            seed,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn grammar(&self) -> &GrammarConfig {
        &self.grammar
    }

    pub fn params(&self) -> &CaptionerParams {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn check_prefix(&self, prefix: &[usize]) -> Result<()> {
        for (pos, &tok) in prefix.iter().enumerate() {
            if tok >= self.vocab.len() {
                return Err(CoreError::TokenOutOfRange {
                    index: tok,
                    size: self.vocab.len(),
                });
            }
            if tok == self.vocab.eos() {
                return Err(CoreError::InvalidGrammarState(format!(
                    "cannot extend past EOS at position {pos}"
                )));
            }
            if self.vocab.is_special(tok) {
                return Err(CoreError::InvalidGrammarState(format!(
                    "special token {tok} inside prefix at position {pos}"
                )));
            }
        }
        Ok(())
    }

    /// Next-token distribution given a prefix, along with the peak the
    /// model aimed at and whether it was corrupted.
    pub fn step_detail<T: Float>(
        &self,
        scene: &Scene,
        prefix: &[usize],
    ) -> Result<(TokenDistribution<T>, StepTarget)> {
        self.check_prefix(prefix)?;
        let canonical = super::canonical_caption(scene, &self.vocab, &self.grammar);
        let position = prefix.len();
        // Past the canonical end the model keeps emitting EOS.
        let grammar_token = canonical.get(position).copied().unwrap_or(self.vocab.eos());

        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[
            self.seed,
            scene.scene_id,
            hash_tokens(prefix),
        ]));
        let noise = Normal::new(0.0, self.params.margin_noise_sd)
            .expect("validated sd")
            .map(|n| n);
        let mut logits: Vec<f64> = (0..self.vocab.len()).map(|_| noise.sample(&mut rng)).collect();

        // Corruption can only hit object slots, and only when the scene
        // does not already contain every object category.
        let mut target = StepTarget {
            token: grammar_token,
            corrupted: false,
        };
        let mut margin_mean = self.params.faithful_margin;
        if self.vocab.is_object(grammar_token) {
            let corrupt = rng.gen::<f64>() < self.params.hallucination_prob;
            let non_scene: Vec<usize> = self
                .vocab
                .object_inventory()
                .iter()
                .copied()
                .filter(|obj| !scene.contains_object(*obj))
                .collect();
            if corrupt && !non_scene.is_empty() {
                target = StepTarget {
                    token: *non_scene.choose(&mut rng).expect("non-empty"),
                    corrupted: true,
                };
                margin_mean = self.params.corrupted_margin;
            }
        }

        let margin = Normal::new(margin_mean, self.params.margin_noise_sd)
            .expect("validated sd")
            .sample(&mut rng)
            .max(MIN_MARGIN);
        let runner_up = logits
            .iter()
            .enumerate()
            .filter(|(v, _)| *v != target.token)
            .map(|(_, &z)| z)
            .fold(f64::NEG_INFINITY, f64::max);
        logits[target.token] = runner_up + margin;

        let scaled = logits
            .into_iter()
            .map(|z| T::from_f64_lossy(z / self.params.temperature))
            .collect();
        Ok((TokenDistribution::new(scaled, self.vocab.len())?, target))
    }

    /// Next-token distribution given a prefix.
    pub fn step<T: Float>(&self, scene: &Scene, prefix: &[usize]) -> Result<TokenDistribution<T>> {
        Ok(self.step_detail(scene, prefix)?.0)
    }

    /// Argmax of the next-token distribution; the noise realization is
    /// fixed by the captioner seed.
    pub fn predict_next(&self, scene: &Scene, prefix: &[usize]) -> Result<usize> {
        let (dist, _) = self.step_detail::<f64>(scene, prefix)?;
        Ok(dist.argmax())
    }

    /// Teacher-forces `given` through the model, recording each step's
    /// distribution and the cumulative log-likelihood.
    pub fn force_decode<T: Float>(&self, scene: &Scene, given: &Caption) -> Result<CandidateBeam<T>> {
        given.validate(&self.vocab)?;
        let tokens = given.tokens();
        let mut steps = Vec::with_capacity(tokens.len());
        for k in 0..tokens.len() {
            steps.push(self.step(scene, &tokens[..k])?);
        }
        Ok(CandidateBeam::from_steps(given.clone(), steps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captioner::{generate_scene, toy_vocabulary, SceneGenConfig};
    use crate::domain::validate_beam;

    fn world() -> (Vocabulary, GrammarConfig) {
        let vocab = toy_vocabulary();
        let grammar = GrammarConfig::standard(&vocab);
        (vocab, grammar)
    }

    #[test]
    fn noiseless_limit_always_hits_grammar_token() {
        let (vocab, grammar) = world();
        let params = CaptionerParams {
            hallucination_prob: 0.0,
            ..CaptionerParams::default()
        };
        let captioner = Captioner::new(vocab.clone(), grammar.clone(), params, 7).unwrap();
        let scene = generate_scene(3, 0, &vocab, &SceneGenConfig::default()).unwrap();
        let canonical = canonical_of(&captioner, &scene);
        for k in 0..canonical.len() {
            let next = captioner.predict_next(&scene, &canonical[..k]).unwrap();
            assert_eq!(next, canonical[k]);
        }
    }

    #[test]
    fn fully_corrupted_object_slots_never_emit_scene_objects() {
        let (vocab, grammar) = world();
        let params = CaptionerParams {
            hallucination_prob: 1.0,
            ..CaptionerParams::default()
        };
        let captioner = Captioner::new(vocab.clone(), grammar.clone(), params, 11).unwrap();
        for id in 0..50 {
            let scene = generate_scene(5, id, &vocab, &SceneGenConfig::default()).unwrap();
            let canonical = canonical_of(&captioner, &scene);
            for k in 0..canonical.len() {
                if !vocab.is_object(canonical[k]) {
                    continue;
                }
                let next = captioner.predict_next(&scene, &canonical[..k]).unwrap();
                assert!(vocab.is_object(next));
                assert!(!scene.contains_object(next));
            }
        }
    }

    #[test]
    fn corrupted_fraction_matches_hallucination_prob() {
        let (vocab, grammar) = world();
        let captioner =
            Captioner::new(vocab.clone(), grammar.clone(), CaptionerParams::default(), 13)
                .unwrap();
        let cfg = SceneGenConfig::default();
        let mut draws = 0usize;
        let mut corrupted = 0usize;
        let mut id = 0u64;
        while draws < 10_000 {
            let scene = generate_scene(17, id, &vocab, &cfg).unwrap();
            id += 1;
            let canonical = canonical_of(&captioner, &scene);
            for k in 0..canonical.len() {
                if !vocab.is_object(canonical[k]) {
                    continue;
                }
                let (_, target) = captioner
                    .step_detail::<f64>(&scene, &canonical[..k])
                    .unwrap();
                draws += 1;
                if target.corrupted {
                    corrupted += 1;
                }
            }
        }
        let p = 0.1;
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        let observed = corrupted as f64 / draws as f64;
        assert!(
            (observed - p).abs() <= 3.0 * sigma,
            "corrupted fraction {observed} outside {p} ± {}",
            3.0 * sigma
        );
    }

    #[test]
    fn step_is_deterministic_per_prefix() {
        let (vocab, grammar) = world();
        let captioner =
            Captioner::new(vocab.clone(), grammar, CaptionerParams::default(), 19).unwrap();
        let scene = generate_scene(23, 4, &vocab, &SceneGenConfig::default()).unwrap();
        let a: TokenDistribution<f64> = captioner.step(&scene, &[3]).unwrap();
        let b: TokenDistribution<f64> = captioner.step(&scene, &[3]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_prefix_containing_eos() {
        let (vocab, grammar) = world();
        let captioner =
            Captioner::new(vocab.clone(), grammar, CaptionerParams::default(), 19).unwrap();
        let scene = generate_scene(23, 4, &vocab, &SceneGenConfig::default()).unwrap();
        let err = captioner.step::<f64>(&scene, &[3, vocab.eos()]);
        assert!(matches!(err, Err(CoreError::InvalidGrammarState(_))));
    }

    #[test]
    fn force_decode_produces_valid_beams() {
        let (vocab, grammar) = world();
        let captioner =
            Captioner::new(vocab.clone(), grammar.clone(), CaptionerParams::default(), 29)
                .unwrap();
        let scene = generate_scene(31, 9, &vocab, &SceneGenConfig::default()).unwrap();
        let caption = Caption::new(canonical_of(&captioner, &scene), &vocab).unwrap();
        let beam = captioner.force_decode::<f64>(&scene, &caption).unwrap();
        assert!(validate_beam(&beam, &vocab).is_ok());
    }

    fn canonical_of(captioner: &Captioner, scene: &Scene) -> Vec<usize> {
        super::super::canonical_caption(scene, captioner.vocab(), captioner.grammar())
    }
}
