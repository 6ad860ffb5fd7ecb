//! Caption selection by confidence: scan likelihood-ranked beams from the
//! top, reject any beam whose concept confidence falls below the
//! calibrated threshold, and fall back to the top beam when everything is
//! rejected.

use serde::{Deserialize, Serialize};

use crate::confidence::{
    span_confidence, AggregationMethod, ConfidenceMeasure,
};
use crate::domain::{extract_concept_spans, CandidateBeam, Scene, Vocabulary};
use crate::error::{CoreError, Result};
use crate::estimator::{score_caption, EstimatorParams};
use crate::Float;

/// Which confidence feeds the re-ranker.
#[derive(Debug, Clone)]
pub enum ConfidenceBackend<'a, T: Float> {
    Algebraic {
        measure: ConfidenceMeasure,
        aggregation: AggregationMethod,
    },
    Learned {
        params: &'a EstimatorParams<T>,
        aggregation: AggregationMethod,
    },
}

impl<'a, T: Float> ConfidenceBackend<'a, T> {
    /// Softmax confidence with min aggregation, the algebraic default.
    pub fn algebraic_default() -> Self {
        ConfidenceBackend::Algebraic {
            measure: ConfidenceMeasure::Softmax,
            aggregation: AggregationMethod::Min,
        }
    }

    /// Learned confidence with mean aggregation, its validated default.
    pub fn learned_default(params: &'a EstimatorParams<T>) -> Self {
        ConfidenceBackend::Learned {
            params,
            aggregation: AggregationMethod::Mean,
        }
    }

    /// One aggregated confidence per concept span of `beam`.
    pub fn span_scores(
        &self,
        beam: &CandidateBeam<T>,
        scene: &Scene,
        vocab: &Vocabulary,
    ) -> Result<Vec<ConceptScore<T>>> {
        let spans = extract_concept_spans(&beam.caption, vocab);
        let mut scores = Vec::with_capacity(spans.len());
        match self {
            ConfidenceBackend::Algebraic {
                measure,
                aggregation,
            } => {
                for span in &spans {
                    scores.push(ConceptScore {
                        concept: span.concept,
                        position: span.start,
                        score: span_confidence(beam, *span, *measure, *aggregation)?,
                    });
                }
            }
            ConfidenceBackend::Learned {
                params,
                aggregation,
            } => {
                let values = score_caption(params, scene, &beam.caption, &spans, *aggregation)?;
                for (span, value) in spans.iter().zip(values) {
                    scores.push(ConceptScore {
                        concept: span.concept,
                        position: span.start,
                        score: value,
                    });
                }
            }
        }
        Ok(scores)
    }

    /// Whole-caption confidence (EOS excluded), for sequence-level
    /// comparison protocols.
    pub fn sequence_score(
        &self,
        beam: &CandidateBeam<T>,
        scene: &Scene,
    ) -> Result<T> {
        match self {
            ConfidenceBackend::Algebraic {
                measure,
                aggregation,
            } => crate::confidence::sequence_confidence(beam, *measure, *aggregation),
            ConfidenceBackend::Learned {
                params,
                aggregation,
            } => {
                let body = beam.caption.body();
                if body.is_empty() {
                    return Err(CoreError::EmptyAggregationSpan);
                }
                let tokens = beam.caption.tokens().to_vec();
                let mut values = Vec::with_capacity(body.len());
                for position in 0..body.len() {
                    let input = crate::estimator::EstimatorInput::from_scene(
                        scene,
                        tokens.clone(),
                        position,
                    );
                    values.push(crate::estimator::estimator_forward(*params, &input)?);
                }
                Ok(match aggregation {
                    AggregationMethod::Min => values.iter().copied().fold(T::infinity(), T::min),
                    AggregationMethod::Mean => {
                        values.iter().copied().sum::<T>() / T::from_usize(values.len()).unwrap()
                    }
                })
            }
        }
    }
}

/// Confidence of one concept occurrence in a beam.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Float", deserialize = "T: Float"))]
pub struct ConceptScore<T: Float> {
    pub concept: usize,
    pub position: usize,
    pub score: T,
}

/// What happened to a beam during the scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Accepted,
    Rejected,
    NotExamined,
}

/// Per-beam entry of the decision log.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Float", deserialize = "T: Float"))]
pub struct BeamVerdict<T: Float> {
    pub beam_index: usize,
    pub concept_scores: Vec<ConceptScore<T>>,
    pub verdict: Verdict,
    /// First concept that scored below the threshold, for rejections.
    pub failing_concept: Option<usize>,
}

/// Outcome of re-ranking one scene's beam list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Float", deserialize = "T: Float"))]
pub struct RerankDecision<T: Float> {
    pub scene_id: u64,
    pub selected_index: usize,
    pub fallback_used: bool,
    pub verdicts: Vec<BeamVerdict<T>>,
}

/// A single beam's accept/reject outcome.
#[derive(Debug, Clone, PartialEq)]
pub enum BeamEvaluation<T: Float> {
    Accepted {
        concept_scores: Vec<ConceptScore<T>>,
    },
    Rejected {
        concept_scores: Vec<ConceptScore<T>>,
        failing_concept: usize,
    },
}

/// Accepts a beam iff every concept-span confidence reaches `gamma`, or
/// the beam mentions no concepts at all. All spans are scored for the
/// log even when an early one already fails.
pub fn evaluate_beam<T: Float>(
    beam: &CandidateBeam<T>,
    scene: &Scene,
    vocab: &Vocabulary,
    backend: &ConfidenceBackend<'_, T>,
    gamma: T,
) -> Result<BeamEvaluation<T>> {
    let concept_scores = backend.span_scores(beam, scene, vocab)?;
    let failing = concept_scores
        .iter()
        .find(|cs| !crate::calibration::apply_threshold(cs.score, gamma));
    Ok(match failing {
        Some(cs) => BeamEvaluation::Rejected {
            failing_concept: cs.concept,
            concept_scores,
        },
        None => BeamEvaluation::Accepted { concept_scores },
    })
}

/// Scans `beams` (already ranked by log-likelihood) from the top and
/// selects the first accepted one; when every beam is rejected the top
/// beam is returned with `fallback_used` set.
pub fn rerank<T: Float>(
    beams: &[CandidateBeam<T>],
    scene: &Scene,
    vocab: &Vocabulary,
    backend: &ConfidenceBackend<'_, T>,
    gamma: T,
) -> Result<RerankDecision<T>> {
    if beams.is_empty() {
        return Err(CoreError::EmptyInput(format!(
            "beam list for scene {}",
            scene.scene_id
        )));
    }
    let mut verdicts = Vec::with_capacity(beams.len());
    let mut selected = None;
    for (index, beam) in beams.iter().enumerate() {
        if selected.is_some() {
            verdicts.push(BeamVerdict {
                beam_index: index,
                concept_scores: Vec::new(),
                verdict: Verdict::NotExamined,
                failing_concept: None,
            });
            continue;
        }
        match evaluate_beam(beam, scene, vocab, backend, gamma)? {
            BeamEvaluation::Accepted { concept_scores } => {
                selected = Some(index);
                verdicts.push(BeamVerdict {
                    beam_index: index,
                    concept_scores,
                    verdict: Verdict::Accepted,
                    failing_concept: None,
                });
            }
            BeamEvaluation::Rejected {
                concept_scores,
                failing_concept,
            } => {
                verdicts.push(BeamVerdict {
                    beam_index: index,
                    concept_scores,
                    verdict: Verdict::Rejected,
                    failing_concept: Some(failing_concept),
                });
            }
        }
    }
    let (selected_index, fallback_used) = match selected {
        Some(index) => (index, false),
        None => (0, true),
    };
    Ok(RerankDecision {
        scene_id: scene.scene_id,
        selected_index,
        fallback_used,
        verdicts,
    })
}

/// Corpus-level rerank outcome: per-scene decisions in input order, plus
/// scenes whose rerank failed (the corpus itself is never aborted).
pub struct RerankOutcome<T: Float> {
    pub decisions: Vec<RerankDecision<T>>,
    pub failures: Vec<(u64, CoreError)>,
}

impl<T: Float> RerankOutcome<T> {
    /// Scene ids where the re-ranker moved off the top beam (the `b > 1`
    /// subset of the breakdown reports).
    pub fn moved_scene_ids(&self) -> Vec<u64> {
        self.decisions
            .iter()
            .filter(|d| d.selected_index > 0)
            .map(|d| d.scene_id)
            .collect()
    }
}

/// Applies `rerank` to every scene's beam list.
pub fn rerank_corpus<T: Float>(
    items: &[(Scene, Vec<CandidateBeam<T>>)],
    vocab: &Vocabulary,
    backend: &ConfidenceBackend<'_, T>,
    gamma: T,
) -> RerankOutcome<T> {
    let mut decisions = Vec::with_capacity(items.len());
    let mut failures = Vec::new();
    for (scene, beams) in items {
        match rerank(beams, scene, vocab, backend, gamma) {
            Ok(decision) => decisions.push(decision),
            Err(err) => failures.push((scene.scene_id, err)),
        }
    }
    RerankOutcome {
        decisions,
        failures,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captioner::{
        generate_scene, toy_vocabulary, CaptionerParams, Captioner, GrammarConfig, SceneGenConfig,
    };
    use crate::domain::{Caption, TokenDistribution};

    fn vocab() -> Vocabulary {
        toy_vocabulary()
    }

    /// Builds a beam whose chosen-token softmax equals `probs[i]` at each
    /// position.
    fn beam_with_probs(vocab: &Vocabulary, tokens: &[usize], probs: &[f64]) -> CandidateBeam<f64> {
        let v = vocab.len();
        let steps = tokens
            .iter()
            .zip(probs)
            .map(|(&tok, &p)| {
                let mut logits = vec![0.0f64; v];
                logits[tok] = (p * (v as f64 - 1.0) / (1.0 - p)).ln();
                TokenDistribution::new(logits, v).unwrap()
            })
            .collect();
        CandidateBeam::from_steps(Caption::new(tokens.to_vec(), vocab).unwrap(), steps)
    }

    fn scene_with(vocab: &Vocabulary, objects: &[&str]) -> Scene {
        let instances = objects
            .iter()
            .map(|o| crate::domain::SceneInstance {
                object: vocab.index_of(o).unwrap(),
                attribute: None,
            })
            .collect();
        Scene::new(0, instances, vocab, 3).unwrap()
    }

    #[test]
    fn beam_without_concepts_is_accepted() {
        let vocab = vocab();
        let scene = scene_with(&vocab, &["dog"]);
        let a = vocab.index_of("a").unwrap();
        let beam = beam_with_probs(&vocab, &[a, vocab.eos()], &[0.5, 0.5]);
        let backend = ConfidenceBackend::algebraic_default();
        let eval = evaluate_beam(&beam, &scene, &vocab, &backend, 0.99).unwrap();
        assert!(matches!(eval, BeamEvaluation::Accepted { ref concept_scores } if concept_scores.is_empty()));
    }

    #[test]
    fn low_scoring_concept_is_rejected_with_culprit() {
        let vocab = vocab();
        let scene = scene_with(&vocab, &["dog", "cat"]);
        let (a, dog, cat) = (
            vocab.index_of("a").unwrap(),
            vocab.index_of("dog").unwrap(),
            vocab.index_of("cat").unwrap(),
        );
        let beam = beam_with_probs(
            &vocab,
            &[a, dog, cat, vocab.eos()],
            &[0.9, 0.99, 0.3, 0.9],
        );
        let backend = ConfidenceBackend::algebraic_default();
        match evaluate_beam(&beam, &scene, &vocab, &backend, 0.9).unwrap() {
            BeamEvaluation::Rejected {
                failing_concept,
                concept_scores,
            } => {
                assert_eq!(failing_concept, cat);
                // Both spans are still scored for the log.
                assert_eq!(concept_scores.len(), 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn negative_infinity_gamma_accepts_everything() {
        let vocab = vocab();
        let scene = scene_with(&vocab, &["dog"]);
        let a = vocab.index_of("a").unwrap();
        let dog = vocab.index_of("dog").unwrap();
        let beam = beam_with_probs(&vocab, &[a, dog, vocab.eos()], &[0.1, 0.001, 0.2]);
        let backend = ConfidenceBackend::algebraic_default();
        let eval =
            evaluate_beam(&beam, &scene, &vocab, &backend, f64::NEG_INFINITY).unwrap();
        assert!(matches!(eval, BeamEvaluation::Accepted { .. }));
    }

    fn two_beam_fixture(vocab: &Vocabulary) -> (Scene, Vec<CandidateBeam<f64>>) {
        let scene = scene_with(vocab, &["dog"]);
        let (a, dog, cat) = (
            vocab.index_of("a").unwrap(),
            vocab.index_of("dog").unwrap(),
            vocab.index_of("cat").unwrap(),
        );
        // Beam 0 mentions a low-confidence hallucinated "cat"; beam 1 a
        // high-confidence "dog".
        let beam0 = beam_with_probs(vocab, &[a, cat, vocab.eos()], &[0.9, 0.3, 0.9]);
        let beam1 = beam_with_probs(vocab, &[a, dog, vocab.eos()], &[0.9, 0.98, 0.9]);
        (scene, vec![beam0, beam1])
    }

    #[test]
    fn first_accepted_beam_wins() {
        let vocab = vocab();
        let (scene, beams) = two_beam_fixture(&vocab);
        let backend = ConfidenceBackend::algebraic_default();
        let decision = rerank(&beams, &scene, &vocab, &backend, 0.9).unwrap();
        assert_eq!(decision.selected_index, 1);
        assert!(!decision.fallback_used);
        assert_eq!(decision.verdicts[0].verdict, Verdict::Rejected);
        assert_eq!(decision.verdicts[1].verdict, Verdict::Accepted);
    }

    #[test]
    fn early_accept_skips_later_beams() {
        let vocab = vocab();
        let (scene, mut beams) = two_beam_fixture(&vocab);
        beams.swap(0, 1);
        let backend = ConfidenceBackend::algebraic_default();
        let decision = rerank(&beams, &scene, &vocab, &backend, 0.9).unwrap();
        assert_eq!(decision.selected_index, 0);
        assert_eq!(decision.verdicts[1].verdict, Verdict::NotExamined);
        assert!(decision.verdicts[1].concept_scores.is_empty());
    }

    #[test]
    fn all_rejected_falls_back_to_top_beam() {
        let vocab = vocab();
        let (scene, beams) = two_beam_fixture(&vocab);
        let backend = ConfidenceBackend::algebraic_default();
        let decision = rerank(&beams, &scene, &vocab, &backend, 0.999).unwrap();
        assert_eq!(decision.selected_index, 0);
        assert!(decision.fallback_used);
        assert!(decision
            .verdicts
            .iter()
            .all(|v| v.verdict == Verdict::Rejected));
    }

    #[test]
    fn empty_beam_list_is_an_error() {
        let vocab = vocab();
        let scene = scene_with(&vocab, &["dog"]);
        let backend = ConfidenceBackend::algebraic_default();
        assert!(rerank::<f64>(&[], &scene, &vocab, &backend, 0.5).is_err());
    }

    #[test]
    fn accepted_set_shrinks_as_gamma_grows() {
        let vocab = vocab();
        let grammar = GrammarConfig::standard(&vocab);
        let captioner =
            Captioner::new(vocab.clone(), grammar, CaptionerParams::default(), 71).unwrap();
        let backend = ConfidenceBackend::algebraic_default();
        for id in 0..8 {
            let scene = generate_scene(73, id, &vocab, &SceneGenConfig::default()).unwrap();
            let beams =
                crate::captioner::beam_search::<f64>(&captioner, &scene, 6, 16).unwrap();
            let mut previous: Option<Vec<bool>> = None;
            for gamma in [f64::NEG_INFINITY, 0.0, 0.5, 0.8, 0.95, 0.999, 1.1] {
                let accepted: Vec<bool> = beams
                    .iter()
                    .map(|b| {
                        matches!(
                            evaluate_beam(b, &scene, &vocab, &backend, gamma).unwrap(),
                            BeamEvaluation::Accepted { .. }
                        )
                    })
                    .collect();
                if let Some(prev) = &previous {
                    for (was, is) in prev.iter().zip(&accepted) {
                        assert!(*was || !*is, "accepted set grew as gamma increased");
                    }
                }
                previous = Some(accepted);
            }
        }
    }

    #[test]
    fn never_reject_threshold_is_identity_on_ranking() {
        let vocab = vocab();
        let grammar = GrammarConfig::standard(&vocab);
        let captioner =
            Captioner::new(vocab.clone(), grammar, CaptionerParams::default(), 79).unwrap();
        let mut items = Vec::new();
        for id in 0..5 {
            let scene = generate_scene(83, id, &vocab, &SceneGenConfig::default()).unwrap();
            let beams = crate::captioner::beam_search::<f64>(&captioner, &scene, 4, 16).unwrap();
            items.push((scene, beams));
        }
        let backend = ConfidenceBackend::algebraic_default();
        let outcome = rerank_corpus(&items, &vocab, &backend, f64::NEG_INFINITY);
        assert!(outcome.failures.is_empty());
        assert_eq!(outcome.decisions.len(), items.len());
        assert!(outcome.decisions.iter().all(|d| d.selected_index == 0));
        assert!(outcome.moved_scene_ids().is_empty());
    }

    #[test]
    fn moved_subset_matches_recount() {
        let vocab = vocab();
        let grammar = GrammarConfig::standard(&vocab);
        let captioner =
            Captioner::new(vocab.clone(), grammar, CaptionerParams::default(), 89).unwrap();
        let mut items = Vec::new();
        for id in 0..40 {
            let scene = generate_scene(97, id, &vocab, &SceneGenConfig::default()).unwrap();
            let beams = crate::captioner::beam_search::<f64>(&captioner, &scene, 8, 16).unwrap();
            items.push((scene, beams));
        }
        let backend = ConfidenceBackend::algebraic_default();
        let outcome = rerank_corpus(&items, &vocab, &backend, 0.7);
        let recount = outcome
            .decisions
            .iter()
            .filter(|d| d.selected_index > 0)
            .count();
        assert_eq!(outcome.moved_scene_ids().len(), recount);
        // Selected beams obey the acceptance invariant.
        for decision in &outcome.decisions {
            let verdict = &decision.verdicts[decision.selected_index];
            if decision.fallback_used {
                assert_eq!(decision.selected_index, 0);
            } else {
                assert_eq!(verdict.verdict, Verdict::Accepted);
            }
        }
    }
}
