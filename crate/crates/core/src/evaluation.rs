//! Hallucination metrics (CHAIR), caption diversity measures, and the
//! pairwise / group matching protocols used to compare confidence
//! backends.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::captioner::Captioner;
use crate::domain::{extract_concept_spans, Caption, ConceptSpan, Scene, Vocabulary};
use crate::error::{CoreError, Result};
use crate::rerank::ConfidenceBackend;
use crate::Float;

/// One generated caption with its derived object mentions and the subset
/// flagged as hallucinated against the scene's ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusPrediction {
    pub scene_id: u64,
    pub caption: Caption,
    /// Object tokens mentioned, as a multiset in caption order.
    pub mentioned_objects: Vec<usize>,
    /// Mentions whose object is absent from the scene.
    pub hallucinated_objects: Vec<usize>,
}

impl CorpusPrediction {
    /// Derives mentions via concept-span extraction and flags each
    /// mention absent from the scene's object set.
    pub fn from_caption(scene: &Scene, caption: Caption, vocab: &Vocabulary) -> Self {
        let spans = extract_concept_spans(&caption, vocab);
        let mentioned_objects: Vec<usize> = spans.iter().map(|s| s.concept).collect();
        let hallucinated_objects = mentioned_objects
            .iter()
            .copied()
            .filter(|obj| !scene.contains_object(*obj))
            .collect();
        CorpusPrediction {
            scene_id: scene.scene_id,
            caption,
            mentioned_objects,
            hallucinated_objects,
        }
    }

    pub fn has_hallucination(&self) -> bool {
        !self.hallucinated_objects.is_empty()
    }
}

/// Fraction of captions containing at least one hallucinated object.
pub fn chair_s(predictions: &[CorpusPrediction]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(CoreError::EmptyInput("prediction corpus".into()));
    }
    let with = predictions.iter().filter(|p| p.has_hallucination()).count();
    Ok(with as f64 / predictions.len() as f64)
}

/// Hallucinated object mentions over all object mentions, with multiset
/// counting.
pub fn chair_i(predictions: &[CorpusPrediction]) -> Result<f64> {
    let mentioned: usize = predictions.iter().map(|p| p.mentioned_objects.len()).sum();
    if mentioned == 0 {
        return Err(CoreError::EmptyInput("no mentioned objects".into()));
    }
    let hallucinated: usize = predictions
        .iter()
        .map(|p| p.hallucinated_objects.len())
        .sum();
    Ok(hallucinated as f64 / mentioned as f64)
}

/// Corpus diversity measures over generated captions (EOS excluded).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityMetrics {
    /// Unique unigrams across predictions.
    pub vocab_size: usize,
    /// Percentage of captions absent from the training references.
    pub pct_novel: f64,
    /// Unique bigrams pooled over the corpus per generated word.
    pub div2: f64,
    /// Percentage of 4-gram occurrences whose 4-gram repeats.
    pub re4: f64,
}

/// Computes vocabulary size, novelty against training references, bigram
/// diversity, and 4-gram repetition.
pub fn diversity(
    predictions: &[CorpusPrediction],
    training_references: &[Caption],
) -> Result<DiversityMetrics> {
    if predictions.is_empty() {
        return Err(CoreError::EmptyInput("prediction corpus".into()));
    }
    let reference_bodies: HashSet<&[usize]> =
        training_references.iter().map(|c| c.body()).collect();

    let mut unigrams = HashSet::new();
    let mut bigrams = HashSet::new();
    let mut four_gram_counts: HashMap<&[usize], usize> = HashMap::new();
    let mut total_words = 0usize;
    let mut total_four_grams = 0usize;
    let mut novel = 0usize;

    for prediction in predictions {
        let body = prediction.caption.body();
        total_words += body.len();
        unigrams.extend(body.iter().copied());
        for pair in body.windows(2) {
            bigrams.insert([pair[0], pair[1]]);
        }
        for gram in body.windows(4) {
            *four_gram_counts.entry(gram).or_insert(0) += 1;
            total_four_grams += 1;
        }
        if !reference_bodies.contains(body) {
            novel += 1;
        }
    }

    let repeated_occurrences: usize = four_gram_counts
        .values()
        .filter(|&&count| count > 1)
        .sum();
    Ok(DiversityMetrics {
        vocab_size: unigrams.len(),
        pct_novel: 100.0 * novel as f64 / predictions.len() as f64,
        div2: if total_words == 0 {
            0.0
        } else {
            bigrams.len() as f64 / total_words as f64
        },
        re4: if total_four_grams == 0 {
            0.0
        } else {
            100.0 * repeated_occurrences as f64 / total_four_grams as f64
        },
    })
}

/// Confidence of the matching and the mismatched pairing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Float", deserialize = "T: Float"))]
pub struct PairScore<T: Float> {
    pub c_pos: T,
    pub c_neg: T,
}

/// Fraction of pairs whose matching confidence strictly exceeds the
/// mismatched one; ties score zero.
pub fn pairwise_accuracy<T: Float>(pairs: &[PairScore<T>]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(CoreError::EmptyInput("pair list".into()));
    }
    let correct = pairs.iter().filter(|p| p.c_pos > p.c_neg).count();
    Ok(correct as f64 / pairs.len() as f64)
}

/// 2×2 score matrix: `scores[i][j]` is the confidence of pairing image
/// `i` with caption `j`; the diagonal pairs are the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Float", deserialize = "T: Float"))]
pub struct WinogroundExample<T: Float> {
    pub scores: [[T; 2]; 2],
}

/// Text / image / group accuracies in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WinogroundScores {
    pub text: f64,
    pub image: f64,
    pub group: f64,
}

/// Per example: text correct iff each image prefers its own caption,
/// image correct iff each caption prefers its own image, group correct
/// iff both. All comparisons are strict.
pub fn winoground_scores<T: Float>(examples: &[WinogroundExample<T>]) -> Result<WinogroundScores> {
    if examples.is_empty() {
        return Err(CoreError::EmptyInput("winoground example list".into()));
    }
    let (mut text, mut image, mut group) = (0usize, 0usize, 0usize);
    for example in examples {
        let s = &example.scores;
        let text_ok = s[0][0] > s[0][1] && s[1][1] > s[1][0];
        let image_ok = s[0][0] > s[1][0] && s[1][1] > s[0][1];
        text += text_ok as usize;
        image += image_ok as usize;
        group += (text_ok && image_ok) as usize;
    }
    let n = examples.len() as f64;
    Ok(WinogroundScores {
        text: text as f64 / n,
        image: image as f64 / n,
        group: group as f64 / n,
    })
}

/// Force-decodes the same caption against both scenes and aggregates the
/// backend's confidence over `span`, yielding the matching and
/// mismatched scores.
pub fn span_pair_confidence<T: Float>(
    captioner: &Captioner,
    scene_pos: &Scene,
    scene_neg: &Scene,
    caption: &Caption,
    span: ConceptSpan,
    backend: &ConfidenceBackend<'_, T>,
) -> Result<PairScore<T>> {
    if span.end > caption.len() || span.is_empty() {
        return Err(CoreError::SpanOutOfBounds {
            start: span.start,
            end: span.end,
            len: caption.len(),
        });
    }
    let score_against = |scene: &Scene| -> Result<T> {
        let beam = captioner.force_decode::<T>(scene, caption)?;
        match backend {
            ConfidenceBackend::Algebraic {
                measure,
                aggregation,
            } => crate::confidence::span_confidence(&beam, span, *measure, *aggregation),
            ConfidenceBackend::Learned {
                params,
                aggregation,
            } => {
                let scores =
                    crate::estimator::score_caption(params, scene, caption, &[span], *aggregation)?;
                Ok(scores[0])
            }
        }
    };
    Ok(PairScore {
        c_pos: score_against(scene_pos)?,
        c_neg: score_against(scene_neg)?,
    })
}

/// Whole-sequence analogue of `span_pair_confidence`.
pub fn sequence_pair_confidence<T: Float>(
    captioner: &Captioner,
    scene_pos: &Scene,
    scene_neg: &Scene,
    caption: &Caption,
    backend: &ConfidenceBackend<'_, T>,
) -> Result<PairScore<T>> {
    let score_against = |scene: &Scene| -> Result<T> {
        let beam = captioner.force_decode::<T>(scene, caption)?;
        backend.sequence_score(&beam, scene)
    };
    Ok(PairScore {
        c_pos: score_against(scene_pos)?,
        c_neg: score_against(scene_neg)?,
    })
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::captioner::{toy_vocabulary, CaptionerParams, GrammarConfig};
    use crate::confidence::{AggregationMethod, ConfidenceMeasure};
    use crate::domain::SceneInstance;

    fn vocab() -> Vocabulary {
        toy_vocabulary()
    }

    fn caption_of(vocab: &Vocabulary, words: &[&str], terminated: bool) -> Caption {
        let mut tokens: Vec<usize> = words.iter().map(|w| vocab.index_of(w).unwrap()).collect();
        if terminated {
            tokens.push(vocab.eos());
        }
        Caption::new(tokens, vocab).unwrap()
    }

    fn scene_of(vocab: &Vocabulary, id: u64, objects: &[&str]) -> Scene {
        let instances = objects
            .iter()
            .map(|o| SceneInstance {
                object: vocab.index_of(o).unwrap(),
                attribute: None,
            })
            .collect();
        Scene::new(id, instances, vocab, 8).unwrap()
    }

    fn prediction(vocab: &Vocabulary, scene: &Scene, words: &[&str]) -> CorpusPrediction {
        CorpusPrediction::from_caption(scene, caption_of(vocab, words, true), vocab)
    }

    #[test]
    fn chair_s_counts_captions_with_hallucinations() {
        let vocab = vocab();
        let scene = scene_of(&vocab, 0, &["dog"]);
        let clean = prediction(&vocab, &scene, &["a", "dog"]);
        let bad = prediction(&vocab, &scene, &["a", "cat"]);
        assert_abs_diff_eq!(
            chair_s(&[clean.clone(), bad.clone()]).unwrap(),
            0.5,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            chair_s(&[clean.clone(), clean.clone()]).unwrap(),
            0.0,
            epsilon = 1e-15
        );
        // Hallucination counts 2, 0, 1 → two of three captions affected.
        let double = prediction(&vocab, &scene, &["a", "cat", "and", "a", "cow", "dog"]);
        let single = prediction(&vocab, &scene, &["a", "dog", "and", "a", "frog"]);
        let got = chair_s(&[double, clean, single]).unwrap();
        assert_abs_diff_eq!(got, 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn chair_i_counts_mentions_as_a_multiset() {
        let vocab = vocab();
        let scene = scene_of(&vocab, 0, &["dog"]);
        // Mentions per caption: 3, 1, 2 with hallucination counts 2, 0, 1.
        let p1 = prediction(&vocab, &scene, &["a", "cat", "cow", "dog"]);
        let p2 = prediction(&vocab, &scene, &["a", "dog"]);
        let p3 = prediction(&vocab, &scene, &["a", "frog", "and", "a", "dog"]);
        assert_eq!(p1.mentioned_objects.len(), 3);
        assert_eq!(p1.hallucinated_objects.len(), 2);
        let got = chair_i(&[p1.clone(), p2.clone(), p3]).unwrap();
        assert_abs_diff_eq!(got, 0.5, epsilon = 1e-15);

        assert_abs_diff_eq!(chair_i(&[p2]).unwrap(), 0.0, epsilon = 1e-15);
        let all_bad = prediction(&vocab, &scene, &["a", "cat", "cat"]);
        assert_abs_diff_eq!(chair_i(&[all_bad]).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn chair_errors_on_empty_inputs() {
        let vocab = vocab();
        let scene = scene_of(&vocab, 0, &["dog"]);
        assert!(chair_s(&[]).is_err());
        let no_objects = prediction(&vocab, &scene, &["a"]);
        assert!(chair_i(&[no_objects]).is_err());
    }

    #[test]
    fn diversity_definition_arithmetic() {
        let vocab = vocab();
        let scene = scene_of(&vocab, 0, &["dog"]);
        let a_dog = prediction(&vocab, &scene, &["a", "dog"]);
        let metrics = diversity(&[a_dog.clone(), a_dog.clone()], &[]).unwrap();
        assert_eq!(metrics.vocab_size, 2);
        assert_abs_diff_eq!(metrics.div2, 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(metrics.re4, 0.0, epsilon = 1e-15); // no 4-grams
        assert_abs_diff_eq!(metrics.pct_novel, 100.0, epsilon = 1e-15);
    }

    #[test]
    fn matching_training_reference_is_not_novel() {
        let vocab = vocab();
        let scene = scene_of(&vocab, 0, &["dog"]);
        let pred = prediction(&vocab, &scene, &["a", "dog"]);
        let reference = caption_of(&vocab, &["a", "dog"], true);
        let metrics = diversity(&[pred], &[reference]).unwrap();
        assert_abs_diff_eq!(metrics.pct_novel, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn re4_flags_repeated_four_grams() {
        let vocab = vocab();
        let scene = scene_of(&vocab, 0, &["dog"]);
        let long = prediction(&vocab, &scene, &["a", "dog", "and", "a", "dog"]);
        // The two captions share both of their 4-grams.
        let metrics = diversity(&[long.clone(), long.clone()], &[]).unwrap();
        assert_abs_diff_eq!(metrics.re4, 100.0, epsilon = 1e-15);
    }

    #[test]
    fn pairwise_accuracy_strict_comparison() {
        let all_good = [
            PairScore {
                c_pos: 0.9,
                c_neg: 0.1,
            },
            PairScore {
                c_pos: 0.5,
                c_neg: 0.4,
            },
        ];
        assert_abs_diff_eq!(pairwise_accuracy(&all_good).unwrap(), 1.0, epsilon = 1e-15);

        let tie = [PairScore {
            c_pos: 0.5,
            c_neg: 0.5,
        }];
        assert_abs_diff_eq!(pairwise_accuracy(&tie).unwrap(), 0.0, epsilon = 1e-15);

        let mixed = [
            PairScore {
                c_pos: 0.9,
                c_neg: 0.1,
            },
            PairScore {
                c_pos: 0.2,
                c_neg: 0.8,
            },
        ];
        assert_abs_diff_eq!(pairwise_accuracy(&mixed).unwrap(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn winoground_dominant_diagonal_scores_everything() {
        let example = WinogroundExample {
            scores: [[1.0, 0.0], [0.0, 1.0]],
        };
        let scores = winoground_scores(&[example]).unwrap();
        assert_eq!(
            (scores.text, scores.image, scores.group),
            (1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn winoground_text_failure_breaks_group() {
        let example = WinogroundExample {
            scores: [[1.0, 2.0], [0.0, 1.0]],
        };
        let scores = winoground_scores(&[example]).unwrap();
        assert_eq!(scores.text, 0.0);
        assert_eq!(scores.group, 0.0);
    }

    #[test]
    fn winoground_random_scores_approach_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12345);
        let examples: Vec<WinogroundExample<f64>> = (0..100_000)
            .map(|_| WinogroundExample {
                scores: [[rng.gen(), rng.gen()], [rng.gen(), rng.gen()]],
            })
            .collect();
        let scores = winoground_scores(&examples).unwrap();
        assert!((scores.text - 0.25).abs() < 0.01, "text {}", scores.text);
        assert!((scores.image - 0.25).abs() < 0.01, "image {}", scores.image);
        assert!(
            (scores.group - 1.0 / 6.0).abs() < 0.01,
            "group {}",
            scores.group
        );
    }

    #[test]
    fn winoground_group_never_exceeds_text_or_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(777);
        for _ in 0..50 {
            let examples: Vec<WinogroundExample<f64>> = (0..64)
                .map(|_| WinogroundExample {
                    scores: [[rng.gen(), rng.gen()], [rng.gen(), rng.gen()]],
                })
                .collect();
            let s = winoground_scores(&examples).unwrap();
            assert!(s.group <= s.text.min(s.image) + 1e-15);
        }
    }

    #[test]
    fn winoground_booleans_are_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let examples: Vec<WinogroundExample<f64>> = (0..256)
            .map(|_| WinogroundExample {
                scores: [[rng.gen(), rng.gen()], [rng.gen(), rng.gen()]],
            })
            .collect();
        let scaled: Vec<WinogroundExample<f64>> = examples
            .iter()
            .map(|e| WinogroundExample {
                scores: [
                    [e.scores[0][0] * 42.0, e.scores[0][1] * 42.0],
                    [e.scores[1][0] * 42.0, e.scores[1][1] * 42.0],
                ],
            })
            .collect();
        assert_eq!(
            winoground_scores(&examples).unwrap(),
            winoground_scores(&scaled).unwrap()
        );
    }

    fn noiseless_captioner(vocab: &Vocabulary) -> Captioner {
        let params = CaptionerParams {
            hallucination_prob: 0.0,
            ..CaptionerParams::default()
        };
        Captioner::new(vocab.clone(), GrammarConfig::standard(vocab), params, 41).unwrap()
    }

    #[test]
    fn span_pair_prefers_the_consistent_scene() {
        let vocab = vocab();
        let captioner = noiseless_captioner(&vocab);
        let scene_pos = scene_of(&vocab, 1, &["dog"]);
        let scene_neg = scene_of(&vocab, 2, &["cat"]);
        let caption = caption_of(&vocab, &["a", "dog"], true);
        let span = ConceptSpan {
            start: 1,
            end: 2,
            concept: vocab.index_of("dog").unwrap(),
        };
        let backend = ConfidenceBackend::<f64>::Algebraic {
            measure: ConfidenceMeasure::Softmax,
            aggregation: AggregationMethod::Min,
        };
        let pair =
            span_pair_confidence(&captioner, &scene_pos, &scene_neg, &caption, span, &backend)
                .unwrap();
        assert!(
            pair.c_pos > pair.c_neg,
            "expected c_pos {} > c_neg {}",
            pair.c_pos,
            pair.c_neg
        );
    }

    #[test]
    fn identical_scenes_tie_exactly() {
        let vocab = vocab();
        let captioner = noiseless_captioner(&vocab);
        let scene = scene_of(&vocab, 3, &["dog"]);
        let caption = caption_of(&vocab, &["a", "dog"], true);
        let span = ConceptSpan {
            start: 1,
            end: 2,
            concept: vocab.index_of("dog").unwrap(),
        };
        let backend = ConfidenceBackend::<f64>::algebraic_default();
        let pair =
            span_pair_confidence(&captioner, &scene, &scene, &caption, span, &backend).unwrap();
        assert_eq!(pair.c_pos, pair.c_neg);
    }

    #[test]
    fn span_score_ignores_postfix_outside_the_span() {
        let vocab = vocab();
        let captioner = noiseless_captioner(&vocab);
        let scene_pos = scene_of(&vocab, 4, &["dog", "cat"]);
        let scene_neg = scene_of(&vocab, 5, &["horse", "cat"]);
        // Same span tokens, different continuations after the span.
        let caption_a = caption_of(&vocab, &["a", "dog", "and", "a", "cat"], true);
        let caption_b = caption_of(&vocab, &["a", "dog", "and", "a", "cow"], true);
        let span = ConceptSpan {
            start: 1,
            end: 2,
            concept: vocab.index_of("dog").unwrap(),
        };
        let backend = ConfidenceBackend::<f64>::algebraic_default();
        let pa = span_pair_confidence(&captioner, &scene_pos, &scene_neg, &caption_a, span, &backend)
            .unwrap();
        let pb = span_pair_confidence(&captioner, &scene_pos, &scene_neg, &caption_b, span, &backend)
            .unwrap();
        assert_eq!(pa, pb);

        // Full-sequence aggregation does see the postfix change.
        let sa = sequence_pair_confidence(&captioner, &scene_pos, &scene_neg, &caption_a, &backend)
            .unwrap();
        let sb = sequence_pair_confidence(&captioner, &scene_pos, &scene_neg, &caption_b, &backend)
            .unwrap();
        assert_ne!(sa, sb);
    }
}
