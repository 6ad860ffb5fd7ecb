//! Property tests for the algebraic-confidence identities, calibration
//! against a brute-force oracle, span extraction, and re-rank
//! monotonicity.

use proptest::prelude::*;

use tlc_core::calibration::{pr_curve, select_threshold, ScoredLabelSet, ThresholdSelection};
use tlc_core::captioner::{
    beam_search, generate_scene, toy_vocabulary, CaptionerParams, Captioner, GrammarConfig,
    SceneGenConfig,
};
use tlc_core::confidence::{
    aggregate, energy_conf, entropy_conf, logit_conf, softmax_conf, AggregationMethod,
    AggregationSpan,
};
use tlc_core::domain::{
    extract_concept_spans, validate_beam, Caption, TokenDistribution, Vocabulary,
};

fn logits_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0..50.0f64, 2..32)
}

fn dist(logits: Vec<f64>) -> TokenDistribution<f64> {
    let n = logits.len();
    TokenDistribution::new(logits, n).unwrap()
}

proptest! {
    #[test]
    fn softmax_sums_to_one(logits in logits_strategy()) {
        let d = dist(logits.clone());
        let total: f64 = (0..logits.len())
            .map(|i| softmax_conf(&d, i).unwrap())
            .sum();
        prop_assert!((total - 1.0).abs() < 1e-12, "sum = {total}");
    }

    #[test]
    fn entropy_bounds(logits in logits_strategy()) {
        let d = dist(logits.clone());
        let h = entropy_conf(&d);
        let lower = -(logits.len() as f64).ln();
        prop_assert!(h <= 1e-12 && h >= lower - 1e-9, "got {h}, bounds [{lower}, 0]");
    }

    #[test]
    fn min_never_exceeds_mean(values in prop::collection::vec(0.0..1.0f64, 1..12)) {
        let vocab = toy_vocabulary();
        // Build a terminated caption one longer than the value list so
        // full-sequence aggregation sees exactly `values`.
        let mut tokens = vec![vocab.index_of("a").unwrap(); values.len()];
        tokens.push(vocab.eos());
        let caption = Caption::new(tokens, &vocab).unwrap();
        let mut confs = values.clone();
        confs.push(0.0); // EOS slot, excluded
        let min = aggregate(&confs, AggregationSpan::FullSequence, &caption, AggregationMethod::Min).unwrap();
        let mean = aggregate(&confs, AggregationSpan::FullSequence, &caption, AggregationMethod::Mean).unwrap();
        prop_assert!(min <= mean + 1e-15);
    }

    #[test]
    fn shift_invariance_and_equivariance(logits in logits_strategy(), shift in -10.0..10.0f64, idx_seed in any::<u32>()) {
        let idx = idx_seed as usize % logits.len();
        let base = dist(logits.clone());
        let shifted = dist(logits.iter().map(|z| z + shift).collect());

        let softmax_delta = (softmax_conf(&shifted, idx).unwrap() - softmax_conf(&base, idx).unwrap()).abs();
        prop_assert!(softmax_delta < 1e-12, "softmax moved by {softmax_delta}");

        let entropy_delta = (entropy_conf(&shifted) - entropy_conf(&base)).abs();
        prop_assert!(entropy_delta < 1e-12, "entropy moved by {entropy_delta}");

        let logit_delta = (logit_conf(&shifted, idx).unwrap() - logit_conf(&base, idx).unwrap() - shift).abs();
        prop_assert!(logit_delta < 1e-12, "logit shift off by {logit_delta}");

        let energy_delta = (energy_conf(&shifted, 1.0).unwrap() - energy_conf(&base, 1.0).unwrap() - shift).abs();
        prop_assert!(energy_delta < 1e-12, "energy shift off by {energy_delta}");
    }
}

/// Brute force: test every distinct score as a threshold, recompute
/// precision and recall directly, apply the selection rule literally.
fn brute_force_select(scores: &[f64], labels: &[bool], alpha: f64) -> Option<(f64, f64)> {
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut best: Option<(f64, f64)> = None;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    for &t in &thresholds {
        let tp = scores
            .iter()
            .zip(labels)
            .filter(|(&s, &l)| s >= t && l)
            .count();
        let fp = scores
            .iter()
            .zip(labels)
            .filter(|(&s, &l)| s >= t && !l)
            .count();
        let precision = tp as f64 / (tp + fp) as f64;
        if precision < alpha {
            continue;
        }
        let recall = tp as f64 / positives as f64;
        best = match best {
            None => Some((t, recall)),
            Some((bg, br)) => {
                if recall > br || (recall == br && t < bg) {
                    Some((t, recall))
                } else {
                    Some((bg, br))
                }
            }
        };
    }
    best
}

proptest! {
    #[test]
    fn threshold_selection_matches_brute_force(
        raw in prop::collection::vec((0u8..40, any::<bool>()), 1..50),
        alpha_step in 1u8..=20,
    ) {
        // Quantized scores force ties through both code paths.
        let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 8.0).collect();
        let labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
        let alpha = alpha_step as f64 / 20.0;
        let set = ScoredLabelSet::new(scores.clone(), labels.clone()).unwrap();
        let got = select_threshold(&set, alpha).unwrap();
        let expected = brute_force_select(&scores, &labels, alpha);
        match (got, expected) {
            (ThresholdSelection::Unattainable, None) => {}
            (ThresholdSelection::Selected { gamma, recall, .. }, Some((g, r))) => {
                prop_assert_eq!(gamma, g);
                prop_assert_eq!(recall, r);
            }
            (got, expected) => prop_assert!(false, "mismatch: {:?} vs {:?}", got, expected),
        }
    }

    #[test]
    fn recall_non_increasing_in_alpha(
        raw in prop::collection::vec((0u8..40, any::<bool>()), 2..50),
    ) {
        let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 8.0).collect();
        let labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
        prop_assume!(labels.iter().any(|&l| l));
        let set = ScoredLabelSet::new(scores, labels).unwrap();
        let mut previous = f64::INFINITY;
        for step in 1..=20 {
            let alpha = step as f64 / 20.0;
            let recall = match select_threshold(&set, alpha).unwrap() {
                ThresholdSelection::Selected { recall, .. } => recall,
                ThresholdSelection::Unattainable => 0.0,
            };
            prop_assert!(recall <= previous + 1e-15, "recall rose from {previous} to {recall} at alpha {alpha}");
            previous = recall;
        }
    }

    #[test]
    fn auc_is_invariant_under_monotone_transforms(
        raw in prop::collection::vec((0u8..40, any::<bool>()), 2..50),
    ) {
        let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 8.0).collect();
        let labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
        prop_assume!(labels.iter().any(|&l| l));
        let base = ScoredLabelSet::new(scores.clone(), labels.clone()).unwrap();
        let base_auc = tlc_core::calibration::auc(&pr_curve(&base).unwrap());
        for transform in [|x: f64| x.exp(), |x: f64| 3.0 * x + 1.0, |x: f64| x.powi(3)] {
            let mapped: Vec<f64> = scores.iter().map(|&s| transform(s)).collect();
            let set = ScoredLabelSet::new(mapped, labels.clone()).unwrap();
            let mapped_auc = tlc_core::calibration::auc(&pr_curve(&set).unwrap());
            prop_assert!((mapped_auc - base_auc).abs() < 1e-12);
        }
    }
}

fn arbitrary_caption(vocab: &Vocabulary) -> impl Strategy<Value = Caption> {
    let body: Vec<usize> = (0..vocab.len())
        .filter(|&t| !vocab.is_special(t))
        .collect();
    let eos = vocab.eos();
    prop::collection::vec(prop::sample::select(body), 0..10).prop_map(move |mut tokens| {
        tokens.push(eos);
        Caption::new(tokens, &toy_vocabulary()).unwrap()
    })
}

proptest! {
    #[test]
    fn concept_spans_are_sorted_disjoint_and_complete(caption in arbitrary_caption(&toy_vocabulary())) {
        let vocab = toy_vocabulary();
        let spans = extract_concept_spans(&caption, &vocab);
        for pair in spans.windows(2) {
            prop_assert!(pair[0].start < pair[1].start);
            prop_assert!(pair[0].end <= pair[1].start);
        }
        let mut from_spans: Vec<usize> = spans.iter().map(|s| s.concept).collect();
        let mut from_caption: Vec<usize> = caption
            .body()
            .iter()
            .copied()
            .filter(|&t| vocab.is_object(t))
            .collect();
        from_spans.sort_unstable();
        from_caption.sort_unstable();
        prop_assert_eq!(from_spans, from_caption);
        for span in &spans {
            prop_assert!(span.end <= caption.body().len());
        }
    }
}

#[test]
fn captioner_beams_always_validate() {
    let vocab = toy_vocabulary();
    let grammar = GrammarConfig::standard(&vocab);
    let captioner = Captioner::new(vocab.clone(), grammar, CaptionerParams::default(), 7).unwrap();
    for id in 0..30 {
        let scene = generate_scene(11, id, &vocab, &SceneGenConfig::default()).unwrap();
        for beam in beam_search::<f64>(&captioner, &scene, 6, 16).unwrap() {
            assert!(validate_beam(&beam, &vocab).is_ok());
        }
    }
}

/// Corrupted object emissions carry visibly lower softmax confidence
/// than faithful ones, the separation the whole method rests on.
#[test]
fn corrupted_tokens_score_below_faithful_tokens() {
    let vocab = toy_vocabulary();
    let grammar = GrammarConfig::standard(&vocab);
    let captioner =
        Captioner::new(vocab.clone(), grammar.clone(), CaptionerParams::default(), 13).unwrap();
    let cfg = SceneGenConfig::default();
    let mut faithful = Vec::new();
    let mut corrupted = Vec::new();
    let mut id = 0u64;
    while faithful.len() < 1000 || corrupted.len() < 1000 {
        let scene = generate_scene(17, id, &vocab, &cfg).unwrap();
        id += 1;
        let canonical: Vec<usize> = {
            let beams = beam_search::<f64>(&captioner, &scene, 1, 16).unwrap();
            beams[0].caption.tokens().to_vec()
        };
        for k in 0..canonical.len() {
            let (dist, target) = captioner.step_detail::<f64>(&scene, &canonical[..k]).unwrap();
            if !vocab.is_object(target.token) {
                continue;
            }
            let conf = softmax_conf(&dist, target.token).unwrap();
            if target.corrupted {
                corrupted.push(conf);
            } else {
                faithful.push(conf);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let separation = mean(&faithful) - mean(&corrupted);
    assert!(
        separation >= 0.05,
        "mean faithful {:.4} vs corrupted {:.4}",
        mean(&faithful),
        mean(&corrupted)
    );
}
