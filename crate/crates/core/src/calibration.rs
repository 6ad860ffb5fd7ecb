//! Precision-recall machinery: the PR curve swept over distinct scores,
//! its area, and selection of the decision threshold that maximizes recall
//! subject to a target precision.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::Float;

/// Confidence scores paired with binary correctness labels
/// (`true` = correct, `false` = hallucinated).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Float", deserialize = "T: Float"))]
pub struct ScoredLabelSet<T: Float> {
    scores: Vec<T>,
    labels: Vec<bool>,
}

impl<T: Float> ScoredLabelSet<T> {
    pub fn new(scores: Vec<T>, labels: Vec<bool>) -> Result<Self> {
        if scores.is_empty() {
            return Err(CoreError::EmptyInput("scored label set".into()));
        }
        if scores.len() != labels.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "{} scores vs {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(CoreError::InvalidConfig("NaN score".into()));
        }
        Ok(ScoredLabelSet { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[T] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    /// Pairs sorted by score descending, positives first within a tie so
    /// the cumulative sweep sees whole tie groups at once.
    fn sorted_pairs(&self) -> Vec<(T, bool)> {
        let mut pairs: Vec<(T, bool)> = self
            .scores
            .iter()
            .copied()
            .zip(self.labels.iter().copied())
            .collect();
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("scores are not NaN"));
        pairs
    }
}

/// One PR point: precision and recall of the rule `predict-correct iff
/// score ≥ threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Float", deserialize = "T: Float"))]
pub struct PrPoint<T: Float> {
    pub precision: T,
    pub recall: T,
    pub threshold: T,
}

/// Sweeps every distinct score as a threshold, highest first. Ties share
/// one point. Errors when the set has no positive label.
pub fn pr_curve<T: Float>(set: &ScoredLabelSet<T>) -> Result<Vec<PrPoint<T>>> {
    let positives = set.positives();
    if positives == 0 {
        return Err(CoreError::NoPositiveLabels);
    }
    let pairs = set.sorted_pairs();
    let total_pos = T::from_usize(positives).unwrap();

    let mut points = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < pairs.len() {
        let threshold = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == threshold {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let predicted = T::from_usize(tp + fp).unwrap();
        points.push(PrPoint {
            precision: T::from_usize(tp).unwrap() / predicted,
            recall: T::from_usize(tp).unwrap() / total_pos,
            threshold,
        });
    }
    Ok(points)
}

/// Area under the PR curve by trapezoidal interpolation over recall,
/// anchored at recall 0 with the first point's precision.
pub fn auc<T: Float>(points: &[PrPoint<T>]) -> T {
    let Some(first) = points.first() else {
        return T::zero();
    };
    let mut area = T::zero();
    let mut prev_recall = T::zero();
    let mut prev_precision = first.precision;
    let half = T::from_f64_lossy(0.5);
    for p in points {
        area += (p.recall - prev_recall) * (p.precision + prev_precision) * half;
        prev_recall = p.recall;
        prev_precision = p.precision;
    }
    area
}

/// Outcome of precision-targeted threshold selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Float", deserialize = "T: Float"))]
pub enum ThresholdSelection<T: Float> {
    /// Threshold achieving precision ≥ α with the best recall; recall
    /// ties break toward the lower threshold.
    Selected {
        gamma: T,
        precision: T,
        recall: T,
    },
    /// No threshold reaches the target precision; callers fall back to
    /// never rejecting.
    Unattainable,
}

impl<T: Float> ThresholdSelection<T> {
    /// The threshold to apply, with unattainable mapped to never-reject.
    pub fn gamma_or_never_reject(&self) -> T {
        match *self {
            ThresholdSelection::Selected { gamma, .. } => gamma,
            ThresholdSelection::Unattainable => T::neg_infinity(),
        }
    }
}

/// Among all distinct-score thresholds with precision ≥ `alpha`, the one
/// maximizing recall.
pub fn select_threshold<T: Float>(
    set: &ScoredLabelSet<T>,
    alpha: T,
) -> Result<ThresholdSelection<T>> {
    if alpha <= T::zero() || alpha > T::one() {
        return Err(CoreError::InvalidConfig(format!(
            "target precision {alpha} outside (0, 1]"
        )));
    }
    let positives = set.positives();
    if positives == 0 {
        return Ok(ThresholdSelection::Unattainable);
    }
    let total_pos = T::from_usize(positives).unwrap();
    let pairs = set.sorted_pairs();

    let mut best: Option<(T, T, T)> = None; // (gamma, precision, recall)
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < pairs.len() {
        let threshold = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == threshold {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let precision = T::from_usize(tp).unwrap() / T::from_usize(tp + fp).unwrap();
        let recall = T::from_usize(tp).unwrap() / total_pos;
        if precision < alpha {
            continue;
        }
        let better = match best {
            None => true,
            // Scanning descends in threshold, so an equal recall seen
            // later is the lower-threshold tie-break winner.
            Some((_, _, best_recall)) => recall >= best_recall,
        };
        if better {
            best = Some((threshold, precision, recall));
        }
    }
    Ok(match best {
        Some((gamma, precision, recall)) => ThresholdSelection::Selected {
            gamma,
            precision,
            recall,
        },
        None => ThresholdSelection::Unattainable,
    })
}

/// The binary decision `score ≥ γ`.
pub fn apply_threshold<T: Float>(score: T, gamma: T) -> bool {
    score >= gamma
}

/// Threshold selection bundled with the curve it was read off.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Float", deserialize = "T: Float"))]
pub struct CalibrationResult<T: Float> {
    pub alpha: T,
    pub selection: ThresholdSelection<T>,
    pub pr_points: Vec<PrPoint<T>>,
    pub auc: T,
}

/// PR curve, AUC, and α-targeted selection in one pass.
pub fn calibrate<T: Float>(set: &ScoredLabelSet<T>, alpha: T) -> Result<CalibrationResult<T>> {
    let pr_points = pr_curve(set)?;
    let area = auc(&pr_points);
    let selection = select_threshold(set, alpha)?;
    Ok(CalibrationResult {
        alpha,
        selection,
        pr_points,
        auc: area,
    })
}

/// Renders the curve as `threshold,precision,recall` CSV.
pub fn pr_points_to_csv<T: Float>(points: &[PrPoint<T>]) -> String {
    let mut out = String::from("threshold,precision,recall\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.precision, p.recall));
    }
    out
}

/// Renders the curve as a standalone SVG polyline plot.
pub fn pr_points_to_svg<T: Float>(points: &[PrPoint<T>], title: &str) -> String {
    let (w, h, margin) = (480.0, 360.0, 48.0);
    let plot_w = w - 2.0 * margin;
    let plot_h = h - 2.0 * margin;
    let x = |recall: f64| margin + recall * plot_w;
    let y = |precision: f64| h - margin - precision * plot_h;

    let mut path = String::new();
    let mut prev_precision = points.first().map_or(1.0, |p| p.precision.to_f64().unwrap());
    path.push_str(&format!("{:.2},{:.2}", x(0.0), y(prev_precision)));
    for p in points {
        prev_precision = p.precision.to_f64().unwrap();
        path.push_str(&format!(
            " {:.2},{:.2}",
            x(p.recall.to_f64().unwrap()),
            y(prev_precision)
        ));
    }

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>\n",
        w / 2.0
    ));
    svg.push_str(&format!(
        "  <rect x=\"{margin}\" y=\"{margin}\" width=\"{plot_w}\" height=\"{plot_h}\" fill=\"none\" stroke=\"black\"/>\n"
    ));
    for frac in [0.0, 0.25, 0.5, 0.75, 1.0] {
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{frac}</text>\n",
            x(frac),
            h - margin + 16.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{frac}</text>\n",
            margin - 6.0,
            y(frac) + 3.0
        ));
    }
    svg.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">recall</text>\n",
        w / 2.0,
        h - 8.0
    ));
    svg.push_str(&format!(
        "  <polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"{path}\"/>\n"
    ));
    svg.push_str("</svg>\n");
    svg
}
