use super::network::{estimator_forward, EstimatorInput, EstimatorParams};
use crate::confidence::AggregationMethod;
use crate::domain::{Caption, ConceptSpan, Scene};
use crate::error::{CoreError, Result};
use crate::Float;

/// Runs the estimator once per position inside each span of `caption`
/// (prefix = tokens before it, predicted = the caption's own token,
/// postfix = the rest) and aggregates per span. The result preserves the
/// span order; an empty span list yields an empty result.
pub fn score_caption<T: Float>(
    params: &EstimatorParams<T>,
    scene: &Scene,
    caption: &Caption,
    spans: &[ConceptSpan],
    method: AggregationMethod,
) -> Result<Vec<T>> {
    let tokens = caption.tokens();
    let mut scores = Vec::with_capacity(spans.len());
    for span in spans {
        if span.is_empty() || span.end > tokens.len() {
            return Err(CoreError::SpanOutOfBounds {
                start: span.start,
                end: span.end,
                len: tokens.len(),
            });
        }
        let mut values = Vec::with_capacity(span.len());
        for position in span.positions() {
            let input = EstimatorInput::from_scene(scene, tokens.to_vec(), position);
            values.push(estimator_forward(params, &input)?);
        }
        let aggregated = match method {
            AggregationMethod::Min => values.iter().copied().fold(T::infinity(), T::min),
            AggregationMethod::Mean => {
                values.iter().copied().sum::<T>() / T::from_usize(values.len()).unwrap()
            }
        };
        scores.push(aggregated);
    }
    Ok(scores)
}
