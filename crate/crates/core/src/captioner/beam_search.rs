use super::Captioner;
use crate::domain::{CandidateBeam, Caption, Scene};
use crate::error::{CoreError, Result};
use crate::Float;

#[derive(Clone)]
struct Hypothesis<T> {
    tokens: Vec<usize>,
    log_likelihood: T,
}

fn rank_desc<T: Float>(a: &Hypothesis<T>, b: &Hypothesis<T>) -> std::cmp::Ordering {
    b.log_likelihood
        .partial_cmp(&a.log_likelihood)
        .expect("log-likelihoods are finite")
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search over the synthetic model, ranking candidates by their
/// cumulative token log-likelihood with no length normalization. Returns
/// up to `beam_width` terminated beams, best first; exact ties break by
/// lexicographic token order.
///
/// Every EOS continuation encountered is retained as a completed
/// candidate, and the search stops once no live prefix can outrank the
/// current top `beam_width` completions (extending a prefix strictly
/// lowers its score). The synthetic model has full support, so at least
/// the immediate-EOS candidate always terminates; the no-termination
/// error can only fire for models that mask EOS somewhere.
pub fn beam_search<T: Float>(
    captioner: &Captioner,
    scene: &Scene,
    beam_width: usize,
    max_len: usize,
) -> Result<Vec<CandidateBeam<T>>> {
    if beam_width == 0 {
        return Err(CoreError::InvalidConfig("beam width must be ≥ 1".into()));
    }
    if max_len == 0 {
        return Err(CoreError::InvalidConfig("max_len must be ≥ 1".into()));
    }
    let vocab = captioner.vocab();

    let mut live = vec![Hypothesis::<T> {
        tokens: Vec::new(),
        log_likelihood: T::zero(),
    }];
    let mut completed: Vec<Hypothesis<T>> = Vec::new();

    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        if completed.len() >= beam_width {
            completed.sort_by(rank_desc);
            let cutoff = completed[beam_width - 1].log_likelihood;
            let best_live = live
                .iter()
                .map(|h| h.log_likelihood)
                .fold(T::neg_infinity(), T::max);
            if best_live <= cutoff {
                break;
            }
        }

        let mut children: Vec<Hypothesis<T>> = Vec::new();
        for hyp in &live {
            let dist = captioner.step::<T>(scene, &hyp.tokens)?;
            let lse = dist.log_sum_exp();
            for (token, &logit) in dist.logits().iter().enumerate() {
                if token == vocab.bos() || token == vocab.pad() {
                    continue;
                }
                let mut tokens = hyp.tokens.clone();
                tokens.push(token);
                let child = Hypothesis {
                    tokens,
                    log_likelihood: hyp.log_likelihood + (logit - lse),
                };
                if token == vocab.eos() {
                    completed.push(child);
                } else {
                    children.push(child);
                }
            }
        }
        children.sort_by(rank_desc);
        children.truncate(beam_width);
        live = children;
    }

    if completed.is_empty() {
        return Err(CoreError::NoTerminatedBeam {
            max_len,
            partial: live.len(),
        });
    }
    completed.sort_by(rank_desc);
    completed.truncate(beam_width);
    completed
        .into_iter()
        .map(|hyp| {
            let caption = Caption::new(hyp.tokens, vocab)?;
            captioner.force_decode(scene, &caption)
        })
        .collect()
}
