use super::network::{backward, bce_loss, forward_cached, EstimatorInput, EstimatorParams};
use crate::error::{CoreError, Result};
use crate::Float;

/// Compares the analytic BCE gradient of every parameter against central
/// finite differences and returns the maximum relative error
/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
///
/// Runs in the scalar type's native precision; call with `f64` params for
/// meaningful bounds.
pub fn gradient_check<T: Float>(
    params: &EstimatorParams<T>,
    input: &EstimatorInput,
    label: bool,
    eps: f64,
) -> Result<f64> {
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(CoreError::InvalidConfig(format!(
            "finite-difference step {eps} outside [1e-6, 1e-4]"
        )));
    }
    let pos_weight = T::one();

    let mut analytic = EstimatorParams::zeros(params.dims)?;
    let (_, cache) = forward_cached(params, input)?;
    backward(params, input, &cache, label, pos_weight, &mut analytic);
    let analytic = analytic.to_flat();

    let mut work = params.clone();
    let step = T::from_f64_lossy(eps);
    let floor = 1e-8f64;
    let mut max_rel = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let original = work.flat_get(i);
        work.flat_set(i, original + step);
        let (_, cache_plus) = forward_cached(&work, input)?;
        let loss_plus = bce_loss(cache_plus.logit, label, pos_weight);
        work.flat_set(i, original - step);
        let (_, cache_minus) = forward_cached(&work, input)?;
        let loss_minus = bce_loss(cache_minus.logit, label, pos_weight);
        work.flat_set(i, original);

        let numeric = (loss_plus - loss_minus) / (step + step);
        let a64 = a.to_f64().unwrap();
        let n64 = numeric.to_f64().unwrap();
        let rel = (a64 - n64).abs() / floor.max(a64.abs() + n64.abs());
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
