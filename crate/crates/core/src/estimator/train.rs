//! Training loop for the confidence estimator: Adam on the mean binary
//! cross-entropy, linear warmup followed by polynomial (linear) decay to
//! the final learning rate, and global gradient-norm clipping. The loop
//! is fully deterministic for a fixed seed: examples are consumed in
//! supplier order and reduced left to right.

use serde::{Deserialize, Serialize};

use super::network::{backward, forward_cached, EstimatorDims, EstimatorInput, EstimatorParams};
use crate::error::{CoreError, Result};
use crate::Float;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_ratio: f64,
    pub final_learning_rate: f64,
    pub grad_clip_norm: f64,
    /// Weight on the positive-class BCE term; 1.0 keeps the loss
    /// unweighted despite the class imbalance.
    pub pos_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 256,
            learning_rate: 1e-3,
            warmup_ratio: 0.06,
            final_learning_rate: 2e-7,
            grad_clip_norm: 1.0,
            pos_weight: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CoreError::InvalidConfig(
                "epochs and batch size must be positive".into(),
            ));
        }
        if self.learning_rate <= 0.0
            || self.final_learning_rate <= 0.0
            || self.grad_clip_norm <= 0.0
            || self.pos_weight <= 0.0
        {
            return Err(CoreError::InvalidConfig(
                "rates, clip norm, and pos weight must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(CoreError::InvalidConfig(
                "warmup ratio must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate at step `t` of `total`: linear warmup to the peak,
    /// then linear decay to the final rate.
    pub fn learning_rate_at(&self, step: usize, total_steps: usize) -> f64 {
        let warmup = ((total_steps as f64) * self.warmup_ratio).floor() as usize;
        if step < warmup {
            return self.learning_rate * (step + 1) as f64 / warmup as f64;
        }
        if total_steps <= warmup {
            return self.learning_rate;
        }
        let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
        self.final_learning_rate
            + (self.learning_rate - self.final_learning_rate) * (1.0 - progress)
    }
}

/// One featurized, labeled example.
#[derive(Debug, Clone)]
pub struct LabeledInput {
    pub input: EstimatorInput,
    pub label: bool,
}

/// Yields the labeled examples for one epoch; called once per epoch so
/// references and positions can be re-sampled every time.
pub trait ExampleSupplier {
    fn examples_for_epoch(&mut self, epoch: usize) -> Result<Vec<LabeledInput>>;
}

impl<F> ExampleSupplier for F
where
    F: FnMut(usize) -> Result<Vec<LabeledInput>>,
{
    fn examples_for_epoch(&mut self, epoch: usize) -> Result<Vec<LabeledInput>> {
        self(epoch)
    }
}

/// Trained weights plus the per-epoch mean loss trace.
pub struct TrainOutcome<T: Float> {
    pub params: EstimatorParams<T>,
    pub loss_trace: Vec<f64>,
}

impl<T: Float> TrainOutcome<T> {
    /// Loss trace as `epoch,loss` CSV.
    pub fn loss_trace_csv(&self) -> String {
        let mut out = String::from("epoch,loss\n");
        for (epoch, loss) in self.loss_trace.iter().enumerate() {
            out.push_str(&format!("{epoch},{loss}\n"));
        }
        out
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, theta: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for i in 0..theta.len() {
            let g = grads[i];
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + Self::EPS);
        }
    }
}

/// Minimizes mean BCE over the supplied examples. The supplier is asked
/// for a fresh example set at every epoch; the first epoch's size fixes
/// the schedule's step count.
pub fn train_estimator<T: Float>(
    supplier: &mut dyn ExampleSupplier,
    dims: EstimatorDims,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let mut params = EstimatorParams::<T>::init(dims, config.seed)?;
    let n_params = params.flat_len();
    let mut adam = Adam::new(n_params);
    let mut loss_trace = Vec::with_capacity(config.epochs);
    let mut total_steps = None;
    let mut step = 0usize;
    let pos_weight = T::from_f64_lossy(config.pos_weight);

    for epoch in 0..config.epochs {
        let examples = supplier.examples_for_epoch(epoch)?;
        if examples.is_empty() {
            return Err(CoreError::EmptyInput(format!(
                "epoch {epoch} supplied no examples"
            )));
        }
        let steps_per_epoch = examples.len().div_ceil(config.batch_size);
        let total = *total_steps.get_or_insert(steps_per_epoch * config.epochs);

        let mut epoch_loss = 0.0f64;
        for batch in examples.chunks(config.batch_size) {
            let mut grads = EstimatorParams::<T>::zeros(dims)?;
            let mut batch_loss = T::zero();
            for example in batch {
                let (_, cache) = forward_cached(&params, &example.input)?;
                batch_loss += backward(
                    &params,
                    &example.input,
                    &cache,
                    example.label,
                    pos_weight,
                    &mut grads,
                );
            }
            let scale = 1.0 / batch.len() as f64;
            epoch_loss += batch_loss.to_f64().unwrap();

            let mut flat_grads: Vec<f64> = grads
                .to_flat()
                .iter()
                .map(|g| g.to_f64().unwrap() * scale)
                .collect();
            let norm: f64 = flat_grads.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(CoreError::NonFiniteLoss { epoch });
            }
            if norm > config.grad_clip_norm {
                let shrink = config.grad_clip_norm / norm;
                for g in &mut flat_grads {
                    *g *= shrink;
                }
            }

            let mut theta: Vec<f64> = params.to_flat().iter().map(|p| p.to_f64().unwrap()).collect();
            adam.step(&mut theta, &flat_grads, config.learning_rate_at(step, total));
            let theta_t: Vec<T> = theta.into_iter().map(T::from_f64_lossy).collect();
            params.from_flat(&theta_t)?;
            step += 1;
        }

        let mean_loss = epoch_loss / examples.len() as f64;
        if !mean_loss.is_finite() {
            return Err(CoreError::NonFiniteLoss { epoch });
        }
        loss_trace.push(mean_loss);
    }

    Ok(TrainOutcome { params, loss_trace })
}
