//! Perturbative gradient training.
//!
//! Each step draws an integer direction `PM`, evaluates the loss at
//! `theta + delta*PM` and `theta - delta*PM`, and turns the central difference
//! into a signed update on the probed coordinates. No backward pass is ever
//! taken, so any stage of the model may be an opaque reservoir.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_len, Error, Pass, Result};
use crate::optimizer::OptimizerState;
use crate::param_space::{
    perturb_into, sample_perturbation, ParameterVector, PerturbationMatrix, PgtConfig,
    ResamplePolicy, Sign,
};
use crate::trace::{EpochRecord, TrainingTrace};

/// A model whose loss can be evaluated at arbitrary parameter values.
///
/// `loss` receives the full trainable vector explicitly so the trainer can
/// probe perturbed parameters without mutating the model.
pub trait Model {
    type Sample;

    fn parameters(&self) -> &ParameterVector;

    fn parameters_mut(&mut self) -> &mut ParameterVector;

    fn loss(&mut self, theta: &[f64], sample: &Self::Sample) -> Result<f64>;

    /// True when the model carries state between forward passes.
    fn is_stateful(&self) -> bool {
        false
    }

    /// Batched loss evaluation is only meaningful for simulated stages.
    fn supports_batching(&self) -> bool {
        true
    }
}

/// A model whose loss gradient is available analytically.
pub trait DifferentiableModel: Model {
    fn loss_and_gradient(&mut self, theta: &[f64], sample: &Self::Sample) -> Result<(f64, Vec<f64>)>;
}

/// How the two perturbed forward passes of one step are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PassMode {
    Sequential,
    /// Only valid for stateless loss oracles.
    Concurrent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    /// Directional slope `(L+ - L-) / (2 delta)`.
    pub grad: f64,
    pub update: Vec<f64>,
    pub loss_plus: f64,
    pub loss_minus: f64,
}

impl GradientEstimate {
    /// Loss estimate at the unperturbed point (exact for quadratics).
    pub fn midpoint_loss(&self) -> f64 {
        0.5 * (self.loss_plus + self.loss_minus)
    }
}

fn central_difference(
    loss_plus: f64,
    loss_minus: f64,
    pm: &PerturbationMatrix,
    delta: f64,
) -> Result<GradientEstimate> {
    if !loss_plus.is_finite() {
        return Err(Error::NonFiniteLoss { pass: Pass::Plus, value: loss_plus });
    }
    if !loss_minus.is_finite() {
        return Err(Error::NonFiniteLoss { pass: Pass::Minus, value: loss_minus });
    }
    let grad = (loss_plus - loss_minus) / (2.0 * delta);
    Ok(GradientEstimate {
        grad,
        update: build_update(grad, pm),
        loss_plus,
        loss_minus,
    })
}

/// Estimates the loss slope along `pm` with exactly two oracle calls.
pub fn estimate_gradient<F>(
    mut loss_oracle: F,
    theta: &[f64],
    pm: &PerturbationMatrix,
    delta: f64,
) -> Result<GradientEstimate>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    check_len("perturbation matrix", theta.len(), pm.len())?;
    let mut buf = Vec::with_capacity(theta.len());
    perturb_into(theta, pm, delta, Sign::Plus, &mut buf)?;
    let loss_plus = loss_oracle(&buf)?;
    if !loss_plus.is_finite() {
        return Err(Error::NonFiniteLoss { pass: Pass::Plus, value: loss_plus });
    }
    perturb_into(theta, pm, delta, Sign::Minus, &mut buf)?;
    let loss_minus = loss_oracle(&buf)?;
    central_difference(loss_plus, loss_minus, pm, delta)
}

/// Like [`estimate_gradient`] but runs the two passes on separate threads.
/// The oracle must not depend on call order.
pub fn estimate_gradient_concurrent<F>(
    loss_oracle: F,
    theta: &[f64],
    pm: &PerturbationMatrix,
    delta: f64,
) -> Result<GradientEstimate>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    check_len("perturbation matrix", theta.len(), pm.len())?;
    let mut plus = Vec::new();
    let mut minus = Vec::new();
    perturb_into(theta, pm, delta, Sign::Plus, &mut plus)?;
    perturb_into(theta, pm, delta, Sign::Minus, &mut minus)?;
    let oracle = &loss_oracle;
    let (lp, lm) = std::thread::scope(|s| {
        let handle = s.spawn(|| oracle(&plus));
        let lm = oracle(&minus);
        (handle.join().expect("loss oracle panicked"), lm)
    });
    central_difference(lp?, lm?, pm, delta)
}

/// `grad * PM / |PM|` elementwise, with zero wherever the entry is zero.
pub fn build_update(grad: f64, pm: &PerturbationMatrix) -> Vec<f64> {
    pm.entries()
        .iter()
        .zip(pm.counts())
        .map(|(&e, &c)| if c == 0 { 0.0 } else { grad * f64::from(e) / f64::from(c) })
        .collect()
}

/// Mean loss over `samples` at `theta`.
pub fn evaluate<M: Model>(model: &mut M, theta: &[f64], samples: &[M::Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for s in samples {
        total += model.loss(theta, s)?;
    }
    Ok(total / samples.len() as f64)
}

/// Independent RNG streams derived from one seed.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) const PERTURBATION_STREAM: u64 = 1;
pub(crate) const ORDER_STREAM: u64 = 2;

/// Trains `model` with paired perturbed forward passes.
///
/// Epoch 0 of the returned trace holds the losses at the initial parameters.
/// For later epochs `train_loss` is the mean of `(L+ + L-)/2` over the samples
/// seen in that epoch and `test_loss` is evaluated once at the unperturbed
/// parameters after the epoch.
pub fn pgt_train<M: Model>(
    model: &mut M,
    train: &[M::Sample],
    test: &[M::Sample],
    config: &PgtConfig,
    epochs: usize,
) -> Result<TrainingTrace> {
    pgt_train_until(model, train, test, config, epochs, StopRule::Never)
}

/// When to end a run before the epoch budget is spent.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopRule {
    #[default]
    Never,
    /// Stop once the test loss is at or below this fraction of its initial value.
    TestLossFraction(f64),
}

impl StopRule {
    pub(crate) fn reached(self, trace: &TrainingTrace) -> bool {
        match (self, trace.records().first(), trace.last()) {
            (StopRule::TestLossFraction(f), Some(first), Some(last)) => {
                last.epoch > 0 && last.test_loss <= f * first.test_loss
            }
            _ => false,
        }
    }
}

/// [`pgt_train`] with an early-stopping rule.
pub fn pgt_train_until<M: Model>(
    model: &mut M,
    train: &[M::Sample],
    test: &[M::Sample],
    config: &PgtConfig,
    epochs: usize,
    stop: StopRule,
) -> Result<TrainingTrace> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    if config.batch_size > 1 && (!model.supports_batching() || model.is_stateful()) {
        return Err(Error::InvalidConfig(
            "batched perturbation passes need a simulated, stateless model".into(),
        ));
    }

    let snapshot = toml::to_string(config).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let method = format!("pgt-{}", config.optimizer.kind);
    let mut trace = TrainingTrace::new(method, config.seed, snapshot);

    let mut pm_rng = stream_rng(config.seed, PERTURBATION_STREAM);
    let mut order_rng = stream_rng(config.seed, ORDER_STREAM);
    let mut theta = model.parameters().values().to_vec();
    let mut optimizer = OptimizerState::new(config.optimizer.kind, theta.len());
    let start = Instant::now();

    trace.push(EpochRecord {
        epoch: 0,
        train_loss: evaluate(model, &theta, train)?,
        test_loss: evaluate(model, &theta, test)?,
        seconds: 0.0,
    })?;

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut sample_loss = vec![0.0; train.len()];
    let mut pass_losses: [Vec<f64>; 2] = [Vec::new(), Vec::new()];

    for epoch in 1..=epochs {
        order.shuffle(&mut order_rng);
        let epoch_pm = match config.resample {
            ResamplePolicy::PerEpoch => Some(sample_perturbation(theta.len(), config, &mut pm_rng)?),
            ResamplePolicy::PerSample => None,
        };

        for chunk in order.chunks(config.batch_size) {
            let fresh;
            let pm = match &epoch_pm {
                Some(pm) => pm,
                None => {
                    fresh = sample_perturbation(theta.len(), config, &mut pm_rng)?;
                    &fresh
                }
            };

            let mut pass = 0;
            let estimate = estimate_gradient(
                |th| {
                    let losses = &mut pass_losses[pass];
                    pass += 1;
                    losses.clear();
                    for &i in chunk {
                        losses.push(model.loss(th, &train[i])?);
                    }
                    Ok(losses.iter().sum::<f64>() / chunk.len() as f64)
                },
                &theta,
                pm,
                config.delta,
            )?;
            for (k, &i) in chunk.iter().enumerate() {
                sample_loss[i] = 0.5 * (pass_losses[0][k] + pass_losses[1][k]);
            }

            if pm.is_zero() {
                optimizer.tick();
            } else {
                optimizer.step(&mut theta, &estimate.update, &config.optimizer)?;
            }
        }

        model.parameters_mut().set_values(&theta)?;
        let train_loss = sample_loss.iter().sum::<f64>() / train.len() as f64;
        let test_loss = evaluate(model, &theta, test)?;
        trace.push(EpochRecord {
            epoch,
            train_loss,
            test_loss,
            seconds: start.elapsed().as_secs_f64(),
        })?;
        if stop.reached(&trace) {
            break;
        }
    }
    Ok(trace)
}
