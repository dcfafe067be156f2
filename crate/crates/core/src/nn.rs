//! Dense networks on flat parameter vectors, with an optional reservoir stage.
//!
//! Layers are views (offsets) into a [`ParameterVector`], so the same
//! structure can be evaluated at any perturbed parameter value. Manual
//! backpropagation exists only for the baselines; it refuses to run through a
//! reservoir that hides its gradient.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::engine::{evaluate, stream_rng, DifferentiableModel, Model, StopRule, ORDER_STREAM};
use crate::error::{check_len, Error, Result};
use crate::kernels::dot;
use crate::optimizer::OptimizerState;
use crate::param_space::{LayoutBuilder, OptimizerConfig, ParameterVector};
use crate::reservoir::Reservoir;
use crate::trace::{EpochRecord, TrainingTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Tanh,
    ReLU,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::ReLU => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `y`.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::ReLU => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// How per-element squared errors are combined into one loss value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossReduction {
    /// Sum over output elements.
    Sum,
    /// Sum divided by the number of output elements.
    Mean,
}

impl LossReduction {
    pub fn scale(self, n: usize) -> f64 {
        match self {
            LossReduction::Sum => 1.0,
            LossReduction::Mean => 1.0 / n as f64,
        }
    }
}

/// Sum of squared differences.
pub fn mse_loss(y: &[f64], target: &[f64]) -> Result<f64> {
    check_len("loss target", y.len(), target.len())?;
    Ok(y.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Affine map plus activation, stored as offsets into a flat parameter vector.
/// Weights are row-major `outputs x inputs`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl DenseLayer {
    pub fn register(
        builder: &mut LayoutBuilder,
        name: &str,
        inputs: usize,
        outputs: usize,
        activation: Activation,
    ) -> Self {
        let weight_offset = builder.push(format!("{name}.weight"), &[outputs, inputs]);
        let bias_offset = builder.push(format!("{name}.bias"), &[outputs]);
        Self {
            inputs,
            outputs,
            activation,
            weight_offset,
            bias_offset,
        }
    }

    pub fn param_count(&self) -> usize {
        self.outputs * (self.inputs + 1)
    }

    fn weights<'a>(&self, theta: &'a [f64]) -> &'a [f64] {
        &theta[self.weight_offset..self.weight_offset + self.inputs * self.outputs]
    }

    fn bias<'a>(&self, theta: &'a [f64]) -> &'a [f64] {
        &theta[self.bias_offset..self.bias_offset + self.outputs]
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and bias.
    pub fn init<R: Rng + ?Sized>(&self, theta: &mut [f64], rng: &mut R) {
        let bound = 1.0 / (self.inputs as f64).sqrt();
        for i in 0..self.inputs * self.outputs {
            theta[self.weight_offset + i] = rng.gen_range(-bound..=bound);
        }
        for i in 0..self.outputs {
            theta[self.bias_offset + i] = rng.gen_range(-bound..=bound);
        }
    }

    pub fn forward(&self, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        check_len("dense layer input", self.inputs, x.len())?;
        let w = self.weights(theta);
        Ok(self
            .bias(theta)
            .iter()
            .enumerate()
            .map(|(r, &b)| {
                let row = &w[r * self.inputs..(r + 1) * self.inputs];
                let z = b + dot(row, x);
                self.activation.apply(z)
            })
            .collect())
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    /// `y` is this layer's forward output for input `x`.
    pub fn backward(&self, theta: &[f64], x: &[f64], y: &[f64], dy: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let w = self.weights(theta);
        let mut dx = vec![0.0; self.inputs];
        for r in 0..self.outputs {
            let dz = dy[r] * self.activation.derivative_from_output(y[r]);
            if dz == 0.0 {
                continue;
            }
            grad[self.bias_offset + r] += dz;
            let row_off = self.weight_offset + r * self.inputs;
            let row = &w[r * self.inputs..(r + 1) * self.inputs];
            for c in 0..self.inputs {
                grad[row_off + c] += dz * x[c];
                dx[c] += dz * row[c];
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    pub inputs: usize,
    /// Hidden widths before the reservoir (or before the output without one).
    pub hidden: Vec<usize>,
    /// Width fed into the reservoir; must equal the reservoir input size.
    pub reservoir_in: usize,
    pub outputs: usize,
    pub hidden_activation: Activation,
    pub loss: LossReduction,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            inputs: 30,
            hidden: vec![200, 200],
            reservoir_in: 5,
            outputs: 2,
            hidden_activation: Activation::Tanh,
            loss: LossReduction::Sum,
            seed: 0,
        }
    }
}

/// Dense front end, optional black-box reservoir, dense readout.
pub struct MlpWithReservoir {
    pre: Vec<DenseLayer>,
    reservoir: Option<Box<dyn Reservoir>>,
    readout: Vec<DenseLayer>,
    params: ParameterVector,
    reduction: LossReduction,
}

struct ForwardCache {
    /// Inputs to each pre layer followed by its output.
    pre: Vec<Vec<f64>>,
    reservoir_out: Option<Vec<f64>>,
    readout: Vec<Vec<f64>>,
}

impl MlpWithReservoir {
    /// Builds `inputs -> hidden.. -> reservoir_in -> [reservoir] -> outputs`.
    pub fn new(config: &MlpConfig, reservoir: Box<dyn Reservoir>) -> Result<Self> {
        if reservoir.input_dim() != config.reservoir_in {
            return Err(Error::InvalidConfig(format!(
                "network feeds {} values into a reservoir expecting {}",
                config.reservoir_in,
                reservoir.input_dim()
            )));
        }
        let mut b = LayoutBuilder::new();
        let mut widths = vec![config.inputs];
        widths.extend(&config.hidden);
        widths.push(config.reservoir_in);
        let pre = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| DenseLayer::register(&mut b, &format!("pre{i}"), w[0], w[1], config.hidden_activation))
            .collect();
        let readout = vec![DenseLayer::register(
            &mut b,
            "readout",
            reservoir.output_dim(),
            config.outputs,
            Activation::Identity,
        )];
        Self::assemble(b, pre, Some(reservoir), readout, config.loss, config.seed)
    }

    /// Plain dense network over `sizes`, identity on the last layer.
    pub fn plain(sizes: &[usize], hidden: Activation, loss: LossReduction, seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidConfig("need at least input and output widths".into()));
        }
        let mut b = LayoutBuilder::new();
        let n = sizes.len() - 1;
        let readout = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i + 1 == n { Activation::Identity } else { hidden };
                DenseLayer::register(&mut b, &format!("layer{i}"), w[0], w[1], act)
            })
            .collect();
        Self::assemble(b, Vec::new(), None, readout, loss, seed)
    }

    fn assemble(
        builder: LayoutBuilder,
        pre: Vec<DenseLayer>,
        reservoir: Option<Box<dyn Reservoir>>,
        readout: Vec<DenseLayer>,
        reduction: LossReduction,
        seed: u64,
    ) -> Result<Self> {
        let mut params = ParameterVector::zeros(builder.finish())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in pre.iter().chain(&readout) {
            layer.init(params.values_mut(), &mut rng);
        }
        Ok(Self {
            pre,
            reservoir,
            readout,
            params,
            reduction,
        })
    }

    pub fn layers(&self) -> impl Iterator<Item = &DenseLayer> {
        self.pre.iter().chain(&self.readout)
    }

    pub fn has_reservoir(&self) -> bool {
        self.reservoir.is_some()
    }

    pub fn input_dim(&self) -> usize {
        self.pre.first().or(self.readout.first()).map_or(0, |l| l.inputs)
    }

    pub fn reduction(&self) -> LossReduction {
        self.reduction
    }

    pub fn forward(&mut self, theta: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(theta, input)?.readout.pop().expect("readout output"))
    }

    fn forward_cached(&mut self, theta: &[f64], input: &[f64]) -> Result<ForwardCache> {
        check_len("parameter vector", self.params.len(), theta.len())?;
        check_len("network input", self.input_dim(), input.len())?;
        let mut pre = vec![input.to_vec()];
        for layer in &self.pre {
            let next = layer.forward(theta, pre.last().unwrap())?;
            pre.push(next);
        }
        let reservoir_out = match self.reservoir.as_mut() {
            Some(res) => {
                if res.is_stateful() {
                    res.reset_state();
                }
                Some(res.forward(pre.last().unwrap())?)
            }
            None => None,
        };
        let mut readout = vec![reservoir_out.clone().unwrap_or_else(|| pre.last().unwrap().clone())];
        for layer in &self.readout {
            let next = layer.forward(theta, readout.last().unwrap())?;
            readout.push(next);
        }
        Ok(ForwardCache {
            pre,
            reservoir_out,
            readout,
        })
    }

    fn reduce(&self, y: &[f64], target: &[f64]) -> Result<f64> {
        Ok(mse_loss(y, target)? * self.reduction.scale(y.len()))
    }

    /// Analytic gradient of the loss with respect to every trainable parameter.
    pub fn backprop_gradients(&mut self, theta: &[f64], input: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
        if let Some(res) = &self.reservoir {
            if !res.gradient_available() {
                return Err(Error::GradientUnavailable(
                    "the reservoir stage is opaque; use perturbative training".into(),
                ));
            }
        }
        let cache = self.forward_cached(theta, input)?;
        let y = cache.readout.last().unwrap();
        let loss = self.reduce(y, target)?;
        let scale = 2.0 * self.reduction.scale(y.len());
        let mut d: Vec<f64> = y.iter().zip(target).map(|(a, b)| scale * (a - b)).collect();
        let mut grad = vec![0.0; theta.len()];

        for (i, layer) in self.readout.iter().enumerate().rev() {
            d = layer.backward(theta, &cache.readout[i], &cache.readout[i + 1], &d, &mut grad);
        }
        if let Some(res) = &self.reservoir {
            debug_assert!(cache.reservoir_out.is_some());
            d = res.input_gradient(cache.pre.last().unwrap(), &d)?;
        }
        for (i, layer) in self.pre.iter().enumerate().rev() {
            d = layer.backward(theta, &cache.pre[i], &cache.pre[i + 1], &d, &mut grad);
        }
        Ok((loss, grad))
    }
}

impl Model for MlpWithReservoir {
    type Sample = Example;

    fn parameters(&self) -> &ParameterVector {
        &self.params
    }

    fn parameters_mut(&mut self) -> &mut ParameterVector {
        &mut self.params
    }

    fn loss(&mut self, theta: &[f64], sample: &Example) -> Result<f64> {
        let y = self.forward(theta, &sample.input)?;
        self.reduce(&y, &sample.target)
    }

    fn supports_batching(&self) -> bool {
        self.reservoir.as_ref().is_none_or(|r| r.is_simulated())
    }
}

impl DifferentiableModel for MlpWithReservoir {
    fn loss_and_gradient(&mut self, theta: &[f64], sample: &Example) -> Result<(f64, Vec<f64>)> {
        self.backprop_gradients(theta, &sample.input, &sample.target)
    }
}

/// Per-sample backpropagation training with SGD or Adam.
///
/// The trace layout matches [`crate::engine::pgt_train`]: epoch 0 is the
/// initial evaluation, later `train_loss` values are the mean per-sample
/// losses seen during the epoch.
pub fn backprop_train<M: DifferentiableModel>(
    model: &mut M,
    train: &[M::Sample],
    test: &[M::Sample],
    optimizer: &OptimizerConfig,
    epochs: usize,
    seed: u64,
) -> Result<TrainingTrace> {
    backprop_train_until(model, train, test, optimizer, epochs, seed, StopRule::Never)
}

/// [`backprop_train`] with an early-stopping rule.
pub fn backprop_train_until<M: DifferentiableModel>(
    model: &mut M,
    train: &[M::Sample],
    test: &[M::Sample],
    optimizer: &OptimizerConfig,
    epochs: usize,
    seed: u64,
    stop: StopRule,
) -> Result<TrainingTrace> {
    optimizer.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    let snapshot = toml::to_string(optimizer).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut trace = TrainingTrace::new(format!("backprop-{}", optimizer.kind), seed, snapshot);
    let mut order_rng = stream_rng(seed, ORDER_STREAM);
    let mut theta = model.parameters().values().to_vec();
    let mut state = OptimizerState::new(optimizer.kind, theta.len());
    let start = Instant::now();

    trace.push(EpochRecord {
        epoch: 0,
        train_loss: evaluate(model, &theta, train)?,
        test_loss: evaluate(model, &theta, test)?,
        seconds: 0.0,
    })?;

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut sample_loss = vec![0.0; train.len()];
    for epoch in 1..=epochs {
        order.shuffle(&mut order_rng);
        for &i in &order {
            let (loss, grad) = model.loss_and_gradient(&theta, &train[i])?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteTrainingLoss { epoch, value: loss });
            }
            sample_loss[i] = loss;
            state.step(&mut theta, &grad, optimizer)?;
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reservoir::{BlackBox, FrozenNetConfig, FrozenNetReservoir};
    use approx::assert_abs_diff_eq;

    fn example(input: &[f64], target: &[f64]) -> Example {
        Example { input: input.to_vec(), target: target.to_vec() }
    }

    #[test]
    fn identity_layer_passes_input() {
        let mut net = MlpWithReservoir::plain(&[2, 2], Activation::Tanh, LossReduction::Sum, 0).unwrap();
        net.parameters_mut().set_values(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let theta = net.parameters().values().to_vec();
        assert_eq!(net.forward(&theta, &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn hand_matrix_forward() {
        let mut net = MlpWithReservoir::plain(&[2, 2], Activation::Tanh, LossReduction::Sum, 0).unwrap();
        let theta = [1.0, 0.0, 0.0, -1.0, 0.5, 0.5];
        assert_eq!(net.forward(&theta, &[1.0, 1.0]).unwrap(), vec![1.5, -0.5]);
    }

    #[test]
    fn zero_input_zero_bias_stays_zero() {
        let net = MlpWithReservoir::plain(&[3, 4, 4, 2], Activation::Tanh, LossReduction::Sum, 1).unwrap();
        let mut theta = net.parameters().values().to_vec();
        for layer in net.layers() {
            theta[layer.bias_offset..layer.bias_offset + layer.outputs].fill(0.0);
        }
        let mut h = vec![0.0; 3];
        for layer in net.layers() {
            h = layer.forward(&theta, &h).unwrap();
            assert!(h.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn forward_rejects_bad_input() {
        let mut net = MlpWithReservoir::plain(&[3, 2], Activation::Tanh, LossReduction::Sum, 0).unwrap();
        let theta = net.parameters().values().to_vec();
        assert!(net.forward(&theta, &[1.0]).is_err());
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[0.3, 0.1], &[0.3, 0.1]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2.0);
        assert_eq!(mse_loss(&[0.5], &[0.0]).unwrap(), 0.25);
        assert!(mse_loss(&[0.5], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn single_neuron_gradient() {
        let mut net = MlpWithReservoir::plain(&[1, 1], Activation::Identity, LossReduction::Sum, 0).unwrap();
        let (loss, grad) = net.backprop_gradients(&[1.0, 0.0], &[1.0], &[0.0]).unwrap();
        assert_eq!(loss, 1.0);
        // weight then bias; both see dL/dy = 2
        assert_eq!(grad, vec![2.0, 2.0]);
    }

    #[test]
    fn zero_error_zero_gradient() {
        let mut net = MlpWithReservoir::plain(&[2, 3, 1], Activation::Tanh, LossReduction::Sum, 4).unwrap();
        let theta = net.parameters().values().to_vec();
        let y = net.forward(&theta, &[0.2, -0.1]).unwrap();
        let (_, grad) = net.backprop_gradients(&theta, &[0.2, -0.1], &y).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn relu_gradient_matches_finite_differences() {
        let mut net = MlpWithReservoir::plain(&[3, 5, 2], Activation::ReLU, LossReduction::Mean, 8).unwrap();
        let theta = net.parameters().values().to_vec();
        let x = [0.4, -0.9, 0.3];
        let t = [0.1, -0.2];
        let (_, grad) = net.backprop_gradients(&theta, &x, &t).unwrap();
        let h = 1e-5;
        for i in 0..theta.len() {
            let mut p = theta.clone();
            p[i] += h;
            let lp = net.loss(&p, &example(&x, &t)).unwrap();
            p[i] -= 2.0 * h;
            let lm = net.loss(&p, &example(&x, &t)).unwrap();
            assert_abs_diff_eq!((lp - lm) / (2.0 * h), grad[i], epsilon = 1e-6);
        }
    }

    fn reservoir_net(opaque: bool) -> MlpWithReservoir {
        let res = FrozenNetReservoir::new(FrozenNetConfig {
            input_dim: 2,
            widths: vec![6, 4, 6, 4],
            loop_count: 2,
            seed: 3,
            ..FrozenNetConfig::default()
        })
        .unwrap();
        let boxed: Box<dyn Reservoir> = if opaque { Box::new(BlackBox(res)) } else { Box::new(res) };
        let cfg = MlpConfig { inputs: 3, hidden: vec![4], reservoir_in: 2, outputs: 2, seed: 6, ..MlpConfig::default() };
        MlpWithReservoir::new(&cfg, boxed).unwrap()
    }

    #[test]
    fn reservoir_parameters_are_not_trainable() {
        let net = reservoir_net(false);
        // 3->4, 4->2 before the reservoir, 4->2 readout.
        assert_eq!(net.parameters().len(), (3 * 4 + 4) + (4 * 2 + 2) + (4 * 2 + 2));
    }

    #[test]
    fn gradient_flows_through_simulated_reservoir() {
        let mut net = reservoir_net(false);
        let theta = net.parameters().values().to_vec();
        let s = example(&[0.5, -0.3, 0.8], &[1.0, 0.0]);
        let (_, grad) = net.loss_and_gradient(&theta, &s).unwrap();
        let h = 1e-5;
        for i in 0..theta.len() {
            let mut p = theta.clone();
            p[i] += h;
            let lp = net.loss(&p, &s).unwrap();
            p[i] -= 2.0 * h;
            let lm = net.loss(&p, &s).unwrap();
            assert_abs_diff_eq!((lp - lm) / (2.0 * h), grad[i], epsilon = 1e-7);
        }
    }

    #[test]
    fn opaque_reservoir_refuses_backprop() {
        let mut net = reservoir_net(true);
        let theta = net.parameters().values().to_vec();
        let err = net.loss_and_gradient(&theta, &example(&[0.0; 3], &[0.0; 2])).unwrap_err();
        assert!(matches!(err, Error::GradientUnavailable(_)));
        assert!(!net.supports_batching());
    }

    #[test]
    fn mismatched_reservoir_width_rejected() {
        let res = FrozenNetReservoir::new(FrozenNetConfig::default()).unwrap();
        let cfg = MlpConfig { reservoir_in: 4, ..MlpConfig::default() };
        assert!(MlpWithReservoir::new(&cfg, Box::new(res)).is_err());
    }

    #[test]
    fn separable_pair_is_learned() {
        let mut net = MlpWithReservoir::plain(&[2, 4, 2], Activation::Tanh, LossReduction::Sum, 2).unwrap();
        let data = vec![example(&[1.0, 0.0], &[1.0, 0.0]), example(&[0.0, 1.0], &[0.0, 1.0])];
        let trace = backprop_train(&mut net, &data, &data, &OptimizerConfig::sgd(0.1), 500, 1).unwrap();
        let theta = net.parameters().values().to_vec();
        let final_loss = evaluate(&mut net, &theta, &data).unwrap();
        assert!(final_loss < 1e-3, "{final_loss}");
        assert_eq!(trace.len(), 501);
    }
}
