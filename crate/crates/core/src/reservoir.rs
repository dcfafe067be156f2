//! Black-box reservoirs.
//!
//! A [`Reservoir`] maps a low-dimensional input to a high-dimensional output.
//! Callers never see its internal parameters; the only ways in are
//! [`Reservoir::forward`], [`Reservoir::reset_state`] and, for simulated
//! reservoirs that permit it, a vector-Jacobian product used by backprop
//! baselines.

use std::collections::hash_map::DefaultHasher;
use std::collections::VecDeque;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::kernels::dot;

pub trait Reservoir: Send {
    fn input_dim(&self) -> usize;

    fn output_dim(&self) -> usize;

    /// Whether outputs depend on earlier inputs.
    fn is_stateful(&self) -> bool;

    /// Whether [`input_gradient`](Self::input_gradient) is implemented.
    fn gradient_available(&self) -> bool {
        false
    }

    /// False for reservoirs standing in for physical hardware.
    fn is_simulated(&self) -> bool {
        true
    }

    /// Runs one input through the reservoir, advancing state once if stateful.
    fn forward(&mut self, input: &[f64]) -> Result<Vec<f64>>;

    /// Same as calling [`forward`](Self::forward) on each input in order.
    fn forward_many(&mut self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        inputs.iter().map(|x| self.forward(x)).collect()
    }

    fn reset_state(&mut self);

    /// `J(input)^T * grad_output` for stateless simulated reservoirs.
    fn input_gradient(&self, _input: &[f64], _grad_output: &[f64]) -> Result<Vec<f64>> {
        Err(Error::GradientUnavailable(
            "reservoir does not expose gradients".into(),
        ))
    }
}

impl<R: Reservoir + ?Sized> Reservoir for Box<R> {
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
    fn output_dim(&self) -> usize {
        (**self).output_dim()
    }
    fn is_stateful(&self) -> bool {
        (**self).is_stateful()
    }
    fn gradient_available(&self) -> bool {
        (**self).gradient_available()
    }
    fn is_simulated(&self) -> bool {
        (**self).is_simulated()
    }
    fn forward(&mut self, input: &[f64]) -> Result<Vec<f64>> {
        (**self).forward(input)
    }
    fn forward_many(&mut self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        (**self).forward_many(inputs)
    }
    fn reset_state(&mut self) {
        (**self).reset_state()
    }
    fn input_gradient(&self, input: &[f64], grad_output: &[f64]) -> Result<Vec<f64>> {
        (**self).input_gradient(input, grad_output)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrozenNetConfig {
    pub input_dim: usize,
    /// Widths of the frozen layers; the last one is the output width.
    pub widths: Vec<usize>,
    /// Number of passes through the layer stack per forward call.
    pub loop_count: usize,
    /// Multiplier on the `1/sqrt(fan_in)` uniform initialisation bound.
    #[serde(default = "one")]
    pub weight_scale: f64,
    /// Leak factor of the stateful mode. `None` means stateless.
    #[serde(default)]
    pub leak: Option<f64>,
    /// Spectral radius of the state feedback matrix in stateful mode.
    #[serde(default = "default_feedback_radius")]
    pub feedback_radius: f64,
    /// Replace `tanh` with the identity everywhere (analysis only).
    #[serde(default)]
    pub linear: bool,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}
fn default_feedback_radius() -> f64 {
    0.9
}

impl Default for FrozenNetConfig {
    fn default() -> Self {
        Self {
            input_dim: 5,
            widths: vec![200, 100, 200, 100],
            loop_count: 2,
            weight_scale: 1.0,
            leak: None,
            feedback_radius: default_feedback_radius(),
            linear: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct FrozenLayer {
    rows: usize,
    cols: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

impl FrozenLayer {
    fn random(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let bound = scale / (cols as f64).sqrt();
        let w = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        let b = (0..rows).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self { rows, cols, w, b }
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| {
                let row = &self.w[r * self.cols..(r + 1) * self.cols];
                self.b[r] + dot(row, x)
            })
            .collect()
    }

    /// `affine` for several inputs, reading each weight row once.
    fn affine_many(&self, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.rows]; xs.len()];
        for r in 0..self.rows {
            let row = &self.w[r * self.cols..(r + 1) * self.cols];
            for (o, x) in out.iter_mut().zip(xs) {
                o[r] = self.b[r] + dot(row, x);
            }
        }
        out
    }

    fn transpose_mul(&self, dy: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.cols];
        for (r, &d) in dy.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &self.w[r * self.cols..(r + 1) * self.cols];
            for (acc, &w) in dx.iter_mut().zip(row) {
                *acc += w * d;
            }
        }
        dx
    }
}

/// A stack of frozen random dense layers traversed several times per call.
///
/// Stateless mode computes `out = net(adapter(x))` where `adapter` is a
/// `tanh` map from the input to the output width and `net` runs the layer
/// stack `loop_count` times, re-injecting the adapter signal at the start of
/// each extra loop. Stateful (leaky) mode keeps a state `s` of the output
/// width and updates `s <- leak*s + net(adapter(x) + leak*F*s)`.
#[derive(Debug, Clone)]
pub struct FrozenNetReservoir {
    config: FrozenNetConfig,
    adapter: FrozenLayer,
    layers: Vec<FrozenLayer>,
    feedback: Option<FrozenLayer>,
    state: Vec<f64>,
}

impl FrozenNetReservoir {
    pub fn new(config: FrozenNetConfig) -> Result<Self> {
        if config.input_dim == 0 || config.widths.is_empty() || config.widths.contains(&0) {
            return Err(Error::InvalidConfig("reservoir dimensions must be positive".into()));
        }
        if config.loop_count == 0 {
            return Err(Error::InvalidConfig("loop_count must be >= 1".into()));
        }
        if let Some(leak) = config.leak {
            if !(leak > 0.0 && leak < 1.0) {
                return Err(Error::InvalidConfig(format!("leak must lie in (0, 1), got {leak}")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let out = *config.widths.last().unwrap();
        let adapter = FrozenLayer::random(out, config.input_dim, config.weight_scale, &mut rng);
        let mut layers = Vec::with_capacity(config.widths.len());
        let mut prev = out;
        for &w in &config.widths {
            layers.push(FrozenLayer::random(w, prev, config.weight_scale, &mut rng));
            prev = w;
        }
        let feedback = match config.leak {
            Some(_) => {
                let mut f = FrozenLayer::random(out, out, 1.0, &mut rng);
                f.b.iter_mut().for_each(|b| *b = 0.0);
                let radius = spectral_radius(&f.w, out);
                if radius > 0.0 {
                    let k = config.feedback_radius / radius;
                    f.w.iter_mut().for_each(|w| *w *= k);
                }
                Some(f)
            }
            None => None,
        };
        Ok(Self {
            state: vec![0.0; out],
            config,
            adapter,
            layers,
            feedback,
        })
    }

    pub fn config(&self) -> &FrozenNetConfig {
        &self.config
    }

    /// Digest of every frozen weight; changes iff a parameter changes.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        let all = std::iter::once(&self.adapter)
            .chain(&self.layers)
            .chain(self.feedback.as_ref());
        for layer in all {
            for v in layer.w.iter().chain(&layer.b) {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    fn act(&self, x: f64) -> f64 {
        if self.config.linear {
            x
        } else {
            x.tanh()
        }
    }

    fn act_grad(&self, y: f64) -> f64 {
        if self.config.linear {
            1.0
        } else {
            1.0 - y * y
        }
    }

    fn adapt(&self, input: &[f64]) -> Vec<f64> {
        self.adapter.affine(input).into_iter().map(|v| self.act(v)).collect()
    }

    /// Runs the layer stack; when `trace` is given, records each layer output.
    fn net(&self, seed: &[f64], mut trace: Option<&mut Vec<Vec<f64>>>) -> Vec<f64> {
        let mut h = seed.to_vec();
        for k in 0..self.config.loop_count {
            if k > 0 {
                h.iter_mut().zip(seed).for_each(|(a, b)| *a += b);
            }
            for layer in &self.layers {
                h = layer.affine(&h).into_iter().map(|v| self.act(v)).collect();
                if let Some(t) = trace.as_deref_mut() {
                    t.push(h.clone());
                }
            }
        }
        h
    }
}

/// Largest eigenvalue modulus of a square row-major matrix.
fn spectral_radius(w: &[f64], n: usize) -> f64 {
    let m = DMatrix::from_row_slice(n, n, w);
    m.complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

impl Reservoir for FrozenNetReservoir {
    fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    fn output_dim(&self) -> usize {
        *self.config.widths.last().unwrap()
    }

    fn is_stateful(&self) -> bool {
        self.config.leak.is_some()
    }

    fn gradient_available(&self) -> bool {
        !self.is_stateful()
    }

    fn forward(&mut self, input: &[f64]) -> Result<Vec<f64>> {
        check_len("reservoir input", self.config.input_dim, input.len())?;
        let mut seed = self.adapt(input);
        match (self.config.leak, &self.feedback) {
            (Some(leak), Some(fb)) => {
                let fed = fb.affine(&self.state);
                seed.iter_mut().zip(&fed).for_each(|(a, f)| *a += leak * f);
                let out = self.net(&seed, None);
                for (s, o) in self.state.iter_mut().zip(&out) {
                    *s = leak * *s + o;
                }
                Ok(self.state.clone())
            }
            _ => Ok(self.net(&seed, None)),
        }
    }

    fn forward_many(&mut self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if self.is_stateful() {
            return inputs.iter().map(|x| self.forward(x)).collect();
        }
        for x in inputs {
            check_len("reservoir input", self.config.input_dim, x.len())?;
        }
        let activate = |hs: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            hs.into_iter().map(|h| h.into_iter().map(|v| self.act(v)).collect()).collect()
        };
        let seeds = activate(self.adapter.affine_many(inputs));
        let mut hs = seeds.clone();
        for k in 0..self.config.loop_count {
            if k > 0 {
                for (h, s) in hs.iter_mut().zip(&seeds) {
                    h.iter_mut().zip(s).for_each(|(a, b)| *a += b);
                }
            }
            for layer in &self.layers {
                hs = activate(layer.affine_many(&hs));
            }
        }
        Ok(hs)
    }

    fn reset_state(&mut self) {
        self.state.iter_mut().for_each(|s| *s = 0.0);
    }

    fn input_gradient(&self, input: &[f64], grad_output: &[f64]) -> Result<Vec<f64>> {
        if self.is_stateful() {
            return Err(Error::GradientUnavailable(
                "stateful reservoir has no per-call gradient".into(),
            ));
        }
        check_len("reservoir input", self.config.input_dim, input.len())?;
        check_len("reservoir output gradient", self.output_dim(), grad_output.len())?;

        let seed = self.adapt(input);
        let mut outs = Vec::new();
        self.net(&seed, Some(&mut outs));

        let n_layers = self.layers.len();
        let mut g = grad_output.to_vec();
        let mut d_seed = vec![0.0; seed.len()];
        for k in (0..self.config.loop_count).rev() {
            for (li, layer) in self.layers.iter().enumerate().rev() {
                let y = &outs[k * n_layers + li];
                let dz: Vec<f64> = g.iter().zip(y).map(|(d, &y)| d * self.act_grad(y)).collect();
                g = layer.transpose_mul(&dz);
            }
            // The loop input was `h_prev + seed` for k > 0 and `seed` for k = 0.
            d_seed.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let dz: Vec<f64> = d_seed.iter().zip(&seed).map(|(d, &y)| d * self.act_grad(y)).collect();
        Ok(self.adapter.transpose_mul(&dz))
    }
}

/// Shift register of the last `taps` scalar inputs, oldest first.
///
/// Only the first input coordinate is recorded. With `projection` set, the
/// register is mapped through a fixed random matrix to `output_dim` outputs.
#[derive(Debug, Clone)]
pub struct DelayLineReservoir {
    taps: usize,
    input_dim: usize,
    register: VecDeque<f64>,
    projection: Option<(usize, Vec<f64>)>,
}

impl DelayLineReservoir {
    pub fn new(taps: usize) -> Result<Self> {
        Self::with_input_dim(taps, 1)
    }

    pub fn with_input_dim(taps: usize, input_dim: usize) -> Result<Self> {
        if taps == 0 || input_dim == 0 {
            return Err(Error::InvalidConfig("delay line needs >= 1 tap and input".into()));
        }
        Ok(Self {
            taps,
            input_dim,
            register: std::iter::repeat(0.0).take(taps).collect(),
            projection: None,
        })
    }

    /// Adds a fixed random linear read-out of the register.
    pub fn with_projection(mut self, output_dim: usize, seed: u64) -> Result<Self> {
        if output_dim == 0 {
            return Err(Error::InvalidConfig("projection width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = (0..output_dim * self.taps).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        self.projection = Some((output_dim, m));
        Ok(self)
    }

    pub fn taps(&self) -> usize {
        self.taps
    }
}

impl Reservoir for DelayLineReservoir {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.projection.as_ref().map_or(self.taps, |(d, _)| *d)
    }

    fn is_stateful(&self) -> bool {
        true
    }

    fn forward(&mut self, input: &[f64]) -> Result<Vec<f64>> {
        check_len("reservoir input", self.input_dim, input.len())?;
        self.register.pop_front();
        self.register.push_back(input[0]);
        Ok(match &self.projection {
            None => self.register.iter().copied().collect(),
            Some((rows, m)) => (0..*rows)
                .map(|r| {
                    m[r * self.taps..(r + 1) * self.taps]
                        .iter()
                        .zip(&self.register)
                        .map(|(a, b)| a * b)
                        .sum()
                })
                .collect(),
        })
    }

    fn reset_state(&mut self) {
        self.register.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Hides gradient access, as a physical device would.
#[derive(Debug, Clone)]
pub struct BlackBox<R>(pub R);

impl<R: Reservoir> Reservoir for BlackBox<R> {
    fn input_dim(&self) -> usize {
        self.0.input_dim()
    }
    fn output_dim(&self) -> usize {
        self.0.output_dim()
    }
    fn is_stateful(&self) -> bool {
        self.0.is_stateful()
    }
    fn is_simulated(&self) -> bool {
        false
    }
    fn forward(&mut self, input: &[f64]) -> Result<Vec<f64>> {
        self.0.forward(input)
    }
    fn forward_many(&mut self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.0.forward_many(inputs)
    }
    fn reset_state(&mut self) {
        self.0.reset_state()
    }
}

/// Counts forward calls into the wrapped reservoir.
#[derive(Debug, Clone)]
pub struct Metered<R> {
    inner: R,
    calls: Arc<AtomicUsize>,
}

impl<R> Metered<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            calls: Arc::new(AtomicUsize::new(0)),
        }
    }

    /// Shared handle to the call counter.
    pub fn counter(&self) -> Arc<AtomicUsize> {
        Arc::clone(&self.calls)
    }
}

impl<R: Reservoir> Reservoir for Metered<R> {
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }
    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }
    fn is_stateful(&self) -> bool {
        self.inner.is_stateful()
    }
    fn gradient_available(&self) -> bool {
        self.inner.gradient_available()
    }
    fn is_simulated(&self) -> bool {
        self.inner.is_simulated()
    }
    fn forward(&mut self, input: &[f64]) -> Result<Vec<f64>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.forward(input)
    }
    fn forward_many(&mut self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.calls.fetch_add(inputs.len(), Ordering::Relaxed);
        self.inner.forward_many(inputs)
    }
    fn reset_state(&mut self) {
        self.inner.reset_state()
    }
    fn input_gradient(&self, input: &[f64], grad_output: &[f64]) -> Result<Vec<f64>> {
        self.inner.input_gradient(input, grad_output)
    }
}

/// Serializable choice of reservoir for experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ReservoirSpec {
    FrozenNet(FrozenNetConfig),
    DelayLine {
        taps: usize,
        #[serde(default = "one_usize")]
        input_dim: usize,
    },
}

fn one_usize() -> usize {
    1
}

impl ReservoirSpec {
    pub fn build(&self) -> Result<Box<dyn Reservoir>> {
        Ok(match self {
            ReservoirSpec::FrozenNet(c) => Box::new(FrozenNetReservoir::new(c.clone())?),
            ReservoirSpec::DelayLine { taps, input_dim } => {
                Box::new(DelayLineReservoir::with_input_dim(*taps, *input_dim)?)
            }
        })
    }
}
