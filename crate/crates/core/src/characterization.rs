//! Short-term memory and parity-check capacity of a reservoir.
//!
//! The reservoir is driven by a random bit stream. For every delay a ridge
//! readout is fit on the first part of the (post-washout) state trajectory
//! and scored on the remainder by the squared correlation between its output
//! and the delayed target. The capacity is the sum of those scores.
//!
//! Delays count inputs backwards from the most recent one: delay 1 asks for
//! the input just absorbed, delay 2 for the one before it, and so on. In
//! terms of [`stm_target`]/[`parity_target`] this is a look-back of
//! `delay - 1` steps.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::reservoir::Reservoir;

/// Capacities measured on a physical magnonic ring; printed alongside results for comparison.
pub const HARDWARE_STM_CAPACITY: f64 = 2.91;
pub const HARDWARE_PC_CAPACITY: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CapacityTask {
    Stm,
    Pc,
}

impl std::fmt::Display for CapacityTask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CapacityTask::Stm => write!(f, "STM"),
            CapacityTask::Pc => write!(f, "PC"),
        }
    }
}

/// Value fed to the reservoir for a bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputEncoding {
    /// 0 -> 0.0, 1 -> 1.0
    ZeroOne,
    /// 0 -> -1.0, 1 -> 1.0
    Bipolar,
}

impl InputEncoding {
    pub fn encode(self, bit: u8) -> f64 {
        match (self, bit) {
            (_, 1) => 1.0,
            (InputEncoding::ZeroOne, _) => 0.0,
            (InputEncoding::Bipolar, _) => -1.0,
        }
    }
}

/// Which inputs the parity target of delay `d` covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParityWindow {
    /// The `d` most recent inputs, current one included.
    IncludeCurrent,
    /// The `d` inputs before the current one.
    PreviousOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CapacityOptions {
    pub ridge: f64,
    /// Leading steps discarded before any readout sees the states.
    pub washout: usize,
    /// Fraction of post-washout steps used to fit the readout.
    pub train_fraction: f64,
    pub encoding: InputEncoding,
    pub parity_window: ParityWindow,
}

impl Default for CapacityOptions {
    fn default() -> Self {
        Self {
            ridge: 1e-6,
            washout: 100,
            train_fraction: 0.6,
            encoding: InputEncoding::ZeroOne,
            parity_window: ParityWindow::IncludeCurrent,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayScore {
    pub delay: usize,
    pub cor2: f64,
    /// Zero variance in target or readout output; `cor2` was set to 0.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapacityReport {
    pub task: CapacityTask,
    pub per_delay: Vec<DelayScore>,
    pub capacity: f64,
    pub ridge: f64,
}

/// `n` fair i.i.d. bits.
pub fn generate_binary_sequence<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<u8> {
    (0..n).map(|_| u8::from(rng.gen::<bool>())).collect()
}

/// `seq[t - delay]`.
pub fn stm_target(seq: &[u8], t: usize, delay: usize) -> Result<u8> {
    if t >= seq.len() || delay > t {
        return Err(Error::DelayOutOfRange { t, delay });
    }
    Ok(seq[t - delay])
}

/// XOR of `seq[t - delay ..= t]`.
pub fn parity_target(seq: &[u8], t: usize, delay: usize) -> Result<u8> {
    if t >= seq.len() || delay > t {
        return Err(Error::DelayOutOfRange { t, delay });
    }
    Ok(seq[t - delay..=t].iter().fold(0, |acc, b| acc ^ (b & 1)))
}

/// Affine readout `w . x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearReadout {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearReadout {
    pub fn predict(&self, row: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(row).map(|(w, x)| w * x).sum::<f64>()
    }
}

/// Ridge regression with an unpenalized bias term.
///
/// With `ridge == 0` a rank-deficient system is reported as
/// [`Error::SingularSystem`] rather than pseudo-solved.
pub fn train_linear_readout(states: &[Vec<f64>], targets: &[f64], ridge: f64) -> Result<LinearReadout> {
    check_len("readout targets", states.len(), targets.len())?;
    if !(ridge >= 0.0) {
        return Err(Error::InvalidConfig(format!("ridge must be >= 0, got {ridge}")));
    }
    let n = states.len();
    if n == 0 {
        return Err(Error::InvalidConfig("no rows to fit".into()));
    }
    let d = states[0].len();
    for row in states {
        check_len("state row", d, row.len())?;
    }

    let mean_x: Vec<f64> = (0..d).map(|j| states.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let mean_y = targets.iter().sum::<f64>() / n as f64;
    let x = DMatrix::from_fn(n, d, |i, j| states[i][j] - mean_x[j]);
    let y = DVector::from_iterator(n, targets.iter().map(|t| t - mean_y));

    let mut gram = x.tr_mul(&x);
    let scale = (0..d).map(|j| gram[(j, j)]).fold(0.0, f64::max);
    for j in 0..d {
        gram[(j, j)] += ridge;
    }
    let rhs = x.tr_mul(&y);
    let singular = || Error::SingularSystem { ridge };
    let chol = gram.clone().cholesky().ok_or_else(singular)?;
    let l = chol.l();
    let min_pivot = (0..d).map(|j| l[(j, j)] * l[(j, j)]).fold(f64::INFINITY, f64::min);
    if d > 0 && !(min_pivot > 1e-12 * scale.max(f64::MIN_POSITIVE)) {
        return Err(singular());
    }
    let w = chol.solve(&rhs);
    let bias = mean_y - w.iter().zip(&mean_x).map(|(w, m)| w * m).sum::<f64>();
    Ok(LinearReadout {
        weights: w.iter().copied().collect(),
        bias,
    })
}

/// `Cov(a, b)^2 / (Var(a) Var(b))`, or `None` when either variance vanishes.
pub fn squared_correlation(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    let tiny = 1e-24 * n;
    if va <= tiny || vb <= tiny {
        return None;
    }
    Some(cov * cov / (va * vb))
}

/// Resets `res` and records its output after each input bit.
pub fn collect_states<R: Reservoir + ?Sized>(res: &mut R, seq: &[u8], encoding: InputEncoding) -> Result<Vec<Vec<f64>>> {
    res.reset_state();
    let dim = res.input_dim();
    seq.iter()
        .map(|&bit| res.forward(&vec![encoding.encode(bit); dim]))
        .collect()
}

/// Target of `task` at time `t` for a 1-based delay counted from the latest input.
fn delayed_target(task: CapacityTask, window: ParityWindow, seq: &[u8], t: usize, delay: usize) -> Result<u8> {
    let back = delay - 1;
    match (task, window) {
        (CapacityTask::Stm, _) => stm_target(seq, t, back),
        (CapacityTask::Pc, ParityWindow::IncludeCurrent) => parity_target(seq, t, back),
        (CapacityTask::Pc, ParityWindow::PreviousOnly) => {
            let prev = t.checked_sub(1).ok_or(Error::DelayOutOfRange { t, delay })?;
            parity_target(seq, prev, back)
        }
    }
}

/// Scores every delay in `1..=t_max` from pre-collected states.
pub fn capacity_from_states(
    states: &[Vec<f64>],
    seq: &[u8],
    task: CapacityTask,
    t_max: usize,
    options: &CapacityOptions,
) -> Result<CapacityReport> {
    check_len("state trajectory", seq.len(), states.len())?;
    if t_max == 0 {
        return Err(Error::InvalidConfig("t_max must be >= 1".into()));
    }
    if options.washout < t_max {
        return Err(Error::InvalidConfig(format!(
            "washout {} shorter than the largest delay {t_max}",
            options.washout
        )));
    }
    if !(options.train_fraction > 0.0 && options.train_fraction < 1.0) {
        return Err(Error::InvalidConfig("train fraction must lie in (0, 1)".into()));
    }
    let steps: Vec<usize> = (options.washout..seq.len()).collect();
    let cut = (steps.len() as f64 * options.train_fraction).round() as usize;
    if cut < 2 || steps.len() - cut < 2 {
        return Err(Error::InvalidConfig(format!(
            "sequence of {} steps too short for washout {} and a train/eval split",
            seq.len(),
            options.washout
        )));
    }
    let (fit_steps, eval_steps) = steps.split_at(cut);
    let fit_states: Vec<Vec<f64>> = fit_steps.iter().map(|&t| states[t].clone()).collect();

    let mut per_delay = Vec::with_capacity(t_max);
    for delay in 1..=t_max {
        let target = |t: usize| -> Result<f64> {
            Ok(f64::from(delayed_target(task, options.parity_window, seq, t, delay)?))
        };
        let fit_targets = fit_steps.iter().map(|&t| target(t)).collect::<Result<Vec<_>>>()?;
        let readout = train_linear_readout(&fit_states, &fit_targets, options.ridge)?;
        let eval_targets = eval_steps.iter().map(|&t| target(t)).collect::<Result<Vec<_>>>()?;
        let outputs: Vec<f64> = eval_steps.iter().map(|&t| readout.predict(&states[t])).collect();
        let score = match squared_correlation(&eval_targets, &outputs) {
            Some(c) => DelayScore { delay, cor2: c, degenerate: false },
            None => DelayScore { delay, cor2: 0.0, degenerate: true },
        };
        per_delay.push(score);
    }
    Ok(CapacityReport {
        task,
        capacity: per_delay.iter().map(|s| s.cor2).sum(),
        per_delay,
        ridge: options.ridge,
    })
}

/// Drives `res` with `n` random bits and measures its capacity for `task`.
pub fn capacity<R: Reservoir + ?Sized, G: Rng + ?Sized>(
    res: &mut R,
    task: CapacityTask,
    t_max: usize,
    n: usize,
    rng: &mut G,
    options: &CapacityOptions,
) -> Result<CapacityReport> {
    if !res.is_stateful() {
        return Err(Error::StatelessReservoir);
    }
    let seq = generate_binary_sequence(n, rng);
    let states = collect_states(res, &seq, options.encoding)?;
    capacity_from_states(&states, &seq, task, t_max, options)
}

/// Rows `task,t_delay,cor2` per delay, then `task,TOTAL,capacity`.
pub fn write_capacity_csv<W: Write>(mut w: W, reports: &[CapacityReport]) -> Result<()> {
    writeln!(w, "task,t_delay,cor2")?;
    for r in reports {
        for s in &r.per_delay {
            writeln!(w, "{},{},{}", r.task, s.delay, s.cor2)?;
        }
        writeln!(w, "{},TOTAL,{}", r.task, r.capacity)?;
    }
    Ok(())
}
