//! Flat parameter vectors and random integer perturbation directions.
//!
//! Every trainable model exposes its weights as one contiguous `f64` buffer
//! plus a layout describing which slice belongs to which tensor. A
//! [`PerturbationMatrix`] has one integer entry per trainable parameter and
//! encodes the direction probed by a pair of forward passes.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// One named tensor inside a [`ParameterVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Incrementally assigns contiguous offsets to named tensors.
#[derive(Debug, Default, Clone)]
pub struct LayoutBuilder {
    entries: Vec<LayoutEntry>,
    next: usize,
}

impl LayoutBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reserves a tensor and returns its offset into the flat buffer.
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        let offset = self.next;
        let entry = LayoutEntry {
            name: name.into(),
            shape: shape.to_vec(),
            offset,
        };
        self.next += entry.len();
        self.entries.push(entry);
        offset
    }

    pub fn total_len(&self) -> usize {
        self.next
    }

    pub fn finish(self) -> Vec<LayoutEntry> {
        self.entries
    }
}

/// A tensor detached from the flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// All trainable parameters of a model as a single flat array.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
    layout: Vec<LayoutEntry>,
}

impl ParameterVector {
    /// Builds a vector from a layout, validating that offsets tile the buffer.
    pub fn new(layout: Vec<LayoutEntry>, values: Vec<f64>) -> Result<Self> {
        let mut expected_offset = 0;
        for entry in &layout {
            if entry.offset != expected_offset {
                return Err(Error::InvalidConfig(format!(
                    "layout entry `{}` starts at {} but previous tensors end at {}",
                    entry.name, entry.offset, expected_offset
                )));
            }
            expected_offset += entry.len();
        }
        check_len("parameter layout", expected_offset, values.len())?;
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Vec<LayoutEntry>) -> Result<Self> {
        let len = layout.iter().map(LayoutEntry::len).sum();
        Self::new(layout, vec![0.0; len])
    }

    /// Reassembles a flat vector from tensors in order.
    pub fn flatten(tensors: &[Tensor]) -> Result<Self> {
        let mut builder = LayoutBuilder::new();
        let mut values = Vec::new();
        for t in tensors {
            let expected: usize = t.shape.iter().product();
            check_len("tensor data", expected, t.data.len())?;
            builder.push(t.name.clone(), &t.shape);
            values.extend_from_slice(&t.data);
        }
        Self::new(builder.finish(), values)
    }

    pub fn unflatten(&self) -> Vec<Tensor> {
        self.layout
            .iter()
            .map(|e| Tensor {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data: self.values[e.range()].to_vec(),
            })
            .collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &[LayoutEntry] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .iter()
            .find(|e| e.name == name)
            .map(|e| &self.values[e.range()])
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        check_len("parameter values", self.values.len(), values.len())?;
        Ok(Self {
            values,
            layout: self.layout.clone(),
        })
    }

    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        check_len("parameter values", self.values.len(), values.len())?;
        self.values.copy_from_slice(values);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OptimizerKind::Sgd => write!(f, "sgd"),
            OptimizerKind::Adam => write!(f, "adam"),
        }
    }
}

/// Update rule and its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            ..Self::sgd(learning_rate)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.kind == OptimizerKind::Adam {
            for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
                if !(0.0..1.0).contains(&b) {
                    return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1), got {b}")));
                }
            }
            if !(self.epsilon > 0.0) {
                return Err(Error::InvalidConfig("epsilon must be positive".into()));
            }
        }
        Ok(())
    }
}

/// When a fresh perturbation direction is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResamplePolicy {
    PerSample,
    PerEpoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgtConfig {
    /// Entries of a perturbation matrix are drawn from `-range..=range`.
    pub range: u32,
    /// Scale applied to the integer perturbation before it is added to theta.
    pub delta: f64,
    /// Probability of zeroing each perturbation entry.
    pub dropout_scale: f64,
    pub optimizer: OptimizerConfig,
    pub resample: ResamplePolicy,
    /// Samples averaged inside one loss evaluation. 1 means strict per-sample training.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub seed: u64,
}

fn default_batch_size() -> usize {
    1
}

impl Default for PgtConfig {
    fn default() -> Self {
        Self {
            range: 1,
            delta: 0.01,
            dropout_scale: 0.0,
            optimizer: OptimizerConfig::sgd(0.01),
            resample: ResamplePolicy::PerSample,
            batch_size: 1,
            seed: 0,
        }
    }
}

impl PgtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.range < 1 {
            return Err(Error::InvalidConfig("perturbation range must be >= 1".into()));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "delta must be positive, got {}",
                self.delta
            )));
        }
        validate_dropout(self.dropout_scale)?;
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be >= 1".into()));
        }
        self.optimizer.validate()
    }
}

fn validate_dropout(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "dropout scale must lie in [0, 1], got {p}"
        )))
    }
}

/// Integer direction in parameter space together with `|entries|`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PerturbationMatrix {
    entries: Vec<i32>,
    counts: Vec<u32>,
    range: u32,
}

impl PerturbationMatrix {
    /// Wraps explicit entries, checking them against `range`.
    pub fn from_entries(entries: Vec<i32>, range: u32) -> Result<Self> {
        if range < 1 {
            return Err(Error::InvalidConfig("perturbation range must be >= 1".into()));
        }
        if let Some(bad) = entries.iter().find(|e| e.unsigned_abs() > range) {
            return Err(Error::InvalidConfig(format!(
                "perturbation entry {bad} outside [-{range}, {range}]"
            )));
        }
        let counts = entries.iter().map(|e| e.unsigned_abs()).collect();
        Ok(Self {
            entries,
            counts,
            range,
        })
    }

    pub fn entries(&self) -> &[i32] {
        &self.entries
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn range(&self) -> u32 {
        self.range
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of entries that survived dropout and sampling as nonzero.
    pub fn active(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn is_zero(&self) -> bool {
        self.counts.iter().all(|&c| c == 0)
    }
}

/// Draws a perturbation direction of length `len`.
///
/// Each entry is uniform over the `2r + 1` integers in `[-r, r]` and is then
/// zeroed independently with probability `dropout_scale`.
pub fn sample_perturbation<R: Rng + ?Sized>(
    len: usize,
    config: &PgtConfig,
    rng: &mut R,
) -> Result<PerturbationMatrix> {
    if len == 0 {
        return Err(Error::InvalidConfig("cannot perturb an empty parameter vector".into()));
    }
    if config.range < 1 {
        return Err(Error::InvalidConfig("perturbation range must be >= 1".into()));
    }
    validate_dropout(config.dropout_scale)?;

    let r = config.range as i32;
    let p = config.dropout_scale;
    let entries = (0..len)
        .map(|_| {
            let e = rng.gen_range(-r..=r);
            if rng.gen::<f64>() < p {
                0
            } else {
                e
            }
        })
        .collect();
    PerturbationMatrix::from_entries(entries, config.range)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn as_f64(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

/// Returns `theta ± delta * pm` without touching `theta`.
pub fn apply_perturbation(
    theta: &ParameterVector,
    pm: &PerturbationMatrix,
    delta: f64,
    sign: Sign,
) -> Result<ParameterVector> {
    let mut out = Vec::with_capacity(theta.len());
    perturb_into(theta.values(), pm, delta, sign, &mut out)?;
    theta.with_values(out)
}

/// Slice form of [`apply_perturbation`] that reuses `out`'s allocation.
pub fn perturb_into(
    theta: &[f64],
    pm: &PerturbationMatrix,
    delta: f64,
    sign: Sign,
    out: &mut Vec<f64>,
) -> Result<()> {
    check_len("perturbation matrix", theta.len(), pm.len())?;
    let step = sign.as_f64() * delta;
    out.clear();
    out.extend(
        theta
            .iter()
            .zip(pm.entries())
            .map(|(&t, &e)| if e == 0 { t } else { t + step * f64::from(e) }),
    );
    Ok(())
}

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Number of distinct rays reachable in 2-D with integer entries in `[-r, r]`.
pub fn count_2d_directions(r: u32) -> usize {
    let r = r as i64;
    let mut rays = HashSet::new();
    for a in -r..=r {
        for b in -r..=r {
            if a == 0 && b == 0 {
                continue;
            }
            let g = i64::from(gcd(a.unsigned_abs() as u32, b.unsigned_abs() as u32));
            rays.insert((a / g, b / g));
        }
    }
    rays.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(range: u32, dropout: f64) -> PgtConfig {
        PgtConfig {
            range,
            dropout_scale: dropout,
            ..PgtConfig::default()
        }
    }

    fn two_layer() -> ParameterVector {
        let mut b = LayoutBuilder::new();
        b.push("w", &[2, 3]);
        b.push("b", &[2]);
        ParameterVector::zeros(b.finish()).unwrap()
    }

    #[test]
    fn layout_is_contiguous() {
        let p = two_layer();
        assert_eq!(p.len(), 8);
        assert_eq!(p.layout()[1].offset, 6);
        assert_eq!(p.tensor("b").unwrap().len(), 2);
    }

    #[test]
    fn overlapping_layout_is_rejected() {
        let layout = vec![
            LayoutEntry { name: "a".into(), shape: vec![3], offset: 0 },
            LayoutEntry { name: "b".into(), shape: vec![2], offset: 2 },
        ];
        assert!(ParameterVector::new(layout, vec![0.0; 5]).is_err());
    }

    #[test]
    fn full_dropout_zeroes_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pm = sample_perturbation(5, &config(1, 1.0), &mut rng).unwrap();
        assert_eq!(pm.entries(), &[0, 0, 0, 0, 0]);
        assert!(pm.is_zero());
    }

    #[test]
    fn uniform_law_at_range_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let pm = sample_perturbation(n, &config(1, 0.0), &mut rng).unwrap();
        for v in -1..=1 {
            let freq = pm.entries().iter().filter(|&&e| e == v).count() as f64 / n as f64;
            assert!((freq - 1.0 / 3.0).abs() < 0.01, "value {v}: {freq}");
        }
    }

    #[test]
    fn zero_rate_combines_dropout_and_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let pm = sample_perturbation(n, &config(2, 0.5), &mut rng).unwrap();
        let zeros = pm.entries().iter().filter(|&&e| e == 0).count() as f64 / n as f64;
        let expected = 0.5 + 0.5 * (1.0 / 5.0);
        assert!((zeros - expected).abs() < 0.01, "{zeros} vs {expected}");
    }

    #[test]
    fn sampling_rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_perturbation(0, &config(1, 0.0), &mut rng).is_err());
        assert!(sample_perturbation(3, &config(1, 1.5), &mut rng).is_err());
        assert!(sample_perturbation(3, &config(1, -0.1), &mut rng).is_err());
    }

    #[test]
    fn directions_match_small_ranges() {
        assert_eq!(count_2d_directions(1), 8);
        assert_eq!(count_2d_directions(2), 16);
    }

    #[test]
    fn apply_examples() {
        let theta = ParameterVector::flatten(&[Tensor {
            name: "t".into(),
            shape: vec![2],
            data: vec![1.0, 2.0],
        }])
        .unwrap();
        let zero = PerturbationMatrix::from_entries(vec![0, 0], 1).unwrap();
        let out = apply_perturbation(&theta, &zero, 0.1, Sign::Plus).unwrap();
        assert_eq!(out.values(), &[1.0, 2.0]);

        let pm = PerturbationMatrix::from_entries(vec![1, -2], 2).unwrap();
        let plus = apply_perturbation(&theta, &pm, 0.1, Sign::Plus).unwrap();
        let minus = apply_perturbation(&theta, &pm, 0.1, Sign::Minus).unwrap();
        approx::assert_abs_diff_eq!(plus.values(), &[1.1, 1.8][..], epsilon = 1e-12);
        approx::assert_abs_diff_eq!(minus.values(), &[0.9, 2.2][..], epsilon = 1e-12);
        assert_eq!(theta.values(), &[1.0, 2.0]);
    }

    #[test]
    fn apply_rejects_length_mismatch() {
        let theta = two_layer();
        let pm = PerturbationMatrix::from_entries(vec![1], 1).unwrap();
        assert!(matches!(
            apply_perturbation(&theta, &pm, 0.1, Sign::Plus),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn entries_outside_range_are_rejected() {
        assert!(PerturbationMatrix::from_entries(vec![0, 3], 2).is_err());
    }

    proptest! {
        #[test]
        fn sampled_entries_respect_range(seed: u64, range in 1u32..5, dropout in 0.0f64..=1.0, len in 1usize..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pm = sample_perturbation(len, &config(range, dropout), &mut rng).unwrap();
            prop_assert_eq!(pm.len(), len);
            for (e, c) in pm.entries().iter().zip(pm.counts()) {
                prop_assert!(e.unsigned_abs() <= range);
                prop_assert_eq!(e.unsigned_abs(), *c);
                prop_assert_eq!(*c == 0, *e == 0);
            }
        }

        #[test]
        fn same_seed_same_matrix(seed: u64, len in 1usize..300) {
            let cfg = config(2, 0.3);
            let a = sample_perturbation(len, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = sample_perturbation(len, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn paired_perturbations_average_to_theta(
            theta in proptest::collection::vec(-10.0f64..10.0, 1..50),
            seed: u64,
            delta in 1e-4f64..1.0,
        ) {
            let n = theta.len();
            let pv = ParameterVector::flatten(&[Tensor { name: "x".into(), shape: vec![n], data: theta.clone() }]).unwrap();
            let pm = sample_perturbation(n, &config(3, 0.2), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let plus = apply_perturbation(&pv, &pm, delta, Sign::Plus).unwrap();
            let minus = apply_perturbation(&pv, &pm, delta, Sign::Minus).unwrap();
            for i in 0..n {
                let mid = 0.5 * (plus.values()[i] + minus.values()[i]);
                prop_assert!((mid - theta[i]).abs() <= 1e-12 * theta[i].abs().max(1.0));
            }
        }

        #[test]
        fn flatten_round_trip(shapes in proptest::collection::vec(proptest::collection::vec(1usize..4, 1..3), 1..5)) {
            let tensors: Vec<Tensor> = shapes.iter().enumerate().map(|(i, s)| {
                let n: usize = s.iter().product();
                Tensor { name: format!("t{i}"), shape: s.clone(), data: (0..n).map(|k| (i * 100 + k) as f64).collect() }
            }).collect();
            let flat = ParameterVector::flatten(&tensors).unwrap();
            prop_assert_eq!(flat.len(), tensors.iter().map(|t| t.data.len()).sum::<usize>());
            let again = ParameterVector::flatten(&flat.unflatten()).unwrap();
            prop_assert_eq!(again, flat);
        }
    }
}
