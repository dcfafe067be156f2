//! Experiment configuration files.
//!
//! TOML with one section per concern. Every section has defaults, so a file
//! only needs the keys it changes. The experiment `seed` overrides the seeds
//! inside `[mlp]`, `[transformer]` and `[pgt]`; the reservoir keeps its own
//! seed because it stands in for fixed hardware.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::characterization::{CapacityOptions, CapacityTask};
use crate::data::SeqTask;
use crate::engine::StopRule;
use crate::error::{Error, Result};
use crate::nn::{LossReduction, MlpConfig};
use crate::param_space::{OptimizerConfig, OptimizerKind, PgtConfig, ResamplePolicy};
use crate::reservoir::{FrozenNetConfig, ReservoirSpec};
use crate::transformer::TransformerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    TrainMlp,
    TrainTransformer,
    Characterize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Pgt,
    Backprop,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Pgt => "pgt",
            Method::Backprop => "backprop",
        })
    }
}

/// Parses `pgt-adam`, `backprop-sgd` and friends.
pub fn parse_method(s: &str) -> Result<(Method, OptimizerKind)> {
    let (m, k) = s
        .split_once('-')
        .ok_or_else(|| Error::InvalidConfig(format!("method `{s}` is not of the form <pgt|backprop>-<sgd|adam>")))?;
    let method = match m {
        "pgt" => Method::Pgt,
        "backprop" => Method::Backprop,
        _ => return Err(Error::InvalidConfig(format!("unknown training method `{m}`"))),
    };
    let kind = match k {
        "sgd" => OptimizerKind::Sgd,
        "adam" => OptimizerKind::Adam,
        _ => return Err(Error::InvalidConfig(format!("unknown optimizer `{k}`"))),
    };
    Ok((method, kind))
}

/// Perturbation settings; the optimizer and seed come from the experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PgtSection {
    pub range: u32,
    pub delta: f64,
    pub dropout_scale: f64,
    pub resample: ResamplePolicy,
    pub batch_size: usize,
}

impl Default for PgtSection {
    fn default() -> Self {
        let d = PgtConfig::default();
        Self {
            range: d.range,
            delta: d.delta,
            dropout_scale: d.dropout_scale,
            resample: d.resample,
            batch_size: d.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// WDBC file; the bundled copy is used when absent.
    pub path: Option<PathBuf>,
    pub train_fraction: f64,
    pub task: SeqTask,
    pub n_train: usize,
    pub n_test: usize,
    pub seq_len: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            train_fraction: 0.8,
            task: SeqTask::Copy,
            n_train: 250,
            n_test: 250,
            seq_len: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CharacterizeSection {
    pub t_max: usize,
    pub n: usize,
    pub tasks: Vec<CapacityTask>,
    pub options: CapacityOptions,
}

impl Default for CharacterizeSection {
    fn default() -> Self {
        Self {
            t_max: 10,
            n: 4000,
            tasks: vec![CapacityTask::Stm, CapacityTask::Pc],
            options: CapacityOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub method: Method,
    pub seed: u64,
    pub epochs: usize,
    pub stop: StopRule,
    pub output: Option<PathBuf>,
    pub optimizer: OptimizerConfig,
    pub pgt: PgtSection,
    /// Defaults to the stateless frozen network for the training experiments.
    pub reservoir: Option<ReservoirSpec>,
    pub mlp: MlpConfig,
    pub transformer: TransformerConfig,
    pub data: DataSection,
    pub characterize: CharacterizeSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::TrainMlp,
            method: Method::Pgt,
            seed: 0,
            epochs: 100,
            stop: StopRule::Never,
            output: None,
            optimizer: OptimizerConfig::adam(1e-3),
            pgt: PgtSection::default(),
            reservoir: None,
            mlp: MlpConfig {
                loss: LossReduction::Mean,
                ..MlpConfig::default()
            },
            transformer: TransformerConfig::default(),
            data: DataSection::default(),
            characterize: CharacterizeSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Built-in starting point for each experiment kind.
    pub fn preset(kind: ExperimentKind) -> Self {
        let base = Self { kind, ..Self::default() };
        match kind {
            // A low-gain reservoir: its output barely depends on its input,
            // which is what stalls plain SGD at the class prior.
            ExperimentKind::TrainMlp => Self {
                reservoir: Some(ReservoirSpec::FrozenNet(FrozenNetConfig {
                    weight_scale: 0.5,
                    ..FrozenNetConfig::default()
                })),
                ..base
            },
            // Plain SGD: its step shrinks with the measured slope. Adam's
            // normalized steps random-walk once the slope is below the
            // cross-talk between the perturbed coordinates.
            ExperimentKind::TrainTransformer => Self {
                epochs: 1000,
                stop: StopRule::TestLossFraction(0.5),
                optimizer: OptimizerConfig::sgd(0.3),
                pgt: PgtSection {
                    dropout_scale: 0.999,
                    ..PgtSection::default()
                },
                ..base
            },
            ExperimentKind::Characterize => base,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.pgt_config().validate()?;
        if let StopRule::TestLossFraction(f) = self.stop {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::InvalidConfig(format!("stop fraction must lie in (0, 1), got {f}")));
            }
        }
        if self.kind == ExperimentKind::TrainTransformer {
            self.transformer.validate()?;
        }
        Ok(())
    }

    pub fn pgt_config(&self) -> PgtConfig {
        PgtConfig {
            range: self.pgt.range,
            delta: self.pgt.delta,
            dropout_scale: self.pgt.dropout_scale,
            optimizer: self.optimizer,
            resample: self.pgt.resample,
            batch_size: self.pgt.batch_size,
            seed: self.seed,
        }
    }

    pub fn reservoir_spec(&self) -> ReservoirSpec {
        self.reservoir
            .clone()
            .unwrap_or_else(|| ReservoirSpec::FrozenNet(FrozenNetConfig::default()))
    }

    /// `pgt-adam`, `backprop-sgd`, ...
    pub fn method_label(&self) -> String {
        format!("{}-{}", self.method, self.optimizer.kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_identical() {
        let mut cfg = ExperimentConfig::preset(ExperimentKind::TrainTransformer);
        cfg.reservoir = Some(ReservoirSpec::FrozenNet(FrozenNetConfig {
            leak: Some(0.3),
            ..FrozenNetConfig::default()
        }));
        cfg.data.path = Some("x/wdbc.data".into());
        cfg.pgt.dropout_scale = 0.9999;
        cfg.optimizer.learning_rate = 0.1 + 0.2;
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        let cfg = ExperimentConfig {
            reservoir: Some(ReservoirSpec::DelayLine { taps: 5, input_dim: 1 }),
            ..ExperimentConfig::preset(ExperimentKind::Characterize)
        };
        cfg.save(&path).unwrap();
        let a = ExperimentConfig::load(&path).unwrap();
        a.save(&path).unwrap();
        assert_eq!(ExperimentConfig::load(&path).unwrap(), cfg);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = ExperimentConfig::from_toml("kind = \"train-mlp\"\nseed = 7\n[pgt]\ndropout_scale = 0.5\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.pgt.dropout_scale, 0.5);
        assert_eq!(cfg.pgt.range, 1);
        assert_eq!(cfg.mlp.hidden, vec![200, 200]);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(ExperimentConfig::from_toml("epochz = 3").is_err());
        assert!(ExperimentConfig::from_toml("[pgt]\ndropout_scale = 1.5").is_err());
        assert!(ExperimentConfig::from_toml("[optimizer]\nkind = \"adam\"\nlearning_rate = -1.0").is_err());
    }

    #[test]
    fn methods_parse() {
        assert_eq!(parse_method("pgt-adam").unwrap(), (Method::Pgt, OptimizerKind::Adam));
        assert_eq!(parse_method("backprop-sgd").unwrap(), (Method::Backprop, OptimizerKind::Sgd));
        assert!(parse_method("pgt").is_err());
        assert!(parse_method("newton-adam").is_err());
    }
}
