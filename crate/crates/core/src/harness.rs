//! Runs configured experiments and writes their CSV outputs.
//!
//! Every file written here starts with `#` lines carrying the full
//! experiment config and seed. Trace files leave the `seconds` column blank
//! so reruns are byte-identical; wall-clock times go to a `.timing.csv`
//! file next to the trace.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::characterization::{capacity, write_capacity_csv, CapacityReport};
use crate::config::{ExperimentConfig, ExperimentKind, Method};
use crate::data::{load_bundled_wdbc, load_wdbc, make_seq2seq, TabularDataset};
use crate::engine::pgt_train_until;
use crate::error::{Error, Result};
use crate::nn::{backprop_train_until, MlpWithReservoir};
use crate::reservoir::{BlackBox, Reservoir};
use crate::trace::{TimingColumn, TrainingTrace};
use crate::transformer::ReservoirTransformer;

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<TabularDataset> {
    match &cfg.data.path {
        Some(p) => load_wdbc(p, cfg.data.train_fraction, cfg.seed),
        None => load_bundled_wdbc(cfg.data.train_fraction, cfg.seed),
    }
}

/// PGT sees the reservoir only through [`BlackBox`]; backprop needs its gradient.
fn reservoir_for(cfg: &ExperimentConfig) -> Result<Box<dyn Reservoir>> {
    let r = cfg.reservoir_spec().build()?;
    Ok(match cfg.method {
        Method::Pgt => Box::new(BlackBox(r)),
        Method::Backprop => r,
    })
}

pub fn build_mlp(cfg: &ExperimentConfig) -> Result<MlpWithReservoir> {
    let mlp = crate::nn::MlpConfig {
        seed: cfg.seed,
        ..cfg.mlp.clone()
    };
    MlpWithReservoir::new(&mlp, reservoir_for(cfg)?)
}

pub fn build_transformer(cfg: &ExperimentConfig) -> Result<ReservoirTransformer> {
    let tc = crate::transformer::TransformerConfig {
        seed: cfg.seed,
        ..cfg.transformer.clone()
    };
    ReservoirTransformer::new(tc, reservoir_for(cfg)?, reservoir_for(cfg)?)
}

fn stamp(mut trace: TrainingTrace, cfg: &ExperimentConfig) -> Result<TrainingTrace> {
    trace.seed = cfg.seed;
    trace.config_snapshot = cfg.to_toml()?;
    Ok(trace)
}

pub fn run_train_mlp(cfg: &ExperimentConfig) -> Result<TrainingTrace> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let (train, test) = (data.train_examples(), data.test_examples());
    let mut model = build_mlp(cfg)?;
    let trace = match cfg.method {
        Method::Pgt => pgt_train_until(&mut model, &train, &test, &cfg.pgt_config(), cfg.epochs, cfg.stop)?,
        Method::Backprop => backprop_train_until(&mut model, &train, &test, &cfg.optimizer, cfg.epochs, cfg.seed, cfg.stop)?,
    };
    stamp(trace, cfg)
}

pub fn run_train_transformer(cfg: &ExperimentConfig) -> Result<TrainingTrace> {
    cfg.validate()?;
    let data = make_seq2seq(
        cfg.data.task,
        cfg.data.n_train,
        cfg.data.n_test,
        cfg.transformer.vocab_size,
        cfg.data.seq_len,
        cfg.seed,
    )?;
    let mut model = build_transformer(cfg)?;
    let trace = match cfg.method {
        Method::Pgt => pgt_train_until(&mut model, &data.train, &data.test, &cfg.pgt_config(), cfg.epochs, cfg.stop)?,
        Method::Backprop => backprop_train_until(&mut model, &data.train, &data.test, &cfg.optimizer, cfg.epochs, cfg.seed, cfg.stop)?,
    };
    stamp(trace, cfg)
}

/// Capacity reports for every task in `[characterize]`. Refuses stateless reservoirs.
pub fn run_characterize(cfg: &ExperimentConfig) -> Result<Vec<CapacityReport>> {
    let spec = cfg.reservoir.as_ref().ok_or_else(|| {
        Error::InvalidConfig("characterization needs an explicit stateful reservoir".into())
    })?;
    let mut res = spec.build()?;
    if !res.is_stateful() {
        return Err(Error::StatelessReservoir);
    }
    let ch = &cfg.characterize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    ch.tasks
        .iter()
        .map(|&task| capacity(res.as_mut(), task, ch.t_max, ch.n, &mut rng, &ch.options))
        .collect()
}

/// `# `-prefixed copy of the config.
pub fn config_header(cfg: &ExperimentConfig) -> Result<String> {
    let mut s = String::new();
    for line in cfg.to_toml()?.lines() {
        s.push_str("# ");
        s.push_str(line);
        s.push('\n');
    }
    Ok(s)
}

pub fn timing_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".timing.csv");
    path.with_file_name(name)
}

/// Trace CSV without timings plus its timing sidecar.
pub fn write_trace(trace: &TrainingTrace, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    trace.write_csv(&mut w, TimingColumn::Omitted)?;
    w.flush()?;
    let mut t = BufWriter::new(File::create(timing_path(path))?);
    trace.write_timing_csv(&mut t)?;
    t.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<TrainingTrace> {
    TrainingTrace::read_csv(BufReader::new(File::open(path)?), path)
}

pub fn capacity_csv(cfg: &ExperimentConfig, reports: &[CapacityReport]) -> Result<String> {
    let mut buf = format!("# seed = {}\n", cfg.seed).into_bytes();
    buf.extend(config_header(cfg)?.into_bytes());
    write_capacity_csv(&mut buf, reports)?;
    Ok(String::from_utf8(buf).expect("ascii csv"))
}

/// One-line description of a finished run.
pub fn summarize(trace: &TrainingTrace) -> String {
    let last = trace.last().map_or(0, |r| r.epoch);
    match (trace.min_train_loss(), trace.min_test_loss()) {
        (Some((et, lt)), Some((ev, lv))) => format!(
            "{}: {} epochs, min train loss {lt:.6} at epoch {et}, min test loss {lv:.6} at epoch {ev}",
            trace.method, last
        ),
        _ => format!("{}: empty trace", trace.method),
    }
}

/// Traces aligned by epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub names: Vec<String>,
    pub epochs: Vec<usize>,
    /// `[run][row] -> (train, test)`
    pub losses: Vec<Vec<(f64, f64)>>,
    pub note: Option<String>,
}

impl Comparison {
    /// Test-loss difference of run `i` minus the first run, per epoch.
    pub fn delta(&self, i: usize) -> Vec<f64> {
        self.losses[i].iter().zip(&self.losses[0]).map(|(a, b)| a.1 - b.1).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# runs = {}", self.names.join(", "))?;
        if let Some(note) = &self.note {
            writeln!(w, "# note: {note}")?;
        }
        let mut header = vec!["epoch".to_string()];
        for n in &self.names {
            header.push(format!("{n}_train_loss"));
            header.push(format!("{n}_test_loss"));
        }
        for n in &self.names[1..] {
            header.push(format!("delta_test_{n}_minus_{}", self.names[0]));
        }
        writeln!(w, "{}", header.join(","))?;
        let deltas: Vec<Vec<f64>> = (1..self.names.len()).map(|i| self.delta(i)).collect();
        for (row, epoch) in self.epochs.iter().enumerate() {
            let mut cells = vec![epoch.to_string()];
            for run in &self.losses {
                cells.push(run[row].0.to_string());
                cells.push(run[row].1.to_string());
            }
            for d in &deltas {
                cells.push(d[row].to_string());
            }
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Aligns named traces on their common epoch range.
pub fn compare(runs: &[(String, TrainingTrace)]) -> Result<Comparison> {
    if runs.len() < 2 {
        return Err(Error::InvalidConfig("compare needs at least two traces".into()));
    }
    let lens: Vec<usize> = runs.iter().map(|(_, t)| t.len()).collect();
    let common = *lens.iter().min().unwrap();
    if common == 0 {
        return Err(Error::InvalidConfig("cannot compare an empty trace".into()));
    }
    let epochs: Vec<usize> = runs[0].1.records()[..common].iter().map(|r| r.epoch).collect();
    for (name, t) in runs {
        if t.records()[..common].iter().map(|r| r.epoch).ne(epochs.iter().copied()) {
            return Err(Error::InvalidConfig(format!("trace `{name}` uses different epoch indices")));
        }
    }
    let note = (lens.iter().any(|&l| l != common)).then(|| {
        format!(
            "truncated to the common epochs {}..={} (trace lengths {})",
            epochs[0],
            epochs[common - 1],
            lens.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(", ")
        )
    });
    Ok(Comparison {
        names: unique_names(runs.iter().map(|(n, _)| n.as_str())),
        epochs,
        losses: runs
            .iter()
            .map(|(_, t)| t.records()[..common].iter().map(|r| (r.train_loss, r.test_loss)).collect())
            .collect(),
        note,
    })
}

fn unique_names<'a>(names: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for n in names {
        let clean: String = n.chars().map(|c| if c == ',' || c.is_whitespace() { '_' } else { c }).collect();
        let mut candidate = clean.clone();
        let mut k = 2;
        while out.contains(&candidate) {
            candidate = format!("{clean}_{k}");
            k += 1;
        }
        out.push(candidate);
    }
    out
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_output(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn default_output(cfg: &ExperimentConfig) -> PathBuf {
    let name = match cfg.kind {
        ExperimentKind::TrainMlp => format!("mlp-{}-seed{}.csv", cfg.method_label(), cfg.seed),
        ExperimentKind::TrainTransformer => format!("transformer-{}-seed{}.csv", cfg.method_label(), cfg.seed),
        ExperimentKind::Characterize => format!("capacity-seed{}.csv", cfg.seed),
    };
    PathBuf::from(name)
}
