//! Dataset loading and generation.

use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const WDBC_FEATURES: usize = 30;

/// One supervised sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    /// Mean and population standard deviation over `rows`. Constant
    /// features get a unit scale.
    pub fn fit(rows: &[&[f64]]) -> Self {
        let d = rows.first().map_or(0, |r| r.len());
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            mean.iter_mut().zip(r.iter()).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = vec![0.0; d];
        for r in rows {
            for (j, v) in r.iter().enumerate() {
                std[j] += (v - mean[j]).powi(2);
            }
        }
        std.iter_mut().for_each(|s| {
            *s = (*s / n).sqrt();
            if *s == 0.0 {
                *s = 1.0;
            }
        });
        Self { mean, std }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// Tabular classification data with a seeded train/test split.
///
/// `features` hold z-scored values using statistics of the training rows only.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    pub ids: Vec<String>,
    pub raw_features: Vec<Vec<f64>>,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<[f64; 2]>,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub stats: FeatureStats,
}

impl TabularDataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    fn examples(&self, idx: &[usize]) -> Vec<Example> {
        idx.iter()
            .map(|&i| Example {
                input: self.features[i].clone(),
                target: self.labels[i].to_vec(),
            })
            .collect()
    }

    pub fn train_examples(&self) -> Vec<Example> {
        self.examples(&self.train_idx)
    }

    pub fn test_examples(&self) -> Vec<Example> {
        self.examples(&self.test_idx)
    }

    /// `(malignant, benign)` counts.
    pub fn class_counts(&self) -> (usize, usize) {
        let m = self.labels.iter().filter(|l| l[0] == 1.0).count();
        (m, self.labels.len() - m)
    }
}

/// Seeded permutation split; the first `round(n * train_fraction)` shuffled
/// indices form the training set. Both index lists are returned sorted.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train fraction must lie in (0, 1], got {train_fraction}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((n as f64) * train_fraction).round() as usize;
    let mut train = idx[..cut].to_vec();
    let mut test = idx[cut..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Loads a UCI-layout WDBC file: `id, M|B, 30 features` per line.
///
/// A first line whose diagnosis field is not `M`/`B` is treated as a header.
/// Copy of the diagnostic breast cancer table shipped with the crate.
pub const BUNDLED_WDBC: &str = include_str!("../data/wdbc.data");

pub fn load_bundled_wdbc(train_fraction: f64, seed: u64) -> Result<TabularDataset> {
    parse_wdbc(BUNDLED_WDBC, Path::new("<bundled wdbc.data>"), train_fraction, seed)
}

pub fn load_wdbc(path: &Path, train_fraction: f64, seed: u64) -> Result<TabularDataset> {
    let text = fs::read_to_string(path)?;
    parse_wdbc(&text, path, train_fraction, seed)
}

pub fn parse_wdbc(text: &str, path: &Path, train_fraction: f64, seed: u64) -> Result<TabularDataset> {
    let mut ids = Vec::new();
    let mut raw = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != WDBC_FEATURES + 2 {
            if lineno == 1 && fields.get(1).is_some_and(|d| !matches!(*d, "M" | "B")) {
                continue;
            }
            return Err(err(format!(
                "expected {} columns, found {}",
                WDBC_FEATURES + 2,
                fields.len()
            )));
        }
        let label = match fields[1] {
            "M" => [1.0, 0.0],
            "B" => [0.0, 1.0],
            _ if lineno == 1 => continue,
            other => return Err(err(format!("unknown diagnosis code `{other}`"))),
        };
        let row = fields[2..]
            .iter()
            .enumerate()
            .map(|(j, f)| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(format!("feature {} is not a number: `{f}`", j + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        ids.push(fields[0].to_string());
        raw.push(row);
        labels.push(label);
    }
    if raw.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "no data rows".into(),
        });
    }
    let (train_idx, test_idx) = split_indices(raw.len(), train_fraction, seed)?;
    let train_rows: Vec<&[f64]> = train_idx.iter().map(|&i| raw[i].as_slice()).collect();
    let stats = FeatureStats::fit(&train_rows);
    let features = raw.iter().map(|r| stats.apply(r)).collect();
    Ok(TabularDataset {
        ids,
        raw_features: raw,
        features,
        labels,
        train_idx,
        test_idx,
        stats,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeqTask {
    Copy,
    Reverse,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequencePair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequencePairDataset {
    pub task: SeqTask,
    pub vocab_size: usize,
    pub train: Vec<SequencePair>,
    pub test: Vec<SequencePair>,
}

pub fn target_for(task: SeqTask, source: &[usize]) -> Vec<usize> {
    match task {
        SeqTask::Copy => source.to_vec(),
        SeqTask::Reverse => source.iter().rev().copied().collect(),
    }
}

/// Uniform random token sequences with targets given by `task`.
pub fn make_seq2seq(
    task: SeqTask,
    n_train: usize,
    n_test: usize,
    vocab_size: usize,
    seq_len: usize,
    seed: u64,
) -> Result<SequencePairDataset> {
    if vocab_size < 2 || seq_len < 1 {
        return Err(Error::InvalidConfig("need vocab_size >= 2 and seq_len >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gen = |n: usize| -> Vec<SequencePair> {
        (0..n)
            .map(|_| {
                let source: Vec<usize> = (0..seq_len).map(|_| rng.gen_range(0..vocab_size)).collect();
                let target = target_for(task, &source);
                SequencePair { source, target }
            })
            .collect()
    };
    let train = gen(n_train);
    let test = gen(n_test);
    Ok(SequencePairDataset {
        task,
        vocab_size,
        train,
        test,
    })
}

/// Writes pairs as `src ids<TAB>tgt ids`, space-separated.
pub fn write_pairs<W: Write>(mut w: W, pairs: &[SequencePair]) -> Result<()> {
    let join = |v: &[usize]| v.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
    for p in pairs {
        writeln!(w, "{}\t{}", join(&p.source), join(&p.target))?;
    }
    Ok(())
}

pub fn read_pairs<R: BufRead>(reader: R, path: &Path, vocab_size: usize) -> Result<Vec<SequencePair>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let (src, tgt) = line.split_once('\t').ok_or_else(|| err("missing tab separator".into()))?;
        let ids = |s: &str| -> Result<Vec<usize>> {
            s.split_whitespace()
                .map(|t| {
                    let id: usize = t.parse().map_err(|_| err(format!("bad token id `{t}`")))?;
                    if id >= vocab_size {
                        return Err(err(format!("token {id} >= vocab size {vocab_size}")));
                    }
                    Ok(id)
                })
                .collect()
        };
        out.push(SequencePair {
            source: ids(src)?,
            target: ids(tgt)?,
        });
    }
    Ok(out)
}
