//! Per-epoch loss records and their CSV form.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const TRACE_HEADER: &str = "epoch,train_loss,test_loss,seconds";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    /// Cumulative wall-clock time since training started.
    pub seconds: f64,
}

/// Whether the `seconds` column carries wall-clock measurements.
///
/// `Omitted` leaves the column empty so that reruns are byte-identical; the
/// timings can be written separately with [`TrainingTrace::write_timing_csv`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimingColumn {
    Wall,
    Omitted,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingTrace {
    pub method: String,
    pub seed: u64,
    /// Configuration text embedded in exported files as `# ` comment lines.
    pub config_snapshot: String,
    records: Vec<EpochRecord>,
}

impl TrainingTrace {
    pub fn new(method: impl Into<String>, seed: u64, config_snapshot: impl Into<String>) -> Self {
        Self {
            method: method.into(),
            seed,
            config_snapshot: config_snapshot.into(),
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, record: EpochRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.epoch <= last.epoch {
                return Err(Error::InvalidConfig(format!(
                    "epoch {} does not follow epoch {}",
                    record.epoch, last.epoch
                )));
            }
        }
        for value in [record.train_loss, record.test_loss] {
            if !value.is_finite() {
                return Err(Error::NonFiniteTrainingLoss {
                    epoch: record.epoch,
                    value,
                });
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Epoch and value of the lowest training loss.
    pub fn min_train_loss(&self) -> Option<(usize, f64)> {
        argmin(self.records.iter().map(|r| (r.epoch, r.train_loss)))
    }

    pub fn min_test_loss(&self) -> Option<(usize, f64)> {
        argmin(self.records.iter().map(|r| (r.epoch, r.test_loss)))
    }

    pub fn write_csv<W: Write>(&self, mut w: W, timing: TimingColumn) -> Result<()> {
        writeln!(w, "# method = {}", self.method)?;
        writeln!(w, "# seed = {}", self.seed)?;
        for line in self.config_snapshot.lines() {
            writeln!(w, "# {line}")?;
        }
        writeln!(w, "{TRACE_HEADER}")?;
        for r in &self.records {
            match timing {
                TimingColumn::Wall => {
                    writeln!(w, "{},{},{},{}", r.epoch, r.train_loss, r.test_loss, r.seconds)?
                }
                TimingColumn::Omitted => writeln!(w, "{},{},{},", r.epoch, r.train_loss, r.test_loss)?,
            }
        }
        Ok(())
    }

    pub fn write_timing_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,seconds")?;
        for r in &self.records {
            writeln!(w, "{},{}", r.epoch, r.seconds)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self, timing: TimingColumn) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf, timing).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("trace CSV is UTF-8")
    }

    /// Parses a trace written by [`write_csv`](Self::write_csv). A blank
    /// `seconds` field reads as NaN.
    pub fn read_csv<R: BufRead>(reader: R, source: &std::path::Path) -> Result<Self> {
        let mut trace = TrainingTrace::default();
        let mut snapshot = Vec::new();
        let mut seen_header = false;
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = idx + 1;
            let parse_err = |message: String| Error::Parse {
                path: source.to_path_buf(),
                line: lineno,
                message,
            };
            if let Some(comment) = line.strip_prefix('#') {
                let comment = comment.strip_prefix(' ').unwrap_or(comment);
                if let Some(m) = comment.strip_prefix("method = ") {
                    trace.method = m.to_string();
                } else if let Some(s) = comment.strip_prefix("seed = ") {
                    trace.seed = s.trim().parse().map_err(|e| parse_err(format!("bad seed: {e}")))?;
                } else {
                    snapshot.push(comment.to_string());
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            if !seen_header {
                if line.trim() != TRACE_HEADER {
                    return Err(parse_err(format!("expected header `{TRACE_HEADER}`")));
                }
                seen_header = true;
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(parse_err(format!("expected 4 fields, found {}", fields.len())));
            }
            let num = |s: &str, what: &str| -> Result<f64> {
                s.trim().parse::<f64>().map_err(|e| parse_err(format!("bad {what}: {e}")))
            };
            let record = EpochRecord {
                epoch: fields[0]
                    .trim()
                    .parse()
                    .map_err(|e| parse_err(format!("bad epoch: {e}")))?,
                train_loss: num(fields[1], "train_loss")?,
                test_loss: num(fields[2], "test_loss")?,
                seconds: if fields[3].trim().is_empty() {
                    f64::NAN
                } else {
                    num(fields[3], "seconds")?
                },
            };
            trace.push(record).map_err(|e| parse_err(e.to_string()))?;
        }
        if !seen_header {
            return Err(Error::Parse {
                path: source.to_path_buf(),
                line: 0,
                message: "missing trace header".into(),
            });
        }
        trace.config_snapshot = snapshot.join("\n");
        Ok(trace)
    }
}

fn argmin(it: impl Iterator<Item = (usize, f64)>) -> Option<(usize, f64)> {
    it.fold(None, |best, (e, v)| match best {
        Some((_, b)) if b <= v => best,
        _ => Some((e, v)),
    })
}
