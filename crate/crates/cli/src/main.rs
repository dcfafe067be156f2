use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pgt::characterization::{HARDWARE_PC_CAPACITY, HARDWARE_STM_CAPACITY};
use pgt::config::{parse_method, ExperimentConfig, ExperimentKind};
use pgt::harness;
use pgt::reservoir::{FrozenNetConfig, ReservoirSpec};

#[derive(Parser)]
#[command(name = "pgt", version, about = "Perturbative gradient training experiments")]
struct Cli {
    /// Experiment config (TOML). Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output CSV path.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dense network with a reservoir stage on WDBC.
    TrainMlp(TrainArgs),
    /// Train the reservoir transformer on a synthetic sequence task.
    TrainTransformer(TrainArgs),
    /// Measure STM and PC capacity of a stateful reservoir.
    Characterize(CharacterizeArgs),
    /// Merge trace CSVs by epoch.
    Compare(CompareArgs),
    /// Print the default config for an experiment kind.
    Preset {
        #[arg(value_parser = ["train-mlp", "train-transformer", "characterize"])]
        kind: String,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// pgt-sgd, pgt-adam, backprop-sgd or backprop-adam
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// WDBC file (train-mlp only); defaults to the bundled copy.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct CharacterizeArgs {
    /// delay-line:<taps>, leaky:<leak> or frozen-net
    #[arg(long, required_unless_present = "config")]
    reservoir: Option<String>,
    #[arg(long)]
    t_max: Option<usize>,
    /// Length of the driving bit sequence.
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args)]
struct CompareArgs {
    /// Trace CSVs; at least two.
    #[arg(required = true, num_args = 2..)]
    traces: Vec<PathBuf>,
}

fn parse_reservoir(s: &str) -> Result<ReservoirSpec> {
    let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
    Ok(match kind {
        "delay-line" => ReservoirSpec::DelayLine {
            taps: arg.parse().with_context(|| format!("bad tap count in `{s}`"))?,
            input_dim: 1,
        },
        "leaky" => ReservoirSpec::FrozenNet(FrozenNetConfig {
            input_dim: 1,
            leak: Some(arg.parse().with_context(|| format!("bad leak in `{s}`"))?),
            ..FrozenNetConfig::default()
        }),
        "frozen-net" => ReservoirSpec::FrozenNet(FrozenNetConfig {
            input_dim: 1,
            ..FrozenNetConfig::default()
        }),
        _ => bail!("unknown reservoir `{s}`; expected delay-line:<taps>, leaky:<leak> or frozen-net"),
    })
}

fn base_config(cli: &Cli, kind: ExperimentKind) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let cfg = ExperimentConfig::load(p)?;
            if cfg.kind != kind {
                bail!("{} describes a {:?} experiment", p.display(), cfg.kind);
            }
            cfg
        }
        None => ExperimentConfig::preset(kind),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn apply_train(cfg: &mut ExperimentConfig, args: &TrainArgs) -> Result<()> {
    if let Some(m) = &args.method {
        let (method, kind) = parse_method(m)?;
        cfg.method = method;
        cfg.optimizer.kind = kind;
    }
    if let Some(p) = args.dropout {
        cfg.pgt.dropout_scale = p;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.optimizer.learning_rate = lr;
    }
    if let Some(d) = &args.data {
        if cfg.kind != ExperimentKind::TrainMlp {
            bail!("--data only applies to train-mlp");
        }
        cfg.data.path = Some(d.clone());
    }
    cfg.validate()?;
    Ok(())
}

fn output_path(cli: &Cli, cfg: &ExperimentConfig) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| harness::default_output(cfg))
}

fn trace_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::TrainMlp(args) | Command::TrainTransformer(args) => {
            let kind = match cli.command {
                Command::TrainMlp(_) => ExperimentKind::TrainMlp,
                _ => ExperimentKind::TrainTransformer,
            };
            let mut cfg = base_config(&cli, kind)?;
            apply_train(&mut cfg, args)?;
            let trace = match kind {
                ExperimentKind::TrainMlp => harness::run_train_mlp(&cfg)?,
                _ => harness::run_train_transformer(&cfg)?,
            };
            let out = output_path(&cli, &cfg);
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            harness::write_trace(&trace, &out).with_context(|| format!("writing {}", out.display()))?;
            say(harness::summarize(&trace));
            say(format!("trace written to {}", out.display()));
        }
        Command::Characterize(args) => {
            let mut cfg = base_config(&cli, ExperimentKind::Characterize)?;
            if let Some(r) = &args.reservoir {
                cfg.reservoir = Some(parse_reservoir(r)?);
            }
            if let Some(t) = args.t_max {
                cfg.characterize.t_max = t;
            }
            if let Some(n) = args.n {
                cfg.characterize.n = n;
            }
            let reports = harness::run_characterize(&cfg)?;
            let out = output_path(&cli, &cfg);
            harness::write_output(&out, &harness::capacity_csv(&cfg, &reports)?)?;
            for r in &reports {
                let reference = match r.task {
                    pgt::characterization::CapacityTask::Stm => HARDWARE_STM_CAPACITY,
                    pgt::characterization::CapacityTask::Pc => HARDWARE_PC_CAPACITY,
                };
                say(format!("C_{} = {:.4} (physical ring reference {reference})", r.task, r.capacity));
            }
            say(format!("report written to {}", out.display()));
        }
        Command::Compare(args) => {
            let runs = args
                .traces
                .iter()
                .map(|p| Ok((trace_name(p), harness::read_trace(p).with_context(|| format!("reading {}", p.display()))?)))
                .collect::<Result<Vec<_>>>()?;
            let cmp = harness::compare(&runs)?;
            let mut buf = Vec::new();
            cmp.write_csv(&mut buf)?;
            let text = String::from_utf8(buf)?;
            match &cli.out {
                Some(out) => {
                    harness::write_output(out, &text)?;
                    say(format!("merged {} traces over {} epochs into {}", runs.len(), cmp.epochs.len(), out.display()));
                }
                None => say_raw(text),
            }
            if let Some(note) = &cmp.note {
                eprintln!("note: {note}");
            }
        }
        Command::Preset { kind } => {
            let kind = match kind.as_str() {
                "train-mlp" => ExperimentKind::TrainMlp,
                "train-transformer" => ExperimentKind::TrainTransformer,
                _ => ExperimentKind::Characterize,
            };
            say_raw(ExperimentConfig::preset(kind).to_toml()?);
        }
    }
    Ok(())
}

/// Writes to stdout; a closed pipe (`pgt ... | head`) is not an error.
fn say_raw(text: String) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn say(text: String) {
    say_raw(text + "\n");
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
